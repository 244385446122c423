# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled detection post-processing kernels.

Mirrors ``domgen._kernels_py`` exactly; both are exercised by the test suite.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fmax, fmin

cnp.import_array()


def iou_matrix(boxes_a, boxes_b):
    cdef const double[:, ::1] a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double area_a, area_b, iw, ih, inter, union
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = fmin(a[i, 2], b[j, 2]) - fmax(a[i, 0], b[j, 0])
            if iw <= 0:
                continue
            ih = fmin(a[i, 3], b[j, 3]) - fmax(a[i, 1], b[j, 1])
            if ih <= 0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0:
                o[i, j] = inter / union
    return out


def nms(boxes, scores, double iou_threshold):
    cdef const double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order_arr = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    cdef Py_ssize_t n = order.shape[0], i, j, a, b
    cdef cnp.uint8_t[::1] suppressed = np.zeros(n, dtype=np.uint8)
    cdef double iw, ih, inter, area_a, area_b, union
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        a = order[i]
        keep.append(a)
        area_a = (bx[a, 2] - bx[a, 0]) * (bx[a, 3] - bx[a, 1])
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            b = order[j]
            iw = fmin(bx[a, 2], bx[b, 2]) - fmax(bx[a, 0], bx[b, 0])
            if iw <= 0:
                continue
            ih = fmin(bx[a, 3], bx[b, 3]) - fmax(bx[a, 1], bx[b, 1])
            if ih <= 0:
                continue
            inter = iw * ih
            area_b = (bx[b, 2] - bx[b, 0]) * (bx[b, 3] - bx[b, 1])
            union = area_a + area_b - inter
            if union > 0 and inter / union > iou_threshold:
                suppressed[j] = 1
    return np.asarray(keep, dtype=np.intp)


def greedy_match(pred_xy, gt_xy, double radius):
    cdef const double[:, ::1] p = np.ascontiguousarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    cdef const double[:, ::1] g = np.ascontiguousarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t n = p.shape[0], m = g.shape[0], i, j, best
    out = np.full(n, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] o = out
    cdef cnp.uint8_t[::1] claimed = np.zeros(m, dtype=np.uint8)
    cdef double r2 = radius * radius, d2, best_d2, dx, dy
    for i in range(n):
        best = -1
        best_d2 = 0
        for j in range(m):
            if claimed[j]:
                continue
            dx = p[i, 0] - g[j, 0]
            dy = p[i, 1] - g[j, 1]
            d2 = dx * dx + dy * dy
            if d2 <= r2 and (best < 0 or d2 < best_d2):
                best = j
                best_d2 = d2
        if best >= 0:
            claimed[best] = 1
            o[i] = best
    return out
