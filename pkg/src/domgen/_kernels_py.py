"""Pure-Python detection kernels, used when the compiled extension is unavailable."""
import numpy as np


def iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def nms(boxes, scores, iou_threshold):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i, a in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(a)
        rest = order[i + 1:]
        if len(rest):
            ious = iou_matrix(boxes[a], boxes[rest])[0]
            suppressed[i + 1:] |= ious > iou_threshold
    return np.asarray(keep, dtype=np.intp)


def greedy_match(pred_xy, gt_xy, radius):
    p = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(p), -1, dtype=np.intp)
    claimed = np.zeros(len(g), dtype=bool)
    r2 = radius * radius
    for i in range(len(p)):
        if not len(g):
            break
        d2 = (p[i, 0] - g[:, 0]) ** 2 + (p[i, 1] - g[:, 1]) ** 2
        d2[claimed | (d2 > r2)] = np.inf
        j = int(np.argmin(d2))
        if np.isfinite(d2[j]):
            claimed[j] = True
            out[i] = j
    return out
