"""Detection matching, PR/AUCPR, operating points, bootstrapping and feature-space probes."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import kernels
from .data import AnnotatedImage, ObjectAnnotation, sample_patch
from .model import DetectionSet, DetectorModel, decode_and_nms, generate_anchors, images_to_tensor

DEFAULT_RADIUS_PX = 30.0
DEFAULT_RESAMPLES = 1000


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]
    is_tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _gt_centers(ground_truth: Sequence[ObjectAnnotation]) -> np.ndarray:
    pts = [a.center for a in ground_truth if a.is_mitosis]
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def match_detections(
    predictions: DetectionSet, ground_truth: Sequence[ObjectAnnotation], radius_px: float = DEFAULT_RADIUS_PX
) -> MatchResult:
    """Greedy one-to-one matching of detection centres to mitosis centres.

    Predictions are visited by descending score (stable for ties); each claims
    the nearest unclaimed ground truth within ``radius_px``. Hard negatives are
    ignored. ``pairs`` and ``is_tp`` use the caller's prediction indices.
    """
    if radius_px <= 0:
        raise ValueError("radius_px must be positive")
    gt = _gt_centers(ground_truth)
    n = len(predictions)
    order = np.argsort(-np.asarray(predictions.scores, dtype=np.float64), kind="stable")
    centers = predictions.centers[order] if n else np.zeros((0, 2))
    assigned = kernels.greedy_match(centers, gt, float(radius_px))
    is_tp = np.zeros(n, dtype=bool)
    pairs = []
    for rank, g in enumerate(assigned):
        if g >= 0:
            pairs.append((int(order[rank]), int(g)))
            is_tp[order[rank]] = True
    tp = len(pairs)
    return MatchResult(tp, n - tp, len(gt) - tp, pairs, is_tp)


def f1(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f1(precision, recall)


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending distinct scores
    precision: np.ndarray
    recall: np.ndarray
    total_gt: int = 0

    def __len__(self):
        return len(self.thresholds)

    def at(self, threshold: float) -> tuple[float, float]:
        """(precision, recall) keeping predictions scored >= ``threshold``."""
        idx = np.nonzero(self.thresholds >= threshold)[0]
        if not len(idx):
            return 0.0, 0.0
        i = idx[-1]
        return float(self.precision[i]), float(self.recall[i])

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "total_gt": self.total_gt,
        }


def pr_curve(all_predictions, total_gt: int) -> PRCurve:
    """Sweep the threshold over every distinct score.

    ``all_predictions`` is a sequence of ``(score, is_tp)`` obtained from one
    greedy matching at the lowest threshold. Greedy matching is prefix
    consistent, so the flags stay valid for every higher threshold.
    """
    if total_gt <= 0:
        raise ValueError("pr_curve needs total_gt > 0 (recall undefined)")
    arr = np.asarray(list(all_predictions), dtype=np.float64).reshape(-1, 2)
    if not len(arr):
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0), total_gt)
    order = np.argsort(-arr[:, 0], kind="stable")
    scores, hits = arr[order, 0], arr[order, 1]
    tp = np.cumsum(hits)
    last = np.r_[scores[1:] != scores[:-1], True]
    count = np.arange(1, len(scores) + 1)[last]
    tp = tp[last]
    return PRCurve(scores[last], tp / count, tp / total_gt, total_gt)


def pr_curve_on_grid(scores, is_tp, total_gt: int, grid: Sequence[float]) -> PRCurve:
    """PR points restricted to a fixed threshold grid (cheap validation variant)."""
    if total_gt <= 0:
        raise ValueError("pr_curve needs total_gt > 0 (recall undefined)")
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(is_tp, dtype=bool)
    th, prec, rec = [], [], []
    for t in sorted(grid, reverse=True):
        keep = scores >= t
        n = int(keep.sum())
        if not n:
            continue
        tp = int(hits[keep].sum())
        th.append(t)
        prec.append(tp / n)
        rec.append(tp / total_gt)
    return PRCurve(np.asarray(th), np.asarray(prec), np.asarray(rec), total_gt)


def aucpr(curve: PRCurve) -> float:
    """Step-wise area ``sum (R_i - R_{i-1}) * P_i`` without precision interpolation."""
    if not len(curve):
        return 0.0
    dr = np.diff(np.r_[0.0, curve.recall])
    # exactly rounded, so the value does not depend on summation order
    return math.fsum((dr * curve.precision).tolist())


def select_operating_point(curves_by_domain: Mapping) -> float:
    """Threshold maximizing the mean per-domain F1; ties go to the higher threshold."""
    curves = list(curves_by_domain.values())
    if not curves:
        raise ValueError("need at least one curve")
    candidates = np.unique(np.concatenate([c.thresholds for c in curves]))[::-1]
    if not len(candidates):
        return 1.0
    best_t, best_f = float(candidates[0]), -1.0
    for t in candidates:
        mean_f = np.mean([f1(*c.at(t)) for c in curves])
        if mean_f > best_f:
            best_t, best_f = float(t), mean_f
    return best_t


def bootstrap_f1(per_image_counts, n_resamples: int = DEFAULT_RESAMPLES, rng=None) -> np.ndarray:
    """Resample images with replacement and recompute pooled F1 each time."""
    counts = np.asarray(per_image_counts, dtype=np.int64).reshape(-1, 3)
    if n_resamples < 1 or not len(counts):
        raise ValueError("need n_resamples >= 1 and at least one image")
    rng = np.random.default_rng(rng)
    idx = rng.integers(0, len(counts), size=(n_resamples, len(counts)))
    sums = counts[idx].sum(axis=1)
    tp, fp, fn = sums[:, 0].astype(float), sums[:, 1].astype(float), sums[:, 2].astype(float)
    denom = 2 * tp + fp + fn
    out = np.zeros(n_resamples)
    np.divide(2 * tp, denom, out=out, where=denom > 0)
    return out


# --------------------------------------------------------------------------
# inference and reports


def _pad_to_stride(pixels: np.ndarray, stride: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    ph, pw = (-h) % stride, (-w) % stride
    if not (ph or pw):
        return pixels
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect")


@torch.no_grad()
def predict(
    model: DetectorModel,
    images: Sequence[AnnotatedImage],
    *,
    normalize: bool = False,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
    batch_size: int = 4,
) -> dict[str, DetectionSet]:
    """Run whole-image inference in eval mode; returns detections keyed by ``source_id``."""
    was_training = model.training
    model.eval()
    out: dict[str, DetectionSet] = {}
    stride = model.config.total_stride
    try:
        groups: dict[tuple, list[AnnotatedImage]] = {}
        for im in images:
            groups.setdefault(im.pixels.shape, []).append(im)
        for shape, group in groups.items():
            h, w = shape[:2]
            for i in range(0, len(group), batch_size):
                chunk = group[i : i + batch_size]
                padded = [_pad_to_stride(im.pixels, stride) for im in chunk]
                ph, pw = padded[0].shape[:2]
                anchors = generate_anchors(model.config, (pw, ph))
                res = model(images_to_tensor(padded, normalize))
                for j, im in enumerate(chunk):
                    det = decode_and_nms(
                        res.class_logits[j], res.box_deltas[j], anchors,
                        score_threshold, nms_iou, max_detections, im.source_id,
                    )
                    c = det.centers
                    inside = (c[:, 0] < w) & (c[:, 1] < h) & (c[:, 0] >= 0) & (c[:, 1] >= 0)
                    out[im.source_id] = DetectionSet(det.boxes[inside], det.scores[inside], im.source_id)
    finally:
        model.train(was_training)
    return out


def save_predictions(predictions: Mapping[str, DetectionSet], path) -> None:
    Path(path).write_text(json.dumps({k: v.to_records() for k, v in sorted(predictions.items())}))


def load_predictions(path) -> dict[str, DetectionSet]:
    raw = json.loads(Path(path).read_text())
    return {k: DetectionSet.from_records(v, k) for k, v in raw.items()}


@dataclass
class EvalReport:
    per_domain: dict[str, dict]
    aggregate: dict[str, float]
    mean_aucpr: float
    operating_point: float
    bootstrap: dict[str, list[float]] = field(default_factory=dict)
    curves: dict[str, PRCurve] = field(default_factory=dict)
    radius_px: float = DEFAULT_RADIUS_PX

    def to_dict(self, include_curves: bool = True) -> dict:
        d = {
            "operating_point": self.operating_point,
            "radius_px": self.radius_px,
            "mean_aucpr": self.mean_aucpr,
            "aggregate": self.aggregate,
            "per_domain": self.per_domain,
            "bootstrap": self.bootstrap,
        }
        if include_curves:
            d["pr_curves"] = {k: c.to_dict() for k, c in self.curves.items()}
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def match_all(predictions: Mapping[str, DetectionSet], images: Sequence[AnnotatedImage], radius_px: float):
    """Match every image once at its lowest kept score; returns per-image (scores, is_tp, n_gt)."""
    out = {}
    for im in images:
        det = predictions.get(im.source_id, DetectionSet.empty(im.source_id))
        m = match_detections(det, im.annotations, radius_px)
        out[im.source_id] = (np.asarray(det.scores, dtype=np.float64), m.is_tp, m.tp + m.fn)
    return out


def domain_curves(matched, images: Sequence[AnnotatedImage], grid=None) -> dict[str, PRCurve]:
    """Pooled PR curve per domain name (domains without ground truth are skipped)."""
    by_dom: dict[str, list] = {}
    for im in images:
        by_dom.setdefault(im.domain.name, []).append(matched[im.source_id])
    curves = {}
    for name, rows in by_dom.items():
        total = sum(r[2] for r in rows)
        if total == 0:
            continue
        scores = np.concatenate([r[0] for r in rows]) if rows else np.zeros(0)
        hits = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0, bool)
        if grid is None:
            curves[name] = pr_curve(zip(scores, hits), total)
        else:
            curves[name] = pr_curve_on_grid(scores, hits, total, grid)
    return curves


def evaluate_predictions(
    predictions: Mapping[str, DetectionSet],
    images: Sequence[AnnotatedImage],
    operating_point: float,
    *,
    radius_px: float = DEFAULT_RADIUS_PX,
    n_resamples: int = DEFAULT_RESAMPLES,
    rng=None,
    seen_domains: Sequence[str] | None = None,
) -> EvalReport:
    """Per-domain and pooled precision/recall/F1 at ``operating_point``, plus AUCPR and bootstrap."""
    rng = np.random.default_rng(rng)
    matched = match_all(predictions, images, radius_px)
    curves = domain_curves(matched, images)
    per_image: dict[str, list[tuple[int, int, int]]] = {}
    for im in images:
        scores, hits, n_gt = matched[im.source_id]
        keep = scores >= operating_point
        tp = int(hits[keep].sum())
        per_image.setdefault(im.domain.name, []).append((tp, int(keep.sum()) - tp, n_gt - tp))

    per_domain, boot = {}, {}
    pooled = np.zeros(3, dtype=np.int64)
    for name in sorted(per_image, key=lambda n: next(im.domain.id for im in images if im.domain.name == n)):
        counts = np.asarray(per_image[name])
        tp, fp, fn = (int(v) for v in counts.sum(axis=0))
        pooled += (tp, fp, fn)
        p, r, f = prf_from_counts(tp, fp, fn)
        row = {
            "precision": p, "recall": r, "f1": f,
            "aucpr": aucpr(curves[name]) if name in curves else None,
            "n_images": len(counts), "tp": tp, "fp": fp, "fn": fn,
        }
        if seen_domains is not None:
            row["seen"] = name in set(seen_domains)
        per_domain[name] = row
        boot[name] = bootstrap_f1(counts, n_resamples, rng).tolist()
    p, r, f = prf_from_counts(*(int(v) for v in pooled))
    aggregate = {"precision": p, "recall": r, "f1": f, "tp": int(pooled[0]), "fp": int(pooled[1]), "fn": int(pooled[2])}
    aucs = [row["aucpr"] for row in per_domain.values() if row["aucpr"] is not None]
    mean_auc = float(np.mean(aucs)) if aucs else 0.0
    return EvalReport(per_domain, aggregate, mean_auc, float(operating_point), boot, curves, float(radius_px))


# --------------------------------------------------------------------------
# feature space


@dataclass
class FeatureExport:
    source_ids: list[str]
    domain_ids: np.ndarray
    origins: np.ndarray  # (n, 2)
    features: np.ndarray  # (n, F)

    def __len__(self):
        return len(self.source_ids)

    @property
    def rows(self) -> list[dict]:
        return [
            {"source_id": s, "domain_id": int(d), "patch_origin": (int(o[0]), int(o[1])), "feature_vector": f.tolist()}
            for s, d, o, f in zip(self.source_ids, self.domain_ids, self.origins, self.features)
        ]

    def write_csv(self, path) -> None:
        n = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "domain_id", "ox", "oy"] + [f"f{i}" for i in range(n)])
            for s, d, o, f in zip(self.source_ids, self.domain_ids, self.origins, self.features):
                w.writerow([s, int(d), int(o[0]), int(o[1])] + [repr(float(v)) for v in f])

    @classmethod
    def read_csv(cls, path) -> "FeatureExport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(
            [r[0] for r in rows],
            np.array([int(r[1]) for r in rows], dtype=np.int64),
            np.array([[int(r[2]), int(r[3])] for r in rows], dtype=np.int64).reshape(-1, 2),
            np.array([[float(v) for v in r[4:]] for r in rows], dtype=np.float64),
        )


@torch.no_grad()
def export_features(
    model: DetectorModel,
    dataset: Sequence[AnnotatedImage],
    patches_per_image: int = 30,
    rng=None,
    *,
    patch_size: int | None = None,
    normalize: bool = False,
) -> FeatureExport:
    """Global-average-pooled bottleneck features of random patches from every image."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(rng)
    patch_size = patch_size or model.config.patch_size
    was_training = model.training
    model.eval()
    sids, doms, origins, feats = [], [], [], []
    try:
        for im in dataset:
            w, h = im.size
            if patch_size > min(w, h):
                raise ValueError(f"patch size {patch_size} larger than image {im.source_id} ({w}x{h})")
            patches = [sample_patch(im, "random", patch_size, None, rng) for _ in range(patches_per_image)]
            res = model(images_to_tensor([p.pixels for p in patches], normalize))
            vec = res.features.mean(dim=(2, 3)).double().numpy()
            for p, v in zip(patches, vec):
                sids.append(im.source_id)
                doms.append(im.domain.id)
                origins.append(p.origin)
                feats.append(v)
    finally:
        model.train(was_training)
    return FeatureExport(sids, np.asarray(doms), np.asarray(origins).reshape(-1, 2), np.asarray(feats))


def domain_probe(features: FeatureExport, train_fraction: float = 0.5, rng=None) -> float:
    """Held-out accuracy of a multinomial logistic domain classifier on the features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.preprocessing import StandardScaler

    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    y = np.asarray(features.domain_ids)
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2:
        raise ValueError("domain_probe needs at least two domains")
    if counts.min() < 2:
        raise ValueError(f"domain {labels[counts.argmin()]} has fewer than 2 rows")
    rng = np.random.default_rng(rng)
    x_tr, x_te, y_tr, y_te = train_test_split(
        np.asarray(features.features, dtype=np.float64), y,
        train_size=train_fraction, stratify=y, random_state=int(rng.integers(2**31 - 1)),
    )
    scaler = StandardScaler().fit(x_tr)
    clf = LogisticRegression(max_iter=5000).fit(scaler.transform(x_tr), y_tr)
    return float(np.mean(clf.predict(scaler.transform(x_te)) == y_te))


def project_2d(features) -> np.ndarray:
    """Project onto the top two principal axes; returns an (n, 3) array of x, y, domain_id.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    if isinstance(features, FeatureExport):
        x, dom = np.asarray(features.features, dtype=np.float64), np.asarray(features.domain_ids, dtype=np.float64)
    else:
        x = np.asarray(features, dtype=np.float64)
        dom = np.zeros(len(x))
    if len(x) < 3:
        raise ValueError("project_2d needs at least 3 rows")
    if np.all(x == x[0]):
        return np.column_stack([np.zeros((len(x), 2)), dom])
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    axes = vecs[:, order]
    if axes.shape[1] < 2:
        axes = np.pad(axes, ((0, 0), (0, 2 - axes.shape[1])))
    for k in range(axes.shape[1]):
        if axes[np.argmax(np.abs(axes[:, k])), k] < 0:
            axes[:, k] *= -1
    xy = xc @ axes
    return np.column_stack([xy, dom])
