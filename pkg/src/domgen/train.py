"""Training loop: balanced batches, composite objective, cyclical LR, validation and model selection."""
from __future__ import annotations

import collections
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
import torch

from .data import (
    AnnotatedImage,
    AugmentConfig,
    DomainLabel,
    Split,
    augment,
    build_balanced_batch,
    domains_of,
    filter_images,
)
from .evaluation import DEFAULT_RADIUS_PX, domain_curves, aucpr, match_detections, select_operating_point
from .loss import DOMAIN_FOCAL, INSTANCE_FOCAL, LossWeights, alpha_schedule, composite_objective, focal_loss, smooth_l1
from .model import (
    ConfigError,
    DetectionSet,
    DetectorModel,
    ModelConfig,
    decode_and_nms,
    encode_targets,
    generate_anchors,
    images_to_tensor,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MODES = ("reference", "strong", "weak")
SELECT_BY = ("aucpr", "aucpr_plus_confusion")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite total loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 100
    batch_size: int = 12
    per_domain: int = 3
    patch_size: int = 512
    sample_radius: int | None = None
    max_lr: float = 1e-4
    discriminator_lr_scale: float = 1.0
    lr_cycle_epochs: int = 20
    object_fraction: float = 0.5
    seed: int = 0
    alpha_steepness: float = 10.0
    select_by: str = "aucpr_plus_confusion"
    selection_tie: float = 0.005
    mode: str = "reference"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    iou_pos: float = 0.5
    iou_neg: float = 0.4
    radius_px: float = DEFAULT_RADIUS_PX
    val_grid_points: int = 101
    num_workers: int = 1
    prefetch: int = 4

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.augment.items()})
        self.validate()

    def validate(self, num_domains: int | None = None) -> None:
        checks = [
            ("epochs", self.epochs >= 1, ">= 1"),
            ("steps_per_epoch", self.steps_per_epoch >= 1, ">= 1"),
            ("per_domain", self.per_domain >= 1, ">= 1"),
            ("patch_size", self.patch_size >= 32, ">= 32"),
            ("max_lr", self.max_lr > 0, "> 0"),
            ("discriminator_lr_scale", self.discriminator_lr_scale > 0, "> 0"),
            ("lr_cycle_epochs", self.lr_cycle_epochs >= 1, ">= 1"),
            ("object_fraction", 0.0 <= self.object_fraction <= 1.0, "[0, 1]"),
            ("alpha_steepness", self.alpha_steepness > 0, "> 0"),
            ("select_by", self.select_by in SELECT_BY, f"one of {SELECT_BY}"),
            ("mode", self.mode in MODES, f"one of {MODES}"),
            ("iou_neg", 0 <= self.iou_neg < self.iou_pos <= 1, "0 <= iou_neg < iou_pos <= 1"),
            ("radius_px", self.radius_px > 0, "> 0"),
            ("val_grid_points", self.val_grid_points >= 2, ">= 2"),
            ("num_workers", self.num_workers >= 1, ">= 1"),
        ]
        if num_domains is not None:
            checks.append(
                ("batch_size", self.batch_size == self.per_domain * num_domains,
                 f"per_domain x num_domains = {self.per_domain * num_domains}")
            )
        for name, ok, accepted in checks:
            if not ok:
                raise ConfigError(f"invalid train config field {name}={getattr(self, name)!r}; accepted: {accepted}")

    @property
    def uses_augmentation(self) -> bool:
        return self.mode in ("reference", "strong")

    @property
    def normalize_inputs(self) -> bool:
        return self.mode == "strong"

    @property
    def adversarial(self) -> bool:
        return self.mode == "reference"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class CheckpointRecord:
    epoch: int
    val_mean_aucpr: float
    val_domain_loss: float
    path: str | None = None


def load_preset(name: str) -> dict:
    """Bundled configuration preset (``desk`` or ``paper``) as a plain dict."""
    try:
        text = resources.files("domgen.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown preset {name!r}; accepted: desk, paper") from exc
    return json.loads(text)


def cyclical_lr(step: int, steps_per_cycle: int, max_lr: float, min_ratio: float = 0.1) -> float:
    """Triangular wave between ``min_ratio * max_lr`` and ``max_lr``, peaking mid-cycle."""
    if steps_per_cycle < 2:
        raise ValueError("steps_per_cycle must be >= 2")
    phase = (step % steps_per_cycle) / steps_per_cycle
    lo = max_lr * min_ratio
    return lo + (max_lr - lo) * (1.0 - abs(2.0 * phase - 1.0))


def select_best(records: Sequence[CheckpointRecord], select_by: str = "aucpr", tie: float = 0.005) -> CheckpointRecord:
    """Highest mean AUCPR; with ``aucpr_plus_confusion`` records within ``tie`` of the
    best AUCPR compete on the higher validation domain loss."""
    if not records:
        raise ValueError("no checkpoint records")
    if select_by == "aucpr":
        return max(records, key=lambda r: r.val_mean_aucpr)
    if select_by != "aucpr_plus_confusion":
        raise ValueError(f"unknown select_by {select_by!r}")
    top = max(r.val_mean_aucpr for r in records)
    near = [r for r in records if r.val_mean_aucpr >= top - tie]
    return max(near, key=lambda r: (r.val_domain_loss, r.val_mean_aucpr))


# --------------------------------------------------------------------------
# batches


class Batch(NamedTuple):
    pixels: torch.Tensor
    class_targets: torch.Tensor
    box_targets: torch.Tensor
    anchor_mask: torch.Tensor
    domain_ids: torch.Tensor


def make_batch(
    dataset: Sequence[AnnotatedImage],
    domains: Sequence[DomainLabel],
    model_config: ModelConfig,
    cfg: TrainConfig,
    step: int,
) -> Batch:
    """Build the batch of ``step``; a pure function of (dataset, configs, seed, step)."""
    rng = np.random.default_rng([cfg.seed, 1, step])
    patches = build_balanced_batch(
        dataset, cfg.batch_size, cfg.per_domain, cfg.object_fraction, cfg.patch_size, rng,
        radius=cfg.sample_radius, domains=domains,
    )
    if cfg.uses_augmentation:
        patches = [augment(p, cfg.augment, rng) for p in patches]
    anchors = generate_anchors(model_config, cfg.patch_size)
    cls, box, mask = zip(
        *(encode_targets(anchors, p.annotations, cfg.iou_pos, cfg.iou_neg, model_config.hard_negative_class)
          for p in patches)
    )
    return Batch(
        images_to_tensor([p.pixels for p in patches], cfg.normalize_inputs),
        torch.from_numpy(np.stack(cls)),
        torch.from_numpy(np.stack(box)).float(),
        torch.from_numpy(np.stack(mask)),
        torch.tensor([p.domain.id for p in patches]),
    )


def batch_stream(make: Callable[[int], Batch], steps: range, num_workers: int = 1, prefetch: int = 4) -> Iterator[Batch]:
    """Yield ``make(step)`` in step order; with workers, up to ``prefetch`` batches are built ahead."""
    if num_workers <= 1:
        for s in steps:
            yield make(s)
        return
    with ThreadPoolExecutor(num_workers) as pool:
        pending: collections.deque = collections.deque()
        it = iter(steps)
        for s in it:
            pending.append(pool.submit(make, s))
            if len(pending) >= prefetch:
                break
        while pending:
            yield pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(make, nxt))


def detection_losses(out, batch: Batch):
    """Per-sample instance (focal) and box (smooth L1) losses, normalized by positive anchors."""
    cls_t, box_t, mask = batch.class_targets, batch.box_targets.to(out.box_deltas.dtype), batch.anchor_mask
    pos = cls_t > 0
    npos = pos.sum(dim=1).clamp(min=1).to(out.class_logits.dtype)
    inst = focal_loss(out.class_logits, cls_t, INSTANCE_FOCAL, reduction="none")
    inst = (inst * mask.to(inst.dtype)).sum(dim=1) / npos
    box = smooth_l1(out.box_deltas, box_t, reduction="none").sum(dim=2)
    box = (box * pos.to(box.dtype)).sum(dim=1) / (4.0 * npos)
    return inst, box


def batch_objective(model: DetectorModel, batch: Batch, weights: LossWeights, alpha: float, detach_domain: bool):
    out = model(batch.pixels, alpha, detach_domain)
    inst, box = detection_losses(out, batch)
    dom = focal_loss(out.domain_logits, batch.domain_ids, DOMAIN_FOCAL, reduction="none")
    return composite_objective(dom, box, inst, batch.domain_ids, weights, alpha)


# --------------------------------------------------------------------------
# validation


@torch.no_grad()
def validate(
    model: DetectorModel,
    images: Sequence[AnnotatedImage],
    *,
    normalize: bool,
    radius_px: float = DEFAULT_RADIUS_PX,
    grid_points: int | None = 101,
    batch_size: int = 4,
    return_predictions: bool = False,
):
    """Mean AUCPR over labeled domains and mean domain focal loss on ``images``.

    ``grid_points=None`` uses the exact threshold sweep.
    """
    was_training = model.training
    model.eval()
    preds: dict[str, DetectionSet] = {}
    dom_losses = []
    groups: dict[tuple, list[AnnotatedImage]] = {}
    for im in images:
        groups.setdefault(im.pixels.shape, []).append(im)
    chunks = [g[i : i + batch_size] for g in groups.values() for i in range(0, len(g), batch_size)]
    try:
        for chunk in chunks:
            res = model(images_to_tensor([im.pixels for im in chunk], normalize))
            w, h = chunk[0].size
            anchors = generate_anchors(model.config, (w, h))
            ids = torch.tensor([im.domain.id for im in chunk])
            if ids.max() < model.config.num_domains:
                dom_losses.extend(focal_loss(res.domain_logits, ids, DOMAIN_FOCAL, reduction="none").tolist())
            for j, im in enumerate(chunk):
                preds[im.source_id] = decode_and_nms(
                    res.class_logits[j], res.box_deltas[j], anchors, 0.05, 0.5, 100, im.source_id
                )
    finally:
        model.train(was_training)
    labeled = [im for im in images if im.domain.labeled]
    matched = {}
    for im in labeled:
        m = match_detections(preds[im.source_id], im.annotations, radius_px)
        matched[im.source_id] = (preds[im.source_id].scores, m.is_tp, m.tp + m.fn)
    grid = None if grid_points is None else np.linspace(0.0, 1.0, grid_points)
    curves = domain_curves(matched, labeled, grid)
    mean_auc = float(np.mean([aucpr(c) for c in curves.values()])) if curves else 0.0
    dom_loss = float(np.mean(dom_losses)) if dom_losses else float("nan")
    result = (mean_auc, dom_loss, curves)
    return result + (preds,) if return_predictions else result


# --------------------------------------------------------------------------
# main loop


@dataclass
class TrainResult:
    best: CheckpointRecord
    history: list[dict]
    operating_point: float
    model: DetectorModel


def _jsonl(fh, record: dict):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    dataset: Sequence[AnnotatedImage],
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir=None,
    *,
    progress: Callable[[str], None] | None = None,
) -> tuple[CheckpointRecord, list[dict]]:
    """Train and select a model; see :func:`fit` for the full result."""
    res = fit(dataset, model_config, train_config, run_dir, progress=progress)
    return res.best, res.history


def fit(
    dataset: Sequence[AnnotatedImage],
    model_config: ModelConfig,
    cfg: TrainConfig,
    run_dir=None,
    *,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs and return the selected checkpoint, history and operating point.

    With ``run_dir`` set, writes ``history.jsonl``, per-epoch checkpoints,
    ``best.ckpt`` and ``summary.json``.
    """
    domains = domains_of(filter_images(dataset, split=Split.TRAIN))
    if not domains or not any(d.labeled for d in domains):
        raise ConfigError("dataset needs train images from at least one labeled domain")
    if [d.id for d in domains] != list(range(len(domains))):
        raise ConfigError(f"train domain ids must be dense 0..D-1, got {[d.id for d in domains]}")
    if model_config.num_domains != len(domains):
        raise ConfigError(
            f"invalid model config field num_domains={model_config.num_domains}; dataset has {len(domains)} train domains"
        )
    if model_config.patch_size != cfg.patch_size:
        raise ConfigError(f"model patch_size {model_config.patch_size} != train patch_size {cfg.patch_size}")
    cfg.validate(len(domains))
    val_images = [im for im in filter_images(dataset, split=Split.VALIDATION) if im.domain in domains]
    if not val_images:
        raise ConfigError("dataset has no validation images for the train domains")

    torch.manual_seed(cfg.seed)
    model = DetectorModel(model_config).float()
    disc_params = list(model.discriminator.parameters())
    disc_ids = {id(p) for p in disc_params}
    optimizer = torch.optim.Adam(
        [
            {"params": [p for p in model.parameters() if id(p) not in disc_ids], "lr_scale": 1.0},
            {"params": disc_params, "lr_scale": cfg.discriminator_lr_scale},
        ],
        lr=cfg.max_lr,
    )
    weights = LossWeights.from_domains(domains)
    steps_per_cycle = max(2, cfg.lr_cycle_epochs * cfg.steps_per_epoch)
    detach = not cfg.adversarial

    run_dir = Path(run_dir) if run_dir is not None else None
    fh = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "history.jsonl", "w")
    extra_base = {
        "mode": cfg.mode,
        "normalize": cfg.normalize_inputs,
        "train_config": cfg.to_dict(),
        "domains": [{"id": d.id, "name": d.name, "labeled": d.labeled} for d in domains],
    }
    history, records = [], []
    best_state, best_record = None, None
    make = lambda s: make_batch(dataset, domains, model_config, cfg, s)
    try:
        for epoch in range(cfg.epochs):
            alpha = alpha_schedule(epoch / cfg.epochs, cfg.alpha_steepness) if cfg.adversarial else 0.0
            model.train()
            sums = collections.defaultdict(float)
            first = epoch * cfg.steps_per_epoch
            steps = range(first, first + cfg.steps_per_epoch)
            for step, batch in zip(steps, batch_stream(make, steps, cfg.num_workers, cfg.prefetch)):
                lr = cyclical_lr(step, steps_per_cycle, cfg.max_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr * group["lr_scale"]
                total, report = batch_objective(model, batch, weights, alpha, detach)
                if not torch.isfinite(total):
                    raise TrainingDiverged(step, float(total))
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                rec = {"step": step, "epoch": epoch, "lr": lr, "alpha": alpha, **report.as_dict()}
                _jsonl(fh, rec)
                for k, v in report.as_dict().items():
                    sums[k] += v

            val_auc, val_dom, _ = validate(
                model, val_images, normalize=cfg.normalize_inputs, radius_px=cfg.radius_px,
                grid_points=cfg.val_grid_points,
            )
            ckpt_rel = None
            if run_dir is not None:
                ckpt_rel = f"checkpoints/epoch_{epoch:03d}.ckpt"
                save_checkpoint(
                    run_dir / ckpt_rel, model, epoch=epoch, alpha_progress=(epoch + 1) / cfg.epochs,
                    extra={**extra_base, "val_mean_aucpr": val_auc, "val_domain_loss": val_dom},
                )
            record = CheckpointRecord(epoch, val_auc, val_dom, ckpt_rel)
            records.append(record)
            epoch_rec = {
                "epoch": epoch,
                "val_mean_aucpr": val_auc,
                "val_domain_loss": val_dom,
                "checkpoint": ckpt_rel,
                **{f"mean_{k}": v / cfg.steps_per_epoch for k, v in sums.items()},
                "alpha": alpha,
            }
            history.append(epoch_rec)
            _jsonl(fh, epoch_rec)
            if progress:
                progress(
                    f"epoch {epoch + 1}/{cfg.epochs} loss={epoch_rec['mean_total']:.4f} "
                    f"val_aucpr={val_auc:.4f} val_dom={val_dom:.4f} alpha={alpha:.3f}"
                )
            if select_best(records, cfg.select_by, cfg.selection_tie) is record:
                best_record = record
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if fh is not None:
            fh.close()

    model.load_state_dict(best_state)
    model.eval()
    _, _, curves = validate(model, val_images, normalize=cfg.normalize_inputs, radius_px=cfg.radius_px, grid_points=None)
    op = select_operating_point(curves) if curves else 0.5
    best = replace(best_record)
    if run_dir is not None:
        save_checkpoint(
            run_dir / "best.ckpt", model, epoch=best.epoch, alpha_progress=(best.epoch + 1) / cfg.epochs,
            extra={
                **extra_base,
                "val_mean_aucpr": best.val_mean_aucpr,
                "val_domain_loss": best.val_domain_loss,
                "operating_point": op,
                "selected_from": best.path,
            },
        )
        best.path = "best.ckpt"
        summary = {"best": asdict(best), "operating_point": op, "records": [asdict(r) for r in records]}
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return TrainResult(best, history, op, model)


def train_baseline(
    dataset: Sequence[AnnotatedImage], model_config: ModelConfig, train_config: TrainConfig, mode: str, run_dir=None
) -> CheckpointRecord:
    """Train the ``weak`` (no augmentation) or ``strong`` (augmentation + normalization)
    baseline; both keep the discriminator detached from the encoder."""
    if mode not in ("weak", "strong"):
        raise ConfigError(f"invalid baseline mode {mode!r}; accepted: weak, strong")
    best, _ = train(dataset, model_config, replace(train_config, mode=mode), run_dir)
    return best


def load_trained(path) -> tuple[DetectorModel, dict]:
    """Load a checkpoint written by :func:`fit` together with its metadata."""
    return load_checkpoint(path)
