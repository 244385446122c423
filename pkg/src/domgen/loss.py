"""Focal and smooth-L1 losses, the labeled-domain mask, and the reversal-weight ramp."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class FocalParams:
    """``alpha_balance=None`` disables class balancing (every class weighted 1)."""

    gamma: float = 2.0
    alpha_balance: float | None = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha_balance is not None and not 0.0 <= self.alpha_balance <= 1.0:
            raise ValueError("alpha_balance must lie in [0, 1]")


INSTANCE_FOCAL = FocalParams(2.0, 0.25)
DOMAIN_FOCAL = FocalParams(2.0, None)


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def focal_loss(logits, targets, params: FocalParams = INSTANCE_FOCAL, reduction: str = "mean"):
    """Softmax focal loss ``-a_t (1 - p_t)^gamma log p_t`` over the last axis.

    ``targets`` holds class indices. With balancing on, class 0 (background)
    is weighted ``1 - alpha_balance`` and every other class ``alpha_balance``.
    ``reduction`` is ``mean``, ``sum`` or ``none``.
    """
    logits = _as_tensor(logits)
    targets = _as_tensor(targets, torch.long)
    if not torch.isfinite(logits).all():
        raise ValueError("focal_loss received non-finite logits")
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
        targets = targets.reshape(1)
    logp = F.log_softmax(logits, dim=-1)
    logp_t = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    p_t = logp_t.exp()
    loss = -logp_t
    if params.gamma != 0:
        loss = (1.0 - p_t).clamp(min=0.0) ** params.gamma * loss
    if params.alpha_balance is not None:
        a = params.alpha_balance
        loss = torch.where(targets == 0, 1.0 - a, a).to(loss.dtype) * loss
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def smooth_l1(pred, target, reduction: str = "mean"):
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = (pred - target).abs()
    loss = torch.where(d < 1.0, 0.5 * d * d, d - 0.5)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


@dataclass(frozen=True)
class LossWeights:
    beta_by_domain: Mapping[int, int]

    def __post_init__(self):
        for d, b in self.beta_by_domain.items():
            if b not in (0, 1):
                raise ValueError(f"beta for domain {d} must be 0 or 1, got {b}")

    @classmethod
    def from_domains(cls, domains) -> "LossWeights":
        return cls({d.id: int(d.labeled) for d in domains})


@dataclass
class CompositeLossReport:
    total: float
    domain_loss: float
    box_loss: float
    instance_loss: float
    per_domain_counts: dict[int, int] = field(default_factory=dict)
    alpha_used: float = 0.0

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "domain_loss": self.domain_loss,
            "box_loss": self.box_loss,
            "instance_loss": self.instance_loss,
        }


def composite_objective(domain_loss, box_loss, instance_loss, domain_ids, weights: LossWeights, alpha: float = 0.0):
    """Differentiable batch objective plus its decomposition.

    Each argument holds one entry per sample. Losses are averaged within each
    domain, detection terms are masked by that domain's beta, and the
    per-domain means are summed. Returns ``(total_tensor, report)``.
    """
    dom = _as_tensor(domain_loss)
    box = _as_tensor(box_loss)
    inst = _as_tensor(instance_loss)
    ids = [int(i) for i in (domain_ids.tolist() if hasattr(domain_ids, "tolist") else domain_ids)]
    unknown = sorted(set(ids) - set(weights.beta_by_domain))
    if unknown:
        raise KeyError(f"domain ids {unknown} have no beta weight")
    counts: dict[int, int] = {}
    for i in ids:
        counts[i] = counts.get(i, 0) + 1
    scale = torch.tensor([1.0 / counts[i] for i in ids], dtype=dom.dtype)
    beta = torch.tensor([float(weights.beta_by_domain[i]) for i in ids], dtype=dom.dtype)
    # masked samples are excluded outright so their gradient is exactly zero
    det_keep = beta > 0
    dom_term = (scale * dom).sum()
    box_term = (scale[det_keep] * box[det_keep]).sum()
    inst_term = (scale[det_keep] * inst[det_keep]).sum()
    total = dom_term + box_term + inst_term
    report = CompositeLossReport(
        total=float(total.detach()),
        domain_loss=float(dom_term.detach()),
        box_loss=float(box_term.detach()),
        instance_loss=float(inst_term.detach()),
        per_domain_counts=dict(sorted(counts.items())),
        alpha_used=float(alpha),
    )
    return total, report


def composite_loss(per_sample: Sequence[Mapping], weights: LossWeights, alpha: float = 0.0) -> CompositeLossReport:
    """Evaluate the objective from a list of ``{domain_loss, box_loss, instance_loss, domain_id}``."""
    if not per_sample:
        raise ValueError("composite_loss needs at least one sample")
    _, report = composite_objective(
        [float(s["domain_loss"]) for s in per_sample],
        [float(s["box_loss"]) for s in per_sample],
        [float(s["instance_loss"]) for s in per_sample],
        [s["domain_id"] for s in per_sample],
        weights,
        alpha,
    )
    return report


def alpha_schedule(progress: float, steepness: float = 10.0) -> float:
    """Reversal weight ``2 / (1 + exp(-steepness * progress)) - 1``, ramping 0 -> 1."""
    if steepness <= 0:
        raise ValueError("steepness must be positive")
    if not 0.0 <= progress <= 1.0:
        warnings.warn(f"progress {progress} outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        progress = min(max(progress, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-steepness * progress)) - 1.0
