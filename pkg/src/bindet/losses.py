"""The four training loss terms and their sum.

All losses are sums over elements scaled by a fixed divisor ``norm``
(default 90).  Each loss builds a single fused graph node: the forward pass
computes the summed value, the backward pass multiplies the upstream scalar
into an elementwise derivative array.

The binning head trains against continuous Gaussian heatmaps with a focal
loss.  The default variant binarizes the target at a threshold (the same
threshold that gates regression targets) and applies the standard binary
focal loss, so every bin near a true boundary is a full positive.  A
penalty-reduced variant that keeps the soft targets is selectable via
config: bins whose target equals 1 within 1e-6 use the positive branch
-(1-p)^gamma*log(p), everything else -(1-y)^beta * p^gamma * log(1-p).
Because the Gaussian targets peak below 1, the soft variant has no exact
positives and tends to drive the binning head toward zero; it exists for
comparison, not as the trained default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add

_EPS = 1e-12

FOCAL_VARIANTS = ("soft", "binarized")


@dataclass(frozen=True)
class LossConfig:
    norm: float = 90.0
    focal_gamma: float = 2.0
    focal_beta: float = 4.0
    smooth_l1_delta: float = 1.0
    focal_variant: str = "binarized"
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.norm <= 0 or self.focal_gamma <= 0 or self.focal_beta <= 0:
            raise ValueError("loss config values must be positive")
        if self.smooth_l1_delta <= 0:
            raise ValueError(f"smooth_l1_delta must be > 0, got {self.smooth_l1_delta}")
        if self.focal_variant not in FOCAL_VARIANTS:
            raise ValueError(
                f"focal_variant must be one of {FOCAL_VARIANTS}, got {self.focal_variant!r}"
            )


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of the four terms and their sum."""

    binning: float
    refine: float
    snippet: float
    video: float
    total: float


def _check_probs(name: str, p: np.ndarray) -> None:
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError(f"{name} contains values outside [0, 1]")


def _focal_sum(pred: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """Summed focal loss of a probability map against a heatmap target."""
    _check_probs("focal prediction", pred.data)
    p = np.clip(pred.data, _EPS, 1.0 - _EPS)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"focal target shape {y.shape} != prediction shape {p.shape}")
    gamma, beta = cfg.focal_gamma, cfg.focal_beta
    if cfg.focal_variant == "binarized":
        pos = y > cfg.binarize_threshold
        neg_weight = np.ones_like(y)
    else:
        pos = np.abs(1.0 - y) <= 1e-6
        neg_weight = (1.0 - y) ** beta
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    pos_elems = -((1.0 - p) ** gamma) * log_p
    neg_elems = -neg_weight * (p**gamma) * log_1p
    elems = np.where(pos, pos_elems, neg_elems)
    out = elems.sum()
    pos_grad = gamma * (1.0 - p) ** (gamma - 1.0) * log_p - ((1.0 - p) ** gamma) / p
    neg_grad = -neg_weight * (gamma * p ** (gamma - 1.0) * log_1p - (p**gamma) / (1.0 - p))
    grad = np.where(pos, pos_grad, neg_grad)

    def vjp(g):
        return (float(g) * grad,)

    return Tensor(out, (pred,), vjp)


def _masked_smooth_l1_sum(pred: Tensor, target: np.ndarray, delta: float) -> Tensor:
    """Smooth-L1 summed over bins with finite targets; others contribute 0."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"smooth-L1 target shape {t.shape} != prediction shape {pred.shape}")
    mask = np.isfinite(t)
    diff = np.where(mask, pred.data - np.where(mask, t, 0.0), 0.0)
    absd = np.abs(diff)
    quad = absd < delta
    elems = np.where(mask, np.where(quad, 0.5 * diff**2 / delta, absd - 0.5 * delta), 0.0)
    out = elems.sum()
    grad = np.where(mask, np.where(quad, diff / delta, np.sign(diff)), 0.0)

    def vjp(g):
        return (float(g) * grad,)

    return Tensor(out, (pred,), vjp)


def _bce_sum(pred: Tensor, target: np.ndarray, name: str) -> Tensor:
    """Summed binary cross-entropy with clamped logs."""
    _check_probs(name, pred.data)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.data.shape:
        raise ValueError(f"{name} target shape {y.shape} != prediction shape {pred.shape}")
    p = np.clip(pred.data, _EPS, 1.0 - _EPS)
    elems = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = elems.sum()
    grad = -(y / p - (1.0 - y) / (1.0 - p))

    def vjp(g):
        return (float(g) * grad,)

    return Tensor(out, (pred,), vjp)


def _scaled(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def vjp(g):
        return (g * factor,)

    return Tensor(out, (x,), vjp)


def binning_loss(
    start_pred: Tensor,
    end_pred: Tensor,
    start_target: np.ndarray,
    end_target: np.ndarray,
    cfg: LossConfig,
) -> Tensor:
    """Focal loss over both boundary heatmaps, scaled by 1/norm."""
    total = add(_focal_sum(start_pred, start_target, cfg), _focal_sum(end_pred, end_target, cfg))
    return _scaled(total, 1.0 / cfg.norm)


def refine_loss(
    start_pred: Tensor,
    end_pred: Tensor,
    start_target: np.ndarray,
    end_target: np.ndarray,
    cfg: LossConfig,
) -> Tensor:
    """Smooth-L1 over assigned bins of both boundaries, scaled by 1/norm."""
    total = add(
        _masked_smooth_l1_sum(start_pred, start_target, cfg.smooth_l1_delta),
        _masked_smooth_l1_sum(end_pred, end_target, cfg.smooth_l1_delta),
    )
    return _scaled(total, 1.0 / cfg.norm)


def classification_losses(
    snippet_pred: Tensor,
    snippet_target: np.ndarray,
    video_pred: Tensor,
    video_target: np.ndarray,
    cfg: LossConfig,
) -> tuple[Tensor, Tensor]:
    """BCE for the snippet classifier and the pooled video-level scores."""
    snippet = _scaled(_bce_sum(snippet_pred, snippet_target, "snippet probabilities"), 1.0 / cfg.norm)
    video = _scaled(_bce_sum(video_pred, video_target, "video probabilities"), 1.0 / cfg.norm)
    return snippet, video


def combine_losses(
    binning: Tensor, refine: Tensor, snippet: Tensor, video: Tensor
) -> tuple[Tensor, LossBreakdown]:
    """Sum the four scalar terms; returns the graph total and plain values."""
    total = add(add(binning, refine), add(snippet, video))
    breakdown = LossBreakdown(
        binning=binning.item(),
        refine=refine.item(),
        snippet=snippet.item(),
        video=video.item(),
        total=total.item(),
    )
    return total, breakdown
