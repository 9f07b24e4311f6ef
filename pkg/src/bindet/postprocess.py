"""Inference: coarse decode, residual refinement, category gating, NMS.

Decoding runs per collected location (t, k): the argmax bin of each boundary
heatmap gives a coarse boundary at the bin center (scaled to level-1 units),
and the refine head's value at that bin shifts it onto the residual.  A
video-level classifier pooled over the top-N scoring snippets per class
gates which categories may emit detections at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import DetectionCandidate, VideoRecord
from .evaluation import tiou
from .heads import BinGrid, DetectionModel
from .pyramid import PyramidLayout

SCORE_MODES = ("cls_only", "cls_start", "cls_end", "cls_start_end", "cls_sqrt_start_end")

DEFAULT_TOP_N_DIVISOR = 8


@dataclass(frozen=True)
class InferenceConfig:
    cls_threshold: float = 0.1  # per-snippet class score floor
    video_threshold: float = 0.1  # video-level category gate
    nms_tiou: float = 0.2
    max_keep: int = 200
    score_mode: str = "cls_sqrt_start_end"
    video_gate: bool = True

    def __post_init__(self):
        for name, v in (("cls_threshold", self.cls_threshold), ("video_threshold", self.video_threshold), ("nms_tiou", self.nms_tiou)):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.max_keep < 1:
            raise ValueError(f"max_keep must be >= 1, got {self.max_keep}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")


@dataclass
class VideoLevelResult:
    probs: np.ndarray  # (K,)
    reliable: frozenset = field(default_factory=frozenset)  # category indices


def video_level_probs(clip_probs, top_n: int):
    """Mean of the top_n largest values per class column.

    Accepts a (T, K) array or graph tensor; with a tensor input the result
    is differentiable, and exactly the selected entries receive gradient
    1/top_n each.  Ties select the smaller snippet index.
    """
    is_tensor = isinstance(clip_probs, Tensor)
    arr = clip_probs.data if is_tensor else np.asarray(clip_probs, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (T, K) probabilities, got shape {arr.shape}")
    t, k = arr.shape
    if not (1 <= top_n <= t):
        raise ValueError(f"top_n={top_n} out of range [1, {t}]")
    order = np.argsort(-arr, axis=0, kind="stable")[:top_n]
    sel = np.sort(order, axis=0)  # summation in snippet order keeps results exact
    vals = np.take_along_axis(arr, sel, axis=0)
    out = vals.sum(axis=0) / top_n
    if not is_tensor:
        return out
    cols = np.broadcast_to(np.arange(k), sel.shape)

    def vjp(g):
        full = np.zeros_like(arr)
        full[sel, cols] = g / top_n
        return (full,)

    return Tensor(out, (clip_probs,), vjp)


def video_level_result(probs: np.ndarray, threshold: float) -> VideoLevelResult:
    """Gate categories whose pooled probability clears the threshold."""
    reliable = frozenset(int(i) for i in np.nonzero(probs > threshold)[0])
    return VideoLevelResult(probs=np.asarray(probs), reliable=reliable)


def decode_coarse(start_row, end_row, coord: float, scale: float, grid: BinGrid):
    """Coarse boundaries from argmax bins; returns (y_s, y_e, w_s, w_e).

    coord is the snippet's level-1 coordinate; bin centers are scaled by the
    snippet's level scale before being applied.
    """
    start_row = np.asarray(start_row)
    end_row = np.asarray(end_row)
    if start_row.shape != (grid.bins,) or end_row.shape != (grid.bins,):
        raise ValueError(
            f"bin rows must have shape ({grid.bins},), got {start_row.shape} / {end_row.shape}"
        )
    w_s = int(np.argmax(start_row))
    w_e = int(np.argmax(end_row))
    centers = grid.centers()
    y_s = coord - centers[w_s] * scale
    y_e = coord + centers[w_e] * scale
    return y_s, y_e, w_s, w_e


def refine(y_s: float, y_e: float, start_reg_row, end_reg_row, w_s: int, w_e: int):
    """Shift coarse boundaries by the refine head's residuals at the argmax bins."""
    return y_s - float(start_reg_row[w_s]), y_e + float(end_reg_row[w_e])


def clamp_segment(start: float, end: float, t_max: float):
    """Clamp a segment to [0, t_max]; degenerate segments become None."""
    start = min(max(start, 0.0), t_max)
    end = min(max(end, 0.0), t_max)
    if start >= end:
        return None
    return start, end


def collect_locations(snippet_probs: np.ndarray, allowed, threshold: float):
    """All (t, k) with probability > threshold and k in allowed, (t, k) order."""
    probs = np.asarray(snippet_probs)
    mask = probs > threshold
    allowed = set(int(a) for a in allowed)
    for k in range(probs.shape[1]):
        if k not in allowed:
            mask[:, k] = False
    ts, ks = np.nonzero(mask)
    return [(int(t), int(k)) for t, k in zip(ts, ks)]


def confidence(cls_prob: float, start_row, end_row, mode: str) -> float:
    """Fuse the class score with boundary heatmap maxima."""
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    if mode == "cls_only":
        return float(cls_prob)
    ms = float(np.max(start_row))
    me = float(np.max(end_row))
    if mode == "cls_start":
        return float(cls_prob) * ms
    if mode == "cls_end":
        return float(cls_prob) * me
    if mode == "cls_start_end":
        return float(cls_prob) * ms * me
    return float(cls_prob) * float(np.sqrt(ms * me))


def _canonical_order(candidates):
    """Deterministic score ordering: high score, then earlier/shorter/lower label."""
    return sorted(
        range(len(candidates)),
        key=lambda i: (
            -candidates[i].score,
            candidates[i].start,
            candidates[i].end,
            candidates[i].label,
            i,
        ),
    )


def nms(candidates, tiou_threshold: float):
    """Greedy class-wise hard suppression.

    Candidates are visited in descending score order; one is kept iff its
    overlap with every already-kept candidate of the same class is at most
    the threshold.
    """
    kept = []
    for i in _canonical_order(candidates):
        c = candidates[i]
        if not np.isfinite(c.score):
            raise ValueError(f"candidate score must be finite, got {c.score}")
        suppressed = any(
            k.label == c.label and tiou((c.start, c.end), (k.start, k.end)) > tiou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(c)
    return kept


def top_n_snippets(t_ms: int, num_snippets: int, divisor: int = DEFAULT_TOP_N_DIVISOR) -> int:
    """Pooling size ceil(T_ms / divisor), clamped into [1, num_snippets]."""
    n = -(-t_ms // divisor)
    return max(1, min(num_snippets, n))


def detect_from_outputs(
    start_heat: np.ndarray,
    end_heat: np.ndarray,
    start_reg: np.ndarray,
    end_reg: np.ndarray,
    snippet_probs: np.ndarray,
    clip_probs: np.ndarray,
    layout: PyramidLayout,
    grid: BinGrid,
    cfg: InferenceConfig,
    num_snippets: int,
    top_n: int,
):
    """Decode detections from raw head output arrays.

    This is the whole post-head pipeline: pool clip_probs into video-level
    category scores, gate, collect locations, decode and refine each one,
    score it, suppress, and keep the best max_keep.
    """
    vl = video_level_result(video_level_probs(clip_probs, top_n), cfg.video_threshold)
    if cfg.video_gate:
        allowed = vl.reliable
    else:
        allowed = range(snippet_probs.shape[1])
    locations = collect_locations(snippet_probs, allowed, cfg.cls_threshold)
    coords = layout.coords()
    scales = layout.scales()
    decoded = {}
    candidates = []
    for t, k in locations:
        if t not in decoded:
            y_s, y_e, w_s, w_e = decode_coarse(
                start_heat[t], end_heat[t], coords[t], scales[t], grid
            )
            y_s, y_e = refine(y_s, y_e, start_reg[t], end_reg[t], w_s, w_e)
            decoded[t] = clamp_segment(y_s, y_e, float(num_snippets))
        seg = decoded[t]
        if seg is None:
            continue
        score = confidence(snippet_probs[t, k], start_heat[t], end_heat[t], cfg.score_mode)
        candidates.append(DetectionCandidate(seg[0], seg[1], k, score))
    kept = nms(candidates, cfg.nms_tiou)
    return kept[: cfg.max_keep]


def detect_video(
    video: VideoRecord,
    model: DetectionModel,
    cfg: InferenceConfig,
    top_n_divisor: int = DEFAULT_TOP_N_DIVISOR,
):
    """Run the full model + decode pipeline on one video."""
    f_ms, outs = model.forward(video.features)
    layout = f_ms.layout
    return detect_from_outputs(
        outs.start_bins.data,
        outs.end_bins.data,
        outs.start_refine.data,
        outs.end_refine.data,
        outs.snippet_cls.data,
        outs.video_cls.data,
        layout,
        model.grid,
        cfg,
        video.num_snippets,
        top_n_snippets(layout.total, video.num_snippets, top_n_divisor),
    )
