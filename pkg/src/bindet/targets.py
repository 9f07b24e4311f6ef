"""Ground-truth assignment for the binning, refine, and classification heads.

Each flat pyramid snippet t has a level-1 coordinate c(t) and scale S(t).
For every annotation [y_s, y_e] covering c(t), the level-relative boundary
distances are d_s = (c(t) - y_s)/S(t) and d_e = (y_e - c(t))/S(t); both are
nonnegative under coverage.  The binning target is a Gaussian bump over bin
centers, reduced with max across covering annotations.  The refine target is
the signed distance from the bin center back to the true boundary, scaled to
level-1 units, and only exists where the binning target clears the
assignment threshold; elsewhere it is the +inf sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import BinGrid
from .pyramid import PyramidLayout

UNASSIGNED = np.inf


@dataclass
class TargetSet:
    start_heat: np.ndarray  # (T_ms, W) in [0, peak]
    end_heat: np.ndarray  # (T_ms, W)
    start_reg: np.ndarray  # (T_ms, W), UNASSIGNED where no target
    end_reg: np.ndarray  # (T_ms, W)
    snippet_cls: np.ndarray  # (T_ms, K) in {0, 1}
    video_cls: np.ndarray  # (K,) in {0, 1}


def gaussian_peak(sigma: float) -> float:
    """Maximum attainable heatmap value 1/(sigma*sqrt(2*pi))."""
    return 1.0 / (sigma * np.sqrt(2.0 * np.pi))


def assign_video_level(snippet_cls: np.ndarray) -> np.ndarray:
    """Video-level labels: class k is present iff any snippet is positive."""
    return snippet_cls.any(axis=0).astype(np.float64)


def assign_targets(
    annotations,
    layout: PyramidLayout,
    grid: BinGrid,
    num_classes: int,
    sigma: float,
    reg_threshold: float,
) -> TargetSet:
    """Build all training targets for one video.

    Args:
        annotations: iterable of ActionAnnotation in level-1 snippet units.
        layout: pyramid geometry of the video.
        grid: coarse bin grid shared by both boundaries.
        num_classes: K, width of the classification targets.
        sigma: Gaussian width of the binning target, level-relative units.
        reg_threshold: binning-target value above which a refine target is
            assigned (strictly greater).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    t_ms, w = layout.total, grid.bins
    coords = layout.coords()
    scales = layout.scales()
    centers = grid.centers()
    peak = gaussian_peak(sigma)

    start_heat = np.zeros((t_ms, w))
    end_heat = np.zeros((t_ms, w))
    start_reg = np.full((t_ms, w), UNASSIGNED)
    end_reg = np.full((t_ms, w), UNASSIGNED)
    snippet_cls = np.zeros((t_ms, num_classes))

    for ann in annotations:
        if ann.start < 0 or ann.end > layout.padded_length:
            raise ValueError(
                f"annotation [{ann.start}, {ann.end}] outside padded range "
                f"[0, {layout.padded_length}]"
            )
        if not (0 <= ann.label < num_classes):
            raise ValueError(f"label {ann.label} out of range [0, {num_classes})")
        member = (coords >= ann.start) & (coords <= ann.end)
        if not member.any():
            continue
        snippet_cls[member, ann.label] = 1.0
        s = scales[member]
        d_s = (coords[member] - ann.start) / s
        d_e = (ann.end - coords[member]) / s
        for d, heat, reg in ((d_s, start_heat, start_reg), (d_e, end_heat, end_reg)):
            bump = peak * np.exp(-0.5 * ((centers[None, :] - d[:, None]) / sigma) ** 2)
            offsets = (d[:, None] - centers[None, :]) * s[:, None]
            cur = heat[member]
            win = bump > cur
            cur_reg = reg[member]
            cur_reg[win] = offsets[win]
            reg[member] = cur_reg
            heat[member] = np.maximum(cur, bump)

    # Refine targets exist exactly where the final heat clears the threshold.
    start_reg[~(start_heat > reg_threshold)] = UNASSIGNED
    end_reg[~(end_heat > reg_threshold)] = UNASSIGNED

    return TargetSet(
        start_heat=start_heat,
        end_heat=end_heat,
        start_reg=start_reg,
        end_reg=end_reg,
        snippet_cls=snippet_cls,
        video_cls=assign_video_level(snippet_cls),
    )
