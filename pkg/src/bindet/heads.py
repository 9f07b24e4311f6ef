"""Prediction heads on top of the pyramid, and the full detection model.

Four heads, all plain temporal conv stacks whose weights are shared across
pyramid levels (they see only the flat feature axis):

* binning head: per-snippet start/end distance distributions over W coarse
  bins, sigmoid probabilities, shape (T_ms, 2W) split into two (T_ms, W) maps;
* refine head: signed residual offsets per bin, linear outputs, (T_ms, 2W);
* snippet classifier: multi-label sigmoid scores, (T_ms, K);
* video classifier: runs on the raw snippet features (T, D) and scores
  categories per snippet, (T, K); pooled elsewhere into video-level scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ParamSet,
    Tensor,
    as_tensor,
    conv1d,
    relu,
    sigmoid,
    slice_cols,
    uniform_fan_in_init,
)
from .pyramid import PyramidFeatures, build_pyramid, init_backbone_params


@dataclass(frozen=True)
class BinGrid:
    """Coarse distance bins: bin w covers [w*b, (w+1)*b), center w*b + b/2."""

    bins: int = 8
    coverage: float = 0.25

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins}")
        if self.coverage <= 0:
            raise ValueError(f"bin coverage must be > 0, got {self.coverage}")

    @property
    def reach(self) -> float:
        """Total covered distance W*b in level-relative units."""
        return self.bins * self.coverage

    def centers(self) -> np.ndarray:
        return (np.arange(self.bins) + 0.5) * self.coverage


@dataclass
class HeadOutputs:
    """All per-snippet predictions for one video, as graph tensors."""

    start_bins: Tensor  # (T_ms, W) probabilities
    end_bins: Tensor  # (T_ms, W) probabilities
    start_refine: Tensor  # (T_ms, W) signed offsets, level-1 units
    end_refine: Tensor  # (T_ms, W)
    snippet_cls: Tensor  # (T_ms, K) probabilities
    video_cls: Tensor  # (T, K) probabilities from the raw-feature head


def _init_conv_stack(params, rng, prefix, dims, k=3, final_bias=None):
    """Register a stack of k-wide convs with given channel sizes.

    final_bias, if given, overrides the last layer's bias with a constant;
    used to start sigmoid outputs at a low prior probability.
    """
    last = len(dims) - 2
    for i, (c_in, c_out) in enumerate(zip(dims[:-1], dims[1:])):
        params.add(f"{prefix}.{i}.weight", uniform_fan_in_init(rng, (k, c_in, c_out), k * c_in))
        if final_bias is not None and i == last:
            params.add(f"{prefix}.{i}.bias", np.full(c_out, float(final_bias)))
        else:
            params.add(f"{prefix}.{i}.bias", uniform_fan_in_init(rng, (c_out,), k * c_in))


def _run_conv_stack(x: Tensor, params: ParamSet, prefix: str, relu_between: bool = True) -> Tensor:
    """Apply convs `prefix.0`, `prefix.1`, ... with relu between layers.

    No activation after the final conv; callers add sigmoid where needed.
    relu_between=False gives a purely linear stack.
    """
    i = 0
    out = x
    while f"{prefix}.{i}.weight" in params:
        if i > 0 and relu_between:
            out = relu(out)
        out = conv1d(out, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"], padding=1)
        i += 1
    if i == 0:
        raise KeyError(f"no conv layers registered under {prefix!r}")
    return out


def init_head_params(
    params: ParamSet,
    rng: np.random.Generator,
    feature_dim: int,
    num_classes: int,
    width: int,
    bins: int,
) -> None:
    """Register the four heads' conv stacks.

    Binning/refine/snippet heads are 3-layer stacks on pyramid features;
    the video head is a 2-layer stack on raw features.  The video head is
    deliberately narrow (at most 16 hidden channels) and starts its final
    bias at -2.5 (sigmoid ~ 0.076): its pooled loss supervises only K
    scalars per video, so a wide head memorizes per-video noise instead of
    the class signatures and its absent-category scores stop generalizing.
    """
    _init_conv_stack(params, rng, "bin_head", [width, width, width, 2 * bins])
    _init_conv_stack(params, rng, "refine_head", [width, width, width, 2 * bins])
    _init_conv_stack(params, rng, "cls_head", [width, width, width, num_classes])
    _init_conv_stack(params, rng, "vid_head", [feature_dim, min(width, 16), num_classes],
                     final_bias=-2.5)


def bin_head_forward(f_ms: PyramidFeatures, params: ParamSet, bins: int):
    """(start, end) coarse-bin probability maps, each (T_ms, W)."""
    raw = _run_conv_stack(f_ms.values, params, "bin_head")
    if raw.shape[1] != 2 * bins:
        raise ValueError(f"bin head emits {raw.shape[1]} columns, expected {2 * bins}")
    return sigmoid(slice_cols(raw, 0, bins)), sigmoid(slice_cols(raw, bins, 2 * bins))


def refine_head_forward(f_ms: PyramidFeatures, params: ParamSet, bins: int):
    """(start, end) residual offset maps, each (T_ms, W), linear outputs."""
    raw = _run_conv_stack(f_ms.values, params, "refine_head")
    if raw.shape[1] != 2 * bins:
        raise ValueError(f"refine head emits {raw.shape[1]} columns, expected {2 * bins}")
    return slice_cols(raw, 0, bins), slice_cols(raw, bins, 2 * bins)


def cls_head_forward(f_ms: PyramidFeatures, params: ParamSet) -> Tensor:
    """Multi-label snippet class probabilities, (T_ms, K)."""
    return sigmoid(_run_conv_stack(f_ms.values, params, "cls_head"))


def vid_head_forward(features, params: ParamSet) -> Tensor:
    """Per-snippet class probabilities on raw features, (T, K).

    The stack is linear before the sigmoid.  Its pooled loss supervises one
    scalar per class per video, and with a hidden relu that weak signal
    settles on high-recall detectors that background noise can trigger;
    the linear readout trains toward the margin-optimal window sum.
    """
    return sigmoid(_run_conv_stack(as_tensor(features), params, "vid_head", relu_between=False))


@dataclass
class DetectionModel:
    """Parameters plus the structural facts needed to rebuild the graph."""

    params: ParamSet
    feature_dim: int
    num_classes: int
    levels: int = 4
    width: int = 64
    grid: BinGrid = field(default_factory=BinGrid)

    @classmethod
    def initialize(
        cls,
        feature_dim: int,
        num_classes: int,
        levels: int = 4,
        width: int = 64,
        grid: BinGrid | None = None,
        seed: int = 0,
    ) -> "DetectionModel":
        grid = grid or BinGrid()
        rng = np.random.default_rng(seed)
        params = ParamSet()
        init_backbone_params(params, rng, feature_dim, width, levels)
        init_head_params(params, rng, feature_dim, num_classes, width, grid.bins)
        return cls(params, feature_dim, num_classes, levels, width, grid)

    def forward(self, features) -> tuple[PyramidFeatures, HeadOutputs]:
        """Full forward pass over one video's (T, D) features."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ValueError(
                f"features shape {features.shape} incompatible with feature_dim {self.feature_dim}"
            )
        f_ms = build_pyramid(features, self.params, self.levels)
        start_bins, end_bins = bin_head_forward(f_ms, self.params, self.grid.bins)
        start_refine, end_refine = refine_head_forward(f_ms, self.params, self.grid.bins)
        snippet_cls = cls_head_forward(f_ms, self.params)
        video_cls = vid_head_forward(features, self.params)
        return f_ms, HeadOutputs(
            start_bins, end_bins, start_refine, end_refine, snippet_cls, video_cls
        )
