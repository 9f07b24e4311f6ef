"""Multi-resolution temporal pyramid over snippet features.

Level 1 is a stride-1 conv embedding of the input sequence; each further
level halves the previous one with a stride-2 conv.  Every level gets a
context conv, relu after each conv.  All levels share one channel width and
are concatenated along time into a single flat axis of length
``T_ms = sum_l T_l``; a :class:`PyramidLayout` maps flat indices back to
(level, position) and to level-1 coordinates.

Input length is right-padded with zeros to a multiple of ``2**(L-1)`` so the
halving is exact at every level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamSet, Tensor, as_tensor, concat_rows, conv1d, relu, uniform_fan_in_init


class LayoutError(ValueError):
    """Raised for invalid pyramid geometry or flat-index lookups."""


@dataclass(frozen=True)
class PyramidLayout:
    """Static geometry of an L-level pyramid for one padded input length."""

    levels: int
    lengths: tuple[int, ...]  # T_1 .. T_L
    padded_length: int  # T_1, after right padding

    @property
    def total(self) -> int:
        return sum(self.lengths)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for n in self.lengths:
            out.append(acc)
            acc += n
        return tuple(out)

    def flat_to_level(self, t: int) -> tuple[int, int, int]:
        """Map flat index -> (level 1-based, within-level position, scale)."""
        if not (0 <= t < self.total):
            raise LayoutError(f"flat index {t} out of range [0, {self.total})")
        acc = 0
        for level, n in enumerate(self.lengths, start=1):
            if t < acc + n:
                pos = t - acc
                return level, pos, 2 ** (level - 1)
            acc += n
        raise LayoutError(f"flat index {t} not covered by lengths {self.lengths}")

    def scales(self) -> np.ndarray:
        """Per-flat-index scale factors S(t), shape (T_ms,)."""
        return np.concatenate(
            [np.full(n, 2**level_idx, dtype=np.float64) for level_idx, n in enumerate(self.lengths)]
        )

    def coords(self) -> np.ndarray:
        """Per-flat-index level-1 coordinates S(t)*position, shape (T_ms,)."""
        return np.concatenate(
            [
                np.arange(n, dtype=np.float64) * (2**level_idx)
                for level_idx, n in enumerate(self.lengths)
            ]
        )


def padded_length(t: int, levels: int) -> int:
    """Smallest multiple of 2**(levels-1) that is >= t."""
    unit = 2 ** (levels - 1)
    return ((t + unit - 1) // unit) * unit


def make_layout(t: int, levels: int) -> PyramidLayout:
    if levels < 1:
        raise LayoutError(f"levels must be >= 1, got {levels}")
    if t < 1:
        raise LayoutError(f"input length must be >= 1, got {t}")
    t1 = padded_length(t, levels)
    lengths = tuple(t1 // (2**i) for i in range(levels))
    return PyramidLayout(levels, lengths, t1)


@dataclass
class PyramidFeatures:
    layout: PyramidLayout
    values: Tensor  # (T_ms, width)


def init_backbone_params(
    params: ParamSet, rng: np.random.Generator, feature_dim: int, width: int, levels: int, k: int = 3
) -> None:
    """Register backbone conv weights: embed + context at level 1, then a
    (downsample, context) pair per additional level."""

    def add_conv(name, c_in, c_out):
        params.add(f"{name}.weight", uniform_fan_in_init(rng, (k, c_in, c_out), k * c_in))
        params.add(f"{name}.bias", uniform_fan_in_init(rng, (c_out,), k * c_in))

    add_conv("backbone.embed", feature_dim, width)
    add_conv("backbone.context0", width, width)
    for level in range(1, levels):
        add_conv(f"backbone.down{level}", width, width)
        add_conv(f"backbone.context{level}", width, width)


def build_pyramid(features, params: ParamSet, levels: int) -> PyramidFeatures:
    """Run the backbone over a (T, D) feature array or tensor.

    Returns flat (T_ms, width) values ordered level 1 first.  The input is
    zero-padded on the right to a multiple of 2**(levels-1) before level 1.
    """
    x = as_tensor(features)
    if x.ndim != 2:
        raise LayoutError(f"features must be 2-d (time, dim), got shape {x.shape}")
    t = x.shape[0]
    layout = make_layout(t, levels)
    if layout.padded_length > t:
        pad = Tensor(np.zeros((layout.padded_length - t, x.shape[1])))
        x = concat_rows([x, pad])

    def apply(name, inp, stride):
        return relu(
            conv1d(inp, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)
        )

    level = apply("backbone.context0", apply("backbone.embed", x, 1), 1)
    levels_out = [level]
    for i in range(1, levels):
        level = apply(f"backbone.context{i}", apply(f"backbone.down{i}", level, 2), 1)
        levels_out.append(level)
    values = concat_rows(levels_out) if levels > 1 else levels_out[0]
    for n, lv in zip(layout.lengths, levels_out):
        if lv.shape[0] != n:
            raise LayoutError(
                f"pyramid level produced length {lv.shape[0]}, layout expects {n}"
            )
    return PyramidFeatures(layout, values)
