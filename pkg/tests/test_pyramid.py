"""Pyramid layout bookkeeping and backbone forward pass."""

import numpy as np
import pytest

from bindet.autodiff import ParamSet
from bindet.pyramid import (
    LayoutError,
    build_pyramid,
    init_backbone_params,
    make_layout,
    padded_length,
)


def test_halving_lengths():
    layout = make_layout(8, 3)
    assert layout.lengths == (8, 4, 2)
    assert layout.total == 14
    assert layout.padded_length == 8


def test_single_level_layout():
    layout = make_layout(5, 1)
    assert layout.lengths == (5,)
    assert all(layout.flat_to_level(t)[2] == 1 for t in range(5))


def test_padding_to_multiple():
    assert padded_length(7, 3) == 8
    assert padded_length(8, 3) == 8
    assert padded_length(9, 4) == 16
    layout = make_layout(7, 3)
    assert layout.lengths == (8, 4, 2)


def test_flat_to_level_examples():
    layout = make_layout(8, 3)
    assert layout.flat_to_level(0) == (1, 0, 1)
    assert layout.flat_to_level(8) == (2, 0, 2)
    assert layout.flat_to_level(13) == (3, 1, 4)


def test_flat_to_level_bijection():
    layout = make_layout(16, 4)
    seen = set()
    for t in range(layout.total):
        level, pos, scale = layout.flat_to_level(t)
        assert scale == 2 ** (level - 1)
        assert 0 <= pos < layout.lengths[level - 1]
        seen.add((level, pos))
    assert len(seen) == layout.total
    with pytest.raises(LayoutError):
        layout.flat_to_level(layout.total)
    with pytest.raises(LayoutError):
        layout.flat_to_level(-1)


def test_coords_and_scales_consistent():
    layout = make_layout(12, 3)
    coords = layout.coords()
    scales = layout.scales()
    for t in range(layout.total):
        level, pos, scale = layout.flat_to_level(t)
        assert scales[t] == scale
        assert coords[t] == scale * pos
        assert 0 <= coords[t] < layout.padded_length


def _backbone(feature_dim, width, levels, seed=0):
    params = ParamSet()
    init_backbone_params(params, np.random.default_rng(seed), feature_dim, width, levels)
    return params


def test_build_pyramid_shapes():
    params = _backbone(6, 8, 3)
    rng = np.random.default_rng(1)
    f = build_pyramid(rng.normal(size=(8, 6)), params, 3)
    assert f.layout.lengths == (8, 4, 2)
    assert f.values.shape == (14, 8)


def test_build_pyramid_pads_short_input():
    params = _backbone(6, 8, 4)
    f = build_pyramid(np.random.default_rng(2).normal(size=(13, 6)), params, 4)
    assert f.layout.padded_length == 16
    assert f.layout.lengths == (16, 8, 4, 2)
    assert f.values.shape == (30, 8)


def test_build_pyramid_deterministic():
    params = _backbone(4, 8, 3, seed=7)
    x = np.random.default_rng(3).normal(size=(16, 4))
    a = build_pyramid(x, params, 3).values.data
    b = build_pyramid(x, params, 3).values.data
    assert np.array_equal(a, b)


def test_build_pyramid_rejects_bad_input():
    params = _backbone(4, 8, 2)
    with pytest.raises(LayoutError):
        build_pyramid(np.zeros((0, 4)), params, 2)
    with pytest.raises(LayoutError):
        build_pyramid(np.zeros(4), params, 2)
    with pytest.raises(LayoutError):
        make_layout(8, 0)
