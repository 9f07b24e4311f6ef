"""Bin grid, head forwards, weight sharing across levels, full model."""

import numpy as np
import pytest

from bindet.autodiff import ParamSet
from bindet.heads import (
    BinGrid,
    DetectionModel,
    bin_head_forward,
    cls_head_forward,
    init_head_params,
    refine_head_forward,
    vid_head_forward,
)
from bindet.pyramid import PyramidFeatures, build_pyramid, init_backbone_params, make_layout
from bindet.autodiff import Tensor


def test_bin_grid_centers():
    grid = BinGrid(8, 0.25)
    assert grid.reach == 2.0
    assert np.allclose(grid.centers(), [0.125, 0.375, 0.625, 0.875, 1.125, 1.375, 1.625, 1.875])
    assert grid.centers()[1] == 1 * 0.25 + 0.125


def test_bin_grid_validation():
    with pytest.raises(ValueError):
        BinGrid(0, 0.25)
    with pytest.raises(ValueError):
        BinGrid(4, 0.0)


def _zero_head_params(feature_dim, num_classes, width, bins):
    params = ParamSet()
    rng = np.random.default_rng(0)
    init_head_params(params, rng, feature_dim, num_classes, width, bins)
    for name in params.names():
        params.assign(name, np.zeros_like(params[name].data))
    return params


def _fake_pyramid(t_ms_rows, width):
    layout = make_layout(t_ms_rows, 1)
    return PyramidFeatures(layout, Tensor(np.random.default_rng(4).normal(size=(t_ms_rows, width))))


def test_zero_params_give_half_probabilities_and_zero_offsets():
    width, bins, k = 8, 4, 3
    params = _zero_head_params(6, k, width, bins)
    f = _fake_pyramid(10, width)
    ps, pe = bin_head_forward(f, params, bins)
    assert np.array_equal(ps.data, np.full((10, bins), 0.5))
    assert np.array_equal(pe.data, np.full((10, bins), 0.5))
    rs, re = refine_head_forward(f, params, bins)
    assert np.array_equal(rs.data, np.zeros((10, bins)))
    assert np.array_equal(re.data, np.zeros((10, bins)))
    sc = cls_head_forward(f, params)
    assert np.array_equal(sc.data, np.full((10, k), 0.5))
    rc = vid_head_forward(np.random.default_rng(1).normal(size=(7, 6)), params)
    assert np.array_equal(rc.data, np.full((7, k), 0.5))


def test_output_shapes_random_layouts():
    rng = np.random.default_rng(8)
    for _ in range(5):
        t = int(rng.integers(4, 40))
        levels = int(rng.integers(1, 4))
        width, bins, k, d = 8, 8, 3, 5
        params = ParamSet()
        init_backbone_params(params, rng, d, width, levels)
        init_head_params(params, rng, d, k, width, bins)
        f = build_pyramid(rng.normal(size=(t, d)), params, levels)
        t_ms = f.layout.total
        ps, pe = bin_head_forward(f, params, bins)
        assert ps.shape == (t_ms, bins) and pe.shape == (t_ms, bins)
        rs, re = refine_head_forward(f, params, bins)
        assert rs.shape == (t_ms, bins) and re.shape == (t_ms, bins)
        assert cls_head_forward(f, params).shape == (t_ms, k)


def test_weight_sharing_identical_rows():
    # Two flat positions whose receptive fields carry identical features must
    # produce identical outputs no matter where on the flat axis they sit.
    # Three stacked k=3 convs see 7 rows, so duplicate a 7-row block.
    width, bins, k = 8, 4, 2
    rng = np.random.default_rng(5)
    params = ParamSet()
    init_head_params(params, rng, 6, k, width, bins)
    values = rng.normal(size=(14, width))
    values[7:14] = values[0:7]
    f = PyramidFeatures(make_layout(14, 1), Tensor(values))
    ps, _ = bin_head_forward(f, params, bins)
    rs, _ = refine_head_forward(f, params, bins)
    sc = cls_head_forward(f, params)
    assert np.array_equal(ps.data[3], ps.data[10])
    assert np.array_equal(rs.data[3], rs.data[10])
    assert np.array_equal(sc.data[3], sc.data[10])


def test_probability_ranges():
    rng = np.random.default_rng(6)
    params = ParamSet()
    init_head_params(params, rng, 5, 3, 8, 4)
    f = _fake_pyramid(20, 8)
    ps, pe = bin_head_forward(f, params, 4)
    for arr in (ps.data, pe.data):
        assert arr.min() > 0.0 and arr.max() < 1.0
    rs, re = refine_head_forward(f, params, 4)
    assert np.all(np.isfinite(rs.data)) and np.all(np.isfinite(re.data))


def test_model_initialize_and_forward():
    model = DetectionModel.initialize(feature_dim=6, num_classes=3, levels=3, width=8, seed=1)
    x = np.random.default_rng(2).normal(size=(24, 6))
    f_ms, outs = model.forward(x)
    t_ms = f_ms.layout.total
    assert outs.start_bins.shape == (t_ms, model.grid.bins)
    assert outs.snippet_cls.shape == (t_ms, 3)
    assert outs.video_cls.shape == (24, 3)
    with pytest.raises(ValueError):
        model.forward(np.zeros((10, 5)))


def test_model_init_deterministic():
    a = DetectionModel.initialize(4, 2, levels=2, width=8, seed=3)
    b = DetectionModel.initialize(4, 2, levels=2, width=8, seed=3)
    assert a.params.names() == b.params.names()
    for name in a.params.names():
        assert np.array_equal(a.params[name].data, b.params[name].data)
