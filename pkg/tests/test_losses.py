"""Loss terms: values at hand-computed points, masks, gradients."""

import numpy as np
import pytest

from bindet.autodiff import ParamSet, Tensor, evaluate_with_gradients
from bindet.losses import (
    LossBreakdown,
    LossConfig,
    binning_loss,
    classification_losses,
    combine_losses,
    refine_loss,
)
from bindet.targets import UNASSIGNED

from oracles import finite_difference_grads, gradient_mismatch

UNIT = LossConfig(norm=1.0)

LN2 = 0.6931471805599453
FOCAL_HALF_AT_ONE = 0.17328679513998632  # -(1-0.5)^2 * ln(0.5)


def _zeros_like_inputs(shape, value):
    return Tensor(np.full(shape, value))


def test_focal_perfect_positive_prediction_is_tiny():
    pred = _zeros_like_inputs((1, 1), 1.0 - 1e-9)
    target = np.ones((1, 1))
    loss = binning_loss(pred, _zeros_like_inputs((1, 1), 0.5), target, np.zeros((1, 1)), UNIT)
    # positive branch vanishes as p -> 1; the 0.5-at-zero half contributes the rest
    assert loss.item() < 0.2


def test_focal_half_probability_at_positive_target():
    pred = _zeros_like_inputs((1, 1), 0.5)
    zero_pred = _zeros_like_inputs((1, 1), 1e-12)
    loss = binning_loss(pred, zero_pred, np.ones((1, 1)), np.zeros((1, 1)), UNIT)
    assert loss.item() == pytest.approx(FOCAL_HALF_AT_ONE, abs=1e-9)


def test_focal_all_zero_targets_epsilon_predictions():
    pred = _zeros_like_inputs((4, 8), 1e-9)
    loss = binning_loss(pred, pred, np.zeros((4, 8)), np.zeros((4, 8)), UNIT)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_focal_soft_targets_reduce_negative_penalty():
    # a bin with near-peak target must be penalized far less than a far bin
    cfg = LossConfig(norm=1.0, focal_variant="soft")
    near = binning_loss(
        _zeros_like_inputs((1, 1), 0.6), _zeros_like_inputs((1, 1), 1e-12),
        np.array([[0.85]]), np.zeros((1, 1)), cfg
    ).item()
    far = binning_loss(
        _zeros_like_inputs((1, 1), 0.6), _zeros_like_inputs((1, 1), 1e-12),
        np.array([[0.05]]), np.zeros((1, 1)), cfg
    ).item()
    assert near < far
    assert near == pytest.approx((0.15**4) * 0.36 * -np.log1p(-0.6), rel=1e-9)


def test_focal_binarized_variant():
    cfg = LossConfig(norm=1.0, focal_variant="binarized", binarize_threshold=0.5)
    # target 0.85 > 0.5 becomes a hard positive
    loss = binning_loss(
        _zeros_like_inputs((1, 1), 0.5), _zeros_like_inputs((1, 1), 1e-12),
        np.array([[0.85]]), np.zeros((1, 1)), cfg
    )
    assert loss.item() == pytest.approx(FOCAL_HALF_AT_ONE, abs=1e-9)


def test_focal_rejects_bad_probabilities():
    with pytest.raises(ValueError, match="outside"):
        binning_loss(
            _zeros_like_inputs((1, 1), 1.5), _zeros_like_inputs((1, 1), 0.5),
            np.ones((1, 1)), np.zeros((1, 1)), UNIT
        )
    with pytest.raises(ValueError, match="outside"):
        binning_loss(
            _zeros_like_inputs((1, 1), 0.5), _zeros_like_inputs((1, 1), -0.1),
            np.ones((1, 1)), np.zeros((1, 1)), UNIT
        )


def test_smooth_l1_values():
    # |err| = 0.5 inside the quadratic zone: 0.5 * 0.25 = 0.125
    pred = Tensor(np.array([[0.5]]))
    target = np.array([[0.0]])
    loss = refine_loss(pred, Tensor(np.zeros((1, 1))), target, np.full((1, 1), UNASSIGNED), UNIT)
    assert loss.item() == pytest.approx(0.125, abs=1e-12)
    # |err| = 2 in the linear zone: 2 - 0.5 = 1.5
    pred2 = Tensor(np.array([[2.0]]))
    loss2 = refine_loss(pred2, Tensor(np.zeros((1, 1))), target, np.full((1, 1), UNASSIGNED), UNIT)
    assert loss2.item() == pytest.approx(1.5, abs=1e-12)


def test_smooth_l1_ignores_unassigned_bins():
    rng = np.random.default_rng(0)
    pred = Tensor(rng.normal(size=(6, 4)) * 100)
    target = np.full((6, 4), UNASSIGNED)
    target[2, 1] = 0.25
    loss_a = refine_loss(pred, Tensor(np.zeros((6, 4))), target, np.full((6, 4), UNASSIGNED), UNIT)
    # stored values at unassigned bins are arbitrary; try another pred there
    pred_b = Tensor(pred.data.copy())
    pred_b.data[0, 0] = 1e9
    mask_same = refine_loss(pred_b, Tensor(np.zeros((6, 4))), target, np.full((6, 4), UNASSIGNED), UNIT)
    assert loss_a.item() == mask_same.item()


def test_no_assigned_bins_gives_zero():
    pred = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    inf = np.full((5, 3), UNASSIGNED)
    assert refine_loss(pred, pred, inf, inf, UNIT).item() == 0.0


def test_bce_values():
    half = Tensor(np.array([[0.5]]))
    snippet, video = classification_losses(
        half, np.array([[1.0]]), Tensor(np.array([0.5])), np.array([0.0]), UNIT
    )
    assert snippet.item() == pytest.approx(LN2, abs=1e-12)
    assert video.item() == pytest.approx(LN2, abs=1e-12)


def test_video_loss_uses_norm():
    cfg = LossConfig(norm=90.0)
    _, video = classification_losses(
        Tensor(np.array([[1e-12]])), np.array([[0.0]]), Tensor(np.array([0.5])), np.array([0.0]), cfg
    )
    assert video.item() == pytest.approx(LN2 / 90.0, abs=1e-12)


def test_bce_perfect_predictions_near_zero():
    eps = 1e-9
    p = Tensor(np.array([[1.0 - eps, eps]]))
    y = np.array([[1.0, 0.0]])
    snippet, _ = classification_losses(p, y, Tensor(np.array([eps])), np.array([0.0]), UNIT)
    assert snippet.item() < 1e-8


def test_norm_scaling():
    pred = Tensor(np.array([[0.5]]))
    t = np.ones((1, 1))
    a = binning_loss(pred, pred, t, t, LossConfig(norm=1.0)).item()
    b = binning_loss(pred, pred, t, t, LossConfig(norm=90.0)).item()
    assert a == pytest.approx(90.0 * b, rel=1e-12)


def test_combine_losses_examples():
    zero = Tensor(0.0)
    total, bd = combine_losses(zero, zero, zero, zero)
    assert total.item() == 0.0 and bd.total == 0.0
    total2, bd2 = combine_losses(Tensor(1.0), Tensor(2.0), Tensor(3.0), Tensor(4.0))
    assert total2.item() == 10.0
    assert bd2 == LossBreakdown(1.0, 2.0, 3.0, 4.0, 10.0)
    assert bd2.total == bd2.binning + bd2.refine + bd2.snippet + bd2.video


def test_combine_matches_recomputed_sum():
    rng = np.random.default_rng(7)
    for _ in range(10):
        parts = [Tensor(float(rng.uniform(0, 5))) for _ in range(4)]
        total, bd = combine_losses(*parts)
        assert total.item() == pytest.approx(sum(p.item() for p in parts), rel=1e-12)


def _loss_gradcheck(build, init, low=0.05, high=0.95):
    """Gradcheck a loss that consumes a single (4,3) prediction array."""
    rng = np.random.default_rng(13)
    params = ParamSet()
    params.add("p", init(rng))

    _, grads = evaluate_with_gradients(lambda q: build(q["p"]), params)

    def scalar(raw):
        params.assign("p", raw["p"])
        return build(params["p"]).item()

    raw = {"p": params["p"].data.copy()}
    fd = finite_difference_grads(scalar, raw)
    assert gradient_mismatch(grads["p"], fd["p"]) < 1e-6


def test_focal_gradient_matches_fd():
    rng0 = np.random.default_rng(21)
    target = rng0.uniform(0, 1, size=(4, 3))
    target[0, 0] = 1.0  # exercise the positive branch
    other = Tensor(np.full((4, 3), 0.4))
    _loss_gradcheck(
        lambda p: binning_loss(p, other, target, np.zeros((4, 3)), UNIT),
        lambda rng: rng.uniform(0.1, 0.9, size=(4, 3)),
    )


def test_focal_soft_variant_gradient_matches_fd():
    rng0 = np.random.default_rng(23)
    target = rng0.uniform(0, 1, size=(4, 3))
    target[0, 0] = 1.0  # exercise the positive branch
    other = Tensor(np.full((4, 3), 0.4))
    cfg = LossConfig(norm=1.0, focal_variant="soft")
    _loss_gradcheck(
        lambda p: binning_loss(p, other, target, np.zeros((4, 3)), cfg),
        lambda rng: rng.uniform(0.1, 0.9, size=(4, 3)),
    )


def test_refine_gradient_matches_fd():
    target = np.full((4, 3), UNASSIGNED)
    target[1, 1] = 0.3
    target[2, 0] = -1.7  # linear zone for some entries
    other = Tensor(np.zeros((4, 3)))
    _loss_gradcheck(
        lambda p: refine_loss(p, other, target, np.full((4, 3), UNASSIGNED), UNIT),
        lambda rng: rng.normal(size=(4, 3)) * 2,
    )


def test_bce_gradient_matches_fd():
    rng0 = np.random.default_rng(22)
    target = (rng0.uniform(size=(4, 3)) < 0.5).astype(float)
    vid_p = Tensor(np.array([0.5, 0.5, 0.5]))
    vid_y = np.array([1.0, 0.0, 1.0])
    _loss_gradcheck(
        lambda p: classification_losses(p, target, vid_p, vid_y, UNIT)[0],
        lambda rng: rng.uniform(0.1, 0.9, size=(4, 3)),
    )
