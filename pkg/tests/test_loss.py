import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sardet.loss import LossConfig, bce_weighted, detection_loss, dice_loss, mim_loss
from sardet.tensor import ShapeError, Tensor
from sardet.tensor import core as F
from sardet.tensor.gradcheck import check_gradients


def T(a, dt=np.float64):
    return Tensor(np.asarray(a, dtype=dt))


def test_config_defaults_and_validation():
    c = LossConfig()
    assert (c.alpha_bce, c.beta_dice) == (0.05, 1.0)
    with pytest.raises(ValueError):
        LossConfig(alpha_bce=0.0, beta_dice=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha_bce=-1.0)


def test_bce_zero_logits_is_ln2():
    out = bce_weighted(T(np.zeros((4, 4))), np.zeros((4, 4)))
    assert out.item() == pytest.approx(math.log(2))


def test_bce_confident_prediction_vanishes():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert bce_weighted(T((2 * y - 1) * 40), y).item() < 1e-15


def test_bce_masked_two_by_two_by_hand():
    z = np.array([[2.0, -1.0], [0.5, 3.0]])
    y = np.array([[1.0, 0.0], [0.0, 0.0]])
    valid = np.array([[True, False], [True, False]])
    w = (3.0, 0.5)
    # hand oracle: pixel (0,0) is fg with weight 3, pixel (1,0) is bg with weight 0.5
    p00, p10 = 1 / (1 + math.exp(-2.0)), 1 / (1 + math.exp(-0.5))
    want = (3.0 * -math.log(p00) + 0.5 * -math.log(1 - p10)) / 2
    assert bce_weighted(T(z), y, valid, w).item() == pytest.approx(want, rel=1e-12)


def test_bce_no_valid_pixels_warns(caplog):
    with caplog.at_level("WARNING"):
        out = bce_weighted(T(np.ones((2, 2))), np.ones((2, 2)), np.zeros((2, 2), bool))
    assert out.item() == 0.0
    assert "no valid pixels" in caplog.text


def test_dice_examples():
    y = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    assert dice_loss(T(y), y).item() == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(T(1 - y), y, smooth=1e-12).item() == pytest.approx(1.0, abs=1e-9)
    p = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    assert dice_loss(T(p), y).item() == pytest.approx(1 - 4 / 6, abs=1e-6)


def test_shape_errors():
    with pytest.raises(ShapeError):
        bce_weighted(T(np.zeros((2, 2))), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        dice_loss(T(np.zeros((2, 2))), np.zeros((2, 2)), np.ones((3, 3), bool))
    with pytest.raises(ShapeError):
        mim_loss(T(np.zeros((2, 2))), np.zeros((1, 2)), np.ones((2, 2), bool))


def scene(seed, shape=(2, 1, 6, 6)):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, shape)
    y = np.clip(rng.random(shape) * 1.6 - 0.4, 0, 1)
    valid = rng.random(shape) > 0.3
    return z, y, valid


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), wf=st.floats(1.0, 5.0), wb=st.floats(1.0, 5.0))
def test_invalid_pixels_do_not_matter(seed, wf, wb):
    z, y, valid = scene(seed)
    rng = np.random.default_rng(seed + 1)
    z2, y2 = z.copy(), y.copy()
    z2[~valid] = rng.normal(0, 10, (~valid).sum())
    y2[~valid] = rng.random((~valid).sum())
    a = detection_loss(T(z), y, valid, (wf, wb)).item()
    b = detection_loss(T(z2), y2, valid, (wf, wb)).item()
    assert a == pytest.approx(b, rel=1e-12)
    assert a >= 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(0.1, 10.0))
def test_common_weight_scaling(seed, k):
    z, y, valid = scene(seed)
    b1 = bce_weighted(T(z), y, valid, (2.0, 1.5)).item()
    bk = bce_weighted(T(z), y, valid, (2.0 * k, 1.5 * k)).item()
    assert bk == pytest.approx(k * b1, rel=1e-10)


def test_unit_weights_reduce_to_plain_composite():
    z, y, valid = scene(3)
    cfg = LossConfig()
    want = 0.05 * bce_weighted(T(z), y, valid).item() + dice_loss(F.sigmoid(T(z)), y, valid).item()
    assert detection_loss(T(z), y, valid, (1.0, 1.0), cfg).item() == pytest.approx(want, rel=1e-12)
    assert detection_loss(T(z), y, valid, cfg=LossConfig(alpha_bce=1.0, beta_dice=0.0)).item() == \
        pytest.approx(bce_weighted(T(z), y, valid).item())


@pytest.mark.parametrize("seed", range(4))
def test_detection_loss_gradient(seed):
    _, y, valid = scene(seed, (1, 1, 5, 5))
    z0 = np.random.default_rng(seed).normal(0, 1.5, (1, 1, 5, 5))
    fn = lambda z: detection_loss(z, y, valid, (3.0, 1.0), LossConfig(alpha_bce=0.5))
    assert check_gradients(fn, [z0]) < 1e-4


def test_mim_loss_examples():
    rng = np.random.default_rng(0)
    tgt = rng.standard_normal((1, 1, 8, 8))
    mask = np.zeros((8, 8), bool)
    mask[:4] = True
    assert mim_loss(T(tgt), tgt, mask).item() == 0.0
    assert mim_loss(T(tgt + 0.25), tgt, mask).item() == pytest.approx(0.25)
    pert = tgt.copy()
    pert[..., 4:, :] += 100.0
    assert mim_loss(T(pert), tgt, mask).item() == 0.0
    valid = np.ones((8, 8), bool)
    valid[0] = False
    off = tgt.copy()
    off[..., 0, :] += 9.0
    assert mim_loss(T(off), tgt, mask, valid).item() == 0.0
    with pytest.raises(ValueError):
        mim_loss(T(tgt), tgt, np.zeros((8, 8), bool))
