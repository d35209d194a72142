from types import SimpleNamespace

import numpy as np
import pytest

from midline.autodiff import Tensor, gradcheck, ops
from midline.losses import (LossWeights, NumericError, apply_phi, check_delta_connectivity, crl,
                            crl_subgradient, phi_matrix, total_loss)
from midline.model import ModelOutput

from oracles import crl_dense, phi_apply_dense, phi_dense, total_loss_loop


def fuzz_vectors(n, seed=0):
    """Random walks whose steps straddle the unit margin, including exact +-1 steps."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        length = int(rng.integers(1, 65))
        kind = i % 3
        if kind == 0:
            steps = rng.integers(-2, 3, size=length).astype(np.float64)
        elif kind == 1:
            steps = rng.uniform(-1.5, 1.5, size=length)
        else:
            steps = rng.choice([-1.0, 0.0, 1.0, 0.5, -0.25], size=length)
        out.append(rng.uniform(0, 100) + np.cumsum(steps))
    return out


def test_phi_examples():
    np.testing.assert_array_equal(apply_phi([5, 5, 5, 5]), [0, 0, 0, 0])
    np.testing.assert_array_equal(apply_phi([3, 5, 8]), [0, 2, 3])
    np.testing.assert_array_equal(phi_dense(3) @ np.array([3.0, 5.0, 8.0]), [0, 2, 3])
    np.testing.assert_array_equal(phi_matrix(6), phi_dense(6))


def test_phi_banded_equals_dense_length64():
    x = np.random.default_rng(7).standard_normal(64) * 30
    a = apply_phi(x)
    np.testing.assert_array_equal(a, phi_dense(64) @ x)
    np.testing.assert_array_equal(a, phi_apply_dense(x))


def test_phi_tensor_path_matches_array():
    x = np.random.default_rng(2).standard_normal((3, 9))
    np.testing.assert_array_equal(apply_phi(Tensor(x)).data, apply_phi(x))


def test_crl_examples():
    assert crl(np.array([3.0, 5.0, 8.0]), 1.0) == 3.0
    assert crl(np.array([0.0, 0.0, 10.0, 10.0]), 1.0) == 9.0
    assert crl(np.array([0.0, 1.0, 2.0, 1.0, 1.5]), 1.0) == 0.0
    assert check_delta_connectivity(np.full(7, 4.2))
    assert not check_delta_connectivity(np.array([0.0, 2.0]), 1.0)
    with pytest.raises(ValueError):
        crl(np.zeros(3), 0.0)


def test_crl_fuzz_against_dense_oracle():
    for x in fuzz_vectors(10_000):
        delta = 1.0
        dense = phi_dense(len(x)) @ x
        np.testing.assert_array_equal(apply_phi(x), dense)
        value = crl(x, delta)
        ref = float(np.sum(np.maximum(np.abs(dense) - delta, 0.0)))
        assert abs(value - ref) <= 1e-12
        assert (value == 0.0) == check_delta_connectivity(x, delta)


def test_crl_loop_oracle_sample():
    for x in fuzz_vectors(300, seed=4):
        assert abs(crl(x, 0.75) - crl_dense(x, 0.75)) <= 1e-12


def test_crl_shift_invariance_exact():
    rng = np.random.default_rng(3)
    for _ in range(500):
        x = rng.integers(-400, 400, size=int(rng.integers(2, 40))) / 8.0   # dyadic, so sums are exact
        c = float(rng.integers(-1000, 1000))
        assert crl(x + c, 1.0) == crl(x, 1.0)


def test_crl_convex():
    rng = np.random.default_rng(5)
    for _ in range(2000):
        n = int(rng.integers(2, 40))
        x, y = rng.standard_normal(n) * 3, rng.standard_normal(n) * 3
        assert crl((x + y) / 2, 1.0) <= (crl(x, 1.0) + crl(y, 1.0)) / 2 + 1e-12


def _away_from_kinks(rng, n, delta=1.0):
    while True:
        x = np.cumsum(rng.uniform(-2.5, 2.5, size=n))
        d = np.abs(np.diff(x))
        if np.all(np.abs(d - delta) > 1e-3) and np.all(d > 1e-3):
            return x


def test_crl_gradcheck_and_subgradient():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = _away_from_kinks(rng, 12)
        assert gradcheck(lambda t: crl(t, 1.0), [x], step=1e-5) < 1e-4
        t = Tensor(x, requires_grad=True)
        crl(t, 1.0).backward()
        np.testing.assert_allclose(t.grad, crl_subgradient(x, 1.0), atol=1e-15)
        h = 1e-6
        fd = np.array([(crl(x + h * e, 1.0) - crl(x - h * e, 1.0)) / (2 * h) for e in np.eye(12)])
        np.testing.assert_allclose(crl_subgradient(x, 1.0), fd, atol=1e-6)


def test_crl_masked_and_batched():
    x = np.array([[0.0, 5.0, 5.5, 6.0, 20.0, 21.0],
                  [1.0, 1.0, 4.0, 4.0, 4.0, 4.0]])
    mask = np.array([[0, 1, 1, 1, 0, 0],
                     [1, 1, 1, 1, 1, 1]], dtype=bool)
    # first curve: only pairs inside rows 1..3 count -> 0; second: one jump of 3 -> 2
    assert crl(x, 1.0, mask=mask) == pytest.approx((0.0 + 2.0) / 2)
    assert float(crl(Tensor(x), 1.0, mask=mask).data) == pytest.approx(1.0)
    assert crl(x, 1.0) == pytest.approx(crl_dense(x, 1.0))


# --------------------------------------------------------------- total loss

def _fixture(h=8, w=6, seed=0):
    rng = np.random.default_rng(seed)
    limits_t = np.zeros(h)
    limits_t[1:7] = 1
    coords_t = np.array([2.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 4.0])
    band_t = np.zeros((h, w))
    for y in range(h):
        band_t[y, int(coords_t[y])] = 1
    zl = rng.standard_normal(h)
    zb = rng.standard_normal((h, w))
    coords = coords_t + rng.uniform(-2.5, 2.5, h)
    return zl, zb, coords, limits_t, band_t, coords_t


def _out(zl, zb, coords):
    return ModelOutput(Tensor(zl[None]), Tensor(zb[None]), Tensor(coords[None]))


def _target(limits_t, band_t, coords_t):
    return SimpleNamespace(limits=limits_t[None], band=band_t[None], coords=coords_t[None])


def test_total_loss_matches_scalar_fixture():
    zl, zb, coords, limits_t, band_t, coords_t = _fixture()
    w = LossWeights()
    terms = total_loss(_out(zl, zb, coords), _target(limits_t, band_t, coords_t), w)
    sig = lambda z: 1 / (1 + np.exp(-z))
    ref = total_loss_loop(sig(zl), sig(zb), coords, limits_t, band_t, coords_t, w)
    assert abs(float(terms.total.data) - ref) < 1e-10


def test_total_loss_mu_zero_is_three_terms():
    zl, zb, coords, limits_t, band_t, coords_t = _fixture(seed=1)
    terms = total_loss(_out(zl, zb, coords), _target(limits_t, band_t, coords_t),
                       LossWeights(mu=0.0))
    assert terms.crl > 0
    assert float(terms.total.data) == (terms.limits + terms.seg) + terms.reg


def test_total_loss_perfect_prediction():
    _, _, _, limits_t, band_t, coords_t = _fixture()
    zl = np.where(limits_t > 0.5, 30.0, -30.0)
    zb = np.where(band_t > 0.5, 30.0, -30.0)
    terms = total_loss(_out(zl, zb, coords_t.copy()), _target(limits_t, band_t, coords_t))
    assert terms.reg == 0.0 and terms.crl == 0.0
    assert terms.limits < 1e-12 and terms.seg < 1e-11


def test_total_loss_gradcheck():
    zl, zb, coords, limits_t, band_t, coords_t = _fixture(seed=2)
    tgt = _target(limits_t, band_t, coords_t)
    # keep coordinates away from L1 and hinge kinks
    coords = coords_t + np.array([0.4, -0.6, 1.7, -2.3, 0.8, 2.6, -0.3, 0.5])
    fn = lambda a, b, c: total_loss(ModelOutput(a, b, c), tgt).total
    assert gradcheck(fn, [zl[None], zb[None], coords[None]]) < 1e-4


def test_total_loss_nonfinite_names_term():
    zl, zb, coords, limits_t, band_t, coords_t = _fixture()
    coords = coords.copy()
    coords[3] = np.nan
    with pytest.raises(NumericError, match="reg"):
        total_loss(_out(zl, zb, coords), _target(limits_t, band_t, coords_t))


def test_total_loss_shape_mismatch():
    zl, zb, coords, limits_t, band_t, coords_t = _fixture()
    with pytest.raises(ValueError):
        total_loss(_out(zl, zb, coords), _target(limits_t, band_t[:, :4], coords_t))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(mu=-1)
    with pytest.raises(ValueError):
        LossWeights(delta=0)


def test_l1_mask_ignores_absent_rows():
    pred = Tensor(np.array([1.0, 100.0, 3.0]))
    val = ops.l1_loss(pred, np.array([0.0, 0.0, 1.0]), np.array([1, 0, 1], dtype=bool))
    assert float(val.data) == pytest.approx(1.5)
