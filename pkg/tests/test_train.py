import numpy as np
import pytest

from midline import model, phantom, train
from midline.losses import NumericError
from midline.model import CarNetConfig
from midline.phantom import PhantomSpec
from midline.train import AdamState, TrainConfig, adam_step, poly_lr

from oracles import adam_scalar

SMALL = CarNetConfig(base_width=4, blocks=(1, 1, 1, 1, 1), se_reduction=2, refine_width=4)


@pytest.fixture(scope="module")
def eight():
    return phantom.generate(PhantomSpec(seed=21), 8)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(poly_power=0.0)
    with pytest.raises(ValueError):
        TrainConfig(poly_power=2.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1e-3)
    with pytest.raises(ValueError):
        TrainConfig(betas=(0.9, 1.0))


def test_adam_one_step_matches_scalar_oracle():
    p = {"a": np.array([0.3, -1.2])}
    state = AdamState()
    rng = np.random.default_rng(0)
    ref = [(0.3, 0.0, 0.0), (-1.2, 0.0, 0.0)]
    for t in range(1, 6):
        g = rng.standard_normal(2)
        adam_step(p, {"a": g}, state, 1e-3)
        ref = [adam_scalar(x, gi, m, v, t, 1e-3, 0.9, 0.99, 1e-8) for (x, m, v), gi in zip(ref, g)]
        for i in range(2):
            assert abs(p["a"][i] - ref[i][0]) <= 1e-12
            assert abs(state.m["a"][i] - ref[i][1]) <= 1e-12
            assert abs(state.v["a"][i] - ref[i][2]) <= 1e-12


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = {"a": np.array([1.0, 2.0])}
    state = AdamState()
    adam_step(p, {"a": np.array([0.5, -0.5])}, state, 1e-2)
    before = p["a"].copy()
    m, v = state.m["a"].copy(), state.v["a"].copy()
    adam_step(p, {"a": np.zeros(2)}, state, 0.0)
    np.testing.assert_array_equal(p["a"], before)
    np.testing.assert_allclose(state.m["a"], 0.9 * m, rtol=1e-15)
    np.testing.assert_allclose(state.v["a"], 0.99 * v, rtol=1e-15)


def test_adam_constant_gradient_steps_are_lr_times_sign():
    g = np.array([3.0, -0.02, 50.0])
    p = {"a": np.zeros(3)}
    state = AdamState()
    lr = 1e-3
    for _ in range(200):
        prev = p["a"].copy()
        adam_step(p, {"a": g}, state, lr)
    np.testing.assert_allclose(prev - p["a"], lr * np.sign(g), rtol=1e-6)


def test_adam_nonfinite_gradient_names_tensor():
    with pytest.raises(NumericError, match="enc"):
        adam_step({"enc": np.zeros(2)}, {"enc": np.array([np.inf, 0.0])}, AdamState(), 1e-3)


def test_poly_lr():
    assert poly_lr(0, 100, 1e-3) == 1e-3
    assert poly_lr(100, 100, 1e-3) == 0.0
    assert poly_lr(50, 100, 1e-3, 0.9) == pytest.approx(1e-3 * 0.5 ** 0.9, rel=1e-15)
    lrs = [poly_lr(i, 37, 1.0, p) for p in (0.5, 0.9, 2.0) for i in range(38)]
    for k in range(3):
        seq = lrs[k * 38:(k + 1) * 38]
        assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        poly_lr(101, 100, 1e-3)


def test_flip_is_consistent(eight):
    flip = np.array([True, False] * 4)
    plain = train.make_batch(eight, np.float64)
    fl = train.make_batch(eight, np.float64, flip)
    w = plain.images.shape[-1]
    np.testing.assert_array_equal(fl.images[0], plain.images[0][..., ::-1])
    np.testing.assert_array_equal(fl.images[1], plain.images[1])
    np.testing.assert_array_equal(fl.coords[0], (w - 1) - plain.coords[0])
    np.testing.assert_array_equal(fl.band[0], plain.band[0][:, ::-1])
    np.testing.assert_array_equal(fl.limits, plain.limits)
    # the flipped band is still centred on the flipped coordinates
    for y in np.flatnonzero(fl.limits[0]):
        cols = np.flatnonzero(fl.band[0, y])
        assert cols.mean() == fl.coords[0, y]


def test_one_epoch_batch_two_is_four_steps(eight):
    _, rec = train.train_midline(eight, TrainConfig(epochs=1, batch_size=2), SMALL)
    assert rec.steps == 4
    assert len(rec.epoch_losses) == 1


def test_training_is_deterministic(eight):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    a, _ = train.train_midline(eight, cfg, SMALL)
    b, _ = train.train_midline(eight, cfg, SMALL)
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c, _ = train.train_midline(eight, TrainConfig(epochs=2, batch_size=4, seed=6), SMALL)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_training_reduces_loss(eight):
    _, rec = train.train_midline(eight, TrainConfig(epochs=6, batch_size=4, lr=3e-3), SMALL)
    assert rec.epoch_losses[-1]["total"] < rec.epoch_losses[0]["total"]


def test_nonfinite_input_aborts_with_epoch_and_batch(eight):
    bad = list(eight)
    broken = phantom.Sample(**vars(bad[3]))
    broken.aligned = broken.aligned.copy()
    broken.aligned[10, 10] = np.nan
    bad[3] = broken
    with pytest.raises(NumericError, match=r"epoch 0, batch \d"):
        train.train_midline(bad, TrainConfig(epochs=1, batch_size=8, hflip=False), SMALL)


def test_evaluate_ground_truth_predictions_score_zero(eight):
    lim = np.stack([s.limits for s in eight]).astype(float)
    crd = np.stack([s.coords for s in eight])
    summary = train.evaluate(None, eight, SMALL, predictions=(lim, crd))
    for k in ("lde", "msde", "hd", "asd", "connectivity"):
        assert summary.mean[k] == 0.0


def test_evaluate_writes_reports_and_overlays(tmp_path, eight):
    params = model.init_params(SMALL, seed=0)
    summary = train.evaluate(params, eight, SMALL, out_dir=tmp_path, worst_k=3)
    assert (tmp_path / "per_sample.csv").exists() and (tmp_path / "summary.csv").exists()
    assert set(summary.undefined) >= {"lde", "hd"}
    assert len(list((tmp_path / "overlays").glob("*.png"))) == 3


def test_weights_round_trip(tmp_path):
    params = model.init_params(SMALL, seed=1, dtype=np.float32)
    train.save_weights(tmp_path / "w.blob", params)
    back = train.load_weights(tmp_path / "w.blob")
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
