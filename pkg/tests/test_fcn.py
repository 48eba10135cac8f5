import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deforest_cd.errors import FormatError, ShapeError
from deforest_cd.fcn import (
    DEFAULT_GRID,
    PARAM_NAMES,
    FocalConfig,
    OptimizerState,
    TrainConfig,
    _forward,
    adam_step,
    backward,
    fcn_forward,
    focal_loss,
    focal_loss_logits,
    init_weights,
    load_weights,
    predict,
    save_weights,
    select_threshold,
    train,
    validation_indices,
)
from oracles import focal_reference, naive_fcn, richardson_derivative


def _weights64(n_in, seed):
    w = init_weights(n_in, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    w.b1[:] = rng.normal(0, 0.1, w.b1.shape)
    w.gamma[:] = rng.uniform(0.5, 1.5, w.gamma.shape)
    w.beta[:] = rng.normal(0, 0.2, w.beta.shape)
    w.b2[:] = rng.normal(0, 0.1, w.b2.shape)
    w.running_mean[:] = rng.normal(0, 0.1, w.running_mean.shape)
    w.running_var[:] = rng.uniform(0.5, 2.0, w.running_var.shape)
    return w


def _params(w):
    return {k: getattr(w, k) for k in (*PARAM_NAMES, "running_mean", "running_var")}


# ---------------------------------------------------------------------------
# forward


def test_zero_weights_give_one_half():
    w = init_weights(3, 0)
    for k in ("w1", "b1", "w2", "b2"):
        getattr(w, k)[:] = 0
    out = fcn_forward(w, np.random.default_rng(0).random((2, 3, 5, 7), dtype=np.float32))
    assert out.shape == (2, 1, 5, 7) and np.all(out == 0.5)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        fcn_forward(init_weights(4, 0), np.zeros((1, 3, 4, 4), np.float32))


@pytest.mark.parametrize("training", [False, True])
def test_forward_matches_naive_conv(training):
    w = _weights64(3, 1).astype(np.float32)
    x = np.random.default_rng(2).standard_normal((2, 3, 8, 8)).astype(np.float32)
    ours = fcn_forward(w, x, training)
    ref = naive_fcn(_params(w), x.astype(np.float64), training, w.eps)
    assert np.abs(ours - ref).max() < 1e-5


def test_bn_training_statistics():
    w = _weights64(2, 3)
    x = np.random.default_rng(4).standard_normal((8, 2, 6, 6))
    _, c = _forward(w, x, training=True)
    bn = c["bn"]
    assert np.allclose(bn.mean(axis=0), w.beta, atol=1e-4)
    assert np.allclose(bn.std(axis=0), np.abs(w.gamma), atol=1e-4)


def test_output_in_open_interval():
    w = init_weights(2, 0)
    out = fcn_forward(w, np.random.default_rng(0).standard_normal((3, 2, 9, 9)).astype(np.float32))
    assert np.all((out > 0) & (out < 1))


# ---------------------------------------------------------------------------
# loss


def test_focal_fixtures():
    assert focal_loss(np.array([0.5]), np.array([1])) == pytest.approx(0.043322, abs=1e-6)
    assert focal_loss(np.array([0.5]), np.array([0])) == pytest.approx(0.129966, abs=1e-6)
    assert focal_loss(np.array([1.0, 0.0]), np.array([1, 0])) < 1e-20


# beyond |z| ~ 15 the reference loses digits computing 1 - p
@given(st.floats(-15, 15), st.integers(0, 1))
def test_logit_form_matches_probability_form(z, y):
    loss, _ = focal_loss_logits(np.array([z]), np.array([y]))
    p = 1.0 / (1.0 + np.exp(-z))
    assert loss == pytest.approx(focal_reference(p, y), rel=1e-6, abs=1e-12)


@given(st.floats(-20, 20), st.integers(0, 1))
def test_logit_gradient(z, y):
    _, g = focal_loss_logits(np.array([z]), np.array([y]))
    num = richardson_derivative(lambda: focal_loss_logits(zz, np.array([y]))[0], zz := np.array([z]), 0, 1e-3)
    assert g[0] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_saturated_logits_stay_finite():
    loss, g = focal_loss_logits(np.array([-800.0, 800.0]), np.array([1, 0]))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


# ---------------------------------------------------------------------------
# gradients


def _fd_check(n_in, seed):
    w = _weights64(n_in, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, n_in, 6, 6))
    y = rng.random((1, 1, 6, 6)) > 0.6
    _, grads, _ = backward(w, x, y)
    worst = 0.0
    for name in PARAM_NAMES:
        p = getattr(w, name)
        f = lambda: backward(w, x, y)[0]
        for idx in np.ndindex(p.shape):
            num = richardson_derivative(f, p, idx, 1e-3)
            a = grads[name][idx]
            if abs(a - num) > 1e-4 * max(abs(a), abs(num), 1e-8):
                # a ReLU kink inside the stencil: retry with a step that cannot reach it
                num = richardson_derivative(f, p, idx, 1e-6)
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


@pytest.mark.parametrize("n_in,seed", [(2, 0), (4, 1)])
def test_gradients_match_finite_differences(n_in, seed):
    assert _fd_check(n_in, seed) < 1e-4


def test_duplicated_batch_keeps_mean_gradient():
    w = _weights64(2, 7)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 5, 5))
    y = rng.random((2, 1, 5, 5)) > 0.5
    l1, g1, _ = backward(w, x, y)
    l2, g2, _ = backward(w, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2)
    for k in PARAM_NAMES:
        assert np.allclose(g1[k], g2[k], atol=1e-10)


def test_dead_relu_units_pass_no_gradient():
    w = _weights64(2, 0)
    w.beta[:] = -1e6  # every hidden unit stays negative
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    _, g, _ = backward(w, x, np.ones((1, 1, 4, 4)))
    for k in ("w1", "b1", "gamma", "beta"):
        assert np.all(g[k] == 0)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_grad_no_decay_is_noop():
    p = {"a": np.array([1.0, -2.0])}
    adam_step(OptimizerState(weight_decay=0.0), p, {"a": np.zeros(2)})
    assert p["a"].tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    p = {"a": np.array([0.5, 0.5, -1.0]), "b": np.array([0.5])}
    g = {"a": np.array([2.0, 2.0, -1e-3]), "b": np.array([2.0])}
    before = {k: v.copy() for k, v in p.items()}
    adam_step(OptimizerState(lr=1e-4, weight_decay=0.0), p, g)
    d = p["a"] - before["a"]
    assert np.all(np.abs(d) <= 1e-4) and np.all(np.abs(d) >= 1e-4 * (1 - 1e-4))
    assert np.all(np.sign(d) == -np.sign(g["a"]))
    assert d[0] == d[1] == (p["b"] - before["b"])[0]


def test_adam_applies_l2_to_gradient():
    p = {"a": np.array([2.0])}
    s = OptimizerState(lr=0.1, weight_decay=0.5)
    adam_step(s, p, {"a": np.array([0.0])})
    assert s.m["a"][0] == pytest.approx(0.1 * 0.5 * 2.0)
    assert p["a"][0] < 2.0


# ---------------------------------------------------------------------------
# threshold and split


def test_select_threshold_examples():
    probs = np.array([0.1, 0.1, 0.9, 0.9])
    masks = np.array([0, 0, 1, 1])
    assert select_threshold(probs, masks) == 0.10
    assert select_threshold(probs, masks, [0.45]) == 0.45
    assert select_threshold(probs, masks, list(reversed(DEFAULT_GRID))) == 0.10


def test_select_threshold_float32_boundary():
    probs = np.array([0.1, 0.9], dtype=np.float32)
    assert select_threshold(probs, np.array([0, 1])) == 0.10


def test_select_threshold_without_positives():
    # no positives anywhere: the first grid value that predicts none wins
    assert select_threshold(np.array([0.3, 0.2]), np.array([0, 0])) == 0.30


def test_validation_split_size_and_order_independence():
    for n in (5, 10, 33, 100):
        assert len(validation_indices(n, 0.2, 0)) == int(np.floor(0.2 * n + 0.5))
    assert validation_indices(50, 0.2, 3) == validation_indices(50, 0.2, 3)
    assert validation_indices(50, 0.2, 3) != validation_indices(50, 0.2, 4)


# ---------------------------------------------------------------------------
# training


def _separable_task(n=20, size=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        y = (rng.random((size, size)) > 0.6).astype(np.uint8)
        x = np.stack([y + 0.3 * rng.standard_normal((size, size)), rng.standard_normal((size, size))]).astype(np.float32)
        out.append((x, y))
    return out


def test_loss_decreases_on_fixed_batch():
    data = _separable_task()
    x = np.stack([d[0] for d in data])
    y = np.stack([d[1] for d in data])
    w = init_weights(2, 0)
    opt = OptimizerState(lr=1e-2)
    losses = []
    for _ in range(10):
        loss, g, _ = backward(w, x, y)
        adam_step(opt, w.params(), g)
        losses.append(loss)
    assert losses[-1] < losses[0] and np.all(np.diff(losses) < 0)


def test_train_is_deterministic_and_logs(tmp_path):
    data = _separable_task()
    cfg = TrainConfig(epochs=4, batch_size=8, lr=1e-2, seed=1, log_path=str(tmp_path / "log.json"))
    a = train(data, cfg)
    b = train(data, cfg)
    for k in (*PARAM_NAMES, "running_mean", "running_var"):
        assert np.array_equal(getattr(a.weights, k), getattr(b.weights, k))
    assert a.threshold == b.threshold and a.threshold in DEFAULT_GRID
    assert len(a.val_indices) == 4 and (tmp_path / "log.json").exists()
    assert a.history[a.best_epoch]["val_f1"] == max(h["val_f1"] for h in a.history)


def test_train_learns_separable_task():
    data = _separable_task(40)
    res = train(data, TrainConfig(epochs=15, batch_size=8, lr=1e-2))
    assert res.history[res.best_epoch]["val_f1"] > 0.9


def test_train_with_augmentation_runs():
    from deforest_cd.preprocess import AugmentConfig

    res = train(_separable_task(), TrainConfig(epochs=2, batch_size=8, augment=AugmentConfig()))
    assert len(res.history) == 2


def test_all_negative_validation_warns():
    data = [(np.random.default_rng(i).standard_normal((1, 4, 4)).astype(np.float32), np.zeros((4, 4), np.uint8)) for i in range(6)]
    with pytest.warns(UserWarning, match="validation loss"):
        res = train(data, TrainConfig(epochs=2, batch_size=4))
    assert res.selected_by == "loss"


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train(_separable_task(1), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)


def test_weights_roundtrip(tmp_path):
    w = _weights64(3, 2).astype(np.float32)
    path = save_weights(w, tmp_path / "w.fcnw", {"threshold": 0.45})
    assert path.read_bytes()[:4] == b"FCNW"
    back, meta = load_weights(path)
    assert meta == {"threshold": 0.45}
    for k in (*PARAM_NAMES, "running_mean", "running_var"):
        assert np.array_equal(getattr(back, k), getattr(w, k))
    x = np.random.default_rng(0).standard_normal((1, 3, 5, 5)).astype(np.float32)
    assert np.array_equal(predict(back, x), predict(w, x))


def test_corrupt_weights(tmp_path):
    path = save_weights(init_weights(2, 0), tmp_path / "w.fcnw")
    raw = path.read_bytes()
    (tmp_path / "bad.fcnw").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "short.fcnw").write_bytes(raw[:-8])
    for name in ("bad", "short"):
        with pytest.raises(FormatError):
            load_weights(tmp_path / f"{name}.fcnw")
