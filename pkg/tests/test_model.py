from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_simplex
from proreg.fileio import ChecksumError, FileFormatError, TruncatedFileError
from proreg.losses import LossMode, loss_breakdown, numerical_gradient
from proreg.model import (
    LinearModel,
    OptimizerState,
    TrainConfig,
    TrainingError,
    checkpoint_bytes,
    config_hash,
    forward,
    init_ft,
    init_ft_plus,
    load_checkpoint,
    model_from_checkpoint_bytes,
    parameter_gradients,
    predict,
    save_checkpoint,
    train,
    train_step,
)
from proreg.probs import InvalidInputError, InvalidParameterError, one_hot

MODES = [LossMode.ft(), LossMode.kd(0.4), LossMode.proreg(2.0)]


def _batch(seed, n=12, d=6, k=4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    labels = rng.integers(k, size=n)
    return x, labels, one_hot(labels, k), random_simplex(rng, k, size=n)


def _mean_loss(model, x, y, y_zs, mode, w=None):
    _, f = forward(model, x)
    if mode.kind == "proreg" and w is not None:
        parts = loss_breakdown(mode, f, y, y_zs)
        return float(np.mean((1 - w) * parts.ce + mode.param * w * parts.kl))
    return float(np.mean(loss_breakdown(mode, f, y, y_zs).total))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(range(3)), st.sampled_from([0.5, 1.0, 3.0]))
def test_parameter_gradients_match_fd(seed, mode_idx, tau):
    mode = MODES[mode_idx]
    x, _, y, y_zs = _batch(seed)
    model = init_ft(6, 4, seed, tau)
    gw, gb, _ = parameter_gradients(model, x, y, y_zs, mode)
    from proreg.losses import proreg_weight
    w = proreg_weight(predict(model, x), y, y_zs)

    def loss_w(flat):
        return _mean_loss(replace(model, weights=flat.reshape(4, 6)), x, y, y_zs, mode, w)

    def loss_b(b):
        return _mean_loss(replace(model, bias=b), x, y, y_zs, mode, w)

    np.testing.assert_allclose(gw.ravel(), numerical_gradient(loss_w, model.weights.ravel()), atol=1e-6)
    np.testing.assert_allclose(gb, numerical_gradient(loss_b, model.bias), atol=1e-6)


def test_plain_descent_step_is_lr_times_gradient():
    x, labels, y, y_zs = _batch(1)
    model = init_ft(6, 4, 0, temperature=1.0)
    cfg = TrainConfig(optimizer="momentum", momentum=0.0, weight_decay=0.0, lr=0.1)
    gw, gb, _ = parameter_gradients(model, x, y, y_zs, cfg.mode)
    new, _, _ = train_step(model, x, y, y_zs, cfg, OptimizerState.zeros_like(model))
    np.testing.assert_allclose(new.weights, model.weights - 0.1 * gw, atol=1e-15)
    # Per-sample logit delta is -lr * (f - y) * (|x|^2 + 1) for a single sample.
    one = replace(model)
    xi, yi = x[:1], y[:1]
    f = predict(one, xi)
    stepped, _, _ = train_step(one, xi, yi, y_zs[:1], cfg, OptimizerState.zeros_like(one))
    delta = forward(stepped, xi)[0] - forward(one, xi)[0]
    np.testing.assert_allclose(delta, -0.1 * (f - yi) * (xi @ xi.T + 1.0), atol=1e-12)


@pytest.mark.parametrize("optimizer", ["adamw", "momentum"])
@pytest.mark.parametrize("mode", MODES, ids=str)
def test_small_steps_descend(optimizer, mode):
    x, _, y, y_zs = _batch(2, n=64)
    model = init_ft(6, 4, 3, temperature=1.0)
    cfg = TrainConfig(mode=mode, optimizer=optimizer, lr=1e-3, weight_decay=0.0)
    before = _mean_loss(model, x, y, y_zs, mode)
    new, _, _ = train_step(model, x, y, y_zs, cfg, OptimizerState.zeros_like(model))
    assert _mean_loss(new, x, y, y_zs, mode) < before


def test_zero_learning_rate_is_identity():
    x, labels, _, y_zs = _batch(3, n=40)
    model = init_ft(6, 4, 1)
    out, _ = train(model, x, labels, y_zs, TrainConfig(mode=LossMode.proreg(), lr=0.0, epochs=2, batch_size=16))
    assert out.same_as(model)


def test_training_is_deterministic():
    x, labels, _, y_zs = _batch(4, n=100)
    cfg = TrainConfig(mode=LossMode.proreg(), epochs=3, batch_size=32, seed=5)
    a, ha = train(init_ft(6, 4, 0), x, labels, y_zs, cfg)
    b, hb = train(init_ft(6, 4, 0), x, labels, y_zs, cfg)
    assert a.same_as(b) and ha.totals == hb.totals


def test_step_budget():
    x, labels, _, y_zs = _batch(4, n=100)
    _, hist = train(init_ft(6, 4, 0), x, labels, y_zs, TrainConfig(epochs=3, batch_size=32))
    assert len(hist.losses) == 3 * 4
    _, hist = train(init_ft(6, 4, 0), x, labels, y_zs, TrainConfig(epochs=3, batch_size=32, max_steps=5))
    assert len(hist.losses) == 5


def test_warmup_starts_small():
    x, labels, y, y_zs = _batch(5, n=64)
    model = init_ft(6, 4, 0)
    base = TrainConfig(weight_decay=0.0)
    plain, _, _ = train_step(model, x, y, y_zs, base, OptimizerState.zeros_like(model), 100)
    warm, _, _ = train_step(model, x, y, y_zs, replace(base, warmup=True), OptimizerState.zeros_like(model), 100)
    assert np.abs(warm.weights - model.weights).max() < np.abs(plain.weights - model.weights).max()


def test_weight_decay_only_touches_weights():
    model = LinearModel(np.ones((2, 3)), np.array([0.3, -0.3]), 1.0)
    # Zero input: the loss gradient on W vanishes, so W moves by decay alone.
    x, y, y_zs = np.zeros((1, 3)), one_hot([0], 2), np.array([[0.5, 0.5]])
    decayed, _, _ = train_step(model, x, y, y_zs, TrainConfig(lr=0.1, weight_decay=0.5),
                               OptimizerState.zeros_like(model))
    plain, _, _ = train_step(model, x, y, y_zs, TrainConfig(lr=0.1, weight_decay=0.0),
                             OptimizerState.zeros_like(model))
    np.testing.assert_allclose(decayed.weights, 0.95)
    assert decayed.bias.tobytes() == plain.bias.tobytes()


def test_non_finite_raises():
    model = LinearModel(np.full((2, 2), 1e300), np.zeros(2), 1e-300)
    x = np.ones((1, 2)) * 1e10
    with pytest.raises((TrainingError, InvalidInputError, FloatingPointError)):
        with np.errstate(all="ignore"):
            train_step(model, x, one_hot([0], 2), np.array([[0.5, 0.5]]), TrainConfig(),
                       OptimizerState.zeros_like(model))


def test_ft_plus_init_reproduces_zero_shot():
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((3, 5))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    model = init_ft_plus(emb, 0.01)
    x = rng.standard_normal((10, 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    from proreg.probs import cosine_scores, softmax
    np.testing.assert_allclose(predict(model, x), softmax(cosine_scores(x, emb), 0.01), atol=1e-12)


def test_model_validation():
    with pytest.raises(InvalidInputError):
        LinearModel(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(InvalidParameterError):
        init_ft(0, 3, 0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(optimizer="sgd")


def test_train_config_roundtrip():
    cfg = TrainConfig(mode=LossMode.kd(0.25), warmup=True, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_roundtrip(tmp_path):
    model = init_ft(7, 3, 2, 0.05)
    cfg = TrainConfig()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, cfg)
    back, digest = load_checkpoint(path)
    assert back.same_as(model)
    assert digest == config_hash(cfg)
    assert checkpoint_bytes(back, digest) == path.read_bytes()


def test_checkpoint_corruption_and_truncation():
    raw = checkpoint_bytes(init_ft(4, 3, 0))
    for pos in (10, 60, len(raw) - 5):
        bad = bytearray(raw)
        bad[pos] ^= 0x04
        with pytest.raises(ChecksumError):
            model_from_checkpoint_bytes(bytes(bad))
    with pytest.raises(TruncatedFileError):
        model_from_checkpoint_bytes(raw[:-9])
    with pytest.raises(FileFormatError):
        model_from_checkpoint_bytes(b"XXXX" + raw[4:])
