import numpy as np
import pytest

from dua.datasets import LabeledSet
from dua.errors import ConfigError, LabelError, LayoutError
from dua.nnkit import (BN_EPS, BatchNorm, Dense, Model, ModelLayout, ReLU, SoftmaxOutput, TrainConfig, accuracy,
                       backprop, cross_entropy, forward, init_model, load_model, loss_and_grad, mlp_layout,
                       predict_within, propagate, save_model, train)

from _oracles import central_difference, loss_fn, max_relative_error, random_layout, random_model


def test_layout_segments_cover_vector():
    layout = mlp_layout(hidden=(100, 100), batchnorm=True)
    assert layout.n_params == 784 * 100 + 100 + 200 + 100 * 100 + 100 + 200 + 100 * 10 + 10
    assert layout.bn_features == 200
    mask = layout.mask("gamma", "beta")
    assert mask.sum() == 400
    v = np.arange(layout.n_params, dtype=float)
    assert np.array_equal(layout.flatten(layout.split(v)), v)


@pytest.mark.parametrize("layers", [
    (Dense(4, 3), Dense(4, 2), SoftmaxOutput(2)),
    (Dense(4, 3), SoftmaxOutput(2)),
    (Dense(4, 3), BatchNorm(2), SoftmaxOutput(3)),
    (Dense(4, 3), SoftmaxOutput(3), ReLU()),
])
def test_layout_rejects_mismatched_dimensions(layers):
    with pytest.raises(LayoutError):
        ModelLayout(layers, (2, 2))


def test_init_is_seeded():
    layout = mlp_layout(batchnorm=True)
    a, b = init_model(layout, 3), init_model(layout, 3)
    assert a.digest() == b.digest()
    assert init_model(layout, 4).digest() != a.digest()
    first = layout.split(a.params)[0]["W"]
    assert np.abs(first).max() <= np.sqrt(6 / 784)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_loss_gradient_matches_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    layout = random_layout(rng)
    model = random_model(layout, rng, mode)
    x = rng.normal(size=(7,) + layout.input_shape)
    y = rng.integers(0, layout.n_outputs, 7)
    _, g = loss_and_grad(model, x, y)
    num = central_difference(loss_fn(model, x.reshape(7, -1), y, mode == "train"), model.params)
    assert max_relative_error(g, num) < 1e-4


def test_bn_train_mode_normalizes_batch(rng):
    layout = ModelLayout((Dense(4, 3), BatchNorm(3), SoftmaxOutput(3)), (2, 2))
    model = init_model(layout, 0)
    x = rng.normal(3.0, 5.0, size=(50, 4))
    out, _, stats = propagate(layout, model.params, model.bn, x, True)
    assert np.allclose(out.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(out.var(axis=0), 1, atol=1e-3)
    pre = x @ layout.split(model.params)[0]["W"]
    assert np.allclose(stats[0][1], pre.var(axis=0))  # population variance


def test_bn_eval_uses_running_stats_and_momentum(rng):
    layout = ModelLayout((Dense(4, 3), BatchNorm(3), SoftmaxOutput(3)), (2, 2))
    model = init_model(layout, 0).with_mode("train")
    x = rng.normal(size=(30, 4))
    forward(model, x)
    pre = x @ layout.split(model.params)[0]["W"]
    assert np.allclose(model.bn[0].mean, 0.1 * pre.mean(axis=0))
    assert np.allclose(model.bn[0].var, 0.9 + 0.1 * pre.var(axis=0))
    ev = model.with_mode("eval")
    out, _, _ = propagate(layout, ev.params, ev.bn, x[:1], False)
    expect = (pre[:1] - ev.bn[0].mean) / np.sqrt(ev.bn[0].var + BN_EPS)
    assert np.allclose(out, expect)


def test_bn_train_needs_two_samples():
    layout = ModelLayout((Dense(4, 3), BatchNorm(3), SoftmaxOutput(3)), (2, 2))
    model = init_model(layout, 0)
    with pytest.raises(LayoutError):
        propagate(layout, model.params, model.bn, np.zeros((1, 4)), True)


def test_loss_and_grad_does_not_touch_bn(rng):
    layout = mlp_layout((3, 3), (4,), 3, batchnorm=True)
    model = random_model(layout, rng, "train")
    before = model.digest()
    loss_and_grad(model, rng.normal(size=(5, 9)), np.array([0, 1, 2, 0, 1]))
    assert model.digest() == before


def test_cross_entropy_value_and_label_check():
    logits = np.array([[0.0, 0.0], [2.0, 0.0]])
    loss, d = cross_entropy(logits, np.array([0, 1]))
    expect = (np.log(2) + np.log1p(np.exp(2.0))) / 2
    assert loss == pytest.approx(expect)
    assert np.allclose(d.sum(axis=1), 0)
    with pytest.raises(LabelError):
        cross_entropy(logits, np.array([0, 2]))


def test_per_sample_reductions_need_eval_tape(rng):
    layout = mlp_layout((2, 2), (3,), 2)
    model = init_model(layout, 0)
    _, tape, _ = propagate(layout, model.params, model.bn, rng.normal(size=(3, 4)), True)
    with pytest.raises(ConfigError):
        backprop(layout, model.params, tape, np.ones((3, 2)), True, reduce="abs")


CENTERS = np.random.default_rng(7).normal(0, 1, size=(3, 9))


def _tiny_task(rng, n=200):
    centers = CENTERS
    y = rng.integers(0, 3, n)
    x = centers[y] + rng.normal(0, 0.3, size=(n, 9))
    return LabeledSet(x.reshape(n, 3, 3), y)


def test_training_learns_and_is_deterministic(rng):
    data = _tiny_task(rng)
    val = _tiny_task(np.random.default_rng(99), 60)
    layout = mlp_layout((3, 3), (8,), 3)
    cfg = TrainConfig(lr=0.05, max_epochs=8, seed=5)
    a, hist = train(init_model(layout, 0), data, val, cfg)
    b, _ = train(init_model(layout, 0), data, val, cfg)
    assert a.digest() == b.digest()
    assert accuracy(a, val) > 0.9
    assert max(h.val_acc for h in hist) == accuracy(a, val)


def test_early_stopping_anneals_then_stops(rng):
    data = _tiny_task(rng, 40)
    layout = mlp_layout((3, 3), (4,), 3)
    cfg = TrainConfig(lr=1e-12, max_epochs=50, patience_epochs=2, seed=0)
    _, hist = train(init_model(layout, 0), data, data, cfg)
    # best at epoch 1, two stale epochs, anneal, two more stale epochs, stop
    assert len(hist) == 5
    assert hist[2].lr == pytest.approx(1e-12)
    assert hist[3].lr == pytest.approx(1e-13)


def test_zero_epochs_returns_copy(rng):
    layout = mlp_layout((3, 3), (4,), 3)
    m = init_model(layout, 0)
    out, hist = train(m, _tiny_task(rng), _tiny_task(rng), TrainConfig(max_epochs=0))
    assert hist == [] and out.digest() == m.digest() and out is not m


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(anneal_factor=1.0)


def test_predict_within_restricts_classes():
    layout = ModelLayout((Dense(1, 3), SoftmaxOutput(3)), (1, 1))
    params = np.array([0.0, 0.0, 0.0, 5.0, 1.0, 0.0])  # W = 0, b = (5, 1, 0)
    model = Model(layout, params)
    assert predict_within(model, np.zeros((2, 1)), [1, 2]).tolist() == [1, 1]


def test_save_load_roundtrip(tmp_path, rng):
    layout = mlp_layout((3, 3), (4,), 3, batchnorm=True)
    model = random_model(layout, rng)
    save_model(tmp_path / "m.npz", model)
    back = load_model(tmp_path / "m.npz")
    assert back.layout == layout and back.digest() == model.digest()
