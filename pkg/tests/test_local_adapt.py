import numpy as np
import pytest

import dua.local_adapt as la
from dua.datasets import ImageSet, LabeledSet, access_context
from dua.errors import AdaptError, EmptyDatasetError, LabelError
from dua.local_adapt import adabn, adabn_s, bn_trainable_count
from dua.nnkit import TrainConfig, mlp_layout, propagate

from _oracles import random_model


@pytest.fixture
def bn_model(rng):
    return random_model(mlp_layout((4, 4), (6, 5), 3, batchnorm=True), rng)


def test_adabn_sets_exact_population_stats(bn_model, rng):
    x = rng.normal(1.0, 2.0, size=(300, 4, 4))
    out = adabn(bn_model, ImageSet(x))
    layout = bn_model.layout
    for k, layer in enumerate(layout.bn_layers):
        a, _, _ = propagate(layout, out.params, out.bn, x, False, upto=layer)
        assert np.allclose(out.bn[k].mean, a.mean(axis=0), rtol=0, atol=1e-12)
        assert np.allclose(out.bn[k].var, a.var(axis=0), rtol=1e-12, atol=1e-12)


def test_adabn_changes_statistics_only(bn_model, rng):
    out = adabn(bn_model, ImageSet(rng.normal(size=(50, 4, 4))))
    assert np.array_equal(out.params, bn_model.params)
    assert not np.array_equal(out.bn[0].mean, bn_model.bn[0].mean)


def test_adabn_is_chunk_invariant(bn_model, rng, monkeypatch):
    data = ImageSet(rng.normal(size=(101, 4, 4)))
    full = adabn(bn_model, data)
    monkeypatch.setattr(la, "CHUNK", 7)
    chunked = adabn(bn_model, data)
    for s, t in zip(full.bn, chunked.bn):
        assert np.allclose(s.mean, t.mean, atol=1e-13) and np.allclose(s.var, t.var, atol=1e-12)


def test_adabn_s_trains_only_gamma_beta(bn_model, rng):
    x = rng.normal(size=(60, 4, 4))
    data = LabeledSet(x, rng.integers(0, 3, 60))
    trace = []
    out = adabn_s(bn_model, data, TrainConfig(lr=0.1, max_epochs=2, seed=0), trace)
    mask = bn_model.layout.mask("gamma", "beta")
    assert np.array_equal(out.params[~mask], bn_model.params[~mask])
    assert not np.array_equal(out.params[mask], bn_model.params[mask])
    assert set(trace) == {bn_trainable_count(bn_model)} == {2 * 11}
    # final statistics are the population statistics under the trained gamma/beta
    again = adabn(out, data.strip_labels())
    assert all(np.array_equal(a.mean, b.mean) for a, b in zip(out.bn, again.bn))


def test_adabn_s_zero_epochs_equals_adabn(bn_model, rng):
    data = LabeledSet(rng.normal(size=(30, 4, 4)), rng.integers(0, 3, 30))
    a = adabn_s(bn_model, data, TrainConfig(max_epochs=0))
    b = adabn(bn_model, data.strip_labels())
    assert a.digest() == b.digest()


def test_bn_free_layout_rejected(rng):
    model = random_model(mlp_layout((4, 4), (6,), 3), rng)
    with pytest.raises(AdaptError):
        adabn(model, ImageSet(rng.normal(size=(5, 4, 4))))
    with pytest.raises(AdaptError):
        adabn_s(model, LabeledSet(rng.normal(size=(5, 4, 4)), np.zeros(5, dtype=int)))


def test_adabn_s_needs_labels_and_data(bn_model, rng):
    with pytest.raises(LabelError):
        adabn_s(bn_model, ImageSet(rng.normal(size=(5, 4, 4))))
    with pytest.raises(EmptyDatasetError):
        adabn(bn_model, ImageSet(np.zeros((0, 4, 4))))


def test_adaptation_reads_only_given_data(bn_model, rng):
    log = []
    user = LabeledSet(rng.normal(size=(20, 4, 4)), rng.integers(0, 3, 20), name="user-val", log=log)
    with access_context("adapt"):
        adabn_s(bn_model, user, TrainConfig(max_epochs=1))
    assert {a.dataset for a in log} == {"user-val"}
    assert {a.context for a in log} == {"adapt"}
