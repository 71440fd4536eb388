import json
import struct

import numpy as np
import pytest

from dua.bench.cli import main as cli_main
from dua.bench.data import load_idx, make_numbers_tasks, synth_digits, write_idx
from dua.bench.experiment import ExperimentConfig, parse_method, run_experiment
from dua.bench.metrics import AccMatrix, avg_accuracy, forgetting, pearson
from dua.bench.study import importance_correlation_study
from dua.bench.transforms import KINDS, SEVERITY, apply_transform
from dua.bench.users import UserSpec, make_users
from dua.errors import ConfigError, IdxFormatError, ShapeError
from dua.nnkit import TrainConfig, accuracy, init_model, mlp_layout, train

# ------------------------------------------------------------------ IDX


def _idx_fixture(tmp_path, count=1, label_count=None, magic=0x803):
    pixels = bytes(k % 256 for k in range(28 * 28 * count))
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(struct.pack(">IIII", magic, count, 28, 28) + pixels)
    n = count if label_count is None else label_count
    lab.write_bytes(struct.pack(">II", 0x801, n) + bytes([7] * n))
    return img, lab, pixels


def test_idx_single_sample_exact_pixels(tmp_path):
    img, lab, pixels = _idx_fixture(tmp_path)
    data = load_idx(img, lab)
    assert data.images.shape == (1, 28, 28)
    assert np.array_equal(data.images.ravel(), np.frombuffer(pixels, np.uint8) / 255.0)
    assert data.images[0, 0, 1] == 1 / 255 and data.labels.tolist() == [7]


def test_idx_errors(tmp_path):
    img, lab, _ = _idx_fixture(tmp_path, count=2, label_count=3)
    with pytest.raises(IdxFormatError, match="labels"):
        load_idx(img, lab)
    img, lab, _ = _idx_fixture(tmp_path, magic=0x801)
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(img, lab)
    img, lab, _ = _idx_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:100])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(img, lab)
    with pytest.raises(FileNotFoundError):
        load_idx(tmp_path / "missing", lab)


def test_idx_write_read_roundtrip(tmp_path, digits):
    write_idx(tmp_path / "i", tmp_path / "l", digits.images[:20], digits.labels[:20])
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.abs(back.images - digits.images[:20]).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(back.labels, digits.labels[:20])


# ------------------------------------------------------------------ synthetic digits and tasks


def test_synth_digits_deterministic_and_balanced(digits):
    again = synth_digits(11, 60, "digits")
    assert np.array_equal(again.images, digits.images)
    assert np.bincount(digits.labels).tolist() == [60] * 10
    assert digits.images.min() >= 0 and digits.images.max() <= 1
    assert not np.array_equal(synth_digits(12, 60).images, digits.images)


def test_synth_digits_learnable():
    data = synth_digits(21, 300)
    val = synth_digits(22, 50)
    model, _ = train(init_model(mlp_layout(), 0), data, val, TrainConfig(lr=0.05, max_epochs=5))
    assert accuracy(model, val) >= 0.95


def test_numbers_tasks(digits):
    seq = make_numbers_tasks(digits, 0)
    assert [t.classes for t in seq.tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    assert set().union(*map(set, seq.class_subsets)) == set(range(10))
    for t in seq.tasks:
        assert not set(t.train.ids) & set(t.val.ids)
        assert len(t.train) == round(0.8 * 120) and len(t.val) == 120 - len(t.train)
        assert set(np.unique(t.train.labels)) == set(t.classes)
    again = make_numbers_tasks(digits, 0)
    assert np.array_equal(again.tasks[2].val.ids, seq.tasks[2].val.ids)


# ------------------------------------------------------------------ transforms


@pytest.mark.parametrize("severity", range(1, 6))
def test_brightness_on_black_is_constant_offset(severity):
    out = apply_transform(np.zeros((28, 28)), "Brightness", severity, 0)
    assert np.all(out == SEVERITY["Brightness"][severity - 1])


def test_blur_keeps_constant_image():
    img = np.full((28, 28), 0.37)
    assert np.allclose(apply_transform(img, "GaussianBlur", 5, 0), img, atol=1e-12)


def test_gaussian_noise_mean_statistics():
    img = np.full((28, 28), 0.5)
    out = apply_transform(img, "GaussianNoise", 3, 123)
    sigma = SEVERITY["GaussianNoise"][2]
    assert abs(out.mean() - 0.5) < 3 * sigma / np.sqrt(img.size)


@pytest.mark.parametrize("kind", KINDS)
def test_transforms_clip_and_repeat(kind, digits):
    x = digits.images[:5]
    a = apply_transform(x, kind, 3, 9)
    assert a.shape == x.shape and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, apply_transform(x, kind, 3, 9))


@pytest.mark.parametrize("kind, severity", [("Fog", 1), ("Contrast", 0), ("Contrast", 6), ("Contrast", True)])
def test_transform_rejects_unknown(kind, severity):
    with pytest.raises(ConfigError):
        apply_transform(np.zeros((28, 28)), kind, severity, 0)


# ------------------------------------------------------------------ users


def _subsets():
    return {t + 1: (2 * t, 2 * t + 1) for t in range(5)}


def test_category_users_are_disjoint(digits):
    specs = [UserSpec(k, "CategorySubset", seed=k) for k in range(1, 5)]
    users = make_users(specs, digits, _subsets(), seed=0)
    seen = set()
    for u in users:
        ids = set()
        for t in range(1, 6):
            for part in (u.eval[t], u.user_val[t]):
                ids |= set(part.ids.tolist())
                assert len(set(np.unique(part.labels)) - set(u.spec.preferred(_subsets())[t])) == 0
            assert abs(len(u.eval[t]) - len(u.user_val[t])) <= 1
        assert not ids & seen
        seen |= ids


def test_transform_users_share_underlying_samples(digits):
    specs = [UserSpec(1, "Transform", kind="Contrast", seed=1), UserSpec(2, "Transform", kind="GaussianBlur", seed=2)]
    a, b = make_users(specs, digits, _subsets(), seed=0, per_class=10)
    for t in range(1, 6):
        assert np.array_equal(a.eval[t].ids, b.eval[t].ids)
        assert np.array_equal(a.user_val[t].ids, b.user_val[t].ids)
        assert not np.array_equal(a.eval[t].images, b.eval[t].images)
        assert len(a.eval[t]) + len(a.user_val[t]) == 20


def test_user_spec_validation():
    with pytest.raises(ConfigError):
        UserSpec(1, "Transform", kind="Contrast", severity=0)
    with pytest.raises(ConfigError):
        UserSpec(1, "Other")
    with pytest.raises(ConfigError):
        UserSpec(1, "CategorySubset", classes_per_task=3).preferred(_subsets())


# ------------------------------------------------------------------ metrics


def test_avg_accuracy_and_forgetting_examples():
    assert avg_accuracy(AccMatrix.from_rows([[1.0], [1.0, 1.0]])) == 1.0
    assert avg_accuracy(AccMatrix.from_rows([[0.9], [0.8, 0.6]])) == pytest.approx(0.7)
    assert avg_accuracy(AccMatrix.from_rows([[0.42]])) == 0.42
    assert forgetting(AccMatrix.from_rows([[0.42]])) == 0.0
    assert forgetting(AccMatrix.from_rows([[0.9], [0.7, 0.8]])) == pytest.approx(0.2)
    assert forgetting(AccMatrix.from_rows([[0.5], [0.5, 0.8]])) == 0.0
    assert forgetting(AccMatrix.from_rows([[0.5], [0.9, 0.8]])) == pytest.approx(-0.4)


def test_avg_accuracy_permutation_invariant(rng):
    row = rng.uniform(0, 1, 5)
    rows = [list(rng.uniform(0, 1, i + 1)) for i in range(4)] + [list(row)]
    perm = [list(rng.uniform(0, 1, i + 1)) for i in range(4)] + [list(row[::-1])]
    assert avg_accuracy(AccMatrix.from_rows(rows)) == pytest.approx(avg_accuracy(AccMatrix.from_rows(perm)))


def test_acc_matrix_rejects_invalid():
    acc = AccMatrix(2)
    with pytest.raises(ShapeError):
        acc[0, 1] = 0.5
    with pytest.raises(ConfigError):
        acc[1, 0] = 1.5


def test_pearson(rng):
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    direct = np.cov(x, y)[0, 1] / (np.std(x, ddof=1) * np.std(y, ddof=1))
    assert abs(pearson(x, y) - direct) < 1e-12
    with pytest.raises(ConfigError):
        pearson(np.ones(5), x[:5])
    with pytest.raises(ShapeError):
        pearson(x[:3], x[:4])


def test_correlation_study_same_data_gives_one(digits):
    seq = make_numbers_tasks(digits, 0)
    layout = mlp_layout(hidden=(16,))
    m1, m2 = init_model(layout, 1), init_model(layout, 2)
    d = seq.tasks[0].val
    rows = importance_correlation_study(m1, m2, d, d)
    assert rows[0].rho_weights == 1.0 and rows[1].rho_biases == 1.0
    assert [r.same_model for r in rows] == [True, True, False, False]


# ------------------------------------------------------------------ experiment config and runs


def _config(tmp_path, **over):
    doc = {"dataset": {"source": "synthetic", "seed": 4, "n_per_class": 40, "pool_per_class": 20},
           "methods": ["MAS-IMM", "MAS-RACL", "FIM-RACL", "Task-Experts", "MAS-IMM+AdaBN", "Joint+AdaBN-S"],
           "users": [{"user_id": 1, "prior_kind": "CategorySubset", "seed": 1},
                     {"user_id": 2, "prior_kind": "Transform", "kind": "Contrast", "severity": 3, "seed": 2}],
           "train": {"max_epochs": 1, "lr": 0.01}, "model": {"hidden": [16], "batchnorm": True},
           "repetitions": 2, "output": str(tmp_path / "out" / "report.csv")}
    doc.update(over)
    return doc


def test_method_names():
    assert parse_method("MAS-RACL+AdaBN-S") == ("MAS-RACL", "AdaBN-S")
    assert parse_method("Joint") == ("Joint", "none")
    for bad in ("SI", "MAS-RACL+Foo", "Task-Experts+AdaBN"):
        with pytest.raises(ConfigError):
            parse_method(bad)


@pytest.mark.parametrize("change", [
    {"extra": 1},
    {"methods": ["MAS-IMM", "Bogus"]},
    {"dataset": {"source": "idx", "train_images": "/nope", "train_labels": "/nope",
                 "test_images": "/nope", "test_labels": "/nope"}},
    {"dataset": {"source": "synthetic", "colour": True}},
    {"model": {"hidden": [16], "batchnorm": False}},
    {"users": [{"user_id": 1, "prior_kind": "CategorySubset", "mood": "x"}]},
])
def test_config_fails_fast(tmp_path, change):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_config(tmp_path, **change))


def test_experiment_report_shape_and_hygiene(tmp_path):
    cfg = ExperimentConfig.from_dict(_config(tmp_path))
    result = run_experiment(cfg)
    lines = result.csv_path.read_text().splitlines()
    assert lines[0] == "method,user,repetition,avg_acc,forgetting,seed"
    assert len(lines) - 1 == 6 * 2 * 2
    side = json.loads(result.sidecar_path.read_text())
    assert len(side["cells"]) == 24 and side["audit_log"].endswith(".audit.log")
    assert all(len(c["acc_matrix"]) == 5 for c in side["cells"])
    for user in result.users:
        evals = [a for a in user.log if "-eval-" in a.dataset]
        assert evals and all(a.context == f"user-{user.user_id}-eval" for a in evals)
        others = [a for a in user.log if "-eval-" not in a.dataset]
        assert all(not a.context.endswith("-eval") for a in others)
    assert all(s.counters["training_runs"] == 5 for s in result.servers)


def test_racl_with_server_priors_equals_imm(tmp_path):
    doc = _config(tmp_path, methods=["MAS-IMM", "MAS-RACL", "FIM-IMM", "FIM-RACL"], prior_source="server",
                  repetitions=1)
    result = run_experiment(ExperimentConfig.from_dict(doc))
    by = {(c.method, c.user): c.acc.rows() for c in result.cells}
    for user in (1, 2):
        assert by["MAS-IMM", user] == by["MAS-RACL", user]
        assert by["FIM-IMM", user] == by["FIM-RACL", user]


def test_cli_pipeline(tmp_path, capsys):
    data = ["--n-per-class", "30", "--data-seed", "3"]
    assert cli_main(["train", *data, "--out", str(tmp_path / "e"), "--epochs", "1", "--batchnorm"]) == 0
    assert cli_main(["merge", *data, "--experts", str(tmp_path / "e"), "--importance", "FIM",
                     "--out", str(tmp_path / "m.npz")]) == 0
    assert cli_main(["adapt", *data, "--model", str(tmp_path / "m.npz"), "--transform", "Contrast",
                     "--out", str(tmp_path / "a.npz")]) == 0
    assert cli_main(["eval", *data, "--model", str(tmp_path / "a.npz"), "--transform", "Contrast"]) == 0
    assert cli_main(["corr", *data, "--experts", str(tmp_path / "e"), "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().startswith("model,data_a,data_b,rho_weights,rho_biases")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_config(tmp_path, repetitions=1, methods=["MAS-IMM"])))
    assert cli_main(["experiment", str(cfg_path)]) == 0
    assert cli_main(["experiment", str(tmp_path / "missing.json")]) == 2
    out = capsys.readouterr().out
    assert "mean" in out and "cells" in out
