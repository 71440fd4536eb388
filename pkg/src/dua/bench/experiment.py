"""Full pipeline: server training, user priors, merging, local adaptation, evaluation.

A run is described by one JSON document; see ``ExperimentConfig``. Every
(method, user, repetition) cell yields an accuracy matrix, summarised in a
CSV report with a JSON sidecar holding the full matrices.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..continual import finetune_task_experts, train_joint, train_sequential
from ..datasets import access_context
from ..errors import ConfigError
from ..merge import EPSILON_FLOOR, MergeSpec
from ..nnkit import Model, TrainConfig, accuracy, mlp_layout
from ..protocol import (AuditLog, ServerState, UserNode, server_add_task, server_personalize, server_prior,
                        server_receive, user_build_prior, user_local_adapt)
from .data import load_idx, make_numbers_tasks, synth_digits
from .metrics import AccMatrix, avg_accuracy, forgetting
from .users import UserSpec, make_users

BASE_METHODS = ("MAS-RACL", "FIM-RACL", "Task-Experts", "MAS-IMM", "FIM-IMM", "EWC", "MAS", "LwF", "Joint")
ADAPT_SUFFIXES = {"": "none", "+AdaBN": "AdaBN", "+AdaBN-S": "AdaBN-S"}
CSV_HEADER = ("method", "user", "repetition", "avg_acc", "forgetting", "seed")


def parse_method(name: str) -> tuple[str, str]:
    """``"MAS-RACL+AdaBN-S"`` -> ``("MAS-RACL", "AdaBN-S")``."""
    for suffix in ("+AdaBN-S", "+AdaBN"):
        if name.endswith(suffix):
            base, mode = name[: -len(suffix)], ADAPT_SUFFIXES[suffix]
            break
    else:
        base, mode = name, "none"
    if base not in BASE_METHODS:
        raise ConfigError(f"unknown method {name!r}; base methods are {BASE_METHODS}")
    if base == "Task-Experts" and mode != "none":
        raise ConfigError("Task-Experts are fine-tuned per task; BN adaptation does not apply")
    return base, mode


def _strict(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class DatasetSource:
    """``synthetic``: server data ``synth_digits(seed, n_per_class)``, user pool from ``seed + 1``.
    ``idx``: server data from the training files, user pool from the test files."""

    source: str = "synthetic"
    seed: int = 0
    n_per_class: int = 2000
    pool_per_class: int = 300
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self, name)
                if path is None:
                    raise ConfigError(f"idx source needs {name}")
                if not Path(path).exists():
                    raise ConfigError(f"dataset file not found: {path}")
        elif self.n_per_class < 1 or self.pool_per_class < 1:
            raise ConfigError("sample counts must be positive")

    def load(self):
        if self.source == "synthetic":
            return (synth_digits(self.seed, self.n_per_class, "server"),
                    synth_digits(self.seed + 1, self.pool_per_class, "pool"))
        return (load_idx(self.train_images, self.train_labels, "server"),
                load_idx(self.test_images, self.test_labels, "pool"))


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (100, 100)
    batchnorm: bool = False

    def layout(self):
        return mlp_layout((28, 28), tuple(self.hidden), 10, self.batchnorm)


@dataclass(frozen=True)
class MergeConfig:
    alphas: tuple | None = None
    epsilon_floor: float = EPSILON_FLOOR

    def spec(self, upto: int, n_tasks: int) -> MergeSpec:
        if self.alphas is None:
            return MergeSpec.uniform(upto, self.epsilon_floor)
        a = np.asarray(self.alphas[:upto], dtype=np.float64)
        if len(self.alphas) != n_tasks:
            raise ConfigError(f"alphas need one weight per task ({n_tasks})")
        if a.sum() <= 0:
            raise ConfigError("alphas of the merged prefix sum to zero")
        return MergeSpec(tuple(float(v) for v in a / a.sum()), self.epsilon_floor)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSource
    methods: tuple[str, ...]
    users: tuple[UserSpec, ...]
    merge: MergeConfig = MergeConfig()
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    repetitions: int = 1
    seed: int = 0
    user_per_class: int | None = None
    prior_source: str = "user"
    output: str = "report.csv"

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate method names")
        for name in self.methods:
            _, mode = parse_method(name)
            if mode != "none" and not self.model.batchnorm:
                raise ConfigError(f"{name} needs model.batchnorm = true")
        if not self.users:
            raise ConfigError("at least one user is required")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.prior_source not in ("user", "server"):
            raise ConfigError("prior_source must be 'user' or 'server'")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(_strict_keys(doc, cls, "config"))
        if "dataset" not in doc or "methods" not in doc or "users" not in doc:
            raise ConfigError("config needs dataset, methods and users")
        doc["dataset"] = _strict(DatasetSource, doc["dataset"], "dataset")
        doc["methods"] = tuple(doc["methods"])
        doc["users"] = tuple(_strict(UserSpec, u, f"users[{k}]") for k, u in enumerate(doc["users"]))
        if "merge" in doc:
            m = dict(doc["merge"])
            if m.get("alphas") is not None:
                m["alphas"] = tuple(m["alphas"])
            doc["merge"] = _strict(MergeConfig, m, "merge")
        if "train" in doc:
            doc["train"] = _strict(TrainConfig, doc["train"], "train")
        if "model" in doc:
            m = dict(doc["model"])
            if "hidden" in m:
                m["hidden"] = tuple(m["hidden"])
            doc["model"] = _strict(ModelConfig, m, "model")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _strict_keys(doc, cls, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(doc) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return doc


# ------------------------------------------------------------------ running


@dataclass
class Cell:
    method: str
    user: int
    repetition: int
    seed: int
    acc: AccMatrix

    @property
    def avg_acc(self) -> float:
        return avg_accuracy(self.acc)

    @property
    def forgetting(self) -> float:
        # one pooled model has no task sequence to forget along
        return float("nan") if self.method.split("+")[0] == "Joint" else forgetting(self.acc)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[Cell]
    audit: AuditLog
    users: list[UserNode]
    servers: list[ServerState] = field(default_factory=list)
    csv_path: Path | None = None
    sidecar_path: Path | None = None


def _evaluate(node: UserNode, models_by_step, class_subsets, task_ids) -> AccMatrix:
    n = len(task_ids)
    acc = AccMatrix(n)
    with access_context(f"user-{node.user_id}-eval"):
        for i in range(n):
            model = models_by_step(i)
            for t in range(i + 1):
                tid = task_ids[t]
                acc[i, t] = accuracy(model, node.eval[tid], class_subsets[tid])
    return acc


def _constant(model: Model):
    return lambda i: model


def run_repetition(cfg: ExperimentConfig, rep: int, server_data, users: list[UserNode], audit: AuditLog):
    train_cfg = cfg.train.replace(seed=cfg.train.seed + rep)
    layout = cfg.model.layout()
    bases = {parse_method(m)[0] for m in cfg.methods}

    server = ServerState(layout, train_cfg)
    seq = make_numbers_tasks(server_data, cfg.seed)
    for task in seq.tasks:
        server_add_task(server, task)
    task_ids = server.task_ids
    class_subsets = server.class_subsets
    n = len(task_ids)

    def merged_steps(prior):
        return [server_personalize(server, prior, cfg.merge.spec(i + 1, n), upto=i + 1) for i in range(n)]

    # models per step for every base method, per user where the method is personalised
    steps: dict[tuple[str, int | None], list] = {}
    for mode in ("MAS", "FIM"):
        if f"{mode}-IMM" in bases:
            steps[(f"{mode}-IMM", None)] = merged_steps(server_prior(server, mode))
        if f"{mode}-RACL" in bases:
            for node in users:
                if cfg.prior_source == "server":
                    prior = server_prior(server, mode, user_id=node.user_id)
                else:
                    prior = user_build_prior(node, server.experts, mode)
                received = server_receive(server, audit.upload(prior))
                models = merged_steps(received)
                audit.download(node.user_id, models[-1])
                steps[(f"{mode}-RACL", node.user_id)] = models
    for method in ("EWC", "MAS", "LwF"):
        if method in bases:
            fresh = make_numbers_tasks(server_data, cfg.seed)
            steps[(method, None)] = train_sequential(fresh, train_cfg, method, layout)
    if "Joint" in bases:
        joint = train_joint(make_numbers_tasks(server_data, cfg.seed), train_cfg, layout)
        steps[("Joint", None)] = [joint] * n
    if "Task-Experts" in bases:
        for node in users:
            with access_context(f"user-{node.user_id}-finetune"):
                tuned = finetune_task_experts(server.experts, node.user_val, train_cfg)
            steps[("Task-Experts", node.user_id)] = tuned

    cells = []
    for name in cfg.methods:
        base, mode = parse_method(name)
        for node in users:
            key = (base, node.user_id) if (base, node.user_id) in steps else (base, None)
            if base == "Task-Experts":
                tuned = steps[key]
                acc = AccMatrix(n)
                with access_context(f"user-{node.user_id}-eval"):
                    for t, tid in enumerate(task_ids):
                        a = accuracy(tuned.models[t], node.eval[tid], class_subsets[tid])
                        for i in range(t, n):
                            acc[i, t] = a
            else:
                models = steps[key]
                if mode != "none":
                    adapted = {}
                    for i in range(n):
                        src = models[i]
                        if base == "Joint":
                            if "joint" not in adapted:
                                adapted["joint"] = user_local_adapt(node, src, mode, train_cfg, task_ids)
                            adapted[i] = adapted["joint"]
                        else:
                            adapted[i] = user_local_adapt(node, src, mode, train_cfg, task_ids[:i + 1])
                    get = adapted.__getitem__
                else:
                    def get(i, models=models):
                        m = models[i]
                        return m.to_model() if hasattr(m, "to_model") else m
                acc = _evaluate(node, get, class_subsets, task_ids)
            cells.append(Cell(name, node.user_id, rep, train_cfg.seed, acc))
    return cells, server


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run every method x user x repetition cell; write the CSV, sidecar and audit log."""
    out = Path(cfg.output)
    audit_path = out.with_suffix(".audit.log") if write else None
    audit = AuditLog(audit_path)
    server_data, pool = cfg.dataset.load()
    class_subsets = {t + 1: tuple(s) for t, s in enumerate(make_numbers_tasks(server_data, cfg.seed).class_subsets)}
    users = make_users(cfg.users, pool, class_subsets, cfg.seed, cfg.user_per_class)
    cells, servers = [], []
    for rep in range(cfg.repetitions):
        rep_cells, server = run_repetition(cfg, rep, server_data, users, audit)
        cells.extend(rep_cells)
        servers.append(server)
    order = {m: k for k, m in enumerate(cfg.methods)}
    cells.sort(key=lambda c: (order[c.method], c.user, c.repetition))
    result = ExperimentResult(cfg, cells, audit, users, servers)
    if write:
        result.csv_path, result.sidecar_path = write_report(result, out, audit_path)
    return result


def write_report(result: ExperimentResult, out: Path, audit_path: Path | None):
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in result.cells:
            w.writerow([c.method, c.user, c.repetition, repr(c.avg_acc), repr(c.forgetting), c.seed])
    sidecar = out.with_suffix(".json")
    doc = {
        "config": result.config.to_dict(),
        "audit_log": str(audit_path) if audit_path else None,
        "counters": [dict(sorted(s.counters.items())) for s in result.servers],
        "cells": [{"method": c.method, "user": c.user, "repetition": c.repetition, "seed": c.seed,
                   "acc_matrix": c.acc.rows()} for c in result.cells],
    }
    sidecar.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return out, sidecar
