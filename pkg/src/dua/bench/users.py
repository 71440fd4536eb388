"""Simulated users: class-preference priors and transform-shifted priors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datasets import LabeledSet
from ..errors import ConfigError, EmptyDatasetError
from ..protocol import UserNode
from .transforms import apply_transform, severity_value

PRIOR_KINDS = ("CategorySubset", "Transform")


@dataclass(frozen=True)
class UserSpec:
    """``CategorySubset`` users prefer ``classes_per_task`` random classes of every task;
    ``Transform`` users see the shared pool under their own perturbation."""

    user_id: int
    prior_kind: str
    classes_per_task: int = 1
    kind: str | None = None
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.prior_kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.prior_kind!r}; expected one of {PRIOR_KINDS}")
        if self.prior_kind == "Transform":
            severity_value(self.kind, self.severity)
        elif self.classes_per_task < 1:
            raise ConfigError("classes_per_task must be at least 1")
        if not 0 <= self.user_id < 2 ** 32:
            raise ConfigError("user_id must fit in u32")

    def preferred(self, class_subsets) -> dict[int, tuple[int, ...]]:
        """Task id -> preferred classes; deterministic in the user's seed."""
        rng = np.random.default_rng([self.seed, self.user_id])
        out = {}
        for task_id, subset in class_subsets.items():
            if self.classes_per_task > len(subset):
                raise ConfigError(f"task {task_id} has only {len(subset)} classes")
            pick = rng.choice(len(subset), size=self.classes_per_task, replace=False)
            out[task_id] = tuple(sorted(subset[k] for k in pick))
        return out


def _split_half(data: LabeledSet, rng: np.random.Generator, user_id: int, task_id: int, log):
    order = rng.permutation(len(data))
    half = len(order) // 2
    ev = data.subset(np.sort(order[:half]), f"user-{user_id}-eval-t{task_id}")
    val = data.subset(np.sort(order[half:]), f"user-{user_id}-val-t{task_id}")
    ev.log = log
    val.log = log
    return ev, val


def make_users(specs, pool: LabeledSet, class_subsets: dict[int, tuple[int, ...]], seed: int,
               per_class: int | None = None) -> list[UserNode]:
    """Distribute ``pool`` over users and split each user's data 50/50 per task.

    Category users who prefer the same class share that class's samples in
    disjoint chunks. Transform users all draw the identical underlying
    samples (the first ``per_class`` of every class after a seeded shuffle)
    and see them through their own perturbation. Each user's data of a task
    is then split into equal evaluation and user-validation halves.
    """
    specs = list(specs)
    ids = [s.user_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("user ids must be unique")
    images, labels, sample_ids = pool.images, pool.labels, pool.ids
    rng = np.random.default_rng(seed)
    by_class = {}
    for subset in class_subsets.values():
        for c in subset:
            idx = np.flatnonzero(labels == c)
            by_class[c] = idx[rng.permutation(len(idx))]
            if len(by_class[c]) == 0:
                raise EmptyDatasetError(f"pool has no samples of class {c}")

    prefs = {s.user_id: s.preferred(class_subsets) for s in specs if s.prior_kind == "CategorySubset"}
    claims: dict[int, list[int]] = {}
    for s in specs:
        if s.prior_kind == "CategorySubset":
            for subset in prefs[s.user_id].values():
                for c in subset:
                    claims.setdefault(c, []).append(s.user_id)
    chunks: dict[tuple[int, int], np.ndarray] = {}
    for c, owners in claims.items():
        idx = by_class[c]
        if per_class is not None:
            idx = idx[:per_class * len(owners)]
        for owner, part in zip(owners, np.array_split(idx, len(owners))):
            chunks[(owner, c)] = part

    users = []
    for s in specs:
        log: list = []
        ev, val = {}, {}
        for task_id, subset in class_subsets.items():
            if s.prior_kind == "CategorySubset":
                idx = np.concatenate([chunks[(s.user_id, c)] for c in prefs[s.user_id][task_id]])
                split_rng = np.random.default_rng([seed, s.user_id, task_id])
            else:
                idx = np.concatenate([by_class[c][:per_class] for c in subset])
                split_rng = np.random.default_rng([seed, task_id])
            idx = np.sort(idx)
            x = images[idx]
            if s.prior_kind == "Transform":
                x = apply_transform(x, s.kind, s.severity, [s.seed, task_id])
            data = LabeledSet(x, labels[idx], sample_ids[idx], name=f"user-{s.user_id}-t{task_id}")
            ev[task_id], val[task_id] = _split_half(data, split_rng, s.user_id, task_id, log)
        users.append(UserNode(s.user_id, ev, val, spec=s, log=log))
    return users
