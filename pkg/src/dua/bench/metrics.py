"""Accuracy matrices, average accuracy, forgetting and Pearson correlation."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError


class AccMatrix:
    """``a[i][t]``: accuracy on task ``t`` after learning task ``i`` (0-based, ``i >= t``).

    Entries above the diagonal are undefined and stored as NaN.
    """

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ConfigError("an accuracy matrix needs at least one task")
        self.a = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccMatrix":
        rows = [list(r) for r in rows]
        out = cls(len(rows))
        for i, row in enumerate(rows):
            if len(row) < i + 1:
                raise ShapeError(f"row {i} needs {i + 1} entries, got {len(row)}")
            for t in range(i + 1):
                out[i, t] = row[t]
        return out

    @property
    def n(self) -> int:
        return len(self.a)

    def __setitem__(self, key, value) -> None:
        i, t = key
        if t > i:
            raise ShapeError(f"a[{i}][{t}] is undefined: task {t} not yet learned")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"accuracy {value} outside [0, 1]")
        self.a[i, t] = value

    def __getitem__(self, key) -> float:
        i, t = key
        if t > i:
            raise ShapeError(f"a[{i}][{t}] is undefined")
        return float(self.a[i, t])

    def complete(self) -> bool:
        return not np.isnan(self.a[np.tril_indices(self.n)]).any()

    def rows(self) -> list[list[float]]:
        return [[float(v) for v in self.a[i, :i + 1]] for i in range(self.n)]


def avg_accuracy(acc: AccMatrix) -> float:
    """Mean accuracy of the final model over all tasks."""
    return float(np.mean(acc.a[-1]))


def forgetting(acc: AccMatrix) -> float:
    """Mean drop from just-learned to final accuracy over all but the last task.

    Negative values mean later tasks improved earlier ones.
    """
    n = acc.n
    if n == 1:
        return 0.0
    diag = np.diag(acc.a)[:-1]
    return float(np.mean(diag - acc.a[-1, :-1]))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"sequences differ in length: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ShapeError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ConfigError("pearson correlation undefined for zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
