"""Do importances depend more on the model or on the data?

MAS vectors of two experts on two datasets are compared with Pearson's rho,
separately over weights and biases.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..datasets import ImageSet, LabeledSet
from ..importance import estimate_mas
from ..nnkit import Model
from .metrics import pearson

CSV_HEADER = ("model", "data_a", "data_b", "rho_weights", "rho_biases")


@dataclass(frozen=True)
class CorrRow:
    model: str
    data_a: str
    data_b: str
    rho_weights: float
    rho_biases: float

    @property
    def same_model(self) -> bool:
        return "/" not in self.model


def _unlabeled(data: ImageSet) -> ImageSet:
    return data.strip_labels() if isinstance(data, LabeledSet) else data


def importance_correlation_study(m1: Model, m2: Model, d1: ImageSet, d2: ImageSet,
                                 names=("M1", "M2", "D1", "D2")) -> list[CorrRow]:
    """Two same-model/different-data rows followed by two different-model/same-data rows.

    A different-model row names its models as ``"M1/M2"``.
    """
    n_m1, n_m2, n_d1, n_d2 = names
    omega = {(i, j): estimate_mas(m, _unlabeled(d)).values
             for i, m in ((n_m1, m1), (n_m2, m2)) for j, d in ((n_d1, d1), (n_d2, d2))}
    w = m1.layout.mask("W")
    b = m1.layout.mask("b")

    def row(model, da, db, u, v):
        return CorrRow(model, da, db, pearson(u[w], v[w]), pearson(u[b], v[b]))

    return [
        row(n_m1, n_d1, n_d2, omega[n_m1, n_d1], omega[n_m1, n_d2]),
        row(n_m2, n_d1, n_d2, omega[n_m2, n_d1], omega[n_m2, n_d2]),
        row(f"{n_m1}/{n_m2}", n_d1, n_d1, omega[n_m1, n_d1], omega[n_m2, n_d1]),
        row(f"{n_m1}/{n_m2}", n_d2, n_d2, omega[n_m1, n_d2], omega[n_m2, n_d2]),
    ]


def ordering_holds(rows: list[CorrRow]) -> bool:
    """Every same-model rho above every different-model rho (weights)."""
    same = [r.rho_weights for r in rows if r.same_model]
    diff = [r.rho_weights for r in rows if not r.same_model]
    return min(same) > max(diff)


def write_corr_csv(path, rows: list[CorrRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_HEADER)
        for r in rows:
            out.writerow([r.model, r.data_a, r.data_b, repr(r.rho_weights), repr(r.rho_biases)])


def magnitude_profile(experts, data_by_task) -> list[dict]:
    """Quantiles of each expert's MAS importance on its own task's data."""
    out = []
    for model, task_id in zip(experts.models, experts.task_ids):
        v = estimate_mas(model, _unlabeled(data_by_task[task_id])).values
        q = np.quantile(v, [0.1, 0.25, 0.5, 0.75, 0.9])
        out.append({"task": task_id, "mean": float(v.mean()), "max": float(v.max()),
                    **{f"q{int(p * 100)}": float(x) for p, x in zip((0.1, 0.25, 0.5, 0.75, 0.9), q)}})
    return out
