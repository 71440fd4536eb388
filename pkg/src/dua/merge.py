"""Mode-IMM merging of task experts with per-parameter precisions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MergeError
from .importance import ImportanceVector
from .nnkit import BnStats, Model, ModelLayout

EPSILON_FLOOR = 1e-8


@dataclass(frozen=True)
class MergeSpec:
    alphas: tuple[float, ...]
    epsilon_floor: float = EPSILON_FLOOR

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", tuple(float(v) for v in a))
        if a.ndim != 1 or len(a) == 0:
            raise MergeError("at least one mixing ratio is required")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise MergeError("mixing ratios must be finite and nonnegative")
        if abs(a.sum() - 1.0) > 1e-12:
            raise MergeError(f"mixing ratios must sum to 1, got {a.sum()!r}")
        if not self.epsilon_floor > 0:
            raise MergeError("epsilon_floor must be positive")

    @classmethod
    def uniform(cls, n: int, epsilon_floor: float = EPSILON_FLOOR) -> "MergeSpec":
        if n < 1:
            raise MergeError("cannot merge zero experts")
        return cls(tuple([1.0 / n] * n), epsilon_floor)


@dataclass
class MergedModel:
    layout: ModelLayout
    params: np.ndarray
    precision: ImportanceVector
    bn: list[BnStats] = field(default_factory=list)
    provenance: list[tuple[str, str, float]] = field(default_factory=list)

    def to_model(self) -> Model:
        return Model(self.layout, self.params.copy(), [s.copy() for s in self.bn])


def mode_imm_merge(experts: Sequence[Model], importances: Sequence[ImportanceVector],
                   spec: MergeSpec, expert_ids: Sequence[str] | None = None) -> MergedModel:
    """Precision-weighted average of expert parameters.

    Each expert contributes ``alpha_t * Omega_t`` per parameter. Importances
    below ``epsilon_floor`` are raised to the floor before weighting, so a
    parameter no expert cares about falls back to the alpha-weighted plain
    average. The returned precision is ``max(sum_t alpha_t Omega_t, floor)``.
    BatchNorm running statistics are alpha-weighted averages.
    """
    n = len(experts)
    if n == 0:
        raise MergeError("cannot merge zero experts")
    if len(importances) != n or len(spec.alphas) != n:
        raise MergeError(f"got {n} experts, {len(importances)} importances, {len(spec.alphas)} alphas")
    layout = experts[0].layout
    for m, imp in zip(experts, importances):
        if m.layout != layout:
            raise MergeError("all experts must share one layout")
        if len(imp) != layout.n_params:
            raise MergeError(f"importance of length {len(imp)} does not match {layout.n_params} parameters")
    alphas = np.asarray(spec.alphas)
    omegas = np.stack([imp.values for imp in importances])
    thetas = np.stack([m.params for m in experts])

    precision = np.maximum(alphas @ omegas, spec.epsilon_floor)
    weighted = alphas[:, None] * np.maximum(omegas, spec.epsilon_floor)
    # normalise first: x / x == 1 exactly, so a one-hot alpha selects bitwise
    weights = weighted / weighted.sum(axis=0)
    params = (weights * thetas).sum(axis=0)

    bn = []
    for k in range(len(layout.bn_layers)):
        mean = sum(a * m.bn[k].mean for a, m in zip(alphas, experts))
        var = sum(a * m.bn[k].var for a, m in zip(alphas, experts))
        bn.append(BnStats(mean, var, experts[0].bn[k].momentum))

    ids = list(expert_ids) if expert_ids is not None else [f"expert-{t}" for t in range(n)]
    provenance = [(eid, imp.data_ref, float(a)) for eid, imp, a in zip(ids, importances, alphas)]
    source = importances[0].source if len({imp.source for imp in importances}) == 1 else "mixed"
    merged_precision = ImportanceVector(precision, source, sum(imp.sample_count for imp in importances),
                                        model_ref="merged", data_ref="+".join(imp.data_ref for imp in importances))
    return MergedModel(layout, params, merged_precision, bn, provenance)
