"""Per-parameter importance estimates.

``estimate_mas`` is label-free: it averages the absolute per-sample gradient
of the squared L2 norm of the logits. ``estimate_fim`` is the diagonal
empirical Fisher, the mean squared per-sample gradient of the cross-entropy
at the true label. Both run the network in eval mode, so samples never
interact through BatchNorm and each sample's gradient is well defined.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import ImageSet, LabeledSet
from .errors import EmptyDatasetError, LabelError, ShapeError
from .nnkit import Model, backprop, propagate, softmax

CHUNK = 512


@dataclass
class ImportanceVector:
    values: np.ndarray
    source: str  # "MAS" or "FIM"
    sample_count: int
    model_ref: str = ""
    data_ref: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("importance values must be a flat vector")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("importance values must be finite and nonnegative")

    def __len__(self) -> int:
        return len(self.values)


def _per_sample_reduce(model: Model, x: np.ndarray, dlogits_fn, reduce: str) -> np.ndarray:
    total = np.zeros(model.layout.n_params)
    for start in range(0, len(x), CHUNK):
        xb = x[start:start + CHUNK]
        logits, tape, _ = propagate(model.layout, model.params, model.bn, xb, train=False)
        total += backprop(model.layout, model.params, tape, dlogits_fn(logits, start), train=False,
                          reduce=reduce)
    return total / len(x)


def estimate_mas(model: Model, data: ImageSet, model_ref: str = "") -> ImportanceVector:
    """Mean over samples of |d ||F(x)||^2 / d theta|, F being the logits.

    Only ``data.images`` is read; an ``ImageSet`` has no labels to read.
    """
    if len(data) == 0:
        raise EmptyDatasetError(f"dataset {data.name!r} is empty")
    x = data.images.reshape(len(data), -1)
    values = _per_sample_reduce(model, x, lambda logits, _: 2.0 * logits, "abs")
    return ImportanceVector(values, "MAS", len(data), model_ref, data.name)


def estimate_fim(model: Model, data: LabeledSet, model_ref: str = "") -> ImportanceVector:
    """Diagonal empirical Fisher using the ground-truth labels."""
    if not isinstance(data, LabeledSet):
        raise LabelError("FIM importance needs a labeled dataset")
    if len(data) == 0:
        raise EmptyDatasetError(f"dataset {data.name!r} is empty")
    x = data.images.reshape(len(data), -1)
    y = data.labels
    classes = model.layout.n_outputs
    if y.min() < 0 or y.max() >= classes:
        raise LabelError(f"labels must lie in [0, {classes})")

    def dlogits(logits, start):
        d = softmax(logits)
        d[np.arange(len(d)), y[start:start + len(d)]] -= 1.0
        return d

    values = _per_sample_reduce(model, x, dlogits, "sq")
    return ImportanceVector(values, "FIM", len(data), model_ref, data.name)


def estimate(model: Model, data: ImageSet, source: str, model_ref: str = "") -> ImportanceVector:
    if source == "MAS":
        if isinstance(data, LabeledSet):
            data = data.strip_labels()
        return estimate_mas(model, data, model_ref)
    if source == "FIM":
        return estimate_fim(model, data, model_ref)
    raise ValueError(f"unknown importance source {source!r}")
