"""On-device adaptation through BatchNorm: AdaBN and AdaBN-S.

``adabn`` replaces every BN layer's running statistics with the exact
population statistics of the user's data, shallow layers first so deeper
layers see already-adapted inputs. ``adabn_s`` additionally trains only the
BN scale and shift; gradients for all other parameters are never formed.
"""
from __future__ import annotations

import numpy as np

from .datasets import ImageSet, LabeledSet
from .errors import AdaptError, EmptyDatasetError, LabelError
from .nnkit import BnStats, Model, TrainConfig, _batches, _update_running, backprop, cross_entropy, propagate

CHUNK = 256


def bn_trainable_count(model: Model) -> int:
    """Number of parameters AdaBN-S trains: gamma and beta of every BN feature."""
    return 2 * model.layout.bn_features


def _require_bn(model: Model) -> None:
    if not model.layout.bn_layers:
        raise AdaptError("layout has no BatchNorm layer; BN adaptation would be a no-op")


def _population_stats(model: Model, bn: list[BnStats], x: np.ndarray, layer: int):
    """Exact mean and population variance of ``layer``'s input over ``x``.

    Chunked, with per-chunk moments merged by the parallel-variance update
    so memory stays bounded by ``CHUNK`` rows.
    """
    count, mean, m2 = 0, None, None
    for start in range(0, len(x), CHUNK):
        a, _, _ = propagate(model.layout, model.params, bn, x[start:start + CHUNK], False, upto=layer)
        n_b = len(a)
        mean_b = a.mean(axis=0)
        m2_b = ((a - mean_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta ** 2 * (count * n_b / total)
        count = total
    return mean, m2 / count


def adabn(model: Model, user_data: ImageSet) -> Model:
    """Copy of ``model`` whose BN running statistics come from ``user_data``."""
    _require_bn(model)
    if len(user_data) == 0:
        raise EmptyDatasetError(f"dataset {user_data.name!r} is empty")
    x = user_data.images.reshape(len(user_data), -1)
    out = model.copy()
    for k, layer in enumerate(model.layout.bn_layers):
        mean, var = _population_stats(out, out.bn, x, layer)
        out.bn[k] = BnStats(mean, var, out.bn[k].momentum)
    return out


def adabn_s(model: Model, user_data: LabeledSet, cfg: TrainConfig | None = None,
            trace: list | None = None) -> Model:
    """Train gamma/beta on labeled user data, then finalise the statistics with ``adabn``.

    Runs ``cfg.max_epochs`` epochs of SGD at ``cfg.lr`` without early
    stopping; running statistics follow the usual moving average during
    those epochs. If ``trace`` is given, the length of every gradient vector
    formed is appended to it.
    """
    cfg = cfg or TrainConfig()
    _require_bn(model)
    if not isinstance(user_data, LabeledSet):
        raise LabelError("AdaBN-S needs labeled user data")
    if len(user_data) == 0:
        raise EmptyDatasetError(f"dataset {user_data.name!r} is empty")
    work = model.copy()
    if cfg.max_epochs:
        x = user_data.images.reshape(len(user_data), -1)
        y = user_data.labels
        mask = model.layout.mask("gamma", "beta")
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.max_epochs):
            for idx in _batches(len(x), cfg.batch_size, rng, has_bn=True):
                if len(idx) < 2:
                    continue
                logits, tape, batch_stats = propagate(work.layout, work.params, work.bn, x[idx], True)
                _, dlogits = cross_entropy(logits, y[idx])
                grad = backprop(work.layout, work.params, tape, dlogits, True, only_bn=True)
                if trace is not None:
                    trace.append(grad.size)
                work.params[mask] -= cfg.lr * grad
                _update_running(work.bn, batch_stats)
    return adabn(work, user_data.strip_labels())
