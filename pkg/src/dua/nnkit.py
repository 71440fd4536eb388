"""Minimal dense network engine with exact reverse-mode gradients.

Parameters live in one flat float64 vector per model; the layout defines how
that vector is cut into per-layer weights. Supported layers are ``Dense``,
``ReLU``, ``BatchNorm`` and a final ``SoftmaxOutput`` marker (the network
returns pre-softmax logits; the softmax only enters through the loss).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol

import numpy as np

from .datasets import LabeledSet
from .errors import ConfigError, EmptyDatasetError, LabelError, LayoutError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class BatchNorm:
    features: int


@dataclass(frozen=True)
class SoftmaxOutput:
    classes: int


Layer = Dense | ReLU | BatchNorm | SoftmaxOutput


@dataclass(frozen=True)
class Segment:
    """Location of one named parameter block inside the flat vector."""

    layer: int
    name: str  # "W", "b", "gamma" or "beta"
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


@dataclass(frozen=True)
class ModelLayout:
    layers: tuple
    input_shape: tuple[int, int] = (28, 28)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        width = self.input_shape[0] * self.input_shape[1]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.n_in != width:
                    raise LayoutError(f"layer {i}: Dense expects {layer.n_in} inputs, gets {width}")
                if layer.n_out < 1:
                    raise LayoutError(f"layer {i}: Dense needs at least one output")
                width = layer.n_out
            elif isinstance(layer, BatchNorm):
                if layer.features != width:
                    raise LayoutError(f"layer {i}: BatchNorm over {layer.features} features, gets {width}")
            elif isinstance(layer, SoftmaxOutput):
                if i != len(self.layers) - 1:
                    raise LayoutError("SoftmaxOutput must be the last layer")
                if layer.classes != width:
                    raise LayoutError(f"SoftmaxOutput over {layer.classes} classes, gets {width}")
            elif not isinstance(layer, ReLU):
                raise LayoutError(f"layer {i}: unsupported layer {layer!r}")
        segments = []
        start = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                blocks = [("W", (layer.n_in, layer.n_out)), ("b", (layer.n_out,))]
            elif isinstance(layer, BatchNorm):
                blocks = [("gamma", (layer.features,)), ("beta", (layer.features,))]
            else:
                blocks = []
            for name, shape in blocks:
                seg = Segment(i, name, start, shape)
                segments.append(seg)
                start += seg.size
        object.__setattr__(self, "_segments", tuple(segments))
        object.__setattr__(self, "_n_params", start)
        object.__setattr__(self, "_n_out", width)

    @property
    def n_params(self) -> int:
        return self._n_params

    @property
    def n_inputs(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    @property
    def n_outputs(self) -> int:
        return self._n_out

    @property
    def segments(self) -> tuple[Segment, ...]:
        return self._segments

    @property
    def bn_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm)]

    @property
    def bn_features(self) -> int:
        return sum(self.layers[i].features for i in self.bn_layers)

    @property
    def layout_id(self) -> str:
        return hashlib.sha256(repr((self.layers, self.input_shape)).encode()).hexdigest()[:16]

    def split(self, values: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Per-layer dicts of reshaped views into ``values``."""
        if values.shape != (self.n_params,):
            raise LayoutError(f"expected {self.n_params} parameters, got {values.shape}")
        out: list[dict[str, np.ndarray]] = [{} for _ in self.layers]
        for seg in self.segments:
            out[seg.layer][seg.name] = values[seg.slice].reshape(seg.shape)
        return out

    def flatten(self, blocks: list[dict[str, np.ndarray]]) -> np.ndarray:
        values = np.empty(self.n_params)
        for seg in self.segments:
            values[seg.slice] = np.asarray(blocks[seg.layer][seg.name]).ravel()
        return values

    def mask(self, *names: str) -> np.ndarray:
        """Boolean mask over the flat vector selecting the named blocks."""
        m = np.zeros(self.n_params, dtype=bool)
        for seg in self.segments:
            if seg.name in names:
                m[seg.slice] = True
        return m


def mlp_layout(input_shape=(28, 28), hidden=(100, 100), classes=10, batchnorm=False) -> ModelLayout:
    """Dense/ReLU stack, optionally with BatchNorm between each Dense and ReLU."""
    layers: list = []
    width = input_shape[0] * input_shape[1]
    for h in hidden:
        layers.append(Dense(width, h))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        width = h
    layers.append(Dense(width, classes))
    layers.append(SoftmaxOutput(classes))
    return ModelLayout(tuple(layers), tuple(input_shape))


@dataclass
class BnStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    def copy(self) -> "BnStats":
        return BnStats(self.mean.copy(), self.var.copy(), self.momentum)


@dataclass
class Model:
    layout: ModelLayout
    params: np.ndarray
    bn: list[BnStats] = field(default_factory=list)
    mode: str = "eval"

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.n_params,):
            raise LayoutError(f"expected {self.layout.n_params} parameters, got {self.params.shape}")
        if len(self.bn) != len(self.layout.bn_layers):
            raise LayoutError("one BnStats entry per BatchNorm layer is required")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def copy(self) -> "Model":
        return Model(self.layout, self.params.copy(), [s.copy() for s in self.bn], self.mode)

    def with_mode(self, mode: str) -> "Model":
        m = self.copy()
        m.mode = mode
        m.__post_init__()
        return m

    def digest(self) -> str:
        h = hashlib.sha256(self.params.tobytes())
        for s in self.bn:
            h.update(s.mean.tobytes())
            h.update(s.var.tobytes())
        return h.hexdigest()


def init_model(layout: ModelLayout, seed: int) -> Model:
    """He-uniform Dense weights, zero biases, gamma=1 / beta=0, unit running variance."""
    rng = np.random.default_rng(seed)
    blocks = []
    for layer in layout.layers:
        if isinstance(layer, Dense):
            bound = np.sqrt(6.0 / layer.n_in)
            blocks.append({"W": rng.uniform(-bound, bound, (layer.n_in, layer.n_out)),
                           "b": np.zeros(layer.n_out)})
        elif isinstance(layer, BatchNorm):
            blocks.append({"gamma": np.ones(layer.features), "beta": np.zeros(layer.features)})
        else:
            blocks.append({})
    bn = [BnStats(np.zeros(layout.layers[i].features), np.ones(layout.layers[i].features))
          for i in layout.bn_layers]
    return Model(layout, layout.flatten(blocks), bn)


# ---------------------------------------------------------------- propagation


def _as_matrix(layout: ModelLayout, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[1:] != layout.input_shape:
            raise LayoutError(f"images of shape {x.shape[1:]} do not fit input {layout.input_shape}")
        x = x.reshape(len(x), -1)
    elif x.ndim != 2 or x.shape[1] != layout.n_inputs:
        raise LayoutError(f"batch of shape {x.shape} does not fit input {layout.input_shape}")
    if len(x) == 0:
        raise EmptyDatasetError("empty batch")
    return x


def propagate(layout, params, bn, x, train: bool, eps: float = BN_EPS, upto: int | None = None):
    """Forward pass returning ``(logits, tape, batch_stats)``.

    ``tape`` keeps what the backward pass needs; ``batch_stats`` holds the
    (mean, population variance) seen by each BatchNorm layer in train mode.
    With ``upto`` the pass stops early and the first element is the input
    of layer ``upto``. Nothing is mutated.
    """
    x = _as_matrix(layout, x)
    if train and layout.bn_layers and len(x) < 2:
        raise LayoutError("train-mode BatchNorm needs at least two samples per batch")
    blocks = layout.split(params)
    tape = []
    batch_stats = []
    bn_iter = iter(bn)
    a = x
    for i, (layer, p) in enumerate(zip(layout.layers, blocks)):
        if i == upto:
            break
        if isinstance(layer, Dense):
            tape.append(a)
            a = a @ p["W"] + p["b"]
        elif isinstance(layer, ReLU):
            mask = a > 0
            tape.append(mask)
            a = a * mask
        elif isinstance(layer, BatchNorm):
            stats = next(bn_iter)
            if train:
                mean = a.mean(axis=0)
                var = a.var(axis=0)
                batch_stats.append((mean, var))
            else:
                mean, var = stats.mean, stats.var
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (a - mean) * inv_std
            tape.append((xhat, inv_std))
            a = p["gamma"] * xhat + p["beta"]
        else:
            tape.append(None)
    return a, tape, batch_stats


def backprop(layout, params, tape, dlogits, train: bool, reduce: str = "sum", only_bn: bool = False):
    """Reverse pass from d(objective)/d(logits) to parameter gradients.

    ``reduce="sum"`` gives the ordinary gradient of the summed objective.
    ``"abs"`` and ``"sq"`` give sums over samples of the absolute value or
    the square of each sample's own gradient; they require eval-mode tape,
    where samples do not interact. With ``only_bn`` only gamma/beta gradients
    are formed and the result has length ``2 * layout.bn_features``.
    """
    if reduce not in ("sum", "abs", "sq"):
        raise ConfigError(f"unknown reduction {reduce!r}")
    if reduce != "sum" and train:
        raise ConfigError("per-sample reductions need eval-mode propagation")
    blocks = layout.split(params)
    grads: dict[tuple[int, str], np.ndarray] = {}
    if reduce == "abs":
        f = np.abs
    elif reduce == "sq":
        f = np.square
    else:
        f = None
    delta = dlogits
    for i in range(len(layout.layers) - 1, -1, -1):
        layer, p, rec = layout.layers[i], blocks[i], tape[i]
        if isinstance(layer, Dense):
            if not only_bn:
                a = rec
                if f is None:
                    grads[i, "W"] = a.T @ delta
                    grads[i, "b"] = delta.sum(axis=0)
                else:
                    # per-sample outer products factor elementwise: |a d| = |a||d|, (a d)^2 = a^2 d^2
                    fd = f(delta)
                    grads[i, "W"] = f(a).T @ fd
                    grads[i, "b"] = fd.sum(axis=0)
            if i > 0:
                delta = delta @ p["W"].T
        elif isinstance(layer, ReLU):
            delta = delta * rec
        elif isinstance(layer, BatchNorm):
            xhat, inv_std = rec
            if f is None:
                grads[i, "gamma"] = (delta * xhat).sum(axis=0)
                grads[i, "beta"] = delta.sum(axis=0)
            else:
                grads[i, "gamma"] = f(delta * xhat).sum(axis=0)
                grads[i, "beta"] = f(delta).sum(axis=0)
            dxhat = delta * p["gamma"]
            if train:
                n = len(dxhat)
                delta = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                delta = dxhat * inv_std
    if only_bn:
        return np.concatenate([grads[seg.layer, seg.name].ravel() for seg in layout.segments
                               if seg.name in ("gamma", "beta")]) if layout.bn_layers else np.zeros(0)
    out = np.empty(layout.n_params)
    for seg in layout.segments:
        out[seg.slice] = grads[seg.layer, seg.name].ravel()
    return out


def _update_running(bn: list[BnStats], batch_stats) -> None:
    for stats, (mean, var) in zip(bn, batch_stats):
        m = stats.momentum
        stats.mean = (1 - m) * stats.mean + m * mean
        stats.var = (1 - m) * stats.var + m * var


def forward(model: Model, x) -> np.ndarray:
    """Logits for a batch. In train mode the running BN statistics are updated."""
    train = model.mode == "train"
    logits, _, batch_stats = propagate(model.layout, model.params, model.bn, x, train)
    if train:
        _update_running(model.bn, batch_stats)
    return logits


def predict(model: Model, x, chunk: int = 2048) -> np.ndarray:
    """Eval-mode class predictions."""
    x = np.asarray(x)
    out = []
    for start in range(0, len(x), chunk):
        logits, _, _ = propagate(model.layout, model.params, model.bn, x[start:start + chunk], False)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict_within(model: Model, x, classes, chunk: int = 2048) -> np.ndarray:
    """Eval-mode predictions restricted to the given output classes."""
    classes = np.asarray(classes)
    x = np.asarray(x)
    out = []
    for start in range(0, len(x), chunk):
        logits, _, _ = propagate(model.layout, model.params, model.bn, x[start:start + chunk], False)
        out.append(classes[logits[:, classes].argmax(axis=1)])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, data: LabeledSet, classes=None) -> float:
    """Fraction correct; with ``classes`` the argmax runs over those outputs only."""
    if len(data) == 0:
        raise EmptyDatasetError(f"dataset {data.name!r} is empty")
    if classes is None:
        pred = predict(model, data.images)
    else:
        pred = predict_within(model, data.images, classes)
    return float(np.mean(pred == data.labels))


# ---------------------------------------------------------------- losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise LabelError("one label per sample is required")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


class Penalty(Protocol):
    def evaluate(self, params: np.ndarray, x: np.ndarray, logits: np.ndarray
                 ) -> tuple[float, np.ndarray | None, np.ndarray | None]:
        """Return (value, grad wrt params or None, grad wrt logits or None)."""


def _loss_grad(model: Model, x, y, penalty: Penalty | None, train: bool):
    x = _as_matrix(model.layout, x)
    logits, tape, batch_stats = propagate(model.layout, model.params, model.bn, x, train)
    loss, dlogits = cross_entropy(logits, y)
    pgrad = None
    if penalty is not None:
        value, pgrad, plogits = penalty.evaluate(model.params, x, logits)
        loss += value
        if plogits is not None:
            dlogits = dlogits + plogits
    grads = backprop(model.layout, model.params, tape, dlogits, train)
    if pgrad is not None:
        grads += pgrad
    return loss, grads, batch_stats


def loss_and_grad(model: Model, x, y, penalty: Penalty | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (+ penalty) and its exact gradient. Does not touch BN state."""
    loss, grads, _ = _loss_grad(model, x, y, penalty, model.mode == "train")
    return loss, grads


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 20
    max_epochs: int = 10
    anneal_factor: float = 0.1
    patience_epochs: int = 5
    l2_transfer_lambda: float = 1e-4
    reg_lambda: float = 100.0
    lwf_temperature: float = 2.0
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.anneal_factor < 1:
            raise ConfigError("anneal_factor must lie in (0, 1)")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if self.l2_transfer_lambda < 0 or self.reg_lambda < 0:
            raise ConfigError("penalty strengths must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.lwf_temperature > 0:
            raise ConfigError("lwf_temperature must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


def _batches(n: int, size: int, rng: np.random.Generator, has_bn: bool):
    order = rng.permutation(n)
    cuts = list(range(0, n, size))
    batches = [order[c:c + size] for c in cuts]
    if has_bn and len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train(model: Model, train_set: LabeledSet, val_set: LabeledSet, cfg: TrainConfig,
          penalty: Penalty | None = None) -> tuple[Model, list[EpochRecord]]:
    """Mini-batch SGD with validation-driven annealing and early stopping.

    After ``patience_epochs`` epochs without a new best validation accuracy
    the learning rate is multiplied by ``anneal_factor``; after as many
    further non-improving epochs training stops. The best-validation snapshot
    is returned.
    """
    if cfg.max_epochs == 0:
        return model.copy(), []
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDatasetError("training and validation sets must be nonempty")
    x = train_set.images.reshape(len(train_set), -1)
    y = train_set.labels
    if y.max() >= model.layout.n_outputs:
        raise LabelError(f"labels must lie in [0, {model.layout.n_outputs})")
    rng = np.random.default_rng(cfg.seed)
    work = model.copy()
    has_bn = bool(model.layout.bn_layers)
    lr = cfg.lr
    velocity = np.zeros_like(work.params)
    best_acc, best = -np.inf, None
    stale, annealed = 0, False
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for idx in _batches(len(x), cfg.batch_size, rng, has_bn):
            if has_bn and len(idx) < 2:
                continue
            loss, grads, batch_stats = _loss_grad(work, x[idx], y[idx], penalty, train=True)
            if cfg.momentum:
                velocity = cfg.momentum * velocity + grads
                grads = velocity
            work.params = work.params - lr * grads
            _update_running(work.bn, batch_stats)
            losses.append(loss)
        if not np.all(np.isfinite(work.params)):
            raise FloatingPointError(f"non-finite parameters after epoch {epoch}")
        val_acc = accuracy(work, val_set)
        history.append(EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), val_acc, lr))
        if val_acc > best_acc:
            best_acc, best = val_acc, work.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience_epochs:
                if annealed:
                    break
                lr *= cfg.anneal_factor
                annealed = True
                stale = 0
    best.mode = model.mode
    return best, history


# ---------------------------------------------------------------- persistence

_LAYER_TYPES = {cls.__name__: cls for cls in (Dense, ReLU, BatchNorm, SoftmaxOutput)}


def layout_to_json(layout: ModelLayout) -> str:
    layers = [{"type": type(layer).__name__, **asdict(layer)} for layer in layout.layers]
    return json.dumps({"input_shape": list(layout.input_shape), "layers": layers})


def layout_from_json(text: str) -> ModelLayout:
    doc = json.loads(text)
    layers = []
    for spec in doc["layers"]:
        spec = dict(spec)
        kind = spec.pop("type")
        if kind not in _LAYER_TYPES:
            raise LayoutError(f"unknown layer type {kind!r}")
        layers.append(_LAYER_TYPES[kind](**spec))
    return ModelLayout(tuple(layers), tuple(doc["input_shape"]))


def save_model(path, model: Model) -> None:
    arrays = {"params": model.params, "layout": np.array(layout_to_json(model.layout))}
    for k, s in enumerate(model.bn):
        arrays[f"bn{k}_mean"] = s.mean
        arrays[f"bn{k}_var"] = s.var
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> Model:
    with np.load(path) as z:
        layout = layout_from_json(str(z["layout"]))
        bn = [BnStats(z[f"bn{k}_mean"].copy(), z[f"bn{k}_var"].copy()) for k in range(len(layout.bn_layers))]
        return Model(layout, z["params"].copy(), bn)
