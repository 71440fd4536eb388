"""Task-incremental training: the IMM expert chain and user-agnostic baselines."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datasets import LabeledSet, access_context, concat
from .errors import ConfigError, EmptyDatasetError, LabelError, LayoutError, ShapeError, TaskOverlapError
from .importance import ImportanceVector, estimate_fim, estimate_mas
from .nnkit import Model, ModelLayout, TrainConfig, init_model, log_softmax, propagate, train

FINETUNE_EPOCHS = 10
LWF_STRENGTH = 1.0


@dataclass
class Task:
    task_id: int
    classes: tuple[int, ...]
    train: LabeledSet
    val: LabeledSet


@dataclass
class TaskSequence:
    tasks: list[Task]
    n_classes: int

    def __post_init__(self):
        if not self.tasks:
            raise EmptyDatasetError("a task sequence needs at least one task")
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen.intersection(task.classes)
            if overlap:
                raise TaskOverlapError(f"task {task.task_id} reuses classes {sorted(overlap)}")
            seen.update(task.classes)
            if min(task.classes) < 0 or max(task.classes) >= self.n_classes:
                raise LabelError(f"task {task.task_id} has classes outside [0, {self.n_classes})")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("task ids must be unique")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def class_subsets(self) -> list[tuple[int, ...]]:
        return [t.classes for t in self.tasks]


@dataclass(frozen=True)
class Provenance:
    expert_id: str
    task_id: int
    parent: str | None  # expert whose parameters initialised this one
    init_digest: str
    final_digest: str


@dataclass
class ExpertSet:
    models: list[Model] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)
    unadapted: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.models)

    @property
    def ids(self) -> list[str]:
        return [p.expert_id for p in self.provenance]

    @property
    def task_ids(self) -> list[int]:
        return [p.task_id for p in self.provenance]

    def append(self, model: Model, prov: Provenance) -> None:
        self.models.append(model)
        self.provenance.append(prov)


# ------------------------------------------------------------------ penalties

PENALTY_KINDS = ("L2Transfer", "EWC", "MASReg", "LwF")


@dataclass
class PenaltyTerm:
    kind: str
    anchor_params: np.ndarray
    strength: float
    anchor_importance: ImportanceVector | None = None
    prev_model: Model | None = None
    temperature: float = 2.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if self.strength < 0:
            raise ConfigError("penalty strength must be nonnegative")
        if (self.anchor_importance is not None) != (self.kind in ("EWC", "MASReg")):
            raise ConfigError("anchor_importance is required for EWC/MASReg and only for them")
        if (self.prev_model is not None) != (self.kind == "LwF"):
            raise ConfigError("prev_model is required for LwF and only for it")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    def evaluate(self, params: np.ndarray, x: np.ndarray, logits: np.ndarray):
        if self.kind == "L2Transfer":
            diff = params - self.anchor_params
            return self.strength * float(diff @ diff), 2.0 * self.strength * diff, None
        if self.kind in ("EWC", "MASReg"):
            value, grad = ewc_or_mas_penalty(params, self)
            return value, grad, None
        old, _, _ = propagate(self.prev_model.layout, self.prev_model.params, self.prev_model.bn, x, False)
        value, dlogits = lwf_distill_loss(logits, old, self.temperature)
        return self.strength * value, None, self.strength * dlogits


def ewc_or_mas_penalty(params: np.ndarray, term: PenaltyTerm) -> tuple[float, np.ndarray]:
    """``strength * sum_k Omega_k (theta_k - anchor_k)^2`` and its gradient."""
    if term.kind not in ("EWC", "MASReg"):
        raise ConfigError(f"{term.kind} is not an importance-weighted penalty")
    omega = term.anchor_importance.values
    if not (len(params) == len(term.anchor_params) == len(omega)):
        raise ShapeError("params, anchor and importance must have equal length")
    diff = params - term.anchor_params
    weighted = omega * diff
    return term.strength * float(weighted @ diff), 2.0 * term.strength * weighted


def lwf_distill_loss(new_logits: np.ndarray, old_logits: np.ndarray, temperature: float
                     ) -> tuple[float, np.ndarray]:
    """``T^2`` times the batch-mean KL(softmax(old/T) || softmax(new/T)), with its logit gradient."""
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    new_logits = np.asarray(new_logits, dtype=np.float64)
    old_logits = np.asarray(old_logits, dtype=np.float64)
    if new_logits.shape != old_logits.shape or new_logits.ndim != 2:
        raise ShapeError("logit matrices must have equal (batch, classes) shapes")
    n = len(new_logits)
    log_p = log_softmax(old_logits / temperature)
    log_q = log_softmax(new_logits / temperature)
    kl = (np.exp(log_p) * (log_p - log_q)).sum(axis=1).mean()
    grad = temperature * (np.exp(log_q) - np.exp(log_p)) / n
    return float(temperature ** 2 * kl), grad


# ------------------------------------------------------------------ training


def _task_seed(cfg: TrainConfig, position: int) -> int:
    return cfg.seed + position


def _initial(seq: TaskSequence, cfg: TrainConfig, layout: ModelLayout, init: Model | None) -> Model:
    if init is not None:
        if init.layout.n_outputs < seq.n_classes:
            raise LayoutError(f"output layer has {init.layout.n_outputs} units, sequence needs {seq.n_classes}")
        return init.copy()
    return init_model(layout, cfg.seed)


def train_expert_sequence(seq: TaskSequence, cfg: TrainConfig, layout: ModelLayout | None = None,
                          init: Model | None = None) -> ExpertSet:
    """Train one expert per task with weight transfer and L2 transfer.

    Expert ``t+1`` starts from expert ``t``'s parameters and pays
    ``cfg.l2_transfer_lambda * ||theta - theta_t||^2``. Each task is trained
    inside its own access context, so dataset access logs show which task
    touched which data.
    """
    if layout is None and init is None:
        raise ConfigError("either a layout or an initial model is required")
    model = _initial(seq, cfg, layout or init.layout, init)
    experts = ExpertSet()
    for position, task in enumerate(seq.tasks):
        model, _ = train_next_expert(model, task, cfg, position, experts)
    return experts


def train_next_expert(model: Model, task: Task, cfg: TrainConfig, position: int,
                      experts: ExpertSet) -> tuple[Model, list]:
    """Train the expert for ``task`` starting from ``model`` and append it to ``experts``."""
    parent = experts.ids[-1] if len(experts) else None
    if parent is not None and model.digest() != experts.provenance[-1].final_digest:
        raise ConfigError("weight transfer requires starting from the last expert")
    penalty = None
    if parent is not None:
        penalty = PenaltyTerm("L2Transfer", model.params.copy(), cfg.l2_transfer_lambda)
    init_digest = model.digest()
    with access_context(f"task-{task.task_id}"):
        trained, history = train(model, task.train, task.val, cfg.replace(seed=_task_seed(cfg, position)),
                                 penalty)
    expert_id = f"expert-{task.task_id}"
    experts.append(trained, Provenance(expert_id, task.task_id, parent, init_digest, trained.digest()))
    return trained.copy(), history


def train_sequential(seq: TaskSequence, cfg: TrainConfig, method: str, layout: ModelLayout | None = None,
                     init: Model | None = None) -> list[Model]:
    """Regularised fine-tuning baselines; returns the network after each task.

    ``method`` is ``"EWC"`` (Fisher importance), ``"MAS"`` (MAS importance),
    ``"LwF"`` (distillation from the previous network) or ``"FT"`` (plain
    fine-tuning). Importances are summed over tasks and anchored at the most
    recent optimum.
    """
    if method not in ("EWC", "MAS", "LwF", "FT"):
        raise ConfigError(f"unknown sequential method {method!r}")
    if layout is None and init is None:
        raise ConfigError("either a layout or an initial model is required")
    model = _initial(seq, cfg, layout or init.layout, init)
    omega: np.ndarray | None = None
    snapshots: list[Model] = []
    for position, task in enumerate(seq.tasks):
        penalty = None
        if snapshots:
            if method == "EWC":
                penalty = PenaltyTerm("EWC", model.params.copy(), cfg.reg_lambda,
                                      anchor_importance=ImportanceVector(omega, "FIM", 0))
            elif method == "MAS":
                penalty = PenaltyTerm("MASReg", model.params.copy(), cfg.reg_lambda,
                                      anchor_importance=ImportanceVector(omega, "MAS", 0))
            elif method == "LwF":
                penalty = PenaltyTerm("LwF", model.params.copy(), LWF_STRENGTH, prev_model=model.copy(),
                                      temperature=cfg.lwf_temperature)
        with access_context(f"task-{task.task_id}"):
            model, _ = train(model, task.train, task.val, cfg.replace(seed=_task_seed(cfg, position)), penalty)
            if method == "EWC":
                step = estimate_fim(model, task.train).values
            elif method == "MAS":
                step = estimate_mas(model, task.train.strip_labels()).values
            else:
                step = None
        if step is not None:
            omega = step if omega is None else omega + step
        snapshots.append(model.copy())
    return snapshots


def accumulate_importance(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Running additive sum of per-task importances."""
    if not vectors:
        raise ConfigError("nothing to accumulate")
    return np.sum(np.stack(vectors), axis=0)


def pool_tasks(seq: TaskSequence) -> tuple[LabeledSet, LabeledSet]:
    return (concat([t.train for t in seq.tasks], name="joint-train"),
            concat([t.val for t in seq.tasks], name="joint-val"))


def train_joint(seq: TaskSequence, cfg: TrainConfig, layout: ModelLayout | None = None,
                init: Model | None = None) -> Model:
    """Single training run over the pooled data of every task."""
    if len(seq) == 1:
        task = seq.tasks[0]
        train_set, val_set = task.train, task.val
    else:
        train_set, val_set = pool_tasks(seq)
    model = _initial(seq, cfg, layout or (init.layout if init else None), init)
    with access_context("joint"):
        trained, _ = train(model, train_set, val_set, cfg)
    return trained


def finetune_task_experts(experts: ExpertSet, user_val: dict[int, LabeledSet], cfg: TrainConfig,
                          epochs: int = FINETUNE_EPOCHS) -> ExpertSet:
    """Fine-tune every expert on the user's labeled data of its own task.

    Runs ``epochs`` epochs at a tenth of ``cfg.lr``; the user set doubles as
    the validation set. Experts with no user data are copied unchanged and
    listed in ``unadapted``.
    """
    out = ExpertSet()
    ft_cfg = cfg.replace(lr=cfg.lr / 10, max_epochs=epochs)
    for model, prov in zip(experts.models, experts.provenance):
        data = user_val.get(prov.task_id)
        if data is None or len(data) == 0:
            tuned = model.copy()
            out.unadapted.append(prov.task_id)
        else:
            with access_context(f"finetune-{prov.task_id}"):
                tuned, _ = train(model, data, data, ft_cfg)
        out.append(tuned, Provenance(f"{prov.expert_id}-ft", prov.task_id, prov.expert_id,
                                     model.digest(), tuned.digest()))
    return out
