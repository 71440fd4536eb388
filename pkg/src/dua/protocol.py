"""Server/user interaction with every user->server message forced through bytes.

Wire format of a user prior (all little-endian)::

    magic        4s   b"DUA1"
    version      u16  schema version (1)
    user_id      u32
    n_entries    u16
    n_entries x:
        task_id       u16
        sample_count  u32
        length        u32
        values        length x f64   importance, one per parameter
    crc32        u32  over every preceding byte

The schema is closed: a message holds ids, counts and importance reals and
nothing else.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .continual import ExpertSet, Task, train_next_expert
from .datasets import ImageSet, LabeledSet, access_context, concat
from .errors import (AdaptError, ConfigError, LabelError, ProtocolError, TaskOverlapError,
                     WireFormatError)
from .importance import ImportanceVector, estimate_fim, estimate_mas
from .local_adapt import adabn, adabn_s
from .merge import MergedModel, MergeSpec, mode_imm_merge
from .nnkit import Model, ModelLayout, TrainConfig, init_model

MAGIC = b"DUA1"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4sHIH")
_ENTRY = struct.Struct("<HII")
_CRC = struct.Struct("<I")
MIN_MESSAGE_SIZE = _HEADER.size + _CRC.size

ADAPT_MODES = ("none", "AdaBN", "AdaBN-S")


# ------------------------------------------------------------------ messages


@dataclass(eq=False)
class PriorEntry:
    task_id: int
    sample_count: int
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PriorEntry):
            return NotImplemented
        return (self.task_id == other.task_id and self.sample_count == other.sample_count
                and np.asarray(self.values).dtype == np.asarray(other.values).dtype
                and np.asarray(self.values).tobytes() == np.asarray(other.values).tobytes())


@dataclass(eq=False)
class UserPriorMsg:
    user_id: int
    entries: list[PriorEntry] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __eq__(self, other):
        if not isinstance(other, UserPriorMsg):
            return NotImplemented
        return (self.user_id == other.user_id and self.schema_version == other.schema_version
                and self.entries == other.entries)

    def digest(self) -> str:
        return hashlib.sha256(encode_msg(self)).hexdigest()

    def summary(self) -> str:
        lengths = sorted({len(e.values) for e in self.entries})
        return (f"UserPriorMsg(v{self.schema_version}, user={self.user_id}, entries={len(self.entries)}, "
                f"tasks={[e.task_id for e in self.entries]}, lengths={lengths})")


def _check_range(name: str, value, bits: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise WireFormatError(f"{name} must be an integer, got {type(value).__name__}")
    if not 0 <= int(value) < 2 ** bits:
        raise WireFormatError(f"{name}={value} does not fit in u{bits}")
    return int(value)


def encode_msg(msg: UserPriorMsg) -> bytes:
    """Serialize a user prior; anything outside the closed schema is rejected."""
    if type(msg) is not UserPriorMsg:
        raise WireFormatError(f"only UserPriorMsg can be encoded, got {type(msg).__name__}")
    if msg.schema_version != SCHEMA_VERSION:
        raise WireFormatError(f"unknown schema_version {msg.schema_version}")
    entries = list(msg.entries)
    parts = [_HEADER.pack(MAGIC, SCHEMA_VERSION, _check_range("user_id", msg.user_id, 32),
                          _check_range("entry count", len(entries), 16))]
    for entry in entries:
        if type(entry) is not PriorEntry:
            raise WireFormatError(f"entries must be PriorEntry, got {type(entry).__name__}")
        values = entry.values
        if not isinstance(values, np.ndarray) or values.dtype != np.float64 or values.ndim != 1:
            raise WireFormatError("importance values must be a flat float64 array")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise WireFormatError("importance values must be finite and nonnegative")
        parts.append(_ENTRY.pack(_check_range("task_id", entry.task_id, 16),
                                 _check_range("sample_count", entry.sample_count, 32),
                                 _check_range("length", len(values), 32)))
        parts.append(values.astype("<f8", copy=False).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def decode_msg(data: bytes) -> UserPriorMsg:
    data = bytes(data)
    if len(data) < MIN_MESSAGE_SIZE:
        raise WireFormatError(f"message truncated: {len(data)} bytes")
    magic, version, user_id, n_entries = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise WireFormatError(f"unknown schema_version {version}")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != crc:
        raise WireFormatError("checksum mismatch")
    offset = _HEADER.size
    end = len(data) - _CRC.size
    entries = []
    for _ in range(n_entries):
        if offset + _ENTRY.size > end:
            raise WireFormatError("message truncated inside an entry header")
        task_id, sample_count, length = _ENTRY.unpack_from(data, offset)
        offset += _ENTRY.size
        if offset + 8 * length > end:
            raise WireFormatError("message truncated inside importance values")
        values = np.frombuffer(data, dtype="<f8", count=length, offset=offset).astype(np.float64)
        offset += 8 * length
        entries.append(PriorEntry(task_id, sample_count, values))
    if offset != end:
        raise WireFormatError(f"{end - offset} trailing bytes after the last entry")
    return UserPriorMsg(user_id, entries, version)


# ------------------------------------------------------------------ audit


class AuditLog:
    """One line per message: direction, byte length, schema summary.

    User->server payloads are kept in memory so a privacy scan can run over
    exactly what left the devices.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.lines: list[str] = []
        self.uploads: list[bytes] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, direction: str, size: int, summary: str) -> None:
        line = f"{direction}\t{size}\t{summary}"
        self.lines.append(line)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def upload(self, msg: UserPriorMsg) -> bytes:
        payload = encode_msg(msg)
        self.uploads.append(payload)
        self.record("user->server", len(payload), msg.summary())
        return payload

    def download(self, user_id: int, model: MergedModel | Model) -> None:
        size = model.params.nbytes + sum(s.mean.nbytes + s.var.nbytes for s in model.bn)
        self.record("server->user", size, f"Model(user={user_id}, params={len(model.params)})")


# ------------------------------------------------------------------ server


@dataclass
class ServerState:
    layout: ModelLayout
    cfg: TrainConfig
    experts: ExpertSet = field(default_factory=ExpertSet)
    server_val: dict[int, LabeledSet] = field(default_factory=dict)
    class_subsets: dict[int, tuple[int, ...]] = field(default_factory=dict)
    priors: dict[int, UserPriorMsg] = field(default_factory=dict)
    cache: dict[tuple, MergedModel] = field(default_factory=dict)
    counters: Counter = field(default_factory=Counter)
    retained_train_sets: list = field(default_factory=list)

    @property
    def task_ids(self) -> list[int]:
        return self.experts.task_ids


def server_add_task(state: ServerState, task: Task, cfg: TrainConfig | None = None) -> ServerState:
    """Train the next expert, then discard the task's training data.

    Only the model and the small validation split are kept. Existing experts
    are never modified.
    """
    cfg = cfg or state.cfg
    taken = {c for subset in state.class_subsets.values() for c in subset}
    overlap = taken.intersection(task.classes)
    if overlap:
        raise TaskOverlapError(f"task {task.task_id} reuses classes {sorted(overlap)}")
    if task.task_id in state.class_subsets:
        raise ConfigError(f"task id {task.task_id} already present")
    if max(task.classes) >= state.layout.n_outputs:
        raise LabelError(f"task {task.task_id} has classes beyond the output layer")
    if len(state.experts):
        start = state.experts.models[-1].copy()
    else:
        start = init_model(state.layout, cfg.seed)
    train_next_expert(start, task, cfg, len(state.experts), state.experts)
    state.counters["training_runs"] += 1
    task.train.release()
    state.server_val[task.task_id] = task.val
    state.class_subsets[task.task_id] = tuple(task.classes)
    return state


def server_receive(state: ServerState, payload: bytes) -> UserPriorMsg:
    msg = decode_msg(payload)
    state.priors[msg.user_id] = msg
    state.counters["messages_received"] += 1
    return msg


def _importances(state: ServerState, prior: UserPriorMsg, upto: int) -> list[ImportanceVector]:
    by_task = {e.task_id: e for e in prior.entries}
    if len(by_task) != len(prior.entries):
        raise ProtocolError("duplicate task entries in prior")
    wanted = state.task_ids
    if set(by_task) != set(wanted):
        missing = sorted(set(wanted) - set(by_task))
        extra = sorted(set(by_task) - set(wanted))
        raise ProtocolError(f"prior does not match experts: missing {missing}, extra {extra}")
    out = []
    for task_id in wanted[:upto]:
        e = by_task[task_id]
        if len(e.values) != state.layout.n_params:
            raise ProtocolError(f"entry for task {task_id} has {len(e.values)} values, "
                                f"expected {state.layout.n_params}")
        out.append(ImportanceVector(e.values, "prior", e.sample_count, f"expert-{task_id}",
                                    f"user-{prior.user_id}/task-{task_id}"))
    return out


def server_personalize(state: ServerState, prior: UserPriorMsg, spec: MergeSpec | None = None,
                       upto: int | None = None) -> MergedModel:
    """Merge experts ``1..upto`` (default all) with the user's importances.

    Results are cached per (user, prior digest, upto, alphas); no training
    happens here.
    """
    n = len(state.experts)
    upto = n if upto is None else upto
    if not 1 <= upto <= n:
        raise ProtocolError(f"cannot merge {upto} of {n} experts")
    spec = spec or MergeSpec.uniform(upto)
    key = (prior.user_id, prior.digest(), upto, spec.alphas, spec.epsilon_floor)
    if key in state.cache:
        state.counters["cache_hits"] += 1
        return state.cache[key]
    importances = _importances(state, prior, upto)
    merged = mode_imm_merge(state.experts.models[:upto], importances, spec, state.experts.ids[:upto])
    state.counters["merges"] += 1
    state.cache[key] = merged
    return merged


def server_prior(state: ServerState, mode: str, user_id: int = 0) -> UserPriorMsg:
    """Prior estimated on the server's own validation splits (user-agnostic IMM)."""
    if mode not in ("MAS", "FIM"):
        raise ConfigError(f"unknown importance mode {mode!r}")
    entries = []
    with access_context("server-imm"):
        for model, task_id in zip(state.experts.models, state.task_ids):
            data = state.server_val[task_id]
            imp = estimate_mas(model, data.strip_labels()) if mode == "MAS" else estimate_fim(model, data)
            entries.append(PriorEntry(task_id, imp.sample_count, imp.values))
    return UserPriorMsg(user_id, entries)


# ------------------------------------------------------------------ user


@dataclass
class UserNode:
    """A user's device: local data split into evaluation and user-validation halves.

    ``user_val`` may hold ``ImageSet`` (unlabeled) or ``LabeledSet`` values.
    Only ``user_val`` is ever read by adaptation code.
    """

    user_id: int
    eval: dict[int, LabeledSet]
    user_val: dict[int, ImageSet]
    spec: object = None
    received: list = field(default_factory=list)
    final_model: Model | None = None
    log: list | None = None

    def unlabeled(self) -> "UserNode":
        val = {t: (d.strip_labels() if isinstance(d, LabeledSet) else d) for t, d in self.user_val.items()}
        return UserNode(self.user_id, self.eval, val, self.spec, log=self.log)

    def adaptation_data(self, tasks: Sequence[int] | None = None) -> ImageSet:
        tasks = sorted(self.user_val) if tasks is None else list(tasks)
        sets = [self.user_val[t] for t in tasks if t in self.user_val]
        if not sets:
            raise AdaptError(f"user {self.user_id} has no validation data for tasks {tasks}")
        if all(isinstance(s, LabeledSet) for s in sets):
            return concat(sets, name=f"user-{self.user_id}-val", log=self.log)
        return ImageSet(np.concatenate([s.images for s in sets]), np.concatenate([s.ids for s in sets]),
                        name=f"user-{self.user_id}-val", log=self.log)


def user_build_prior(node: UserNode, experts: ExpertSet, mode: str) -> UserPriorMsg:
    """One importance vector per expert, from the user's validation half of that task."""
    if mode not in ("MAS", "FIM"):
        raise ConfigError(f"unknown importance mode {mode!r}")
    entries = []
    with access_context(f"user-{node.user_id}-prior"):
        for model, task_id in zip(experts.models, experts.task_ids):
            data = node.user_val.get(task_id)
            if data is None:
                raise ProtocolError(f"user {node.user_id} has no data for task {task_id}")
            if mode == "MAS":
                if isinstance(data, LabeledSet):
                    data = data.strip_labels()
                imp = estimate_mas(model, data)
            else:
                if not isinstance(data, LabeledSet):
                    raise LabelError(f"FIM prior needs labels; user {node.user_id} data is unlabeled")
                imp = estimate_fim(model, data)
            entries.append(PriorEntry(task_id, imp.sample_count, imp.values))
    return UserPriorMsg(node.user_id, entries)


def user_local_adapt(node: UserNode, model: MergedModel | Model, mode: str,
                     cfg: TrainConfig | None = None, tasks: Sequence[int] | None = None) -> Model:
    """Apply local adaptation to any received model using only the user's validation half."""
    if mode not in ADAPT_MODES:
        raise ConfigError(f"unknown adaptation mode {mode!r}; expected one of {ADAPT_MODES}")
    base = model.to_model() if isinstance(model, MergedModel) else model.copy()
    node.received.append(base)
    if mode == "none":
        out = base
    else:
        if not base.layout.bn_layers:
            raise AdaptError(f"{mode} needs a layout with BatchNorm")
        with access_context(f"user-{node.user_id}-adapt"):
            data = node.adaptation_data(tasks)
            if mode == "AdaBN":
                out = adabn(base, data.strip_labels() if isinstance(data, LabeledSet) else data)
            else:
                if not isinstance(data, LabeledSet):
                    raise LabelError("AdaBN-S needs labeled user data")
                out = adabn_s(base, data, cfg)
    node.final_model = out
    return out


# ------------------------------------------------------------------ privacy audit

_HASH_BASE = np.uint64(0x100000001B3)


def _window_hashes(buf: bytes, window: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8).astype(np.uint64)
    n = len(b) - window + 1
    if n <= 0:
        return np.zeros(0, dtype=np.uint64)
    h = np.zeros(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(window):
            h = h * _HASH_BASE + b[j:j + n]
    return h


def sample_encodings(images: np.ndarray) -> list[bytes]:
    """Byte encodings under which a sample could leak: f64, f32 and u8 pixels."""
    x = np.asarray(images, dtype=np.float64)
    return [x.astype("<f8").tobytes(), x.astype("<f4").tobytes(),
            np.clip(np.rint(x * 255), 0, 255).astype(np.uint8).tobytes()]


MIN_DISTINCT_BYTES = 8


def find_leaks(payloads: Sequence[bytes], secrets: Sequence[bytes], window: int = 64,
               batch_bytes: int = 1 << 23, min_distinct: int = MIN_DISTINCT_BYTES) -> list[tuple[int, int]]:
    """(secret index, offset) of every ``window``-byte slice of a secret found in a payload.

    Window hashes of all payloads go into one sorted table; secrets are
    hashed in batches and looked up by binary search, and every hash hit is
    confirmed by an exact substring search. Windows with fewer than
    ``min_distinct`` different byte values are skipped: zero runs with a
    stray exponent byte carry no sample content and occur naturally both in
    image backgrounds and in importance vectors.
    """
    pay_hashes = [_window_hashes(p, window) for p in payloads]
    known = np.unique(np.concatenate(pay_hashes)) if pay_hashes else np.zeros(0, dtype=np.uint64)
    hits: list[tuple[int, int]] = []
    if len(known) == 0:
        return hits

    def scan(group: list[int]) -> None:
        buf = b"".join(secrets[k] for k in group)
        lengths = np.array([len(secrets[k]) for k in group])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        h = _window_hashes(buf, window)
        if len(h) == 0:
            return
        at = np.minimum(np.searchsorted(known, h), len(known) - 1)
        for pos in np.flatnonzero(known[at] == h):
            j = int(np.searchsorted(starts, pos, side="right")) - 1
            off = int(pos - starts[j])
            if off + window > lengths[j]:
                continue  # window straddles two secrets
            chunk = buf[pos:pos + window]
            if len(set(chunk)) < min_distinct:
                continue
            if any(chunk in p for p in payloads):
                hits.append((group[j], off))

    group, size = [], 0
    for k, secret in enumerate(secrets):
        group.append(k)
        size += len(secret)
        if size >= batch_bytes:
            scan(group)
            group, size = [], 0
    if group:
        scan(group)
    return hits
