"""Digit data: IDX ingestion, a procedural stand-in, and Numbers task splits."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..datasets import LabeledSet
from ..errors import IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4:header])


def load_idx(images_path, labels_path, name: str = "idx") -> LabeledSet:
    """Parse a big-endian IDX image/label file pair (MNIST layout)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise FileNotFoundError(p)
    raw = images_path.read_bytes()
    count, rows, cols = _read_header(raw, IDX_IMAGES_MAGIC, 3, images_path)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise IdxFormatError(f"{images_path}: truncated pixel data ({len(raw)} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0

    raw = labels_path.read_bytes()
    (n_labels,) = _read_header(raw, IDX_LABELS_MAGIC, 1, labels_path)
    if len(raw) < 8 + n_labels:
        raise IdxFormatError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if n_labels != count:
        raise IdxFormatError(f"{count} images but {n_labels} labels")
    return LabeledSet(images, labels, name=name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write u8 IDX files; ``images`` in [0, 1] are scaled to 0..255."""
    images = np.asarray(images)
    pix = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    count, rows, cols = pix.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


# --------------------------------------------------------------------- synthetic digits


def _arc(cx, cy, rx, ry, start=0.0, stop=2 * np.pi, n=18):
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(*pts):
    return np.asarray(pts, dtype=np.float64)


# Stroke templates in a unit box, x to the right and y downwards.
TEMPLATES: dict[int, list[np.ndarray]] = {
    0: [_arc(0.5, 0.5, 0.27, 0.4)],
    1: [_line((0.52, 0.08), (0.5, 0.92)), _line((0.36, 0.24), (0.52, 0.08))],
    2: [np.concatenate([_arc(0.5, 0.3, 0.24, 0.2, np.pi * 1.05, np.pi * 2.25, 10),
                        _line((0.25, 0.9), (0.8, 0.9))])],
    3: [_arc(0.48, 0.3, 0.22, 0.19, -np.pi * 0.9, np.pi * 0.5, 12),
        _arc(0.48, 0.7, 0.25, 0.2, -np.pi * 0.5, np.pi * 0.9, 12)],
    4: [_line((0.66, 0.92), (0.66, 0.08), (0.2, 0.64), (0.82, 0.64))],
    5: [_line((0.75, 0.1), (0.32, 0.1), (0.29, 0.46)),
        _arc(0.48, 0.66, 0.26, 0.23, -np.pi * 0.75, np.pi * 0.8, 14)],
    6: [_line((0.7, 0.08), (0.4, 0.38), (0.27, 0.66)), _arc(0.5, 0.68, 0.23, 0.22)],
    7: [_line((0.2, 0.12), (0.8, 0.12), (0.42, 0.92))],
    8: [_arc(0.5, 0.29, 0.19, 0.18), _arc(0.5, 0.7, 0.24, 0.21)],
    9: [_arc(0.5, 0.31, 0.22, 0.2), _line((0.72, 0.32), (0.62, 0.92))],
}

_SUPER = 1  # supersampling factor of the raster grid


def _render(pts: np.ndarray, first: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Anti-aliased strokes from (batch, points, 2) pixel coordinates.

    Dense points along every segment are marked on a supersampled grid, a
    Euclidean distance transform gives the distance to the stroke, and the
    ink profile is averaged back down to 28x28.
    """
    count = len(pts)
    steps = np.linspace(0.0, 1.0, 24)
    a, b = pts[:, first], pts[:, first + 1]
    dense = (a[:, :, None] + steps[None, None, :, None] * (b - a)[:, :, None]).reshape(count, -1, 2)
    size = 28 * _SUPER
    cells = np.clip(np.floor(dense * _SUPER).astype(np.int64), 0, size - 1)
    grid = np.ones((count, size, size), dtype=bool)
    batch = np.repeat(np.arange(count), cells.shape[1])
    grid[batch, cells[..., 1].ravel(), cells[..., 0].ravel()] = False
    # a huge spacing along the batch axis keeps samples independent
    dist = ndimage.distance_transform_edt(grid, sampling=(1e6, 1.0, 1.0)) / _SUPER
    ink = np.clip(width[:, None, None] / 2 + 0.5 - dist, 0.0, 1.0)
    return ink.reshape(count, 28, _SUPER, 28, _SUPER).mean(axis=(2, 4))


def _draw(label: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random renditions of one digit template."""
    strokes = TEMPLATES[label]
    points = np.concatenate(strokes)
    angle = rng.uniform(-0.2, 0.2, count)
    scale = rng.uniform(0.85, 1.1, (count, 2))
    shear = rng.uniform(-0.2, 0.2, count)
    shift = rng.uniform(-0.08, 0.08, (count, 1, 2))
    width = rng.uniform(1.4, 2.6, count)
    ink = rng.uniform(0.75, 1.0, count)
    jitter = rng.normal(0.0, 0.025, (count,) + points.shape)
    noise = rng.normal(0.0, 0.05, (count, 28, 28))

    c, s = np.cos(angle), np.sin(angle)
    affine = np.empty((count, 2, 2))
    # rotation @ shear @ diag(scale)
    affine[:, 0, 0] = c * scale[:, 0]
    affine[:, 0, 1] = (c * shear - s) * scale[:, 1]
    affine[:, 1, 0] = s * scale[:, 0]
    affine[:, 1, 1] = (s * shear + c) * scale[:, 1]
    pts = np.einsum("bpj,bij->bpi", points + jitter - 0.5, affine) + 0.5 + shift
    pts = 4.0 + 20.0 * pts  # unit box -> centered 20x20 pixel box

    bounds = np.cumsum([0] + [len(st) for st in strokes])
    first = np.concatenate([np.arange(bounds[k], bounds[k + 1] - 1) for k in range(len(strokes))])
    out = np.empty((count, 28, 28))
    for b in range(0, count, 256):
        out[b:b + 256] = _render(pts[b:b + 256], first, width[b:b + 256])
    return np.clip(out * ink[:, None, None] + noise, 0.0, 1.0)


def synth_digits(seed: int, n_per_class: int, name: str = "synthetic") -> LabeledSet:
    """Ten procedurally drawn 28x28 digit classes, ``n_per_class`` each.

    Every sample is its class template under a random affine warp, control
    point jitter, stroke width and intensity, plus clipped Gaussian pixel
    noise. Output is fully determined by ``seed``; samples are interleaved
    by class (0, 1, ..., 9, 0, 1, ...).
    """
    rng = np.random.default_rng(seed)
    images = np.empty((10 * n_per_class, 28, 28))
    for label in range(10):
        images[label::10] = _draw(label, n_per_class, rng)
    labels = np.tile(np.arange(10), n_per_class)
    return LabeledSet(images, labels, name=name)


# --------------------------------------------------------------------- Numbers tasks

NUMBERS_CLASSES = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))
TRAIN_FRACTION = 0.8


def make_numbers_tasks(data: LabeledSet, seed: int, classes=NUMBERS_CLASSES,
                       train_fraction: float = TRAIN_FRACTION):
    """Five tasks of two consecutive digits, each split 80/20 into train and val."""
    from ..continual import Task, TaskSequence

    labels = data.labels
    rng = np.random.default_rng(seed)
    tasks = []
    for task_id, subset in enumerate(classes, start=1):
        idx = np.flatnonzero(np.isin(labels, subset))
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        tasks.append(Task(task_id, tuple(subset),
                          data.subset(np.sort(idx[:cut]), f"task-{task_id}-train"),
                          data.subset(np.sort(idx[cut:]), f"task-{task_id}-val")))
    return TaskSequence(tasks, n_classes=10)
