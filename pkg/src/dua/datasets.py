"""Dataset handles with optional access logging.

``ImageSet`` carries images only and has no label accessor at all, so code
that must stay unsupervised can be typed against it. ``LabeledSet`` adds
labels. Every read of ``images``/``labels`` is appended to the handle's
access log together with the active access context, which lets tests prove
which stage of a pipeline touched which data.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DatasetReleasedError, EmptyDatasetError, LabelError, ShapeError

_context: contextvars.ContextVar[str] = contextvars.ContextVar("dua_access_context", default="")


@contextlib.contextmanager
def access_context(name: str) -> Iterator[None]:
    """Tag every dataset access inside the block with ``name``."""
    token = _context.set(name)
    try:
        yield
    finally:
        _context.reset(token)


def current_context() -> str:
    return _context.get()


@dataclass(frozen=True)
class Access:
    dataset: str
    field: str
    context: str


class ImageSet:
    """Unlabeled batch of grayscale images with pixel values in [0, 1].

    ``ids`` identify the underlying samples (before any transform), so two
    sets derived from the same source can be compared without looking at
    pixels.
    """

    def __init__(self, images, ids=None, name: str = "", log: list | None = None):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3:
            raise ShapeError(f"images must be (count, height, width), got shape {images.shape}")
        if ids is None:
            ids = np.arange(len(images), dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (len(images),):
            raise ShapeError("ids must have one entry per image")
        self._images = images
        self._ids = ids
        self.name = name
        self.log = log

    def __len__(self) -> int:
        self._check_alive()
        return len(self._images)

    @property
    def shape(self) -> tuple[int, int]:
        self._check_alive()
        return self._images.shape[1], self._images.shape[2]

    @property
    def ids(self) -> np.ndarray:
        self._check_alive()
        return self._ids

    @property
    def images(self) -> np.ndarray:
        self._check_alive()
        self._record("images")
        return self._images

    @property
    def released(self) -> bool:
        return self._images is None

    def release(self) -> None:
        """Drop the underlying arrays; any later read raises."""
        self._images = None
        self._ids = None

    def _check_alive(self):
        if self._images is None:
            raise DatasetReleasedError(f"dataset {self.name!r} was released")

    def _record(self, field: str) -> None:
        if self.log is not None:
            self.log.append(Access(self.name, field, current_context()))

    def subset(self, index, name: str | None = None) -> "ImageSet":
        index = np.asarray(index)
        return ImageSet(self.images[index], self.ids[index], name or self.name, self.log)

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise EmptyDatasetError(f"dataset {self.name!r} is empty")


class LabeledSet(ImageSet):
    def __init__(self, images, labels, ids=None, name: str = "", log: list | None = None):
        super().__init__(images, ids, name, log)
        labels = np.asarray(labels)
        if labels.shape != (len(self._images),):
            raise ShapeError("labels must have one entry per image")
        if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
            raise LabelError("labels must be nonnegative integers")
        self._labels = labels.astype(np.int64)

    @property
    def labels(self) -> np.ndarray:
        self._check_alive()
        self._record("labels")
        return self._labels

    def release(self) -> None:
        super().release()
        self._labels = None

    def strip_labels(self, name: str | None = None) -> ImageSet:
        """Label-free view sharing the same images and access log."""
        self._check_alive()
        return ImageSet(self._images, self._ids, name or self.name, self.log)

    def subset(self, index, name: str | None = None) -> "LabeledSet":
        self._check_alive()
        index = np.asarray(index)
        return LabeledSet(self._images[index], self._labels[index], self._ids[index],
                          name or self.name, self.log)

    def classes(self) -> np.ndarray:
        self._check_alive()
        return np.unique(self._labels)


def concat(sets: list[LabeledSet], name: str = "", log: list | None = None) -> LabeledSet:
    """Pool several labeled sets into one, preserving order and ids."""
    if not sets:
        raise EmptyDatasetError("nothing to concatenate")
    return LabeledSet(
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.ids for s in sets]),
        name=name,
        log=log,
    )
