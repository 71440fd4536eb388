"""Grayscale image perturbations at five severities.

Severity tables (index = severity - 1):

==============  =====================================  ===========================
kind            parameter                              values
==============  =====================================  ===========================
GaussianNoise   noise standard deviation               0.04 0.06 0.08 0.10 0.12
ImpulseNoise    fraction of pixels forced to 0 or 1    0.02 0.04 0.06 0.10 0.15
Brightness      additive offset                        0.10 0.20 0.30 0.40 0.50
Contrast        scale of deviations from image mean    0.40 0.30 0.20 0.10 0.05
GaussianBlur    kernel standard deviation in pixels    0.50 0.75 1.00 1.25 1.50
==============  =====================================  ===========================

All outputs are clipped to [0, 1].
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import ConfigError

SEVERITY = {
    "GaussianNoise": (0.04, 0.06, 0.08, 0.10, 0.12),
    "ImpulseNoise": (0.02, 0.04, 0.06, 0.10, 0.15),
    "Brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "Contrast": (0.4, 0.3, 0.2, 0.1, 0.05),
    "GaussianBlur": (0.5, 0.75, 1.0, 1.25, 1.5),
}
KINDS = tuple(SEVERITY)


def severity_value(kind: str, severity: int) -> float:
    if kind not in SEVERITY:
        raise ConfigError(f"unknown transform {kind!r}; expected one of {KINDS}")
    if isinstance(severity, bool) or severity not in (1, 2, 3, 4, 5):
        raise ConfigError(f"severity must be an integer in 1..5, got {severity!r}")
    return SEVERITY[kind][severity - 1]


def apply_transform(images: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Perturb one (H, W) image or a (N, H, W) batch; deterministic per ``seed``."""
    c = severity_value(kind, severity)
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    rng = np.random.default_rng(seed)
    if kind == "GaussianNoise":
        out = x + rng.normal(0.0, c, size=x.shape)
    elif kind == "ImpulseNoise":
        out = x.copy()
        hit = rng.random(x.shape) < c
        out[hit] = rng.integers(0, 2, size=int(hit.sum())).astype(np.float64)
    elif kind == "Brightness":
        out = x + c
    elif kind == "Contrast":
        mean = x.mean(axis=(1, 2), keepdims=True)
        out = (x - mean) * c + mean
    else:
        out = ndimage.gaussian_filter(x, sigma=(0, c, c), mode="nearest")
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out
