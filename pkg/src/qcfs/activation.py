"""Quantization clip-floor(-shift) activations and their surrogate gradients.

Forward::

    a = lam * clip(floor(z * L / lam + shift) / L, 0, 1)

``shift = 0`` is the plain clip-floor variant. The floor is differentiated
with a straight-through estimator, so the active window for ``dz`` is
``(-shift*lam/L, lam - shift*lam/L)``; at ``shift = 1/2`` this is the
familiar ``(-lam/2L, lam - lam/2L)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, apply, as_tensor

LAMBDA_INIT = 8.0
LAMBDA_FLOOR = 1e-3


@dataclass
class QcfsParams:
    """Per-layer activation settings: levels ``L``, threshold ``lam``, ``shift``."""

    L: int
    lam: float = LAMBDA_INIT
    shift: float = 0.5

    def __post_init__(self):
        if isinstance(self.L, bool) or int(self.L) != self.L or self.L < 1:
            raise ConfigurationError(f"quantization steps L must be an integer >= 1, got {self.L!r}")
        self.L = int(self.L)
        self.lam = float(self.lam)
        self.shift = float(self.shift)
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ConfigurationError(f"lambda must be positive, got {self.lam!r}")
        if not 0.0 <= self.shift < 1.0:
            raise ConfigurationError(f"shift must lie in [0, 1), got {self.shift!r}")


def qcfs_forward(z, p: QcfsParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return p.lam * np.clip(np.floor(z * p.L / p.lam + p.shift) / p.L, 0.0, 1.0)


def qcf_forward_noshift(z, p: QcfsParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return p.lam * np.clip(np.floor(z * p.L / p.lam) / p.L, 0.0, 1.0)


def _window(p: QcfsParams) -> tuple[float, float]:
    lo = -p.shift * p.lam / p.L
    return lo, p.lam + lo


def qcfs_backward(z, upstream, p: QcfsParams) -> tuple[np.ndarray, float]:
    """Surrogate gradients of :func:`qcfs_forward`.

    Returns ``(dz, dlam)`` where ``dz = upstream * da/dz`` elementwise and
    ``dlam`` is ``sum(upstream * da/dlam)`` over all elements.
    """
    z = np.asarray(z, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    lo, hi = _window(p)
    a = qcfs_forward(z, p)
    dadz = ((z > lo) & (z < hi)).astype(np.float64)
    dadlam = np.where(z < lo, 0.0, np.where(z >= hi, 1.0, (a - z) / p.lam))
    return upstream * dadz, float(np.sum(upstream * dadlam))


def clip_forward(z, lam: float) -> np.ndarray:
    """``lam * clip(z / lam, 0, 1)``: the activation with the floor removed."""
    z = np.asarray(z, dtype=np.float64)
    return lam * np.clip(z / lam, 0.0, 1.0)


def clip_backward(z, upstream, lam: float) -> tuple[np.ndarray, float]:
    z = np.asarray(z, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    dz = upstream * ((z > 0) & (z < lam))
    return dz, float(np.sum(upstream * (z >= lam)))


# graph ops: lam is a 0-d tensor so it can be a trainable leaf


def qcfs(z, lam, L: int, shift: float) -> Tensor:
    z, lam = as_tensor(z), as_tensor(lam)
    p = QcfsParams(L, float(lam.data), shift)
    Z = z.data

    def back(g):
        dz, dlam = qcfs_backward(Z, g, p)
        return dz, np.asarray(dlam)

    return apply("qcfs", qcfs_forward(Z, p), (z, lam), back)


def clip_act(z, lam) -> Tensor:
    z, lam = as_tensor(z), as_tensor(lam)
    value = float(lam.data)
    Z = z.data

    def back(g):
        dz, dlam = clip_backward(Z, g, value)
        return dz, np.asarray(dlam)

    return apply("clip", clip_forward(Z, value), (z, lam), back)
