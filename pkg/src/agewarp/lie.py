"""Lie-algebra machinery on stationary velocity fields.

Conventions: a displacement ``u`` stands for the map ``x -> x + u(x)``;
``compose(a, b)`` is the displacement of ``(Id + a) o (Id + b)``, i.e. ``b``
is applied first. With that convention the bracket of two linear fields
``Vx`` and ``Ux`` is ``(VU - UV)x`` and ``bch`` approximates
``log(exp(v) o exp(u))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import (
    VectorField,
    _check_same,
    array_jacobian,
    identity_grid,
    sample_array_vectors,
)


@dataclass(frozen=True)
class ExpConfig:
    min_scaling_steps: int = 0
    max_step_displacement: float = 0.25

    def __post_init__(self):
        if self.min_scaling_steps < 0:
            raise ValueError("min_scaling_steps must be >= 0")
        if not 0 < self.max_step_displacement <= 0.5:
            raise ValueError("max_step_displacement must lie in (0, 0.5]")


DEFAULT_EXP = ExpConfig()


class NonFiniteField(ValueError):
    """A field held NaN or inf where a finite field was required."""


def compose(a: VectorField, b: VectorField) -> VectorField:
    """Displacement of ``(Id + a) o (Id + b)``."""
    _check_same(a.geometry, b.geometry)
    return VectorField(a.geometry, _compose_arrays(a.vectors, b.vectors))


def _compose_arrays(a: np.ndarray, b: np.ndarray, grid: np.ndarray | None = None) -> np.ndarray:
    if grid is None:
        grid = identity_grid(a.shape[:3])
    return b + sample_array_vectors(a, grid + b)


def scaling_steps(v: VectorField, cfg: ExpConfig = DEFAULT_EXP) -> int:
    vmax = v.max_norm()
    if vmax == 0:
        return cfg.min_scaling_steps
    n = math.ceil(math.log2(vmax / cfg.max_step_displacement))
    return max(cfg.min_scaling_steps, n, 0)


def exp(v: VectorField, cfg: ExpConfig = DEFAULT_EXP) -> VectorField:
    """Displacement of the unit-time flow of ``v`` by scaling and squaring."""
    if not np.all(np.isfinite(v.vectors)):
        raise NonFiniteField("exp: input field is not finite")
    n = scaling_steps(v, cfg)
    u = np.asarray(v.vectors, dtype=np.float64) / 2.0**n
    if not np.any(u):
        return VectorField(v.geometry, u)
    grid = identity_grid(v.geometry.dims)
    for _ in range(n):
        u = _compose_arrays(u, u, grid)
    return VectorField(v.geometry, u)


def flow_rk4(v: VectorField, t: float = 1.0, steps: int = 64) -> VectorField:
    """Classical RK4 integration of ``dphi/dt = v(phi)`` from every voxel centre."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    vec = np.asarray(v.vectors, dtype=np.float64)
    x0 = identity_grid(v.geometry.dims)
    x = x0.copy()
    h = t / steps
    for _ in range(steps):
        k1 = sample_array_vectors(vec, x)
        k2 = sample_array_vectors(vec, x + 0.5 * h * k1)
        k3 = sample_array_vectors(vec, x + 0.5 * h * k2)
        k4 = sample_array_vectors(vec, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return VectorField(v.geometry, x - x0)


def _bracket_arrays(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    jv = array_jacobian(v)
    ju = array_jacobian(u)
    return np.einsum("...ij,...j->...i", jv, u) - np.einsum("...ij,...j->...i", ju, v)


def bracket(v: VectorField, u: VectorField) -> VectorField:
    """``[v, u] = Jv u - Ju v`` with central-difference Jacobians."""
    _check_same(v.geometry, u.geometry)
    return VectorField(v.geometry, _bracket_arrays(v.vectors, u.vectors))


def bch(v: VectorField, u: VectorField, order: int = 2) -> VectorField:
    """Truncated Baker-Campbell-Hausdorff approximation of ``log(exp(v) o exp(u))``."""
    _check_same(v.geometry, u.geometry)
    if order not in (1, 2):
        raise ValueError("bch order must be 1 or 2")
    if not np.any(u.vectors):
        return v
    a = np.asarray(v.vectors, dtype=np.float64)
    b = np.asarray(u.vectors, dtype=np.float64)
    vu = _bracket_arrays(a, b)
    out = a + b + 0.5 * vu
    if order == 2:
        out = out + (_bracket_arrays(a, vu) - _bracket_arrays(b, vu)) / 12.0
    return VectorField(v.geometry, out)


def invert_displacement(u: VectorField, iterations: int = 20) -> VectorField:
    """Fixed-point inverse: ``w <- -u o (Id + w)``."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    vec = np.asarray(u.vectors, dtype=np.float64)
    grid = identity_grid(u.geometry.dims)
    w = np.zeros_like(vec)
    for _ in range(iterations):
        w = -sample_array_vectors(vec, grid + w)
    return VectorField(u.geometry, w)
