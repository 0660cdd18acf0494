"""Parallel transport of a template-to-template SVF along a template-to-subject SVF."""

from __future__ import annotations

import math

import numpy as np

from .grid import ScalarVolume, VectorField, _check_same, warp
from .lie import DEFAULT_EXP, ExpConfig, NonFiniteField, _bracket_arrays, compose, exp


def ladder_steps(v: VectorField) -> int:
    """Smallest ``n >= 1`` with ``max |v| / n <= 1`` voxel."""
    m = v.max_norm()
    if not math.isfinite(m):
        raise NonFiniteField("pole ladder: |v| overflows")
    return max(1, math.ceil(m))


def pole_ladder(u: VectorField, v: VectorField) -> VectorField:
    """Transport the SVF ``u`` along ``v`` with the BCH pole ladder.

    Each of the ``n`` rungs applies ``u <- u + [w, u] + 1/2 [w, [w, u]]``
    with ``w = v / (2n)``. The result is an SVF; exponentiate it to get
    the transported deformation.
    """
    _check_same(u.geometry, v.geometry)
    if not np.any(v.vectors) or not np.any(u.vectors):
        return u
    n = ladder_steps(v)
    w = np.asarray(v.vectors, dtype=np.float64) / (2 * n)
    uj = np.asarray(u.vectors, dtype=np.float64)
    for j in range(n):
        wu = _bracket_arrays(w, uj)
        uj = uj + wu + 0.5 * _bracket_arrays(w, wu)
        if not np.all(np.isfinite(uj)):
            raise NonFiniteField(
                f"pole ladder diverged at rung {j + 1}/{n} (max |v| = {v.max_norm():.3g})"
            )
    return VectorField(u.geometry, uj)


def conjugation_oracle(u: VectorField, v: VectorField, cfg: ExpConfig = DEFAULT_EXP) -> VectorField:
    """Displacement of ``exp(v/2) o exp(u) o exp(-v/2)`` built by direct composition."""
    _check_same(u.geometry, v.geometry)
    half = v.scaled(0.5)
    return compose(exp(half, cfg), compose(exp(u, cfg), exp(-half, cfg)))


def half_space_check(
    template: ScalarVolume, subject: ScalarVolume, v: VectorField, cfg: ExpConfig = DEFAULT_EXP
) -> tuple[ScalarVolume, ScalarVolume, float]:
    """Warp both ends of ``v`` to its midpoint and report their mean absolute difference.

    ``v`` follows the pullback convention of :func:`warp`, so
    ``warp(template, exp(v)) ~ subject`` and both halves meet at
    ``warp(template, exp(v/2)) ~ warp(subject, exp(-v/2))``.
    """
    _check_same(template.geometry, subject.geometry)
    _check_same(template.geometry, v.geometry)
    half = v.scaled(0.5)
    from_template = warp(template, exp(half, cfg))
    from_subject = warp(subject, exp(-half, cfg))
    diff = float(np.mean(np.abs(from_template.values - from_subject.values)))
    return from_template, from_subject, diff
