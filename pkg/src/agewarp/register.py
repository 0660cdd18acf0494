"""Multi-resolution log-demons registration returning a stationary velocity field.

The result ``v`` satisfies ``warp(moving, exp(v)) ~ fixed``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .grid import (
    GridGeometry,
    ScalarVolume,
    VectorField,
    _check_same,
    coarse_geometry,
    downsample_image,
    gaussian_smooth,
    resample_image,
    smooth_field,
    upsample_field,
    warp,
)
from .lie import DEFAULT_EXP, ExpConfig, bch, exp

log = logging.getLogger(__name__)

LNCC_EPS = 1e-5


@dataclass(frozen=True)
class RegistrationConfig:
    levels: tuple[int, ...] = (4, 2, 1)
    iterations_per_level: int = 50
    fluid_sigma: float = 2.0
    diffusion_sigma: float = 1.5
    step_scale: float = 0.5
    similarity: str = "SSD"
    lncc_window: int = 9
    bch_order: int = 1
    exp: ExpConfig = field(default_factory=lambda: DEFAULT_EXP)

    def __post_init__(self):
        levels = tuple(int(x) for x in self.levels)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "similarity", self.similarity.upper())
        if not levels or levels[-1] != 1 or any(a <= b for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must be strictly decreasing and end at 1, got {levels}")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be positive")
        if self.fluid_sigma < 0 or self.diffusion_sigma < 0:
            raise ValueError("smoothing sigmas must be >= 0")
        if not 0 < self.step_scale <= 1:
            raise ValueError("step_scale must lie in (0, 1]")
        if self.similarity not in ("SSD", "LNCC"):
            raise ValueError(f"similarity must be SSD or LNCC, got {self.similarity!r}")
        if self.lncc_window < 1 or self.lncc_window % 2 == 0:
            raise ValueError("lncc_window must be a positive odd integer")
        if self.bch_order not in (1, 2):
            raise ValueError("bch_order must be 1 or 2")

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d)
        if "exp" in d and isinstance(d["exp"], dict):
            d["exp"] = ExpConfig(**d["exp"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d


def _local_mean(a: np.ndarray, window: int) -> np.ndarray:
    return ndimage.uniform_filter(a, size=window, mode="nearest")


def _local_moments(a: np.ndarray, b: np.ndarray, window: int):
    ma, mb = _local_mean(a, window), _local_mean(b, window)
    va = _local_mean(a * a, window) - ma * ma
    vb = _local_mean(b * b, window) - mb * mb
    cov = _local_mean(a * b, window) - ma * mb
    return ma, mb, va, vb, cov


def _lncc_map(a: np.ndarray, b: np.ndarray, window: int) -> np.ndarray:
    _, _, va, vb, cov = _local_moments(a, b, window)
    ok = (va > LNCC_EPS) & (vb > LNCC_EPS)
    out = np.zeros_like(a)
    out[ok] = cov[ok] ** 2 / (va[ok] * vb[ok])
    return out


def lncc(a: ScalarVolume, b: ScalarVolume, window: int = 9) -> float:
    """Mean squared local correlation over ``window^3`` neighbourhoods.

    Neighbourhoods extend past the faces by edge replication; patches
    where either variance is at most 1e-5 contribute 0.
    """
    _check_same(a.geometry, b.geometry)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    return float(np.mean(_lncc_map(a.values.astype(np.float64), b.values.astype(np.float64), window)))


def _gradient(img: np.ndarray) -> np.ndarray:
    return np.stack(np.gradient(img, edge_order=1), axis=-1)


def _ssd_force(fixed: np.ndarray, warped: np.ndarray) -> np.ndarray:
    diff = fixed - warped
    grad = _gradient(warped)
    denom = np.sum(grad * grad, axis=-1) + diff * diff
    scale = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 1e-12)
    return grad * scale[..., None]


def _lncc_force(fixed: np.ndarray, warped: np.ndarray, window: int) -> np.ndarray:
    mf, mw, vf, vw, cov = _local_moments(fixed, warped, window)
    ok = (vf > LNCC_EPS) & (vw > LNCC_EPS)
    fc, wc = fixed - mf, warped - mw
    coef = np.zeros_like(fixed)
    coef[ok] = 2.0 * cov[ok] / (vf[ok] * vw[ok]) * (fc[ok] - cov[ok] / vw[ok] * wc[ok])
    force = _gradient(warped) * coef[..., None]
    peak = np.sqrt(np.sum(force * force, axis=-1)).max()
    return force / peak if peak > 0 else force


def _clamp(update: np.ndarray, limit: float) -> np.ndarray:
    norm = np.sqrt(np.sum(update * update, axis=-1))
    factor = np.minimum(1.0, limit / np.maximum(norm, 1e-12))
    return update * factor[..., None]


def _residual(fixed: np.ndarray, warped: np.ndarray, cfg: RegistrationConfig) -> float:
    if cfg.similarity == "SSD":
        return float(np.mean((fixed - warped) ** 2))
    return 1.0 - float(np.mean(_lncc_map(fixed, warped, cfg.lncc_window)))


def level_geometry(g: GridGeometry, factor: int) -> GridGeometry:
    if factor == 1:
        return g
    if all(d % factor == 0 for d in g.dims):
        return coarse_geometry(g, factor)
    dims = tuple(max(2, d // factor) for d in g.dims)
    spacing = tuple(s * factor for s in g.spacing)
    origin = tuple(o + (factor - 1) * s / 2 for o, s in zip(g.origin, g.spacing))
    return GridGeometry(dims, spacing, origin)


def _level_image(img: ScalarVolume, factor: int) -> ScalarVolume:
    if factor == 1:
        return img
    if all(d % factor == 0 for d in img.geometry.dims):
        return downsample_image(img, factor)
    smoothed = img.with_values(gaussian_smooth(img.values, factor / 2.0))
    return resample_image(smoothed, level_geometry(img.geometry, factor))


def register(
    moving: ScalarVolume,
    fixed: ScalarVolume,
    cfg: RegistrationConfig = RegistrationConfig(),
    trace: list | None = None,
) -> VectorField:
    """SVF ``v`` with ``warp(moving, exp(v)) ~ fixed``.

    If ``trace`` is given it receives one ``(level, iteration, residual)``
    tuple per iteration, the residual being measured before that
    iteration's update.
    """
    _check_same(moving.geometry, fixed.geometry)
    for name, vol in (("moving", moving), ("fixed", fixed)):
        if vol.values.min() < 0 or vol.values.max() > 1:
            warnings.warn(f"{name} intensities fall outside [0, 1]", stacklevel=2)

    v: VectorField | None = None
    prev_factor = None
    for factor in cfg.levels:
        m = _level_image(moving, factor)
        f = _level_image(fixed, factor)
        geom = m.geometry
        if v is None:
            v = VectorField.zeros(geom)
        else:
            v = upsample_field(v, prev_factor // factor, target=geom)
        fv = f.values.astype(np.float64)
        for it in range(cfg.iterations_per_level):
            w = warp(m, exp(v, cfg.exp)).values.astype(np.float64)
            if trace is not None:
                trace.append((factor, it, _residual(fv, w, cfg)))
            if cfg.similarity == "SSD":
                upd = _ssd_force(fv, w)
            else:
                upd = _lncc_force(fv, w, cfg.lncc_window) * cfg.step_scale
            upd = _clamp(upd, cfg.step_scale)
            upd = smooth_field(VectorField(geom, upd), cfg.fluid_sigma)
            v = bch(v, upd, order=cfg.bch_order)
            v = smooth_field(v, cfg.diffusion_sigma)
        log.debug("level %d done, max |v| = %.3f", factor, v.max_norm())
        prev_factor = factor
    return v
