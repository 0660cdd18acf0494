"""Grid-borne containers, trilinear sampling, finite differences and warping.

Vectors are stored in voxel units along each array axis. Sampling and
differentiation both clamp at the grid boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import ndimage


class GeometryMismatch(ValueError):
    """Two grid-borne objects do not share a GridGeometry."""


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing and origin need 3 entries each")
        if min(dims) < 2:
            raise ValueError(f"every dimension must be >= 2, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def cube(cls, n: int, spacing: float = 1.0) -> "GridGeometry":
        return cls((n, n, n), (spacing,) * 3)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


def _check_same(a: GridGeometry, b: GridGeometry) -> None:
    if a != b:
        raise GeometryMismatch(f"geometry mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Scalar image. ``is_labels`` selects the integer label variant."""

    geometry: GridGeometry
    values: np.ndarray
    is_labels: bool = False

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.geometry.dims:
            raise ValueError(
                f"values shape {values.shape} does not match dims {self.geometry.dims}"
            )
        if self.is_labels:
            if not np.issubdtype(values.dtype, np.integer):
                if not np.all(values == np.round(values)):
                    raise ValueError("label volume must hold integers")
                values = values.astype(np.int32)
            if values.size and values.min() < 0:
                raise ValueError("labels must be non-negative")
        else:
            if not np.issubdtype(values.dtype, np.floating):
                values = values.astype(np.float64)
            if not np.all(np.isfinite(values)):
                raise ValueError("intensity volume contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ScalarVolume":
        return ScalarVolume(self.geometry, values, self.is_labels)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Field of 3-vectors with shape ``dims + (3,)``, in voxel units.

    Used both as a stationary velocity field and as a displacement
    ``u`` of the map ``x -> x + u(x)``; which one is up to the caller.
    """

    geometry: GridGeometry
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.shape != self.geometry.dims + (3,):
            raise ValueError(
                f"vectors shape {vectors.shape} does not match {self.geometry.dims + (3,)}"
            )
        if not np.issubdtype(vectors.dtype, np.floating):
            vectors = vectors.astype(np.float64)
        if not np.all(np.isfinite(vectors)):
            raise ValueError("vector field contains non-finite values")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "VectorField":
        return cls(geometry, np.zeros(geometry.dims + (3,)))

    @classmethod
    def constant(cls, geometry: GridGeometry, c: Sequence[float]) -> "VectorField":
        return cls(geometry, np.broadcast_to(np.asarray(c, float), geometry.dims + (3,)).copy())

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors.astype(np.float64) ** 2, axis=-1))

    def max_norm(self) -> float:
        return float(self.norms().max())

    def scaled(self, a: float) -> "VectorField":
        return VectorField(self.geometry, self.vectors * a)

    def __add__(self, other: "VectorField") -> "VectorField":
        _check_same(self.geometry, other.geometry)
        return VectorField(self.geometry, self.vectors + other.vectors)

    def __sub__(self, other: "VectorField") -> "VectorField":
        _check_same(self.geometry, other.geometry)
        return VectorField(self.geometry, self.vectors - other.vectors)

    def __neg__(self) -> "VectorField":
        return VectorField(self.geometry, -self.vectors)

    def __mul__(self, a: float) -> "VectorField":
        return self.scaled(a)

    __rmul__ = __mul__


def identity_grid(dims: Sequence[int]) -> np.ndarray:
    """Voxel index coordinates, shape ``dims + (3,)``."""
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"), axis=-1)


@numba.njit(cache=True)
def _trilinear(vec, pts):
    nx, ny, nz, nc = vec.shape
    out = np.empty((pts.shape[0], nc))
    for p in range(pts.shape[0]):
        x = min(max(pts[p, 0], 0.0), nx - 1.0)
        y = min(max(pts[p, 1], 0.0), ny - 1.0)
        z = min(max(pts[p, 2], 0.0), nz - 1.0)
        i = min(int(np.floor(x)), nx - 2)
        j = min(int(np.floor(y)), ny - 2)
        k = min(int(np.floor(z)), nz - 2)
        fx = x - i
        fy = y - j
        fz = z - k
        for c in range(nc):
            c00 = vec[i, j, k, c] * (1 - fz) + vec[i, j, k + 1, c] * fz
            c01 = vec[i, j + 1, k, c] * (1 - fz) + vec[i, j + 1, k + 1, c] * fz
            c10 = vec[i + 1, j, k, c] * (1 - fz) + vec[i + 1, j, k + 1, c] * fz
            c11 = vec[i + 1, j + 1, k, c] * (1 - fz) + vec[i + 1, j + 1, k + 1, c] * fz
            out[p, c] = (c00 * (1 - fy) + c01 * fy) * (1 - fx) + (c10 * (1 - fy) + c11 * fy) * fx
    return out


def sample_array_vectors(vectors: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear samples of a ``(X, Y, Z, C)`` array at voxel positions ``coords[..., 3]``.

    Coordinates are clamped to the grid before interpolation.
    """
    vec = np.ascontiguousarray(vectors, dtype=np.float64)
    pts = np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 3)
    return _trilinear(vec, pts).reshape(coords.shape[:-1] + (vec.shape[-1],))


def _sample_array(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return sample_array_vectors(arr[..., None], coords)[..., 0]


def sample_vector(field: VectorField, p: Sequence[float]) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"p must be a finite 3-point, got {p}")
    return sample_array_vectors(field.vectors, p[None, :])[0]


def warp(image: ScalarVolume, displacement: VectorField) -> ScalarVolume:
    """Pull back ``image`` through ``x -> x + displacement(x)``.

    Intensities are sampled trilinearly, labels by nearest neighbour.
    """
    _check_same(image.geometry, displacement.geometry)
    if not np.any(displacement.vectors):
        return image.with_values(image.values.copy())
    coords = identity_grid(image.geometry.dims) + displacement.vectors
    if image.is_labels:
        dims = np.asarray(image.geometry.dims)
        idx = np.clip(np.floor(coords + 0.5).astype(np.int64), 0, dims - 1)
        out = image.values[idx[..., 0], idx[..., 1], idx[..., 2]]
    else:
        out = _sample_array(image.values.astype(np.float64), coords)
    return image.with_values(out)


def array_jacobian(vectors: np.ndarray) -> np.ndarray:
    """Spatial derivatives ``J[..., i, j] = d v_i / d x_j``.

    Central differences inside, one-sided on the faces.
    """
    jac = np.empty(vectors.shape + (3,), dtype=np.float64)
    for j in range(3):
        jac[..., :, j] = np.gradient(vectors, axis=j, edge_order=1)
    return jac


def jacobian_determinant(displacement: VectorField) -> ScalarVolume:
    if min(displacement.geometry.dims) < 3:
        raise ValueError("jacobian_determinant needs at least 3 voxels per axis")
    jac = array_jacobian(displacement.vectors) + np.eye(3)
    return ScalarVolume(displacement.geometry, np.linalg.det(jac))


def downsample_field(field: VectorField, factor: int) -> VectorField:
    """Average ``factor**3`` blocks; vectors are rescaled to coarse voxel units."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return field
    g = field.geometry
    if any(d % factor for d in g.dims):
        raise ValueError(f"factor {factor} does not divide dims {g.dims}")
    coarse = tuple(d // factor for d in g.dims)
    v = field.vectors.reshape(coarse[0], factor, coarse[1], factor, coarse[2], factor, 3)
    v = v.mean(axis=(1, 3, 5)) / factor
    geom = coarse_geometry(g, factor)
    return VectorField(geom, v)


def coarse_geometry(g: GridGeometry, factor: int) -> GridGeometry:
    coarse = tuple(d // factor for d in g.dims)
    spacing = tuple(s * factor for s in g.spacing)
    # block centres sit half a coarse voxel minus half a fine voxel in
    origin = tuple(o + (factor - 1) * s / 2 for o, s in zip(g.origin, g.spacing))
    return GridGeometry(coarse, spacing, origin)


def _resample_positions(src: GridGeometry, dst: GridGeometry) -> np.ndarray:
    # destination voxel centres expressed in source voxel coordinates
    axes = []
    for d, so, ss, do, ds in zip(dst.dims, src.origin, src.spacing, dst.origin, dst.spacing):
        axes.append((do + np.arange(d) * ds - so) / ss)
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def upsample_field(field: VectorField, factor: int, target: GridGeometry | None = None) -> VectorField:
    """Trilinear upsampling by ``factor`` onto ``target`` (derived if omitted)."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1 and target is None:
        return field
    g = field.geometry
    if target is None:
        fine_spacing = tuple(s / factor for s in g.spacing)
        origin = tuple(o - (factor - 1) * s / 2 for o, s in zip(g.origin, fine_spacing))
        target = GridGeometry(tuple(d * factor for d in g.dims), fine_spacing, origin)
    ratio = np.asarray(g.spacing) / np.asarray(target.spacing)
    pos = _resample_positions(g, target)
    v = sample_array_vectors(field.vectors, pos) * ratio
    return VectorField(target, v)


def resample_image(image: ScalarVolume, target: GridGeometry) -> ScalarVolume:
    """Trilinear resampling onto another grid (no vector rescaling)."""
    g = image.geometry
    pos = _resample_positions(g, target)
    return ScalarVolume(target, _sample_array(image.values.astype(np.float64), pos))


def downsample_image(image: ScalarVolume, factor: int) -> ScalarVolume:
    if factor == 1:
        return image
    g = image.geometry
    if any(d % factor for d in g.dims):
        raise ValueError(f"factor {factor} does not divide dims {g.dims}")
    c = tuple(d // factor for d in g.dims)
    v = image.values.astype(np.float64).reshape(c[0], factor, c[1], factor, c[2], factor)
    return ScalarVolume(coarse_geometry(g, factor), v.mean(axis=(1, 3, 5)))


def extended_box_kernel(variance: float) -> np.ndarray:
    """Box of width ``2r+1`` with fractional end taps, normalized, of exactly ``variance``."""
    if variance <= 0:
        return np.ones(1)
    r = int(np.floor(0.5 * (np.sqrt(12.0 * variance + 1.0) - 1.0)))
    # plain box variance r(r+1)/3 <= variance < (r+1)(r+2)/3
    a = (2 * r + 1) * (r * (r + 1) - 3.0 * variance) / (6.0 * (variance - (r + 1) ** 2))
    k = np.ones(2 * r + 3)
    k[0] = k[-1] = a
    return k / k.sum()


def gaussian_smooth(arr: np.ndarray, sigma: float, axes: Sequence[int] = (0, 1, 2)) -> np.ndarray:
    """Gaussian approximated by three passes of an extended box filter.

    The end taps carry fractional weight so the summed variance is
    exactly ``sigma**2``. Faces are handled by edge replication.
    """
    out = np.asarray(arr, dtype=np.float64)
    if sigma <= 0:
        return out
    k = extended_box_kernel(sigma**2 / 3.0)
    for _ in range(3):
        for ax in axes:
            out = ndimage.correlate1d(out, k, axis=ax, mode="nearest")
    return out


def smooth_field(field: VectorField, sigma: float) -> VectorField:
    if sigma <= 0:
        return field
    return VectorField(field.geometry, gaussian_smooth(field.vectors, sigma))
