"""Analytic aging phantoms: age- and cohort-dependent templates and individual subjects.

Layout on a 64^3 grid (sizes scale with the smallest grid dimension):
an outer parenchyma ellipsoid, a pair of ventricle ellipsoids whose
semi-axes grow with age, and a pair of hippocampus spheres whose radius
shrinks with age. Rates are in voxels per year from age 60.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .grid import GridGeometry, ScalarVolume, VectorField, gaussian_smooth, identity_grid, warp
from .lie import exp

BACKGROUND, PARENCHYMA, VENTRICLES, HIPPOCAMPI, MARKER = 0, 1, 2, 3, 4
INTENSITY = {PARENCHYMA: 0.7, VENTRICLES: 0.15, HIPPOCAMPI: 0.55, MARKER: 0.9}
REGIONS = {"ventricles": (VENTRICLES,), "hippocampi": (HIPPOCAMPI,), "parenchyma": (PARENCHYMA, MARKER)}

DEFAULT_RATES = {
    "HC": {"ventricle_rate": 0.04, "hippocampus_rate": 0.01},
    "AD": {"ventricle_rate": 0.10, "hippocampus_rate": 0.03},
}

# reference layout for a 64^3 grid, offsets from the grid centre; the
# fractional offsets keep lattice counts close to the analytic volumes
_REF = 64.0
_OUTER_AXES = (27.0, 23.0, 21.0)
_VENT_OFFSETS = ((0.2, 5.6, 2.3), (0.2, -5.6, 2.3))
_VENT_AXES = (10.0, 3.5, 5.0)
_HIPPO_OFFSETS = ((-4.3, 14.2, -8.6), (-4.3, -14.2, -8.6))
_HIPPO_RADIUS = 5.5
# Faster rates for the 64^3 benchmark: with the defaults a 5-year step
# moves boundaries ~0.2 voxel, which nearest-neighbour label warping
# cannot resolve, so label volumes would stall between targets.
BENCHMARK_RATES = {
    "HC": {"ventricle_rate": 0.12, "hippocampus_rate": 0.12},
    "AD": {"ventricle_rate": 0.30, "hippocampus_rate": 0.18},
}
BENCHMARK_SEED = 1
BENCHMARK_MARKER = ((18.0, 40.0, 39.0), 3.0)
BLUR_SIGMA = 1.0
SUBJECT_WARP_MAX = 2.0


@dataclass(frozen=True)
class Marker:
    center: tuple[float, float, float]
    radius: float

    @classmethod
    def parse(cls, text: str) -> "Marker":
        x, y, z, r = (float(t) for t in text.split(","))
        return cls((x, y, z), r)


@dataclass(frozen=True)
class PhantomSpec:
    geometry: GridGeometry
    age: float
    cohort: str = "HC"
    ventricle_rate: float | None = None
    hippocampus_rate: float | None = None
    seed: int = 0
    marker: Marker | None = None

    def __post_init__(self):
        cohort = self.cohort.upper()
        if cohort not in DEFAULT_RATES:
            raise ValueError(f"cohort must be HC or AD, got {self.cohort!r}")
        object.__setattr__(self, "cohort", cohort)
        for name in ("ventricle_rate", "hippocampus_rate"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, DEFAULT_RATES[cohort][name])
        if not 60 <= self.age <= 90:
            raise ValueError(f"age must lie in [60, 90], got {self.age}")
        if self.ventricle_rate < 0 or self.hippocampus_rate < 0:
            raise ValueError("rates must be non-negative")
        if cohort == "AD" and self.ventricle_rate < DEFAULT_RATES["HC"]["ventricle_rate"]:
            raise ValueError("AD ventricle_rate must be at least the HC rate")


@dataclass(frozen=True)
class Layout:
    center: np.ndarray
    outer_axes: tuple[float, float, float]
    ventricle_centers: tuple[np.ndarray, np.ndarray]
    ventricle_axes: tuple[float, float, float]
    hippocampus_centers: tuple[np.ndarray, np.ndarray]
    hippocampus_radius: float


def layout(spec: PhantomSpec) -> Layout:
    g = spec.geometry
    scale = min(g.dims) / _REF
    center = (np.asarray(g.dims, dtype=float) - 1.0) / 2.0
    years = spec.age - 60.0
    grow = spec.ventricle_rate * years
    shrink = spec.hippocampus_rate * years
    lay = Layout(
        center=center,
        outer_axes=tuple(a * scale for a in _OUTER_AXES),
        ventricle_centers=tuple(center + np.asarray(o) * scale for o in _VENT_OFFSETS),
        ventricle_axes=tuple(a * scale + grow for a in _VENT_AXES),
        hippocampus_centers=tuple(center + np.asarray(o) * scale for o in _HIPPO_OFFSETS),
        hippocampus_radius=_HIPPO_RADIUS * scale - shrink,
    )
    _check_layout(lay, g)
    return lay


def _check_layout(lay: Layout, g: GridGeometry) -> None:
    dims = np.asarray(g.dims, dtype=float)
    if lay.hippocampus_radius <= 0.5:
        raise ValueError("hippocampus radius shrank below half a voxel")
    if np.any(lay.center - np.asarray(lay.outer_axes) < 0.5) or np.any(
        lay.center + np.asarray(lay.outer_axes) > dims - 1.5
    ):
        raise ValueError(f"parenchyma ellipsoid {lay.outer_axes} does not fit in dims {g.dims}")
    inner = [(c, np.asarray(lay.ventricle_axes)) for c in lay.ventricle_centers]
    inner += [(c, np.full(3, lay.hippocampus_radius)) for c in lay.hippocampus_centers]
    for c, axes in inner:
        # extreme points of each inner structure must lie inside the outer ellipsoid
        for k in range(3):
            for s in (-1, 1):
                p = c.copy()
                p[k] += s * axes[k]
                if np.sum(((p - lay.center) / np.asarray(lay.outer_axes)) ** 2) >= 1:
                    raise ValueError("inner structure radii exceed the parenchyma ellipsoid")


def _inside(x: np.ndarray, center: np.ndarray, axes) -> np.ndarray:
    return np.sum(((x - center) / np.asarray(axes, dtype=float)) ** 2, axis=-1) <= 1.0


def _labels_from_layout(lay: Layout, dims) -> np.ndarray:
    x = identity_grid(dims)
    labels = np.zeros(dims, dtype=np.int32)
    labels[_inside(x, lay.center, lay.outer_axes)] = PARENCHYMA
    for c in lay.ventricle_centers:
        labels[_inside(x, c, lay.ventricle_axes)] = VENTRICLES
    for c in lay.hippocampus_centers:
        labels[_inside(x, c, (lay.hippocampus_radius,) * 3)] = HIPPOCAMPI
    return labels


def intensities_from_labels(labels: np.ndarray, blur: float = BLUR_SIGMA) -> np.ndarray:
    img = np.zeros(labels.shape, dtype=np.float64)
    for lab, val in INTENSITY.items():
        img[labels == lab] = val
    return np.clip(gaussian_smooth(img, blur), 0.0, 1.0)


def make_template(spec: PhantomSpec) -> tuple[ScalarVolume, ScalarVolume]:
    """Template intensity and label volumes; the seed and marker are ignored."""
    lay = layout(spec)
    labels = _labels_from_layout(lay, spec.geometry.dims)
    return (
        ScalarVolume(spec.geometry, intensities_from_labels(labels)),
        ScalarVolume(spec.geometry, labels, is_labels=True),
    )


def analytic_volumes(spec: PhantomSpec) -> dict[str, float]:
    """Closed-form label volumes in voxels, assuming no overlap between inner structures."""
    lay = layout(spec)
    ell = lambda a: 4.0 / 3.0 * math.pi * a[0] * a[1] * a[2]  # noqa: E731
    vent = 2 * ell(lay.ventricle_axes)
    hippo = 2 * ell((lay.hippocampus_radius,) * 3)
    return {"ventricles": vent, "hippocampi": hippo, "parenchyma": ell(lay.outer_axes) - vent - hippo}


def smooth_random_svf(
    geometry: GridGeometry, max_norm: float, seed: int, modes: int = 3, max_wavenumber: int = 1
) -> VectorField:
    """Seeded low-frequency SVF scaled so that its largest vector has length ``max_norm``.

    Component ``i`` is a sum of separable cosine modes with a sine factor
    along axis ``i``, so the normal component vanishes on every face and
    the flow never leaves the grid.
    """
    rng = np.random.default_rng(seed)
    s = np.meshgrid(*[np.linspace(0.0, 1.0, d) for d in geometry.dims], indexing="ij")
    out = np.zeros(geometry.dims + (3,))
    for i in range(3):
        for _ in range(modes):
            k = rng.integers(0, max_wavenumber + 1, size=3)
            k[i] = rng.integers(1, max_wavenumber + 1)
            term = np.full(geometry.dims, rng.standard_normal())
            for a in range(3):
                term *= np.sin(np.pi * k[a] * s[a]) if a == i else np.cos(np.pi * k[a] * s[a])
            out[..., i] += term
    peak = np.sqrt(np.sum(out**2, axis=-1)).max()
    if peak > 0:
        out *= max_norm / peak
    return VectorField(geometry, out)


def subject_svf(spec: PhantomSpec) -> VectorField:
    """The seed-determined SVF that individualizes the template into a subject."""
    return smooth_random_svf(spec.geometry, SUBJECT_WARP_MAX, seed=spec.seed, modes=3, max_wavenumber=2)


def paint_marker(image: ScalarVolume, labels: ScalarVolume, marker: Marker) -> tuple[ScalarVolume, ScalarVolume]:
    x = identity_grid(image.geometry.dims)
    blob = _inside(x, np.asarray(marker.center, float), (marker.radius,) * 3)
    lab = labels.values.copy()
    lab[blob] = MARKER
    raw = np.zeros(image.geometry.dims)
    raw[blob] = 1.0
    # soft edge consistent with the template blur
    weight = np.clip(gaussian_smooth(raw, BLUR_SIGMA), 0.0, 1.0)
    img = image.values * (1 - weight) + INTENSITY[MARKER] * weight
    return image.with_values(np.clip(img, 0.0, 1.0)), labels.with_values(lab)


def individualize(
    image: ScalarVolume, labels: ScalarVolume, spec: PhantomSpec
) -> tuple[ScalarVolume, ScalarVolume]:
    """Warp a template pair by the subject SVF of ``spec`` and paint its marker."""
    disp = exp(subject_svf(spec))
    img, lab = warp(image, disp), warp(labels, disp)
    if spec.marker is not None:
        img, lab = paint_marker(img, lab, spec.marker)
    return img, lab


def make_subject(spec: PhantomSpec) -> tuple[ScalarVolume, ScalarVolume]:
    if spec.marker is None:
        raise ValueError("make_subject needs a marker")
    return individualize(*make_template(spec), spec)


class PhantomTemplates:
    """Template provider backed by the analytic phantom."""

    def __init__(self, geometry: GridGeometry, rates: dict | None = None):
        self.geometry = geometry
        self.rates = rates or {}
        self._cache: dict[tuple[float, str], tuple[ScalarVolume, ScalarVolume]] = {}

    def spec(self, age: float, cohort: str) -> PhantomSpec:
        cohort = cohort.upper()
        return PhantomSpec(self.geometry, age, cohort, **self.rates.get(cohort, {}))

    def template(self, age: float, cohort: str) -> tuple[ScalarVolume, ScalarVolume]:
        key = (float(age), cohort.upper())
        if key not in self._cache:
            self._cache[key] = make_template(self.spec(age, cohort))
        return self._cache[key]


def benchmark_templates(geometry: GridGeometry | None = None) -> PhantomTemplates:
    return PhantomTemplates(geometry or GridGeometry.cube(64), BENCHMARK_RATES)


def benchmark_subject(age: float = 60.0, templates: PhantomTemplates | None = None):
    """Subject pair of the standard benchmark plus its PhantomSpec."""
    templates = templates or benchmark_templates()
    center, radius = BENCHMARK_MARKER
    spec = replace(templates.spec(age, "HC"), seed=BENCHMARK_SEED, marker=Marker(center, radius))
    return individualize(*templates.template(age, "HC"), spec), spec


def ground_truth_series(
    subject: PhantomSpec, targets: Sequence[tuple[float, str]], templates: PhantomTemplates | None = None
) -> list[tuple[ScalarVolume, ScalarVolume]]:
    """Target templates individualized with the subject's own warp and marker."""
    templates = templates or PhantomTemplates(subject.geometry)
    return [individualize(*templates.template(age, cohort), replace(subject, age=age)) for age, cohort in targets]
