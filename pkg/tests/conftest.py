"""Shared fixtures. Pipeline runs are session-scoped because each costs tens of seconds."""

from __future__ import annotations

import numpy as np
import pytest

from agewarp.grid import GridGeometry, VectorField, identity_grid
from agewarp.phantom import benchmark_subject, benchmark_templates, ground_truth_series, smooth_random_svf
from agewarp.synthesis import CohortSchedule, synthesize, synthesize_no_pt

HC_TARGETS = ((65, "HC"), (70, "HC"), (75, "HC"))
TRANSITION_TARGETS = ((65, "HC"), (70, "HC"), (75, "AD"), (80, "AD"))


def interior(a: np.ndarray, margin: int) -> np.ndarray:
    sl = tuple(slice(margin, n - margin) for n in a.shape[:3])
    return a[sl]


def max_err(a: VectorField | np.ndarray, b: VectorField | np.ndarray, margin: int) -> float:
    a = a.vectors if isinstance(a, VectorField) else a
    b = b.vectors if isinstance(b, VectorField) else b
    return float(np.sqrt(np.sum(interior(a - b, margin) ** 2, axis=-1)).max())


def linear_field(g: GridGeometry, m: np.ndarray, center=None) -> VectorField:
    """``v(x) = M (x - c)``."""
    c = (np.asarray(g.dims, float) - 1) / 2 if center is None else np.asarray(center, float)
    x = identity_grid(g.dims) - c
    return VectorField(g, x @ np.asarray(m).T)


def random_generator(rng: np.random.Generator, bound: float) -> np.ndarray:
    m = rng.standard_normal((3, 3))
    return m * (bound / np.linalg.norm(m, 2))


def smooth_field(n: int, max_norm: float, seed: int, wavenumber: int = 1) -> VectorField:
    return smooth_random_svf(GridGeometry.cube(n), max_norm, seed, modes=3, max_wavenumber=wavenumber)


@pytest.fixture(scope="session")
def templates():
    return benchmark_templates()


@pytest.fixture(scope="session")
def subject(templates):
    (img, lab), spec = benchmark_subject(60.0, templates)
    return img, lab, spec


@pytest.fixture(scope="session")
def hc_schedule():
    return CohortSchedule(60, HC_TARGETS)


@pytest.fixture(scope="session")
def hc_run(templates, subject, hc_schedule):
    img, lab, _ = subject
    return synthesize(img, lab, hc_schedule, templates)


@pytest.fixture(scope="session")
def hc_run_no_pt(templates, subject, hc_schedule):
    img, lab, _ = subject
    return synthesize_no_pt(img, hc_schedule, templates, subject_labels=lab)


@pytest.fixture(scope="session")
def hc_truth(templates, subject):
    return ground_truth_series(subject[2], HC_TARGETS, templates)


@pytest.fixture(scope="session")
def transition_run(templates, subject):
    img, lab, _ = subject
    return synthesize(img, lab, CohortSchedule(60, TRANSITION_TARGETS), templates)


# ---- acceptance reporting ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture()
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
