"""Individual time-series synthesis by transporting template trajectories onto a subject.

Registration direction follows :func:`agewarp.register.register`: an SVF
``u`` from image ``A`` to image ``B`` means ``warp(A, exp(u)) ~ B``.
``warp`` pulls back, while the transport formula is written for the
push-forward action, so the subject SVF enters the pole ladder negated.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import metrics
from .grid import GeometryMismatch, ScalarVolume, VectorField, jacobian_determinant, warp
from .lie import DEFAULT_EXP, ExpConfig, bch, exp
from .register import RegistrationConfig, register
from .transport import ladder_steps, pole_ladder

log = logging.getLogger(__name__)

COHORTS = ("HC", "AD")
THREADS_ENV = "AGEWARP_THREADS"


class TemplateProvider(Protocol):
    def template(self, age: float, cohort: str) -> tuple[ScalarVolume, ScalarVolume]: ...


class DirectoryTemplates:
    """Templates stored as ``<cohort>_<age>.<ext>`` plus ``<cohort>_<age>_labels.<ext>``.

    ``ext`` is ``nii`` or ``raw`` (native format); ages are formatted with ``%g``.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _find(self, stem: str) -> Path:
        for ext in (".nii", ".raw"):
            p = self.root / f"{stem}{ext}"
            if p.exists():
                return p
        raise FileNotFoundError(f"no template file {stem}.nii or {stem}.raw in {self.root}")

    def template(self, age: float, cohort: str) -> tuple[ScalarVolume, ScalarVolume]:
        from .io import read_volume

        stem = f"{cohort.lower()}_{age:g}"
        img = read_volume(self._find(stem))
        lab = read_volume(self._find(stem + "_labels"))
        return img, lab


@dataclass(frozen=True)
class CohortSchedule:
    baseline_age: float
    targets: tuple[tuple[float, str], ...]
    baseline_cohort: str = "HC"

    def __post_init__(self):
        targets = tuple((float(a), str(c).upper()) for a, c in self.targets)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "baseline_cohort", self.baseline_cohort.upper())
        if not targets:
            raise ValueError("schedule needs at least one target")
        if not np.isfinite(self.baseline_age) or not all(np.isfinite(a) for a, _ in targets):
            raise ValueError("ages must be finite")
        for _, c in targets + ((0.0, self.baseline_cohort),):
            if c not in COHORTS:
                raise ValueError(f"unknown cohort {c!r}")

    @property
    def transition_index(self) -> int | None:
        """Index of the first target whose cohort differs from the baseline, if any."""
        for i, (_, c) in enumerate(self.targets):
            if c != self.baseline_cohort:
                return i
        return None

    @property
    def transition_age(self) -> float | None:
        """Age the disease segment starts from: the last pre-transition target, or baseline."""
        k = self.transition_index
        if k is None:
            return None
        return self.targets[k - 1][0] if k > 0 else self.baseline_age

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSchedule":
        return cls(
            baseline_age=float(d["baseline_age"]),
            baseline_cohort=d.get("baseline_cohort", "HC"),
            targets=tuple((t["age"], t["cohort"]) for t in d["targets"]),
        )

    def to_dict(self) -> dict:
        return {
            "baseline_age": self.baseline_age,
            "baseline_cohort": self.baseline_cohort,
            "targets": [{"age": a, "cohort": c} for a, c in self.targets],
        }


@dataclass
class TargetResult:
    age: float
    cohort: str
    image: ScalarVolume
    labels: ScalarVolume | None
    template_svf: VectorField
    svf: VectorField
    displacement: VectorField
    min_jacobian: float
    ladder_steps: int
    flagged: bool = False
    message: str = ""

    def diagnostics(self) -> dict:
        return {
            "age": self.age,
            "cohort": self.cohort,
            "min_jacobian": self.min_jacobian,
            "ladder_steps": self.ladder_steps,
            "flagged": self.flagged,
            "message": self.message,
            "max_template_svf": self.template_svf.max_norm(),
            "max_transported_svf": self.svf.max_norm(),
        }


@dataclass
class SynthesisResult:
    method: str
    subject_svf: VectorField
    targets: list[TargetResult] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(t.flagged for t in self.targets)


def _workers(requested: int | None) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = requested or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


class _Trajectories:
    """Template-to-template SVFs, cached per (age, cohort) pair."""

    def __init__(self, templates: TemplateProvider, cfg: RegistrationConfig):
        self.templates = templates
        self.cfg = cfg
        self._cache: dict = {}

    def between(self, a: tuple[float, str], b: tuple[float, str]) -> VectorField:
        key = (a, b)
        if key not in self._cache:
            ta = self.templates.template(*a)[0]
            tb = self.templates.template(*b)[0]
            self._cache[key] = register(ta, tb, self.cfg)
        return self._cache[key]

    def for_target(self, schedule: CohortSchedule, i: int) -> VectorField:
        """SVF carrying the baseline template to the template of target ``i``."""
        base = (schedule.baseline_age, schedule.baseline_cohort)
        age, cohort = schedule.targets[i]
        k = schedule.transition_index
        if k is None or i < k:
            return self.between(base, (age, cohort))
        tk = schedule.transition_age
        healthy = self.between(base, (tk, schedule.baseline_cohort))
        disease = self.between((tk, cohort), (age, cohort))
        return bch(healthy, disease, order=2)


def _check_inputs(subject_image, subject_labels, t0) -> None:
    if subject_image.geometry != t0.geometry:
        raise GeometryMismatch("subject grid does not match the template grid")
    if subject_labels is not None and subject_labels.geometry != t0.geometry:
        raise GeometryMismatch("subject labels grid does not match the template grid")


def _finish(age, cohort, subject_image, subject_labels, u, svf, n, exp_cfg) -> TargetResult:
    disp = exp(svf, exp_cfg)
    jmin = float(jacobian_determinant(disp).values.min())
    flagged = not jmin > 0
    msg = f"non-positive Jacobian determinant (min {jmin:.4g})" if flagged else ""
    if flagged:
        log.warning("target age %g (%s): %s", age, cohort, msg)
    return TargetResult(
        age=age,
        cohort=cohort,
        image=warp(subject_image, disp),
        labels=warp(subject_labels, disp) if subject_labels is not None else None,
        template_svf=u,
        svf=svf,
        displacement=disp,
        min_jacobian=jmin,
        ladder_steps=n,
        flagged=flagged,
        message=msg,
    )


def _run(
    subject_image: ScalarVolume,
    subject_labels: ScalarVolume | None,
    schedule: CohortSchedule,
    templates: TemplateProvider,
    reg_cfg: RegistrationConfig,
    transport: bool,
    exp_cfg: ExpConfig,
    workers: int | None,
) -> SynthesisResult:
    t0 = templates.template(schedule.baseline_age, schedule.baseline_cohort)[0]
    _check_inputs(subject_image, subject_labels, t0)
    v = register(t0, subject_image, reg_cfg)
    traj = _Trajectories(templates, reg_cfg)
    # registrations are shared between targets, so compute them up front in order
    us = [traj.for_target(schedule, i) for i in range(len(schedule.targets))]
    along = -v
    n = ladder_steps(along)

    def one(i: int) -> TargetResult:
        age, cohort = schedule.targets[i]
        u = us[i]
        if transport:
            return _finish(age, cohort, subject_image, subject_labels, u, pole_ladder(u, along), n, exp_cfg)
        return _finish(age, cohort, subject_image, subject_labels, u, u, 0, exp_cfg)

    idx = range(len(schedule.targets))
    nw = _workers(workers)
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    return SynthesisResult("pole_ladder" if transport else "no_pt", v, results)


def synthesize(
    subject_image: ScalarVolume,
    subject_labels: ScalarVolume | None,
    schedule: CohortSchedule,
    templates: TemplateProvider,
    reg_cfg: RegistrationConfig = RegistrationConfig(),
    exp_cfg: ExpConfig = DEFAULT_EXP,
    workers: int | None = None,
) -> SynthesisResult:
    """Predict the subject at every target age of ``schedule``.

    For each target the baseline-to-target template SVF is transported
    along the template-to-subject SVF with the pole ladder, exponentiated
    and used to warp the subject. Targets whose deformation folds are
    flagged rather than dropped.
    """
    return _run(subject_image, subject_labels, schedule, templates, reg_cfg, True, exp_cfg, workers)


def synthesize_no_pt(
    subject_image: ScalarVolume,
    schedule: CohortSchedule,
    templates: TemplateProvider,
    reg_cfg: RegistrationConfig = RegistrationConfig(),
    subject_labels: ScalarVolume | None = None,
    exp_cfg: ExpConfig = DEFAULT_EXP,
    workers: int | None = None,
) -> SynthesisResult:
    """Ablation: apply the template deformations to the subject without transport."""
    return _run(subject_image, subject_labels, schedule, templates, reg_cfg, False, exp_cfg, workers)


def evaluate_against_truth(
    result: SynthesisResult,
    truth_images: Sequence[ScalarVolume],
    truth_labels: Sequence[ScalarVolume] | None = None,
    regions: dict | None = None,
) -> list[metrics.MetricReport]:
    if len(truth_images) != len(result.targets):
        raise ValueError(f"{len(truth_images)} truth images for {len(result.targets)} targets")
    if truth_labels is not None and len(truth_labels) != len(result.targets):
        raise ValueError(f"{len(truth_labels)} truth label maps for {len(result.targets)} targets")
    reports = []
    for i, tgt in enumerate(result.targets):
        tl = truth_labels[i] if truth_labels is not None else None
        reports.append(metrics.metric_report(tgt.image, truth_images[i], tgt.labels, tl, regions))
    return reports
