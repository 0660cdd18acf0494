"""Image similarity metrics and regional volume errors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .grid import ScalarVolume, _check_same

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricReport:
    nfn: float
    mae: float
    psnr: float
    ssim: float
    ncc: float
    dsc: dict[int, float] = field(default_factory=dict)
    regional_mae: dict[str, float] = field(default_factory=dict)

    def to_flat(self) -> dict[str, float]:
        """Flat mapping with keys ``nfn``, ``dsc.<label>``, ``regional_mae.<region>``..."""
        out = {k: float(getattr(self, k)) for k in ("nfn", "mae", "psnr", "ssim", "ncc")}
        for label, val in sorted(self.dsc.items()):
            out[f"dsc.{label}"] = float(val)
        for region, val in sorted(self.regional_mae.items()):
            out[f"regional_mae.{region}"] = float(val)
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, float]) -> "MetricReport":
        rep = cls(*(float(flat[k]) for k in ("nfn", "mae", "psnr", "ssim", "ncc")))
        for key, val in flat.items():
            if key.startswith("dsc."):
                rep.dsc[int(key[4:])] = float(val)
            elif key.startswith("regional_mae."):
                rep.regional_mae[key[len("regional_mae."):]] = float(val)
        return rep


def _pair(pred: ScalarVolume, truth: ScalarVolume) -> tuple[np.ndarray, np.ndarray]:
    _check_same(pred.geometry, truth.geometry)
    return pred.values.astype(np.float64), truth.values.astype(np.float64)


def mae(pred: ScalarVolume, truth: ScalarVolume) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def nfn(pred: ScalarVolume, truth: ScalarVolume) -> float:
    """``||pred - truth||_F / ||truth||_F`` (normalized by the truth, so not symmetric)."""
    p, t = _pair(pred, truth)
    num = float(np.linalg.norm(p - t))
    den = float(np.linalg.norm(t))
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return num / den


def psnr(pred: ScalarVolume, truth: ScalarVolume, data_range: float = 1.0) -> float:
    p, t = _pair(pred, truth)
    mse = float(np.mean((p - t) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def ncc(pred: ScalarVolume, truth: ScalarVolume) -> float:
    """Global Pearson correlation; two constant images score 1 if equal, else 0."""
    p, t = _pair(pred, truth)
    pc = p - p.mean()
    tc = t - t.mean()
    den = math.sqrt(float(np.sum(pc * pc)) * float(np.sum(tc * tc)))
    if den == 0:
        return 1.0 if np.array_equal(p, t) else 0.0
    return float(np.sum(pc * tc)) / den


def ssim(pred: ScalarVolume, truth: ScalarVolume, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over every cubic window lying fully inside the volume.

    Window statistics use 1/N normalization. The window shrinks to the
    largest odd size that fits when the volume is smaller than ``window``.
    """
    p, t = _pair(pred, truth)
    w = min(window, min(p.shape))
    if w % 2 == 0:
        w -= 1
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(a):
        return ndimage.uniform_filter(a, size=w, mode="nearest")

    mp, mt = local_mean(p), local_mean(t)
    vp = local_mean(p * p) - mp * mp
    vt = local_mean(t * t) - mt * mt
    cov = local_mean(p * t) - mp * mt
    s = ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp * mp + mt * mt + c1) * (vp + vt + c2))
    r = w // 2
    inner = tuple(slice(r, n - r) for n in p.shape)
    return float(np.mean(s[inner]))


def similarity_suite(pred: ScalarVolume, truth: ScalarVolume) -> MetricReport:
    for vol in (pred, truth):
        if vol.values.size and (vol.values.min() < 0 or vol.values.max() > 1):
            raise ValueError("similarity_suite expects intensities in [0, 1]")
    return MetricReport(
        nfn=nfn(pred, truth),
        mae=mae(pred, truth),
        psnr=psnr(pred, truth),
        ssim=ssim(pred, truth),
        ncc=ncc(pred, truth),
    )


def dice(pred_labels: ScalarVolume, truth_labels: ScalarVolume, label: int | Iterable[int]) -> float:
    _check_same(pred_labels.geometry, truth_labels.geometry)
    ids = [label] if np.isscalar(label) else list(label)
    a = np.isin(pred_labels.values, ids)
    b = np.isin(truth_labels.values, ids)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def region_volume(labels: ScalarVolume, ids: Iterable[int]) -> float:
    """Volume in mm^3 of the voxels carrying any of ``ids``."""
    return int(np.isin(labels.values, list(ids)).sum()) * labels.geometry.voxel_volume


def regional_volume_mae(
    pred_labels: ScalarVolume,
    truth_labels: ScalarVolume,
    regions: Mapping[str, Iterable[int]],
) -> dict[str, float]:
    """Absolute difference of region / whole-brain volume ratios, in percent.

    Whole brain is every nonzero label.
    """
    _check_same(pred_labels.geometry, truth_labels.geometry)
    wb_t = int(np.count_nonzero(truth_labels.values)) * truth_labels.geometry.voxel_volume
    wb_p = int(np.count_nonzero(pred_labels.values)) * pred_labels.geometry.voxel_volume
    if wb_t == 0 or wb_p == 0:
        raise ValueError("whole-brain volume is empty")
    out = {}
    for name, ids in regions.items():
        ids = list(ids)
        out[name] = abs(region_volume(truth_labels, ids) / wb_t - region_volume(pred_labels, ids) / wb_p) * 100.0
    return out


def metric_report(
    pred: ScalarVolume,
    truth: ScalarVolume,
    pred_labels: ScalarVolume | None = None,
    truth_labels: ScalarVolume | None = None,
    regions: Mapping[str, Iterable[int]] | None = None,
) -> MetricReport:
    rep = similarity_suite(pred, truth)
    if pred_labels is not None and truth_labels is not None:
        present = np.union1d(np.unique(pred_labels.values), np.unique(truth_labels.values))
        rep.dsc = {int(k): dice(pred_labels, truth_labels, int(k)) for k in present if k != 0}
        if regions:
            rep.regional_mae = regional_volume_mae(pred_labels, truth_labels, regions)
    return rep
