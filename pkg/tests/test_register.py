import warnings

import numpy as np
import pytest

from agewarp.grid import GridGeometry, ScalarVolume, VectorField, jacobian_determinant, warp
from agewarp.lie import exp
from agewarp.metrics import dice
from agewarp.phantom import PhantomSpec, make_template
from agewarp.register import RegistrationConfig, lncc, register

from conftest import smooth_field

G32 = GridGeometry.cube(32)


@pytest.fixture(scope="module")
def pair32():
    return make_template(PhantomSpec(G32, 60))


def test_config_validation_and_dict_roundtrip():
    for bad in (
        dict(levels=(1, 2)),
        dict(levels=(4, 2)),
        dict(iterations_per_level=0),
        dict(step_scale=0.0),
        dict(similarity="MI"),
        dict(lncc_window=4),
        dict(bch_order=3),
        dict(fluid_sigma=-1),
    ):
        with pytest.raises(ValueError):
            RegistrationConfig(**bad)
    cfg = RegistrationConfig(levels=(2, 1), similarity="lncc")
    assert cfg.similarity == "LNCC"
    assert RegistrationConfig.from_dict(cfg.to_dict()) == cfg


def brute_lncc(a, b, w):
    r = w // 2
    n = np.array(a.shape)
    out = 0.0
    for idx in np.ndindex(a.shape):
        # edge replication via index clipping
        ii = [np.clip(np.arange(i - r, i + r + 1), 0, n[k] - 1) for k, i in enumerate(idx)]
        pa = a[np.ix_(*ii)].ravel()
        pb = b[np.ix_(*ii)].ravel()
        va, vb = pa.var(), pb.var()
        if va > 1e-5 and vb > 1e-5:
            cov = np.mean((pa - pa.mean()) * (pb - pb.mean()))
            out += cov**2 / (va * vb)
    return out / a.size


def test_lncc_against_brute_force():
    rng = np.random.default_rng(0)
    g = GridGeometry.cube(5)
    a, b = rng.random((5, 5, 5)), rng.random((5, 5, 5))
    got = lncc(ScalarVolume(g, a), ScalarVolume(g, b), 3)
    assert got == pytest.approx(brute_lncc(a, b, 3), rel=1e-9)


def test_lncc_invariances():
    rng = np.random.default_rng(1)
    g = GridGeometry.cube(16)
    a = ScalarVolume(g, rng.random(g.dims))
    assert lncc(a, a) == pytest.approx(1.0, abs=1e-6)
    assert lncc(a, a.with_values(0.5 * a.values + 0.1)) == pytest.approx(1.0, abs=1e-6)
    flat = ScalarVolume(g, np.full(g.dims, 0.3))
    assert lncc(a, flat) == 0.0
    with pytest.raises(ValueError):
        lncc(a, a, 4)


def test_identical_images_give_zero(pair32):
    v = register(pair32[0], pair32[0], RegistrationConfig(iterations_per_level=10))
    assert v.max_norm() < 0.05


def test_constant_shift_recovery():
    g = GridGeometry.cube(48)
    t, lab = make_template(PhantomSpec(g, 60))
    fixed = warp(t, VectorField.constant(g, (2.0, 0.0, 0.0)))
    v = register(t, fixed)
    support = lab.values > 0
    mean_shift = float(v.vectors[..., 0][support].mean())
    assert mean_shift == pytest.approx(2.0, rel=0.10)


@pytest.mark.slow
def test_known_warp_recovery_and_residual(pair32):
    t, lab = pair32
    v_true = smooth_field(32, 2.0, seed=4)
    fixed, fixed_lab = warp(t, exp(v_true)), warp(lab, exp(v_true))
    trace = []
    v = register(t, fixed, trace=trace)
    d = exp(v)
    moved = warp(lab, d)
    assert dice(moved, fixed_lab, [1, 2, 3]) >= 0.95
    assert jacobian_determinant(d).values.min() > 0
    last = [r for lvl, _, r in trace if lvl == 1]
    drops = sum(b <= a for a, b in zip(last, last[1:]))
    assert drops >= 0.9 * (len(last) - 1)


def test_symmetry_band(pair32):
    t, lab = pair32
    d_true = exp(smooth_field(32, 2.0, seed=12))
    other, other_lab = warp(t, d_true), warp(lab, d_true)
    fwd = warp(lab, exp(register(t, other)))
    bwd = warp(other_lab, exp(register(other, t)))
    ids = [1, 2, 3]
    assert abs(dice(fwd, other_lab, ids) - dice(bwd, lab, ids)) <= 0.03


def test_regularization_monotonicity(pair32):
    t, _ = pair32
    rng = np.random.default_rng(7)
    fixed = warp(t, exp(smooth_field(32, 2.0, seed=8)))
    noisy = lambda im: im.with_values(np.clip(im.values + rng.normal(0, 0.05, im.values.shape), 0, 1))  # noqa: E731
    a, b = noisy(t), noisy(fixed)
    jmin = {}
    for sigma in (2.0, 0.5):
        v = register(a, b, RegistrationConfig(diffusion_sigma=sigma))
        jmin[sigma] = float(jacobian_determinant(exp(v)).values.min())
    assert jmin[2.0] >= jmin[0.5]


def test_lncc_mode_runs(pair32):
    t, _ = pair32
    fixed = warp(t, VectorField.constant(G32, (1.0, 0.0, 0.0)))
    v = register(t, fixed, RegistrationConfig(similarity="LNCC", iterations_per_level=20))
    assert jacobian_determinant(exp(v)).values.min() > 0
    assert lncc(warp(t, exp(v)), fixed) > lncc(t, fixed)


def test_out_of_range_warns(pair32):
    t, _ = pair32
    hot = t.with_values(t.values * 2)
    with pytest.warns(UserWarning, match="outside"):
        register(hot, hot, RegistrationConfig(levels=(1,), iterations_per_level=1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        register(t, t, RegistrationConfig(levels=(1,), iterations_per_level=1))
