import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from agewarp.grid import GridGeometry, VectorField, identity_grid, jacobian_determinant
from agewarp.lie import (
    ExpConfig,
    NonFiniteField,
    bch,
    bracket,
    compose,
    exp,
    flow_rk4,
    invert_displacement,
    scaling_steps,
)

from conftest import linear_field, max_err, random_generator, smooth_field

G16 = GridGeometry.cube(16)
FINE = ExpConfig(min_scaling_steps=12)


def test_exp_of_zero_is_zero():
    assert not np.any(exp(VectorField.zeros(G16)).vectors)


def test_exp_of_constant_is_translation():
    v = VectorField.constant(G16, (1.5, -0.5, 0.25))
    assert np.allclose(exp(v).vectors, v.vectors)


def test_scaling_steps_rule():
    v = VectorField.constant(G16, (4.0, 0.0, 0.0))
    assert scaling_steps(v, ExpConfig(max_step_displacement=0.5)) == 3
    assert scaling_steps(v, ExpConfig(max_step_displacement=0.25)) == 4
    assert scaling_steps(v, ExpConfig(min_scaling_steps=7)) == 7
    assert scaling_steps(VectorField.constant(G16, (0.1, 0, 0))) == 0


def test_fields_refuse_nonfinite():
    vec = np.zeros(G16.dims + (3,))
    with pytest.raises(ValueError):
        VectorField(G16, vec + np.nan)


def test_config_validation():
    with pytest.raises(ValueError):
        ExpConfig(max_step_displacement=0.6)
    with pytest.raises(ValueError):
        ExpConfig(min_scaling_steps=-1)


def test_compose_translations_add():
    a = VectorField.constant(G16, (1.0, 0.0, 0.0))
    b = VectorField.constant(G16, (0.0, 2.0, 0.0))
    assert np.allclose(compose(a, b).vectors, (1.0, 2.0, 0.0))


def test_compose_order_convention():
    # (Id + a) o (Id + b): b acts first, so a is sampled at x + b(x)
    m = np.diag([0.1, 0.0, 0.0])
    a = linear_field(G16, m, center=(0, 0, 0))
    b = VectorField.constant(G16, (2.0, 0.0, 0.0))
    x = identity_grid(G16.dims)[..., 0]
    got = compose(a, b).vectors[..., 0]
    assert np.allclose(got[:10], (2.0 + 0.1 * (x + 2.0))[:10])


def test_exp_matches_rk4_on_rotation():
    g = GridGeometry.cube(32)
    theta = 0.3
    gen = np.array([[0, -theta, 0], [theta, 0, 0], [0, 0, 0]])
    c = np.full(3, 15.5)
    v = linear_field(g, gen, center=c)
    x = identity_grid(g.dims) - c
    exact = x @ expm(gen).T - x
    inside = np.linalg.norm(x, axis=-1) <= 13
    for disp in (exp(v), flow_rk4(v, 1.0, 64)):
        err = np.linalg.norm(disp.vectors - exact, axis=-1)[inside]
        assert err.max() < 0.06


def test_flow_rk4_half_steps_compose():
    v = smooth_field(16, 2.0, seed=3)
    half = flow_rk4(v, 0.5, 32)
    assert max_err(compose(half, half), flow_rk4(v, 1.0, 64), 3) < 0.02


def test_bracket_is_commutator_and_antisymmetric():
    rng = np.random.default_rng(0)
    V, U = random_generator(rng, 0.2), random_generator(rng, 0.2)
    v, u = linear_field(G16, V), linear_field(G16, U)
    expected = linear_field(G16, V @ U - U @ V)
    assert max_err(bracket(v, u), expected, 1) < 1e-12
    assert max_err(bracket(v, u), -bracket(u, v), 0) < 1e-12
    assert not np.any(bracket(v, v).vectors)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_bch_linear_against_matrix_log(seed, order):
    rng = np.random.default_rng(seed)
    V, U = random_generator(rng, 0.1), random_generator(rng, 0.1)
    w = bch(linear_field(G16, V), linear_field(G16, U), order=order)
    # exp of the BCH field vs the product of matrix exponentials
    c = (np.asarray(G16.dims) - 1) / 2
    x = identity_grid(G16.dims) - c
    target = x @ (expm(V) @ expm(U)).T - x
    tol = 2e-3 if order == 1 else 5e-4
    assert max_err(exp(w, FINE), target, 4) < tol


def test_bch_identities():
    v = smooth_field(16, 1.0, seed=1)
    z = VectorField.zeros(G16)
    assert bch(v, z) is v
    assert max_err(bch(z, v), v, 0) < 1e-14
    assert max_err(bch(v, -v), z, 0) < 1e-12
    with pytest.raises(ValueError):
        bch(v, v, order=3)


def test_invert_displacement():
    v = smooth_field(16, 2.0, seed=5)
    d = exp(v)
    inv = invert_displacement(d)
    assert max_err(compose(d, inv), VectorField.zeros(G16), 3) < 0.02
    assert max_err(inv, exp(-v), 3) < 0.05


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 4.0))
def test_exp_is_diffeomorphic_on_smooth_fields(seed, amp):
    d = exp(smooth_field(16, amp, seed))
    assert jacobian_determinant(d).values.min() > 0
    assert np.all(np.isfinite(d.vectors))


def test_nonfinite_error_type():
    assert issubclass(NonFiniteField, ValueError)
