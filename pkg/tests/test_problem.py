import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from sdglab.geometry import Domain, quasi_random_interior
from sdglab.problem import (CATALOGUE, SpecError, audit_grid, builtin_spec, fd_gradient, fd_hessian, field_bundle,
                            finite_difference_audit, manufacture, pbar_jacobian_norm, pde_residual)


def test_ms1_bundle_at_centre(ms1):
    b = field_bundle(ms1, np.array([2.0, 0.0]))
    assert np.allclose(b.p, [2.0, 1.0])
    assert b.p_norm == pytest.approx(math.sqrt(5.0))
    assert np.allclose(b.p_bar, np.array([2.0, 1.0]) / math.sqrt(5.0))
    assert b.inf_lap == pytest.approx(0.8)
    assert b.h == pytest.approx(-1.6)
    assert np.allclose(b.q, [0.08, -0.16])


def test_ms2_is_the_negation(ms1, ms2):
    x = quasi_random_interior(ms1.domain, 50)
    b1, b2 = field_bundle(ms1, x), field_bundle(ms2, x)
    assert np.allclose(b2.p_bar, -b1.p_bar)
    assert np.allclose(b2.h, -b1.h)
    # q is even under u -> -u
    assert np.allclose(b2.q, b1.q)
    assert ms1.h_sign == -1 and ms2.h_sign == 1


@pytest.mark.parametrize("name", sorted(CATALOGUE))
def test_manufactured_residuals(name):
    spec = builtin_spec(name)
    grid = audit_grid(spec.domain, 2000)
    assert np.max(np.abs(pde_residual(spec, grid))) <= 1e-12
    assert np.max(np.abs(pde_residual(spec, grid, finite_differences=True))) <= 1e-5
    rep = finite_difference_audit(spec)
    assert rep.passed, rep.as_dict()


def test_ms1_constants_against_closed_form(ms1):
    # On the circle (2 + cos t, sin t), u = (2 + cos t)^2 / 2 + sin t; maximize it by a scalar search.
    f = lambda t: -((2.0 + math.cos(t)) ** 2 / 2.0 + math.sin(t))
    u_max = -min(minimize_scalar(f, bracket=(a, a + 0.5)).fun for a in np.linspace(0.0, 6.0, 13))
    # |h| = 2 x1^2 / (x1^2 + 1) on x1 in [1, 3]; |Du| <= sqrt(10); |D p̄| = 1 / (x1^2 + 1) <= 1/2
    c0 = 1.8 + 2.0 * u_max + math.sqrt(10.0) + 0.5
    assert u_max == pytest.approx(4.6636380774, abs=1e-9)
    assert ms1.c0 == pytest.approx(c0, rel=1e-5)
    assert ms1.c0 <= c0
    assert ms1.h_lower == pytest.approx(0.99)
    assert ms1.c1 == pytest.approx(4.0 * ms1.c0 / 0.99)
    assert ms1.constants["lip_pbar"] == pytest.approx(0.5, abs=1e-6)


def test_pbar_jacobian_norm_matches_differences(ms1):
    x = np.array([2.3, -0.2])
    eps = 1e-6
    J = np.empty((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = eps
        J[:, i] = (field_bundle(ms1, x + e).p_bar - field_bundle(ms1, x - e).p_bar) / (2 * eps)
    b = field_bundle(ms1, x)
    assert pbar_jacobian_norm(b.p, b.S) == pytest.approx(np.linalg.norm(J, 2), rel=1e-6)


def test_fd_helpers_on_a_cubic():
    f = lambda x: x[..., 0] ** 3 + x[..., 0] * x[..., 1]
    x = np.array([0.7, -0.3])
    assert np.allclose(fd_gradient(f, x), [3 * 0.49 - 0.3, 0.7], atol=1e-8)
    assert np.allclose(fd_hessian(f, x), [[4.2, 1.0], [1.0, 0.0]], atol=1e-6)


def _linear(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0] + x[..., 1]


def _linear_grad(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _zero_hess(x):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape + (x.shape[-1],))


def test_h_vanishing_is_rejected():
    with pytest.raises(SpecError, match="zero"):
        manufacture("flat", _linear, _linear_grad, _zero_hess, Domain.ball([0.0, 0.0], 1.0), grid_size=200)


def test_h_sign_change_is_rejected():
    u = lambda x: np.asarray(x)[..., 0] ** 3 / 3 + np.asarray(x)[..., 1]

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.ones_like(x)
        g[..., 0] = x[..., 0] ** 2
        return g

    def hess(x):
        x = np.asarray(x, dtype=float)
        H = np.zeros(x.shape + (2,))
        H[..., 0, 0] = 2 * x[..., 0]
        return H

    with pytest.raises(SpecError, match="zero|sign"):
        manufacture("cubic", u, grad, hess, Domain.ball([0.0, 0.0], 1.0), grid_size=200)


def test_vanishing_gradient_is_rejected(ms1):
    u = lambda x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1)
    grad = lambda x: np.asarray(x, dtype=float)
    hess = lambda x: np.broadcast_to(np.eye(2), np.asarray(x).shape + (2,)).copy()
    spec = manufacture("bowl", u, grad, hess, Domain.ball([0.0, 0.0], 1.0), grid_size=200)
    with pytest.raises(SpecError, match="gradient"):
        field_bundle(spec, np.zeros(2))


def test_audit_catches_a_wrong_gradient(ms1):
    bad = manufacture("bad", ms1.u_eval, lambda x: 1.01 * ms1.grad_eval(x), ms1.hess_eval, ms1.domain, grid_size=200)
    rep = finite_difference_audit(bad, grid_size=200)
    assert not rep.grad_ok
    assert not rep.passed


def test_unknown_spec():
    with pytest.raises(KeyError):
        builtin_spec("nope")


def test_builtin_specs_are_cached():
    assert builtin_spec("ms1") is builtin_spec("ms1")


def test_dimension_checked(ms1):
    with pytest.raises(ValueError):
        field_bundle(ms1, np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 2 * np.pi), st.sampled_from(sorted(CATALOGUE)))
def test_q_orthogonal_to_gradient_and_unit_pbar(r, t, name):
    spec = builtin_spec(name)
    m = spec.dim
    direction = np.zeros(m)
    direction[0], direction[1] = math.cos(t), math.sin(t)
    x = spec.domain.center + 0.999 * r * spec.domain.radii * direction
    b = field_bundle(spec, x)
    assert abs(b.q @ b.p) <= 1e-12 * (1.0 + np.linalg.norm(b.q) * b.p_norm)
    assert abs(np.linalg.norm(b.p_bar) - 1.0) <= 1e-14
