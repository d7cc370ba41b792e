import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from sdglab.geometry import Domain, quasi_random_interior
from sdglab.problem import FieldBundle, builtin_spec, field_bundle, manufacture
from sdglab.strategy import (BRUTE_FORCE, SolverError, StrategyParams, calibrate, calibrate_d_delta,
                             coefficient_gaps, feedback_fields, lipschitz_audit, solve_a_delta, solve_batch,
                             verify_near_saddle, with_d)

# Minimizers at (2, 0) of MS-1, found by a bounded scalar search over the angle.
A_DELTA_AT_CENTRE = {
    100.0: ((0.8960115560950513, 0.44403073243202973), -0.0014221657837756),
    10.0: ((0.908957701566646, 0.4168883504760959), -0.013456296464638),
    1.0: ((0.9680815455604667, 0.25063543473590916), -0.0851999452389293),
}


def _angle_search(b, d):
    def gamma(t):
        a = np.array([np.cos(t), np.sin(t)])
        s = a + b.p_bar
        return -b.h - 0.5 * s @ b.S @ s - d * (a - b.p_bar) @ b.p

    starts = np.linspace(0.0, 2 * np.pi, 721)
    t0 = starts[np.argmin([gamma(t) for t in starts])]
    r = minimize_scalar(gamma, bounds=(t0 - 0.01, t0 + 0.01), method="bounded", options={"xatol": 1e-12})
    return np.array([np.cos(r.x), np.sin(r.x)]), r.fun


def _bundle(p, S):
    p = np.asarray(p, dtype=float)
    S = np.asarray(S, dtype=float)
    n = np.linalg.norm(p)
    pb = p / n
    lap = pb @ S @ pb
    return FieldBundle(np.zeros_like(p), p, n, pb, S, lap, (S @ p - lap * p) / n**2, -2.0 * lap)


def _saddle_spec(k=10.0):
    u = lambda x: k * np.asarray(x)[..., 0] * np.asarray(x)[..., 1]
    grad = lambda x: k * np.asarray(x, dtype=float)[..., ::-1].copy()
    hess = lambda x: np.broadcast_to(k * np.array([[0.0, 1.0], [1.0, 0.0]]), np.shape(x) + (2,)).copy()
    return manufacture("saddle", u, grad, hess, Domain.ball([2.0, 2.0], 1.0), grid_size=200)


@pytest.mark.parametrize("d", sorted(A_DELTA_AT_CENTRE))
def test_minimizer_at_centre(ms1, d):
    b = field_bundle(ms1, np.array([2.0, 0.0]))
    res = solve_a_delta(b, d)
    a_ref, g_ref = A_DELTA_AT_CENTRE[d]
    assert np.allclose(res.a, a_ref, atol=1e-8)
    assert res.gamma == pytest.approx(g_ref, abs=1e-10)
    a_chk, g_chk = _angle_search(b, d)
    assert np.allclose(res.a, a_chk, atol=1e-6)
    assert res.gamma == pytest.approx(g_chk, abs=1e-10)
    assert res.residual <= 1e-10


def test_competing_stationary_points_use_brute_force():
    # p̄ itself is stationary with gamma = 0, but the global minimum sits near (0, ±1)
    b = _bundle([1.0, 0.0], np.diag([-1.0, 5.0]))
    res = solve_a_delta(b, 0.1)
    assert res.method == BRUTE_FORCE
    a_chk, g_chk = _angle_search(b, 0.1)
    assert res.gamma == pytest.approx(g_chk, abs=1e-9)
    assert abs(res.a[1]) > 0.9
    assert res.residual <= 1e-8


def test_single_point_api_rejects_batches(ms1):
    with pytest.raises(ValueError):
        solve_a_delta(field_bundle(ms1, np.ones((3, 2)) * 2), 10.0)


def test_vanishing_gradient_raises():
    b = _bundle([1.0, 0.0], np.eye(2))
    b = FieldBundle(b.x[None], np.zeros((1, 2)), np.zeros(1), b.p_bar[None], b.S[None], b.inf_lap, b.q[None], b.h)
    with pytest.raises(SolverError):
        solve_batch(b, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["ms1", "ms2", "ms1e", "ms3"]), st.lists(st.floats(-0.55, 0.55), min_size=3, max_size=3),
       st.floats(0.5, 1000.0))
def test_minimizer_invariants(name, offset, d):
    spec = builtin_spec(name)
    x = (spec.domain.center + spec.domain.radii * np.array(offset[: spec.dim]))[None]
    sol = solve_batch(field_bundle(spec, x), d)
    assert sol.residual[0] <= 1e-8
    assert abs(np.linalg.norm(sol.a[0]) - 1.0) <= 1e-12
    assert sol.gamma[0] <= 1e-12


@pytest.mark.parametrize("name", ["ms1", "ms2"])
def test_calibration_on_builtin_specs(name):
    spec = builtin_spec(name)
    grid = quasi_random_interior(spec.domain, 400)
    params = calibrate(spec, 0.1, grid)
    assert params.doublings == 0 and params.d_delta == pytest.approx(10.0)
    assert params.grid_min_gamma >= -0.05
    assert verify_near_saddle(spec, params, grid)["passed"]


def test_calibration_doubles_until_the_bound_holds():
    spec = _saddle_spec()
    grid = quasi_random_interior(spec.domain, 200)
    params = calibrate(spec, 0.1, grid)
    assert params.doublings == 3
    assert params.d_delta == pytest.approx(80.0)
    # minimality, checked with an independent angle search
    b = field_bundle(spec, grid)
    worst = min(_angle_search(b.take(i), 40.0)[1] for i in range(len(grid)))
    assert worst < -0.05
    assert calibrate_d_delta(spec, 0.1, grid) == params.d_delta
    with pytest.raises(SolverError):
        calibrate(spec, 0.1, grid, max_doublings=2)
    with pytest.raises(ValueError):
        calibrate(spec, 0.0, grid)


def test_coefficient_gaps_shrink(ms1):
    grid = quasi_random_interior(ms1.domain, 200)
    gaps = [coefficient_gaps(ms1, StrategyParams(delta, 1.0 / delta), grid) for delta in (0.3, 0.1, 0.03)]
    for key in ("sup_a_minus_pbar", "sup_Q_minus_2q"):
        vals = [g[key] for g in gaps]
        assert vals[0] > vals[1] > vals[2]
    assert gaps[-1]["sup_a_minus_pbar"] < 0.03
    assert all(g["max_residual"] <= 1e-8 for g in gaps)


def test_feedback_fields(ms1):
    params = StrategyParams(0.1, 10.0)
    f = feedback_fields(ms1, params)
    x = np.array([2.0, 0.0])
    a = f.a_delta(x)
    assert np.allclose(a, A_DELTA_AT_CENTRE[10.0][0], atol=1e-8)
    assert f.stats.solves == 1
    f.a_delta(x)
    assert f.stats.solves == 1  # cached
    pb = field_bundle(ms1, x).p_bar
    assert np.allclose(f.P(x), a + pb)
    assert np.allclose(f.Q(x), 10.0 * (a - pb))
    assert f.y(x)[1] == 0.0 and np.allclose(f.z(x)[0], -pb) and f.z(x)[1] == 10.0
    pts = np.array([[2.0, 0.0], [2.0, 0.001], [2.001, 0.001]])
    assert np.allclose(f.a_delta(pts)[0], a)
    assert 0.0 < lipschitz_audit(f, pts) < 10.0
    assert f.stats.as_dict()["max_residual"] <= 1e-10
    g = with_d(params, 20.0)
    assert g.d_delta == 20.0 and g.delta == 0.1


def test_params_validation():
    with pytest.raises(ValueError):
        StrategyParams(0.0, 1.0)
    with pytest.raises(ValueError):
        StrategyParams(0.1, -1.0)
