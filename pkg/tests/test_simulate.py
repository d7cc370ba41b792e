import csv
from dataclasses import replace

import numpy as np
import pytest

from sdglab.problem import builtin_spec, field_bundle
from sdglab.strategy import SolverError, StrategyParams, feedback_fields
from sdglab.simulate import (AlignedControl, PathBatch, SimConfig, aligned_game_dynamics, limit_dynamics,
                             near_optimal_controls, near_optimal_dynamics, payoffs, run_batch, simulate_game,
                             simulate_game_batch, simulate_limit, simulate_limit_batch, simulate_near_optimal,
                             simulate_near_optimal_batch, tilted_dynamics, write_path_csv)

FAST = SimConfig(dt=1e-3, seed=3)
X0 = np.array([2.0, 0.0])
PARAMS = StrategyParams(0.1, 10.0)


def _same(a: PathBatch, b: PathBatch):
    for k in ("path_ids", "exited", "censored", "tau", "x_final", "running_cost", "psi_integral", "c_max", "d_max"):
        assert np.array_equal(getattr(a, k), getattr(b, k), equal_nan=True), k


def _dynamics(spec):
    fields = feedback_fields(spec, PARAMS)
    return {
        "limit": limit_dynamics(spec),
        "limit_perturbed": limit_dynamics(spec, 0.5, 2.0, 1.0),
        "near_direct": near_optimal_dynamics(spec, fields, "direct"),
        "near_game": near_optimal_dynamics(spec, fields, "game"),
        "tilted": tilted_dynamics(spec, 10.0, [1.0, 0.0]),
    }


@pytest.mark.parametrize("name", ["ms1", "ms1e"])
def test_compiled_route_matches_numpy_bitwise(name):
    spec = builtin_spec(name)
    x0 = spec.domain.center + np.array([0.1, 0.05])
    for label, dyn in _dynamics(spec).items():
        a = run_batch(spec, dyn, x0, replace(FAST, engine="numpy"), n_paths=60)
        b = run_batch(spec, dyn, x0, replace(FAST, engine="compiled"), n_paths=60)
        assert a.exited.all(), label
        _same(a, b)


def test_game_form_equals_direct_form(ms1):
    fields = feedback_fields(ms1, PARAMS)
    for engine in ("numpy", "compiled"):
        cfg = replace(FAST, engine=engine)
        a = run_batch(ms1, near_optimal_dynamics(ms1, fields, "direct"), X0, cfg, n_paths=50)
        b = run_batch(ms1, near_optimal_dynamics(ms1, fields, "game"), X0, cfg, n_paths=50)
        for k in ("exited", "tau", "x_final", "running_cost", "d_max"):
            assert np.array_equal(getattr(a, k), getattr(b, k)), k
        # psi vanishes to rounding when the maximizer uses (a, 0) at the exact minimizer only up to gamma
        assert np.all(np.abs(b.psi_integral) <= 0.05 * b.tau + 1e-12)


def test_general_game_route_matches_near_optimal(ms1):
    fields = feedback_fields(ms1, PARAMS)
    y, z = near_optimal_controls(ms1, fields)
    a = simulate_game_batch(ms1, y, z, X0, FAST, n_paths=30)
    b = simulate_near_optimal_batch(ms1, fields, X0, FAST, n_paths=30, form="game")
    _same(a, b)


def test_exit_points_lie_on_the_boundary():
    for name in ("ms1", "ms1e", "ms3"):
        spec = builtin_spec(name)
        batch = simulate_limit_batch(spec, spec.domain.center, FAST, n_paths=100)
        assert batch.exited.all() and not batch.censored.any()
        assert np.max(np.abs(spec.domain.signed_distance(batch.exit_points))) <= 1e-9
        assert np.all(batch.tau > 0)


def test_seed_determinism_and_sensitivity(ms1):
    a = simulate_limit_batch(ms1, X0, FAST, n_paths=50)
    _same(a, simulate_limit_batch(ms1, X0, FAST, n_paths=50))
    c = simulate_limit_batch(ms1, X0, replace(FAST, seed=4), n_paths=50)
    assert not np.array_equal(a.tau, c.tau)


def test_results_do_not_depend_on_batching(ms1):
    ids = np.arange(40)
    full = simulate_limit_batch(ms1, X0, FAST, path_ids=ids)
    sub = simulate_limit_batch(ms1, X0, FAST, path_ids=ids[[7, 3, 31]])
    for k in ("tau", "x_final", "running_cost"):
        assert np.array_equal(getattr(sub, k), getattr(full, k)[[7, 3, 31]])
    for cfg in (replace(FAST, chunk_size=7), replace(FAST, chunk_size=7, workers=3),
                replace(FAST, chunk_size=7, engine="numpy")):
        _same(full, simulate_limit_batch(ms1, X0, cfg, path_ids=ids))


def test_start_on_boundary_exits_immediately(ms1):
    x = np.array([3.0, 0.0])
    out = simulate_limit(ms1, x, FAST)
    assert out.exited and out.tau == 0.0 and out.running_cost == 0.0
    assert out.payoff(ms1) == pytest.approx(float(ms1.g_eval(x)))
    with pytest.raises(ValueError):
        simulate_limit(ms1, np.array([3.5, 0.0]), FAST)
    with pytest.raises(ValueError):
        simulate_limit(ms1, np.zeros(3), FAST)


def test_frozen_players_are_censored(ms1):
    dyn = aligned_game_dynamics(ms1, AlignedControl(1.0), AlignedControl(1.0))
    batch = run_batch(ms1, dyn, X0, replace(FAST, t_max=0.05), n_paths=5)
    assert batch.censored.all() and not batch.exited.any()
    assert np.allclose(batch.tau, 0.05)
    assert np.array_equal(batch.x_final, np.tile(X0, (5, 1)))
    # censored paths carry only the running cost
    assert np.allclose(payoffs(ms1, batch), batch.running_cost)
    assert np.allclose(batch.running_cost, 0.05 * float(field_bundle(ms1, X0).h))


def test_default_time_limit(ms1):
    assert FAST.time_limit(ms1) == pytest.approx(50.0 * ms1.c1)


def test_horizon_stops_paths(ms1):
    batch = simulate_limit_batch(ms1, X0, FAST, n_paths=200, horizon=0.05)
    alive = ~batch.exited
    assert alive.any() and not batch.censored.any()
    assert np.all(batch.tau[alive] == 0.05)
    assert np.all(batch.tau <= 0.05)
    with pytest.raises(ValueError):
        simulate_limit_batch(ms1, X0, FAST, n_paths=2, horizon=0.0505)


def test_single_path_recording_and_csv(ms1, tmp_path):
    cfg = replace(FAST, record_stride=10)
    out = simulate_limit(ms1, X0, cfg, path_index=5)
    batch = simulate_limit_batch(ms1, X0, FAST, path_ids=[5])
    assert out.tau == batch.tau[0] and np.array_equal(out.exit_point, batch.x_final[0])
    assert out.samples[0][0] == 0.0 and np.array_equal(out.samples[0][1], X0)
    path = tmp_path / "p.csv"
    write_path_csv(out, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x_1", "x_2", "exited"]
    assert len(rows) == len(out.samples) + 1
    assert [r[-1] for r in rows[1:]].count("1") == 1 and rows[-1][-1] == "1"
    assert float(rows[-1][0]) == out.tau


def test_control_trace_digest(ms1):
    out = simulate_near_optimal(ms1, PARAMS, X0, FAST)
    assert out.control_trace_digest["D_max"] == 10.0
    assert out.control_trace_digest["C_max"] == 0.0
    assert out.control_trace_digest["declared_bound"] == 10.0
    y = AlignedControl(1.0, magnitude=0.5)
    z = AlignedControl(-1.0, magnitude=2.0)
    g = simulate_game(ms1, y.field(ms1), z.field(ms1), X0, FAST)
    assert g.control_trace_digest["C_max"] == 0.5 and g.control_trace_digest["declared_bound"] == 2.0


def test_solver_stats_are_collected(ms1):
    fields = feedback_fields(ms1, PARAMS)
    simulate_near_optimal_batch(ms1, fields, X0, FAST, n_paths=20)
    s = fields.stats
    assert s.solves > 1000
    assert s.max_residual <= 1e-8 and s.max_gamma <= 1e-12


def test_configuration_errors(ms1):
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(engine="gpu")
    with pytest.raises(ValueError):
        SimConfig(extension_mode="reflect")
    with pytest.raises(ValueError):
        SimConfig(dt=1e-3, t_max=1e-4)
    with pytest.raises(ValueError):
        run_batch(ms1, limit_dynamics(ms1), X0, FAST)
    # the general game route has no compiled kernel
    y, z = near_optimal_controls(ms1, feedback_fields(ms1, PARAMS))
    with pytest.raises(ValueError):
        simulate_game_batch(ms1, y, z, X0, replace(FAST, engine="compiled"), n_paths=1)
    with pytest.raises(TypeError):
        simulate_near_optimal(ms1, 10.0, X0, FAST)


def test_vanishing_aligned_direction_is_reported(ms1):
    # normalize(p̄ - p̄(2, 0)) vanishes at the start
    pb = field_bundle(ms1, X0).p_bar
    dyn = aligned_game_dynamics(ms1, AlignedControl(1.0, tuple(-pb)), AlignedControl(-1.0))
    for engine in ("numpy", "compiled"):
        with pytest.raises(ValueError):
            run_batch(ms1, dyn, X0, replace(FAST, engine=engine), n_paths=1)


def test_limit_value_is_close_to_u(ms1):
    batch = simulate_limit_batch(ms1, X0, FAST, n_paths=2000)
    v = payoffs(ms1, batch)
    assert abs(v.mean() - 2.0) < 4 * v.std() / np.sqrt(len(v)) + 0.02
