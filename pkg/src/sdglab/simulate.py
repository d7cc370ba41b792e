"""Euler-Maruyama simulation of the game dynamics with first-exit detection.

All three processes have rank-one noise. A single scalar Brownian increment
per step drives the whole state:

    dX = sigma(X) dW + mu(X) dt,      W one-dimensional.

Game:          sigma = A - B,          mu = (C + D)(A + B)
Near-optimal:  sigma = a^δ + p̄,        mu = d^δ (a^δ - p̄)
Limit:         sigma = 2 p̄,            mu = 2 q

Paths are advanced as a batch. Within ``substep_zone * |sigma| * sqrt(dt)`` of
the boundary a step is split into ``substeps`` pieces. The pieces are filled in
by a Brownian bridge pinned to the full-step increment, so a path's noise does
not depend on whether it was sub-stepped. A step that leaves the domain is
truncated at the boundary crossing.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .geometry import BOUNDARY_TOL
from .isaacs import phi_values, sphere_directions
from .problem import FieldBundle, ProblemSpec, SpecError, field_bundle
from .rng import split_seed, standard_normals
from .strategy import FeedbackFields, SolverError, StrategyParams, feedback_fields


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-4
    t_max: float | None = None
    record_stride: int = 0
    seed: int = 0
    extension_mode: str = "closest_point"
    substeps: int = 10
    substep_zone: float = 10.0
    chunk_size: int = 50_000
    workers: int = 1
    engine: str = "auto"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_max is not None and self.t_max < self.dt:
            raise ValueError("t_max must be at least dt")
        if self.extension_mode != "closest_point":
            raise ValueError("only closest_point extension is supported")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.engine not in ("auto", "numpy", "compiled"):
            raise ValueError("engine must be auto, numpy or compiled")

    def time_limit(self, spec: ProblemSpec) -> float:
        return self.t_max if self.t_max is not None else 50.0 * spec.c1


class Coefficients(NamedTuple):
    sigma: np.ndarray
    mu: np.ndarray
    h: np.ndarray
    psi: np.ndarray | None = None
    c: np.ndarray | None = None
    d: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Dynamics:
    """A rank-one diffusion: a vectorized coefficient map plus, optionally, the
    matching compiled kernel (kind and parameter vector)."""

    name: str
    coeffs: Callable[[np.ndarray], Coefficients]
    kind: str | None = None
    prm: np.ndarray | None = None
    dirs: np.ndarray | None = None
    fields: FeedbackFields | None = None


@dataclass
class TrajectoryOutcome:
    exited: bool
    censored: bool
    tau: float
    exit_point: np.ndarray | None
    x_final: np.ndarray
    running_cost: float
    psi_integral: float
    samples: list = field(default_factory=list)
    control_trace_digest: dict = field(default_factory=dict)

    def payoff(self, spec: ProblemSpec) -> float:
        g = float(spec.g_eval(self.exit_point)) if self.exited else 0.0
        return self.running_cost + g


@dataclass
class PathBatch:
    path_ids: np.ndarray
    exited: np.ndarray
    censored: np.ndarray
    tau: np.ndarray
    x_final: np.ndarray
    running_cost: np.ndarray
    psi_integral: np.ndarray
    c_max: np.ndarray
    d_max: np.ndarray
    snapshots: list | None = None

    @classmethod
    def empty(cls, path_ids, m: int) -> "PathBatch":
        n = len(path_ids)
        return cls(
            path_ids=np.asarray(path_ids, dtype=np.int64),
            exited=np.zeros(n, dtype=bool),
            censored=np.zeros(n, dtype=bool),
            tau=np.full(n, np.nan),
            x_final=np.full((n, m), np.nan),
            running_cost=np.zeros(n),
            psi_integral=np.zeros(n),
            c_max=np.zeros(n),
            d_max=np.zeros(n),
        )

    def __len__(self):
        return len(self.path_ids)

    @property
    def exit_points(self) -> np.ndarray:
        return self.x_final[self.exited]

    @classmethod
    def concat(cls, parts: list["PathBatch"]) -> "PathBatch":
        if len(parts) == 1:
            return parts[0]
        names = ("path_ids", "exited", "censored", "tau", "x_final", "running_cost", "psi_integral", "c_max", "d_max")
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in names})

    def samples_of(self, i: int) -> list:
        if not self.snapshots:
            return []
        out = []
        for t, idx, X in self.snapshots:
            hit = np.flatnonzero(idx == i)
            if hit.size:
                out.append((t, X[hit[0]].copy()))
        return out

    def outcome(self, i: int) -> TrajectoryOutcome:
        samples = self.samples_of(i)
        if self.exited[i]:
            samples.append((float(self.tau[i]), self.x_final[i].copy()))
        return TrajectoryOutcome(
            exited=bool(self.exited[i]),
            censored=bool(self.censored[i]),
            tau=float(self.tau[i]),
            exit_point=self.x_final[i].copy() if self.exited[i] else None,
            x_final=self.x_final[i].copy(),
            running_cost=float(self.running_cost[i]),
            psi_integral=float(self.psi_integral[i]),
            samples=samples,
            control_trace_digest={"C_max": float(self.c_max[i]), "D_max": float(self.d_max[i]),
                                  "declared_bound": float(np.ceil(max(self.c_max[i], self.d_max[i])))},
        )


# -- field evaluation ---------------------------------------------------------------


def extend_fields(spec: ProblemSpec, x) -> FieldBundle:
    """Field bundle at the closest point of the closed domain."""
    return field_bundle(spec, spec.domain.project(x))


def limit_dynamics(spec: ProblemSpec, sigma_scale: float = 1.0, drift_scale: float = 1.0,
                   pbar_drift: float = 0.0) -> Dynamics:
    """dX = 2p̄ dW + 2q dt. The scale arguments exist for fault injection only."""

    def coeffs(X):
        b = extend_fields(spec, X)
        return Coefficients(sigma_scale * (2.0 * b.p_bar),
                            drift_scale * (2.0 * b.q) + pbar_drift * b.p_bar, b.h)

    name = "limit" if (sigma_scale, drift_scale, pbar_drift) == (1.0, 1.0, 0.0) else "limit_perturbed"
    return Dynamics(name, coeffs, kernels.LIMIT, np.array([sigma_scale, drift_scale, pbar_drift], dtype=float))


def game_dynamics(spec: ProblemSpec, y_field, z_field, track_psi: bool = True) -> Dynamics:
    """Feedback controls y(x) = (A, C) and z(x) = (B, D) for the two players (vectorized route only)."""

    def coeffs(X):
        Xe = spec.domain.project(X)
        b = field_bundle(spec, Xe)
        A, C = y_field(Xe)
        B, D = z_field(Xe)
        C = np.broadcast_to(np.asarray(C, dtype=float), Xe.shape[:-1])
        D = np.broadcast_to(np.asarray(D, dtype=float), Xe.shape[:-1])
        psi = -b.h + phi_values(A, B, C, D, b.p, b.S) if track_psi else None
        return Coefficients(A - B, (C + D)[:, None] * (A + B), b.h, psi, C, D)

    return Dynamics("game", coeffs)


def _solver_prm(fields: FeedbackFields) -> np.ndarray:
    p = fields.params
    return np.array([p.d_delta, p.max_iter, p.tol], dtype=float)


def _brute_dirs(fields: FeedbackFields) -> np.ndarray:
    m = fields.spec.dim
    if m > 3:
        return np.empty((0, m))
    res = fields.params.brute_force_resolution
    return sphere_directions(m, res if m == 2 else 8 * res)


def near_optimal_dynamics(spec: ProblemSpec, fields: FeedbackFields, form: str = "direct") -> Dynamics:
    """Near-optimal pair. ``direct`` uses P = a + p̄, Q = d(a - p̄); ``game`` builds the
    same coefficients from y = (a, 0), z = (-p̄, d) and also integrates psi."""
    if form == "direct":
        def coeffs(X):
            b = extend_fields(spec, X)
            _, P, Q = fields.coefficients(b)
            n = len(X)
            return Coefficients(P, Q, b.h, None, np.zeros(n), np.full(n, fields.params.d_delta))

        kind = kernels.NEAR_DIRECT
    elif form == "game":
        coeffs = game_dynamics(spec, *near_optimal_controls(spec, fields)).coeffs
        kind = kernels.NEAR_GAME
    else:
        raise ValueError("form must be 'direct' or 'game'")
    return Dynamics(f"near_optimal_{form}", coeffs, kind, _solver_prm(fields), _brute_dirs(fields), fields)


@dataclass(frozen=True)
class AlignedControl:
    """Feedback control x -> (normalize(scale * p̄(x) + offset), magnitude)."""

    scale: float
    offset: tuple = ()
    magnitude: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("control magnitude must be nonnegative")

    def offset_vector(self, m: int) -> np.ndarray:
        if len(self.offset) == 0:
            return np.zeros(m)
        t = np.asarray(self.offset, dtype=float)
        if t.shape != (m,):
            raise ValueError("control offset must be a vector in R^m")
        return t

    def field(self, spec: ProblemSpec):
        t = self.offset_vector(spec.dim)

        def evaluate(X):
            v = self.scale * field_bundle(spec, X).p_bar + t
            nrm = np.linalg.norm(v, axis=-1, keepdims=True)
            if np.any(nrm < 1e-12):
                raise ValueError("aligned control direction vanishes")
            return v / nrm, np.full(len(X), float(self.magnitude))

        return evaluate


def aligned_game_dynamics(spec: ProblemSpec, y: AlignedControl, z: AlignedControl, name: str = "aligned_game") -> Dynamics:
    """Game dynamics for two aligned feedback controls; both routes available."""
    m = spec.dim
    prm = np.concatenate([[y.magnitude, z.magnitude, y.scale, z.scale], y.offset_vector(m), z.offset_vector(m)])
    coeffs = game_dynamics(spec, y.field(spec), z.field(spec)).coeffs
    return Dynamics(name, coeffs, kernels.ALIGNED_GAME, prm.astype(float))


def tilted_dynamics(spec: ProblemSpec, d: float, tilt, c_y: float = 1.0) -> Dynamics:
    """A deliberately suboptimal maximizer y = (normalize(p̄ + tilt), c_y) against z = (-p̄, d)."""
    return aligned_game_dynamics(spec, AlignedControl(1.0, tuple(np.asarray(tilt, dtype=float)), c_y),
                                 AlignedControl(-1.0, (), d), name="tilted_game")


def near_optimal_controls(spec: ProblemSpec, fields: FeedbackFields):
    """(y_field, z_field) realizing the near-optimal pair inside the general game."""

    def y_field(X):
        a = fields.solve(field_bundle(spec, X)).a
        return a, np.zeros(len(X))

    def z_field(X):
        return -field_bundle(spec, X).p_bar, np.full(len(X), fields.params.d_delta)

    return y_field, z_field


# -- integrators --------------------------------------------------------------------


def _steps(spec, config, horizon):
    dt = config.dt
    if horizon is None:
        return int(math.ceil(config.time_limit(spec) / dt))
    n_steps = int(round(horizon / dt))
    if n_steps < 0 or abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a nonnegative multiple of dt")
    return n_steps


def _start(spec, x0, path_ids):
    dom = spec.domain
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (dom.dim,):
        raise ValueError("x0 has the wrong dimension")
    if dom.signed_distance(x0) > BOUNDARY_TOL:
        raise ValueError(f"x0={x0.tolist()} lies outside the closed domain")
    out = PathBatch.empty(np.asarray(path_ids, dtype=np.int64), dom.dim)
    if not dom.contains(x0):
        out.exited[:] = True
        out.tau[:] = 0.0
        out.x_final[:] = x0
        return x0, out, True
    return x0, out, False


def _finish(out, idx, X, n_steps, dt, horizon):
    out.x_final[idx] = X
    if horizon is not None:
        out.tau[idx] = horizon
    else:
        out.tau[idx] = n_steps * dt
        out.censored[idx] = True


def _integrate_numpy(spec: ProblemSpec, dynamics: Dynamics, x0, path_ids, config: SimConfig,
                     horizon: float | None = None, record: bool = False) -> PathBatch:
    x0, out, done = _start(spec, x0, path_ids)
    out.snapshots = [] if record else None
    if done:
        return out
    dom = spec.domain
    coeffs = dynamics.coeffs
    path_ids = out.path_ids
    dt = config.dt
    n_steps = _steps(spec, config, horizon)
    sqdt = math.sqrt(dt)
    nsub = config.substeps
    hsub = dt / nsub
    seed = config.seed

    def advance(Xs, Xn, co, step, t0, gidx):
        theta = dom.crossing_fraction(Xs, Xn)
        hit = ~np.isnan(theta)
        eff = np.where(hit, theta, 1.0) * step
        out.running_cost[gidx] += co.h * eff
        if co.psi is not None:
            out.psi_integral[gidx] += co.psi * eff
        if co.c is not None:
            np.maximum.at(out.c_max, gidx, co.c)
            np.maximum.at(out.d_max, gidx, co.d)
        if hit.any():
            th = theta[hit][:, None]
            g = gidx[hit]
            out.exited[g] = True
            out.tau[g] = t0 + theta[hit] * step
            out.x_final[g] = Xs[hit] + th * (Xn[hit] - Xs[hit])
        return ~hit

    idx = np.arange(len(path_ids))
    X = np.tile(x0, (len(idx), 1))
    for k in range(n_steps):
        if idx.size == 0:
            break
        t = k * dt
        if record and config.record_stride > 0 and k % config.record_stride == 0:
            out.snapshots.append((t, idx.copy(), X.copy()))
        co = coeffs(X)
        dW = sqdt * standard_normals(seed, path_ids[idx], k, 0)
        if nsub > 1:
            near = dom.interior_gap(X) < config.substep_zone * np.linalg.norm(co.sigma, axis=-1) * sqdt
        else:
            near = np.zeros(len(idx), dtype=bool)

        far = ~near
        Xf = X[far]
        cof = Coefficients(*(None if v is None else v[far] for v in co))
        Xn = Xf + cof.sigma * dW[far, None] + cof.mu * dt
        keep = advance(Xf, Xn, cof, dt, t, idx[far])
        idx_next = [idx[far][keep]]
        X_next = [Xn[keep]]

        if near.any():
            sub_idx = idx[near]
            Xs = X[near]
            w_rem = dW[near]
            cos = Coefficients(*(None if v is None else v[near] for v in co))
            for j in range(nsub):
                if sub_idx.size == 0:
                    break
                if j > 0:
                    cos = coeffs(Xs)
                if j < nsub - 1:
                    r = (nsub - j) * hsub
                    zj = standard_normals(seed, path_ids[sub_idx], k, j + 1)
                    w = w_rem * (hsub / r) + math.sqrt(hsub * (r - hsub) / r) * zj
                else:
                    w = w_rem
                w_rem = w_rem - w
                Xn = Xs + cos.sigma * w[:, None] + cos.mu * hsub
                keep = advance(Xs, Xn, cos, hsub, t + j * hsub, sub_idx)
                Xs, w_rem, sub_idx = Xn[keep], w_rem[keep], sub_idx[keep]
            idx_next.append(sub_idx)
            X_next.append(Xs)

        idx = np.concatenate(idx_next)
        X = np.concatenate(X_next)
        order = np.argsort(idx, kind="stable")
        idx, X = idx[order], X[order]

    if idx.size:
        _finish(out, idx, X, n_steps, dt, horizon)
        if record and config.record_stride > 0:
            out.snapshots.append((n_steps * dt, idx.copy(), X.copy()))
    return out


def _integrate_compiled(spec: ProblemSpec, dynamics: Dynamics, x0, path_ids, config: SimConfig,
                        horizon: float | None = None) -> PathBatch:
    x0, out, done = _start(spec, x0, path_ids)
    if done:
        return out
    dom = spec.domain
    run = kernels.kernel_for(spec.jet, dynamics.kind)
    n_steps = _steps(spec, config, horizon)
    k0, k1 = split_seed(config.seed)
    dirs = dynamics.dirs if dynamics.dirs is not None else np.empty((0, spec.dim))
    st = np.array([0.0, 0.0, 0.0, -np.inf, 0.0, 0.0])
    run(x0, out.path_ids, k0, k1, float(config.dt), n_steps, int(config.substeps), float(config.substep_zone),
        np.ascontiguousarray(dom.center), np.ascontiguousarray(dom.radii), dom.kind == "ball",
        np.ascontiguousarray(dynamics.prm, dtype=float), np.ascontiguousarray(dirs, dtype=float),
        out.exited, out.tau, out.x_final, out.running_cost, out.psi_integral, out.c_max, out.d_max, st)
    code = int(st[4])
    if code == kernels.FAIL_GRADIENT:
        raise SpecError("gradient vanishes along a simulated path")
    if code == kernels.FAIL_SOLVER:
        raise SolverError(f"minimizer did not converge along a path (residual {st[5]:.3e})")
    if code == kernels.FAIL_CONTROL:
        raise ValueError("aligned control direction vanishes")
    if dynamics.fields is not None and st[0] > 0:
        stats = dynamics.fields.stats
        stats.solves += int(st[0])
        stats.brute_forced += int(st[1])
        stats.max_residual = max(stats.max_residual, float(st[2]))
        stats.max_gamma = max(stats.max_gamma, float(st[3]))
    alive = ~out.exited
    if horizon is not None:
        out.tau[alive] = horizon
    else:
        out.tau[alive] = n_steps * config.dt
        out.censored[alive] = True
    return out


def use_compiled(spec: ProblemSpec, dynamics: Dynamics, config: SimConfig) -> bool:
    available = spec.jet is not None and dynamics.kind is not None
    if config.engine == "compiled" and not available:
        raise ValueError(f"no compiled kernel for spec {spec.name!r} with {dynamics.name} dynamics")
    return available and config.engine != "numpy"


def run_batch(spec: ProblemSpec, dynamics: Dynamics, x0, config: SimConfig, path_ids=None,
              n_paths: int | None = None, horizon: float | None = None, record: bool = False) -> PathBatch:
    """Simulate many paths, chunked; each path's result depends only on (seed, path id).

    Recording snapshots forces the vectorized route.
    """
    if path_ids is None:
        if n_paths is None:
            raise ValueError("give path_ids or n_paths")
        path_ids = np.arange(n_paths, dtype=np.int64)
    path_ids = np.asarray(path_ids, dtype=np.int64)
    compiled = use_compiled(spec, dynamics, config) and not record
    if record:
        return _integrate_numpy(spec, dynamics, x0, path_ids, config, horizon, record=True)
    chunks = [path_ids[i:i + config.chunk_size] for i in range(0, len(path_ids), config.chunk_size)] or [path_ids]

    def job(ids):
        if compiled:
            return _integrate_compiled(spec, dynamics, x0, ids, config, horizon)
        return _integrate_numpy(spec, dynamics, x0, ids, config, horizon)

    if config.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    return PathBatch.concat(parts)


# -- public entry points --------------------------------------------------------------


def _single(spec, dynamics, x0, config, path_index) -> TrajectoryOutcome:
    return run_batch(spec, dynamics, x0, config, [path_index], record=True).outcome(0)


def _fields(spec, params_or_fields) -> FeedbackFields:
    if isinstance(params_or_fields, FeedbackFields):
        return params_or_fields
    if isinstance(params_or_fields, StrategyParams):
        return feedback_fields(spec, params_or_fields)
    raise TypeError("expected StrategyParams or FeedbackFields")


def simulate_game(spec, y_field, z_field, x0, config: SimConfig, path_index: int = 0) -> TrajectoryOutcome:
    return _single(spec, game_dynamics(spec, y_field, z_field), x0, config, path_index)


def simulate_game_batch(spec, y_field, z_field, x0, config: SimConfig, path_ids=None, n_paths=None,
                        horizon=None) -> PathBatch:
    return run_batch(spec, game_dynamics(spec, y_field, z_field), x0, config, path_ids, n_paths, horizon)


def simulate_near_optimal(spec, params, x0, config: SimConfig, path_index: int = 0) -> TrajectoryOutcome:
    return _single(spec, near_optimal_dynamics(spec, _fields(spec, params)), x0, config, path_index)


def simulate_near_optimal_batch(spec, params, x0, config: SimConfig, path_ids=None, n_paths=None,
                                horizon=None, form: str = "direct") -> PathBatch:
    dyn = near_optimal_dynamics(spec, _fields(spec, params), form)
    return run_batch(spec, dyn, x0, config, path_ids, n_paths, horizon)


def simulate_limit(spec, x0, config: SimConfig, path_index: int = 0) -> TrajectoryOutcome:
    return _single(spec, limit_dynamics(spec), x0, config, path_index)


def simulate_limit_batch(spec, x0, config: SimConfig, path_ids=None, n_paths=None, horizon=None) -> PathBatch:
    return run_batch(spec, limit_dynamics(spec), x0, config, path_ids, n_paths, horizon)


def payoffs(spec: ProblemSpec, batch: PathBatch) -> np.ndarray:
    """Running cost plus terminal payoff; censored paths get no terminal term."""
    g = np.zeros(len(batch))
    if batch.exited.any():
        g[batch.exited] = spec.g_eval(batch.x_final[batch.exited])
    return batch.running_cost + g


def write_path_csv(outcome: TrajectoryOutcome, path: str | os.PathLike) -> None:
    """One row per recorded sample: t, x_1..x_m, exited (1 only on the exit row)."""
    samples = outcome.samples
    m = len(outcome.x_final)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(m)] + ["exited"])
        for j, (t, x) in enumerate(samples):
            last = j == len(samples) - 1
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [int(last and outcome.exited)])
