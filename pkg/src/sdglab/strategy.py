"""Near-optimal feedback pair for the lower game.

The minimizing player uses ``z(x) = (-p̄(x), d)``. The maximizing player answers
with ``y(x) = (a(x), 0)``, where ``a(x)`` minimizes
``a -> psi(x, (a, 0), (-p̄(x), d))`` over the unit sphere. Equivalently, ``a``
maximizes ``1/2 (a + p̄)' S (a + p̄) + d a.p``. The stationarity condition is
``lam * a = S (a + p̄) + d p``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .isaacs import sphere_directions
from .problem import FieldBundle, ProblemSpec, field_bundle

log = logging.getLogger(__name__)

FIXED_POINT = "fixed_point"
BRUTE_FORCE = "brute_force"
ACCEPT_RESIDUAL = 1e-8
QUANTUM = 1e-9


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategyParams:
    delta: float
    d_delta: float
    max_iter: int = 500
    tol: float = 1e-10
    brute_force_resolution: int = 3600
    grid_min_gamma: float | None = None
    doublings: int | None = None

    def __post_init__(self):
        if not (self.delta > 0 and self.d_delta > 0):
            raise ValueError("delta and d_delta must be positive")


@dataclass
class MinimizerResult:
    a: np.ndarray
    lagrange_lambda: float
    residual: float
    gamma: float
    method: str
    iterations: int = 0


@dataclass
class BatchSolution:
    a: np.ndarray
    lagrange_lambda: np.ndarray
    residual: np.ndarray
    gamma: np.ndarray
    brute_forced: np.ndarray
    iterations: int


def _objective_gamma(b: FieldBundle, a, d):
    """psi(x, (a, 0), (-p̄, d)) = -h - 1/2 (a+p̄)'S(a+p̄) - d (a - p̄).p"""
    s = a + b.p_bar
    return -b.h - 0.5 * np.einsum("...i,...ij,...j->...", s, b.S, s) - d * np.sum((a - b.p_bar) * b.p, axis=-1)


def _stationarity(b: FieldBundle, a, d):
    v = np.einsum("...ij,...j->...i", b.S, a + b.p_bar) + d * b.p
    lam = np.sum(a * v, axis=-1)
    res = np.linalg.norm(lam[..., None] * a - v, axis=-1)
    return lam, res


def _gershgorin_shift(S):
    # mu >= -lambda_min(S) keeps the normalized-gradient map an ascent map.
    diag = np.diagonal(S, axis1=-2, axis2=-1)
    off = np.sum(np.abs(S), axis=-1) - np.abs(diag)
    return np.maximum(0.0, -np.min(diag - off, axis=-1))


def _fixed_point(b: FieldBundle, d, a0, shift, max_iter, tol):
    a = a0.copy()
    w = np.einsum("...ij,...j->...i", b.S, b.p_bar) + d * b.p
    active = np.arange(len(a))
    it = 0
    while active.size and it < max_iter:
        it += 1
        S = b.S[active]
        v = np.einsum("nij,nj->ni", S, a[active]) + shift[active, None] * a[active] + w[active]
        a_new = v / np.linalg.norm(v, axis=-1, keepdims=True)
        a[active] = a_new
        vs = np.einsum("nij,nj->ni", S, a_new + b.p_bar[active]) + d * b.p[active]
        lam = np.sum(a_new * vs, axis=-1)
        res = np.linalg.norm(lam[:, None] * a_new - vs, axis=-1)
        active = active[res > tol]
    return a, it


def _brute_force_point(b: FieldBundle, d: float, resolution: int, tol: float) -> np.ndarray:
    m = b.p.shape[-1]
    n = resolution if m == 2 else 8 * resolution
    dirs = sphere_directions(m, n)
    vals = _objective_gamma(b, dirs, d)
    best = vals.min()
    ties = np.flatnonzero(vals <= best + 1e-12 * max(1.0, abs(best)))
    a = dirs[ties[np.argmax(dirs[ties] @ b.p_bar)]]
    # Polish the grid winner to a stationary point with a monotone ascent map.
    shift = np.array([np.linalg.norm(b.S) + 1.0])
    one = FieldBundle(*(np.asarray(getattr(b, f))[None] for f in ("x", "p", "p_norm", "p_bar", "S", "inf_lap", "q", "h")))
    a, _ = _fixed_point(one, d, a[None].copy(), shift, 200_000, tol)
    return a[0]


def solve_batch(b: FieldBundle, d: float, max_iter: int = 500, tol: float = 1e-10,
                brute_force_resolution: int = 3600) -> BatchSolution:
    """Vectorized minimizer over a batch bundle (leading axis = points)."""
    if np.any(b.p_norm < 1e-10):
        raise SolverError("gradient vanishes; the minimizer is undefined")
    n, m = b.p.shape
    shift = _gershgorin_shift(b.S)
    a, iters = _fixed_point(b, d, b.p_bar.copy(), shift, max_iter, tol)
    lam, res = _stationarity(b, a, d)
    gamma = _objective_gamma(b, a, d)
    # Weak drift: several stationary points may compete, so confirm globally.
    snorm = np.linalg.norm(b.S, axis=(-2, -1))
    suspect = (res > tol) | (gamma > 1e-10) | (d * b.p_norm <= 4.0 * snorm)
    brute = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(suspect):
        if m > 3:
            if res[i] > ACCEPT_RESIDUAL:
                raise SolverError(f"fixed point stalled at {b.x[i]} and brute force needs m <= 3")
            continue
        bi = b.take(i)
        cand = _brute_force_point(bi, d, brute_force_resolution, tol)
        g_cand = _objective_gamma(bi, cand, d)
        if res[i] > tol or g_cand < gamma[i] - 1e-12:
            a[i] = cand
            brute[i] = True
    if brute.any():
        lam, res = _stationarity(b, a, d)
        gamma = _objective_gamma(b, a, d)
    if np.any(res > ACCEPT_RESIDUAL):
        bad = int(np.argmax(res))
        raise SolverError(f"minimizer did not converge at {b.x[bad]} (residual {res[bad]:.3e}, d={d})")
    return BatchSolution(a, lam, res, gamma, brute, iters)


def solve_a_delta(bundle: FieldBundle, d: float, params: StrategyParams | None = None) -> MinimizerResult:
    """Minimizer of a -> psi(x, (a, 0), (-p̄, d)) at a single point."""
    if np.ndim(bundle.p) != 1:
        raise ValueError("solve_a_delta takes a single-point bundle; use solve_batch for arrays")
    kw = {} if params is None else dict(max_iter=params.max_iter, tol=params.tol,
                                        brute_force_resolution=params.brute_force_resolution)
    batch = FieldBundle(*(np.asarray(getattr(bundle, f))[None] for f in
                          ("x", "p", "p_norm", "p_bar", "S", "inf_lap", "q", "h")))
    sol = solve_batch(batch, d, **kw)
    return MinimizerResult(
        a=sol.a[0],
        lagrange_lambda=float(sol.lagrange_lambda[0]),
        residual=float(sol.residual[0]),
        gamma=float(sol.gamma[0]),
        method=BRUTE_FORCE if sol.brute_forced[0] else FIXED_POINT,
        iterations=sol.iterations,
    )


def calibrate_d_delta(spec: ProblemSpec, delta: float, grid, max_doublings: int = 40) -> float:
    return calibrate(spec, delta, grid, max_doublings).d_delta


def calibrate(spec: ProblemSpec, delta: float, grid, max_doublings: int = 40) -> StrategyParams:
    """Smallest d = 2^k / delta with grid-min gamma >= -delta / 2."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    b = field_bundle(spec, np.asarray(grid, dtype=float))
    d = 1.0 / delta
    for k in range(max_doublings + 1):
        g_min = float(solve_batch(b, d).gamma.min())
        if g_min >= -0.5 * delta:
            return StrategyParams(delta=delta, d_delta=d, grid_min_gamma=g_min, doublings=k)
        d *= 2.0
    raise SolverError(f"calibration failed for delta={delta} after {max_doublings} doublings")


@dataclass
class SolveStats:
    solves: int = 0
    brute_forced: int = 0
    max_residual: float = 0.0
    max_gamma: float = -np.inf

    def update(self, sol: BatchSolution):
        self.solves += len(sol.a)
        self.brute_forced += int(sol.brute_forced.sum())
        if len(sol.a):
            self.max_residual = max(self.max_residual, float(sol.residual.max()))
            self.max_gamma = max(self.max_gamma, float(sol.gamma.max()))

    def as_dict(self) -> dict:
        return {"solves": self.solves, "brute_forced": self.brute_forced,
                "max_residual": self.max_residual, "max_gamma": self.max_gamma}


@dataclass
class FeedbackFields:
    """Point-evaluable a^δ, P^δ = a^δ + p̄, Q^δ = d^δ (a^δ - p̄) and z^δ = (-p̄, d^δ)."""

    spec: ProblemSpec
    params: StrategyParams
    stats: SolveStats = field(default_factory=SolveStats)
    _cache: dict = field(default_factory=dict, repr=False)

    def solve(self, bundle: FieldBundle) -> BatchSolution:
        sol = solve_batch(bundle, self.params.d_delta, self.params.max_iter, self.params.tol,
                          self.params.brute_force_resolution)
        self.stats.update(sol)
        return sol

    def a_delta(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            key = tuple(np.round(x / QUANTUM).astype(np.int64))
            if key not in self._cache:
                self._cache[key] = self.solve(field_bundle(self.spec, x[None])).a[0]
            return self._cache[key].copy()
        return self.solve(field_bundle(self.spec, x)).a

    def coefficients(self, bundle: FieldBundle):
        """(a, P, Q) on a batch bundle."""
        a = self.solve(bundle).a
        return a, a + bundle.p_bar, self.params.d_delta * (a - bundle.p_bar)

    def P(self, x):
        return self.a_delta(x) + field_bundle(self.spec, x).p_bar

    def Q(self, x):
        return self.params.d_delta * (self.a_delta(x) - field_bundle(self.spec, x).p_bar)

    def y(self, x):
        a = self.a_delta(x)
        return a, np.zeros(a.shape[:-1])

    def z(self, x):
        b = -field_bundle(self.spec, x).p_bar
        return b, np.full(b.shape[:-1], self.params.d_delta)


def feedback_fields(spec: ProblemSpec, params: StrategyParams) -> FeedbackFields:
    return FeedbackFields(spec, params)


def coefficient_gaps(spec: ProblemSpec, params: StrategyParams, grid) -> dict:
    """Uniform-on-grid distances of the feedback coefficients from their limits."""
    b = field_bundle(spec, np.asarray(grid, dtype=float))
    sol = solve_batch(b, params.d_delta, params.max_iter, params.tol, params.brute_force_resolution)
    d = params.d_delta
    return {
        "delta": params.delta,
        "d_delta": d,
        "sup_a_minus_pbar": float(np.max(np.linalg.norm(sol.a - b.p_bar, axis=-1))),
        "sup_Q_minus_2q": float(np.max(np.linalg.norm(d * (sol.a - b.p_bar) - 2.0 * b.q, axis=-1))),
        "sup_tangential_drift": float(np.max(d * (1.0 - np.sum(sol.a * b.p_bar, axis=-1)) * b.p_norm)),
        "max_gamma": float(sol.gamma.max()),
        "min_gamma": float(sol.gamma.min()),
        "max_residual": float(sol.residual.max()),
        "brute_forced": int(sol.brute_forced.sum()),
    }


def verify_near_saddle(spec: ProblemSpec, params: StrategyParams, grid) -> dict:
    """psi(x, y^δ(x), z^δ(x)) on the grid must lie in [-δ, δ]."""
    b = field_bundle(spec, np.asarray(grid, dtype=float))
    sol = solve_batch(b, params.d_delta, params.max_iter, params.tol, params.brute_force_resolution)
    vals = sol.gamma
    lo, hi = float(vals.min()), float(vals.max())
    return {
        "delta": params.delta,
        "d_delta": params.d_delta,
        "points": int(len(vals)),
        "psi_min": lo,
        "psi_max": hi,
        "passed": bool(lo >= -params.delta and hi <= params.delta),
    }


def lipschitz_audit(fields: FeedbackFields, points) -> float:
    """Largest difference quotient of a^δ between consecutive points of a path."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    a = fields.solve(field_bundle(fields.spec, pts)).a
    dx = np.linalg.norm(np.diff(pts, axis=0), axis=-1)
    da = np.linalg.norm(np.diff(a, axis=0), axis=-1)
    ok = dx > 0
    return float(np.max(da[ok] / dx[ok])) if ok.any() else 0.0


def with_d(params: StrategyParams, d: float) -> StrategyParams:
    return replace(params, d_delta=d, grid_min_gamma=None, doublings=None)
