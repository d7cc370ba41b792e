"""PDE instances for -2 * (infinity-Laplacian of u) = h with exact derivatives.

Instances are manufactured: pick a smooth ``u`` with non-vanishing gradient,
then define ``h := -2 Δ∞u`` and ``g := u`` on the boundary, so ``u`` is an
exact classical solution and every quantity entering the game is known in
closed form.

Evaluators are vectorized: ``u(x)`` maps ``(..., m) -> (...)``, ``grad``
maps to ``(..., m)`` and ``hess`` to ``(..., m, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .geometry import Domain, boundary_points, quasi_random_interior

GRADIENT_FLOOR = 1e-10
FD_STEP = 1e-5
FD_HESS_STEP = 1e-4  # second differences: roundoff grows like eps/step^2
GRID_SIZE = 10_000
BOUNDARY_GRID_SIZE = 1024

Field = Callable[[np.ndarray], np.ndarray]


class SpecError(ValueError):
    """A candidate u violates the non-degeneracy assumptions."""


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    name: str
    domain: Domain
    u_eval: Field
    grad_eval: Field
    hess_eval: Field
    h_eval: Field
    g_eval: Field
    h_sign: int
    h_lower: float
    c0: float
    constants: dict = field(default_factory=dict)
    # Optional numba function jet(x, p, S) writing Du(x) and D²u(x) for one point.
    # It enables the compiled simulation engine; h must equal -2 Δ∞u.
    jet: Callable | None = None

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def c1(self) -> float:
        """Bound on the mean exit time under near-optimal play: 4 c0 / h_lower."""
        return 4.0 * self.c0 / self.h_lower


@dataclass(frozen=True, eq=False)
class FieldBundle:
    x: np.ndarray
    p: np.ndarray
    p_norm: np.ndarray
    p_bar: np.ndarray
    S: np.ndarray
    inf_lap: np.ndarray
    q: np.ndarray
    h: np.ndarray

    def take(self, idx) -> "FieldBundle":
        return FieldBundle(*(getattr(self, f)[idx] for f in _BUNDLE_FIELDS))


_BUNDLE_FIELDS = ("x", "p", "p_norm", "p_bar", "S", "inf_lap", "q", "h")


def _derived(p: np.ndarray, S: np.ndarray):
    p_norm = np.linalg.norm(p, axis=-1)
    if np.any(p_norm < GRADIENT_FLOOR):
        raise SpecError("gradient vanishes (|Du| below 1e-10)")
    p_bar = p / p_norm[..., None]
    inf_lap = np.einsum("...i,...ij,...j->...", p_bar, S, p_bar)
    Sp = np.einsum("...ij,...j->...i", S, p)
    q = (Sp - inf_lap[..., None] * p) / (p_norm * p_norm)[..., None]
    return p_norm, p_bar, inf_lap, q


def field_bundle(spec: ProblemSpec, x) -> FieldBundle:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ValueError("point dimension does not match the spec")
    p = spec.grad_eval(x)
    S = spec.hess_eval(x)
    p_norm, p_bar, inf_lap, q = _derived(p, S)
    return FieldBundle(x, p, p_norm, p_bar, S, inf_lap, q, spec.h_eval(x))


def pde_residual(spec: ProblemSpec, x, finite_differences: bool = False):
    """-2 Δ∞u(x) - h(x); optionally with derivatives taken by central differences."""
    x = np.asarray(x, dtype=float)
    if finite_differences:
        p = fd_gradient(spec.u_eval, x)
        S = fd_hessian(spec.u_eval, x)
        _, _, inf_lap, _ = _derived(p, S)
    else:
        inf_lap = field_bundle(spec, x).inf_lap
    return -2.0 * inf_lap - spec.h_eval(x)


# -- manufacturing -----------------------------------------------------------------


def audit_grid(domain: Domain, n: int = GRID_SIZE) -> np.ndarray:
    """Fixed quasi-random interior grid plus boundary samples."""
    return np.concatenate([quasi_random_interior(domain, n), boundary_points(domain, BOUNDARY_GRID_SIZE)])


def pbar_jacobian_norm(p: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Spectral norm of D(p/|p|) = (I - p̄ p̄') S / |p|."""
    p_norm = np.linalg.norm(p, axis=-1)
    p_bar = p / p_norm[..., None]
    m = p.shape[-1]
    proj = np.eye(m) - p_bar[..., :, None] * p_bar[..., None, :]
    jac = proj @ S / p_norm[..., None, None]
    return np.linalg.norm(jac, ord=2, axis=(-2, -1))


def manufacture(name: str, u: Field, grad: Field, hess: Field, domain: Domain,
                grid_size: int = GRID_SIZE, jet: Callable | None = None) -> ProblemSpec:
    """Build a spec whose exact solution is ``u``, with h := -2 Δ∞u and g := u."""

    def h_eval(x):
        _, _, inf_lap, _ = _derived(grad(x), hess(x))
        return -2.0 * inf_lap

    pts = audit_grid(domain, grid_size)
    interior = pts[:grid_size]
    boundary = pts[grid_size:]
    p = grad(pts)
    if np.min(np.linalg.norm(p, axis=-1)) < GRADIENT_FLOOR:
        raise SpecError(f"{name}: gradient vanishes on the audit grid")
    S = hess(pts)
    h = h_eval(pts)
    scale = max(1.0, float(np.max(np.abs(h))))
    if np.min(np.abs(h)) <= 1e-8 * scale:
        raise SpecError(f"{name}: h approaches zero on the audit grid")
    if not (np.all(h > 0) or np.all(h < 0)):
        raise SpecError(f"{name}: h changes sign on the audit grid")

    u_vals = u(pts)
    lip_pbar = float(np.max(pbar_jacobian_norm(p, S)))
    constants = {
        "h_abs_max": float(np.max(np.abs(h))),
        "h_abs_min": float(np.min(np.abs(h))),
        "g_abs_max": float(np.max(np.abs(u(boundary)))),
        "u_abs_max": float(np.max(np.abs(u_vals))),
        "grad_max": float(np.max(np.linalg.norm(p, axis=-1))),
        "lip_pbar": lip_pbar,
        "lip_pbar_note": "grid maximum of |D p̄|; a lower bound, not a certificate",
        "grid_points": int(len(interior)),
        "boundary_points": int(len(boundary)),
    }
    c0 = (constants["h_abs_max"] + constants["g_abs_max"] + constants["u_abs_max"]
          + constants["grad_max"] + lip_pbar)
    return ProblemSpec(
        name=name,
        domain=domain,
        u_eval=u,
        grad_eval=grad,
        hess_eval=hess,
        h_eval=h_eval,
        g_eval=u,
        h_sign=int(np.sign(h[0])),
        h_lower=0.99 * constants["h_abs_min"],
        c0=c0,
        constants=constants,
        jet=jet,
    )


# -- built-in catalogue ------------------------------------------------------------


def _parabolic(sign: float, m: int):
    # u = sign * (x_1^2 / 2 + x_2 + ... + x_m)
    def u(x):
        x = np.asarray(x, dtype=float)
        return sign * (0.5 * x[..., 0] ** 2 + np.sum(x[..., 1:], axis=-1))

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.ones_like(x)
        g[..., 0] = x[..., 0]
        return sign * g

    def hess(x):
        x = np.asarray(x, dtype=float)
        H = np.zeros(x.shape + (m,))
        H[..., 0, 0] = sign
        return H

    @numba.njit(nogil=True)
    def jet(x, p, S):
        for i in range(m):
            p[i] = sign
            for j in range(m):
                S[i, j] = 0.0
        p[0] = sign * x[0]
        S[0, 0] = sign

    return u, grad, hess, jet


def _build(name, sign, m, domain):
    u, grad, hess, jet = _parabolic(sign, m)
    return manufacture(name, u, grad, hess, domain, jet=jet)


def _ms1():
    return _build("ms1", 1.0, 2, Domain.ball([2.0, 0.0], 1.0))


def _ms2():
    return _build("ms2", -1.0, 2, Domain.ball([2.0, 0.0], 1.0))


def _ms1_ellipse():
    return _build("ms1e", 1.0, 2, Domain.ellipsoid([2.0, 0.0], [1.0, 0.6]))


def _ms3():
    return _build("ms3", 1.0, 3, Domain.ball([2.0, 0.0, 0.0], 1.0))


CATALOGUE = {"ms1": _ms1, "ms2": _ms2, "ms1e": _ms1_ellipse, "ms3": _ms3}
_cache: dict[str, ProblemSpec] = {}


def builtin_spec(name: str) -> ProblemSpec:
    if name not in CATALOGUE:
        raise KeyError(f"unknown spec {name!r}; available: {', '.join(sorted(CATALOGUE))}")
    if name not in _cache:
        _cache[name] = CATALOGUE[name]()
    return _cache[name]


# -- finite-difference oracle ------------------------------------------------------


def fd_gradient(f: Field, x, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    out = np.empty(x.shape)
    for i in range(m):
        e = np.zeros(m)
        e[i] = step
        out[..., i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return out


def fd_hessian(f: Field, x, step: float = FD_HESS_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    out = np.empty(x.shape + (m,))
    f0 = f(x)
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = step
        out[..., i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / step**2
        for j in range(i + 1, m):
            ej = np.zeros(m)
            ej[j] = step
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * step**2)
            out[..., i, j] = val
            out[..., j, i] = val
    return out


@dataclass
class AuditReport:
    grad_max_error: float
    hess_max_error: float
    grad_tol: float
    hess_tol: float
    q_dot_p_max: float
    residual_max: float
    points: int
    notes: list[str]

    @property
    def grad_ok(self) -> bool:
        return self.grad_max_error <= self.grad_tol

    @property
    def hess_ok(self) -> bool:
        return self.hess_max_error <= self.hess_tol

    @property
    def passed(self) -> bool:
        return self.grad_ok and self.hess_ok

    def as_dict(self) -> dict:
        return {
            "points": self.points,
            "grad_max_error": self.grad_max_error,
            "hess_max_error": self.hess_max_error,
            "grad_tol": self.grad_tol,
            "hess_tol": self.hess_tol,
            "q_dot_p_max": self.q_dot_p_max,
            "residual_max": self.residual_max,
            "grad_ok": self.grad_ok,
            "hess_ok": self.hess_ok,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def finite_difference_audit(spec: ProblemSpec, grid_size: int = 2000,
                            grad_tol: float = 1e-6, hess_tol: float = 1e-4) -> AuditReport:
    """Compare the supplied derivative evaluators against central differences of u."""
    # Stay one step inside so the stencil never leaves the closure.
    pts = quasi_random_interior(spec.domain, grid_size)
    grad_err = np.max(np.abs(spec.grad_eval(pts) - fd_gradient(spec.u_eval, pts)))
    hess_err = np.max(np.abs(spec.hess_eval(pts) - fd_hessian(spec.u_eval, pts)))
    b = field_bundle(spec, pts)
    scale = 1.0 + np.linalg.norm(b.S, ord=2, axis=(-2, -1)) * b.p_norm
    qp = np.max(np.abs(np.sum(b.q * b.p, axis=-1)) / scale)
    res = np.max(np.abs(pde_residual(spec, pts)))
    return AuditReport(float(grad_err), float(hess_err), grad_tol, hess_tol, float(qp), float(res),
                       len(pts), [spec.constants.get("lip_pbar_note", "")])
