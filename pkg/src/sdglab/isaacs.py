"""Bellman-Isaacs Hamiltonian of the game and its sup-inf value.

Control actions live in the cylinder ``S^{m-1} x [0, inf)``. The
Hamiltonian is

    phi(a, b, c, d; p, S) = -1/2 (a - b)' S (a - b) - (c + d) (a + b) . p

and ``psi(x, y, z) = -h(x) + phi(y, z; Du(x), D²u(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import fibonacci_sphere
from .problem import FieldBundle

DEFAULT_D_GRID = (0.0, 1.0, 10.0, 100.0, 1000.0)
DEFAULT_D_MAX = 1000.0


@dataclass(frozen=True)
class ControlAction:
    direction: np.ndarray
    magnitude: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(a) - 1.0) > 1e-12:
            raise ValueError("control direction must be a unit vector")
        if self.magnitude < 0:
            raise ValueError("control magnitude must be nonnegative")
        object.__setattr__(self, "direction", a)


def phi(y: ControlAction, z: ControlAction, p, S) -> float:
    return float(phi_values(y.direction, z.direction, y.magnitude, z.magnitude, p, S))


def phi_values(a, b, c, d, p, S):
    """Broadcasting form of phi over leading axes of a, b, c, d, p, S."""
    a, b, p, S = (np.asarray(v, dtype=float) for v in (a, b, p, S))
    if not (a.shape[-1] == b.shape[-1] == p.shape[-1] == S.shape[-1]):
        raise ValueError("dimension mismatch")
    diff = a - b
    quad = np.einsum("...i,...ij,...j->...", diff, S, diff)
    return -0.5 * quad - (np.asarray(c) + np.asarray(d)) * np.sum((a + b) * p, axis=-1)


def psi(bundle: FieldBundle, y: ControlAction, z: ControlAction) -> float:
    return float(-bundle.h + phi_values(y.direction, z.direction, y.magnitude, z.magnitude, bundle.p, bundle.S))


def psi_values(bundle: FieldBundle, a, c, b, d):
    return -bundle.h + phi_values(a, b, c, d, bundle.p, bundle.S)


def lambda_analytic(p, S) -> float:
    p = np.asarray(p, dtype=float)
    nrm2 = float(p @ p)
    if nrm2 == 0.0:
        raise ValueError("lambda_analytic needs p != 0")
    return float(p @ np.asarray(S, dtype=float) @ p) / nrm2


def sphere_directions(m: int, n: int) -> np.ndarray:
    """Uniform angles for m=2, Fibonacci points for m=3."""
    if m == 2:
        theta = 2.0 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if m == 3:
        return fibonacci_sphere(n)
    raise ValueError(f"sphere discretization supports m in {{2, 3}}, got {m}")


@numba.njit(cache=True)
def _supinf_kernel(A, B, S, p, d_grid, d_max):
    # sup over (b, d) of min over (a, c in {0, d_max}) of phi. A (b, d) pair is
    # abandoned once its running minimum is already below the best value found,
    # which never changes the result.
    n_a, m = A.shape
    n_d = d_grid.shape[0]
    qa = np.empty(n_a)
    pa = np.empty(n_a)
    for i in range(n_a):
        s = 0.0
        for r in range(m):
            for k in range(m):
                s += A[i, r] * S[r, k] * A[i, k]
        qa[i] = -0.5 * s
        t = 0.0
        for r in range(m):
            t += A[i, r] * p[r]
        pa[i] = t
    best = -np.inf
    Sb = np.empty(m)
    mins = np.empty(n_d)
    for j in range(B.shape[0]):
        for r in range(m):
            t = 0.0
            for k in range(m):
                t += S[r, k] * B[j, k]
            Sb[r] = t
        qb = 0.0
        pb = 0.0
        for r in range(m):
            qb += B[j, r] * Sb[r]
            pb += B[j, r] * p[r]
        qb *= -0.5
        for k in range(n_d):
            mins[k] = np.inf
        live = n_d
        for i in range(n_a):
            cross = 0.0
            for r in range(m):
                cross += A[i, r] * Sb[r]
            base = qa[i] + cross + qb
            s = pa[i] + pb
            pen = d_max * s if s > 0.0 else 0.0
            live = 0
            for k in range(n_d):
                v = base - d_grid[k] * s - pen
                if v < mins[k]:
                    mins[k] = v
                if mins[k] > best:
                    live += 1
            if live == 0:
                break
        if live > 0:
            for k in range(n_d):
                if mins[k] > best:
                    best = mins[k]
    return best


def supinf_phi_bruteforce(p, S, n_dir: int = 720, d_grid=DEFAULT_D_GRID, d_max: float = DEFAULT_D_MAX) -> float:
    """Grid value of sup_{(b,d)} inf_{(a,c)} phi.

    The minimizer's directions form a sphere grid and the maximizer's are their
    antipodes, so ``b = -a`` is always representable. The inner infimum over c
    is taken at the endpoints {0, d_max} since phi is affine in c.
    """
    p = np.asarray(p, dtype=float)
    S = np.asarray(S, dtype=float)
    if not np.any(p):
        raise ValueError("p must be nonzero")
    A = sphere_directions(p.size, n_dir)
    return float(_supinf_kernel(A, -A, S, p, np.asarray(d_grid, dtype=float), float(d_max)))


def lambda_supinf_bruteforce(p, S, n_dir: int = 720, d_grid=DEFAULT_D_GRID, d_max: float = DEFAULT_D_MAX) -> float:
    """Brute-force counterpart of ``lambda_analytic``.

    With phi normalized as above the sup-inf equals ``-2 p'Sp / |p|^2``, so
    the raw grid value is rescaled by ``-1/2``.
    """
    return -0.5 * supinf_phi_bruteforce(p, S, n_dir, d_grid, d_max)


def supinf_phi_dense(p, S, n_dir: int, d_grid=DEFAULT_D_GRID, d_max: float = DEFAULT_D_MAX) -> float:
    """Same grid value by full enumeration in numpy (no pruning); small n_dir only."""
    p = np.asarray(p, dtype=float)
    S = np.asarray(S, dtype=float)
    A = sphere_directions(p.size, n_dir)
    B = -A
    diff = A[:, None, :] - B[None, :, :]
    base = -0.5 * np.einsum("abi,ij,abj->ab", diff, S, diff)
    s = (A @ p)[:, None] + (B @ p)[None, :]
    best = -np.inf
    for d in d_grid:
        vals = np.minimum(base - d * s, base - (d + d_max) * s)
        best = max(best, float(vals.min(axis=0).max()))
    return best
