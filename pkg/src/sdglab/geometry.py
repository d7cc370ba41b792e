"""Bounded smooth domains: balls and axis-aligned ellipsoids.

Every query accepts a single point of shape ``(m,)`` or a batch of shape
``(n, m)``. The boundary is *not* part of the domain: ``contains`` is a test
for the open set, so a path that touches the boundary has exited.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOUNDARY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Domain:
    kind: str
    center: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if self.kind not in ("ball", "ellipsoid"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if center.size < 2:
            raise ValueError("domain dimension must be at least 2")
        if radii.shape != center.shape:
            raise ValueError("radii and center must have the same length")
        if np.any(radii <= 0) or not np.all(np.isfinite(radii)):
            raise ValueError("radii must be positive and finite")
        if self.kind == "ball" and not np.all(radii == radii[0]):
            raise ValueError("a ball has a single radius")
        center.setflags(write=False)
        radii.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)

    @classmethod
    def ball(cls, center, radius: float) -> "Domain":
        center = np.asarray(center, dtype=float)
        return cls("ball", center, np.full(center.shape, float(radius)))

    @classmethod
    def ellipsoid(cls, center, radii) -> "Domain":
        return cls("ellipsoid", center, radii)

    @property
    def dim(self) -> int:
        return self.center.size

    def describe(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "radii": self.radii.tolist()}

    # -- membership and distance ------------------------------------------------

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x.shape[-1]} does not match domain dimension {self.dim}")
        return x

    def level(self, x) -> np.ndarray:
        """Squared normalized radius: < 1 inside, 1 on the boundary."""
        x = self._check(x)
        y = (x - self.center) / self.radii
        return np.sum(y * y, axis=-1)

    def contains(self, x):
        x = self._check(x)
        if self.kind == "ball":
            return np.linalg.norm(x - self.center, axis=-1) < self.radii[0]
        return self.level(x) < 1.0

    def in_closure(self, x, tol: float = BOUNDARY_TOL):
        return self.signed_distance(x) <= tol

    def signed_distance(self, x):
        x = self._check(x)
        if self.kind == "ball":
            return np.linalg.norm(x - self.center, axis=-1) - self.radii[0]
        if x.ndim == 1:
            return self._ellipsoid_sd(x)
        return np.array([self._ellipsoid_sd(row) for row in x.reshape(-1, self.dim)]).reshape(x.shape[:-1])

    def interior_gap(self, x) -> np.ndarray:
        """Cheap lower bound on the distance from an interior point to the boundary.

        Exact for balls. For ellipsoids the normalizing map contracts lengths by
        at most ``1/min(radii)``, which gives ``min(radii) * (1 - rho)``.
        """
        x = self._check(x)
        if self.kind == "ball":
            return self.radii[0] - np.linalg.norm(x - self.center, axis=-1)
        return self.radii.min() * (1.0 - np.sqrt(self.level(x)))

    def _ellipsoid_sd(self, x) -> float:
        closest = self._ellipsoid_closest(x - self.center)
        dist = float(np.linalg.norm(x - self.center - closest))
        return -dist if self.level(x) < 1.0 else dist

    def _ellipsoid_closest(self, y) -> np.ndarray:
        # Closest boundary point of a centered ellipsoid, by the
        # Lagrange-parameter root t of sum((r_i z_i / (t + r_i^2))^2) = 1.
        r = self.radii
        r2 = r * r
        sign = np.where(y < 0, -1.0, 1.0)
        z = np.abs(y)
        rmin2 = r2.min()
        on_min_axis = r2 == rmin2
        candidates = []
        other = ~on_min_axis
        if np.any(other) or np.all(z == 0.0):
            # Foot points off the minor-axis plane exist only when the minor-axis
            # coordinates vanish; keep this candidate whenever it is admissible, since
            # the root below loses precision as those coordinates underflow.
            xbar = r2[other] * z[other] / (r2[other] - rmin2)
            s = float(np.sum((xbar / r[other]) ** 2))
            if s < 1.0:
                x = np.zeros_like(z)
                x[other] = xbar
                k = int(np.flatnonzero(on_min_axis)[0])
                x[k] = r[k] * np.sqrt(1.0 - s)
                candidates.append(x)

        def excess(t):
            with np.errstate(divide="ignore", invalid="ignore"):
                return float(np.sum((r * z / (t + r2)) ** 2)) - 1.0

        lo, hi = -rmin2, float(np.linalg.norm(r * z))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if excess(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        t = 0.5 * (lo + hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = r2 * z / (t + r2)
        if np.all(np.isfinite(x)) and np.any(x):
            # Radially rescale onto the boundary so candidates compare fairly.
            candidates.append(x / np.sqrt(np.sum((x / r) ** 2)))
        if not candidates:
            raise FloatingPointError("closest-point computation failed")
        best = min(candidates, key=lambda c: float(np.linalg.norm(c - z)))
        return sign * best

    def project(self, x) -> np.ndarray:
        """Closest point of the closed domain (identity on the closure)."""
        x = self._check(x)
        single = x.ndim == 1
        pts = np.array(x.reshape(-1, self.dim), dtype=float, copy=True)
        outside = self.level(pts) > 1.0
        if np.any(outside):
            if self.kind == "ball":
                rel = pts[outside] - self.center
                pts[outside] = self.center + self.radii[0] * rel / np.linalg.norm(rel, axis=-1, keepdims=True)
            else:
                for i in np.flatnonzero(outside):
                    pts[i] = self.center + self._ellipsoid_closest(pts[i] - self.center)
        return pts[0] if single else pts.reshape(x.shape)

    # -- exit detection -----------------------------------------------------------

    def crossing_fraction(self, a, b) -> np.ndarray:
        """Fraction theta in [0, 1] at which segments a -> b first meet the boundary.

        Batched; returns NaN where b is still inside. Both shapes are quadrics,
        so the crossing is the larger root of a quadratic in theta.
        """
        a = self._check(a)
        b = self._check(b)
        ya = (a - self.center) / self.radii
        v = (b - a) / self.radii
        qa = np.sum(v * v, axis=-1)
        qb = np.sum(ya * v, axis=-1)
        qc = np.sum(ya * ya, axis=-1) - 1.0
        if np.any(qc > 1e-9):
            raise ValueError("segment start lies outside the closed domain")
        qc = np.minimum(qc, 0.0)
        disc = np.sqrt(np.maximum(qb * qb - qa * qc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(qb > 0, -qc / (qb + disc), (disc - qb) / qa)
        theta = np.clip(np.nan_to_num(theta, nan=0.0), 0.0, 1.0)
        return np.where(self.contains(b), np.nan, theta)

    def boundary_crossing(self, a, b):
        """First boundary point on the segment a -> b, or None if b is inside."""
        a = self._check(a)
        b = self._check(b)
        if self.signed_distance(a) > 1e-9:
            raise ValueError("segment start lies outside the closed domain")
        theta = float(self.crossing_fraction(a[None], b[None])[0])
        if np.isnan(theta):
            return None
        return a + theta * (b - a), theta


def quasi_random_interior(domain: Domain, n: int) -> np.ndarray:
    """Deterministic Halton points filling the domain (rejection from the bounding box)."""
    from scipy.stats import qmc

    m = domain.dim
    sampler = qmc.Halton(d=m, scramble=False)
    sampler.fast_forward(1)  # skip the corner point
    out = []
    count = 0
    while count < n:
        cube = 2.0 * sampler.random(max(2 * n, 64)) - 1.0
        keep = cube[np.sum(cube * cube, axis=1) < 1.0]
        out.append(keep)
        count += len(keep)
    unit = np.concatenate(out)[:n]
    return domain.center + unit * domain.radii


def boundary_points(domain: Domain, n: int) -> np.ndarray:
    m = domain.dim
    if m == 2:
        theta = 2.0 * np.pi * np.arange(n) / n
        unit = np.column_stack([np.cos(theta), np.sin(theta)])
    else:
        unit = fibonacci_sphere(n) if m == 3 else _gaussian_directions(m, n)
    return domain.center + unit * domain.radii


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def _gaussian_directions(m: int, n: int) -> np.ndarray:
    from scipy.special import ndtri
    from scipy.stats import qmc

    g = ndtri(qmc.Halton(d=m, scramble=False).random(n + 1)[1:])
    return g / np.linalg.norm(g, axis=1, keepdims=True)
