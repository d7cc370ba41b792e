"""Compiled path loop for specs that provide a numba ``jet``.

Each path is advanced in a scalar loop with the same step rule, noise counters,
boundary-crossing formula and cost quadrature as the vectorized integrator in
``simulate``. The two routes agree to rounding and are tested against each
other.

Coefficient functions share the signature

    coef(x, prm, dirs, p, S, pbar, q, a, w, v, sig, mu, aux, st)

They fill ``sig`` and ``mu``, write (h, psi, c, d) into ``aux`` and record
solver statistics in ``st``: [solves, brute_forced, max_residual, max_gamma,
failure code, failure residual].
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .rng import normal_at

GRADIENT_FLOOR = 1e-10
ACCEPT_RESIDUAL = 1e-8

FAIL_NONE = 0
FAIL_GRADIENT = 1
FAIL_SOLVER = 2
FAIL_CONTROL = 3

LIMIT = "limit"
NEAR_DIRECT = "near_direct"
NEAR_GAME = "near_game"
ALIGNED_GAME = "aligned_game"
KINDS = (LIMIT, NEAR_DIRECT, NEAR_GAME, ALIGNED_GAME)


@numba.njit(cache=True, nogil=True, inline="always")
def _derive(p, S, pbar, q):
    """Fill p̄ and q; return (|p|, Δ∞u). |p| below the floor is returned as is."""
    m = p.size
    pn = 0.0
    for i in range(m):
        pn += p[i] * p[i]
    pn = math.sqrt(pn)
    if pn < GRADIENT_FLOOR:
        return pn, 0.0
    for i in range(m):
        pbar[i] = p[i] / pn
    lap = 0.0
    for i in range(m):
        for j in range(m):
            lap += pbar[i] * S[i, j] * pbar[j]
    for i in range(m):
        sp = 0.0
        for j in range(m):
            sp += S[i, j] * p[j]
        q[i] = (sp - lap * p[i]) / (pn * pn)
    return pn, lap


@numba.njit(cache=True, nogil=True, inline="always")
def _gamma(a, pbar, p, S, h, d):
    m = a.size
    quad = 0.0
    lin = 0.0
    for i in range(m):
        for j in range(m):
            quad += (a[i] + pbar[i]) * S[i, j] * (a[j] + pbar[j])
        lin += (a[i] - pbar[i]) * p[i]
    return -h - 0.5 * quad - d * lin


@numba.njit(cache=True, nogil=True, inline="always")
def _stationarity(a, pbar, p, S, d, v):
    m = a.size
    lam = 0.0
    for i in range(m):
        t = 0.0
        for j in range(m):
            t += S[i, j] * (a[j] + pbar[j])
        v[i] = t + d * p[i]
        lam += a[i] * v[i]
    res = 0.0
    for i in range(m):
        res += (lam * a[i] - v[i]) ** 2
    return lam, math.sqrt(res)


@numba.njit(cache=True, nogil=True)
def _fixed_point(a, pbar, p, S, d, shift, max_iter, tol, w, v):
    """a <- normalize((S + shift) a + S p̄ + d p), starting from the current a."""
    m = a.size
    for i in range(m):
        t = 0.0
        for j in range(m):
            t += S[i, j] * pbar[j]
        w[i] = t + d * p[i]
    res = np.inf
    it = 0
    while it < max_iter:
        it += 1
        nrm = 0.0
        for i in range(m):
            t = 0.0
            for j in range(m):
                t += S[i, j] * a[j]
            v[i] = t + shift * a[i] + w[i]
            nrm += v[i] * v[i]
        nrm = math.sqrt(nrm)
        for i in range(m):
            a[i] = v[i] / nrm
        _, res = _stationarity(a, pbar, p, S, d, v)
        if res <= tol:
            break
    return res


@numba.njit(cache=True, nogil=True, inline="always")
def _gershgorin(S):
    m = S.shape[0]
    lo = np.inf
    for i in range(m):
        off = 0.0
        for j in range(m):
            if j != i:
                off += abs(S[i, j])
        lo = min(lo, S[i, i] - off)
    return max(0.0, -lo)


@numba.njit(cache=True, nogil=True)
def _brute_force(a, pbar, p, S, h, d, dirs, tol, w, v):
    n = dirs.shape[0]
    m = a.size
    best = np.inf
    for k in range(n):
        g = _gamma(dirs[k], pbar, p, S, h, d)
        if g < best:
            best = g
    cut = best + 1e-12 * max(1.0, abs(best))
    align = -np.inf
    pick = 0
    for k in range(n):
        if _gamma(dirs[k], pbar, p, S, h, d) <= cut:
            al = 0.0
            for i in range(m):
                al += dirs[k, i] * pbar[i]
            if al > align:
                align = al
                pick = k
    for i in range(m):
        a[i] = dirs[pick, i]
    fro = 0.0
    for i in range(m):
        for j in range(m):
            fro += S[i, j] * S[i, j]
    _fixed_point(a, pbar, p, S, d, math.sqrt(fro) + 1.0, 200_000, tol, w, v)


@numba.njit(cache=True, nogil=True)
def solve_point(pbar, p, pn, S, h, d, max_iter, tol, dirs, a, w, v, st):
    """Minimizer a^δ at one point; same acceptance logic as the batch solver."""
    m = a.size
    for i in range(m):
        a[i] = pbar[i]
    res = _fixed_point(a, pbar, p, S, d, _gershgorin(S), max_iter, tol, w, v)
    gam = _gamma(a, pbar, p, S, h, d)
    fro = 0.0
    for i in range(m):
        for j in range(m):
            fro += S[i, j] * S[i, j]
    suspect = res > tol or gam > 1e-10 or d * pn <= 4.0 * math.sqrt(fro)
    if suspect and dirs.shape[0] > 0:
        cand = np.empty(m)
        _brute_force(cand, pbar, p, S, h, d, dirs, tol, w, v)
        g_cand = _gamma(cand, pbar, p, S, h, d)
        if res > tol or g_cand < gam - 1e-12:
            for i in range(m):
                a[i] = cand[i]
            st[1] += 1.0
            _, res = _stationarity(a, pbar, p, S, d, v)
            gam = _gamma(a, pbar, p, S, h, d)
    st[0] += 1.0
    if res > st[2]:
        st[2] = res
    if gam > st[3]:
        st[3] = gam
    if res > ACCEPT_RESIDUAL:
        st[4] = FAIL_SOLVER
        st[5] = res
    return gam


def make_coef(jet, kind: str):
    if kind == LIMIT:
        # prm = [sigma_scale, drift_scale, extra drift along p̄]
        @numba.njit(nogil=True)
        def coef(x, prm, dirs, p, S, pbar, q, a, w, v, sig, mu, aux, st):
            jet(x, p, S)
            pn, lap = _derive(p, S, pbar, q)
            if pn < GRADIENT_FLOOR:
                st[4] = FAIL_GRADIENT
                return
            for i in range(x.size):
                sig[i] = prm[0] * (2.0 * pbar[i])
                mu[i] = prm[1] * (2.0 * q[i]) + prm[2] * pbar[i]
            aux[0] = -2.0 * lap
            aux[1] = 0.0
            aux[2] = 0.0
            aux[3] = 0.0

        return coef

    if kind in (NEAR_DIRECT, NEAR_GAME):
        direct = kind == NEAR_DIRECT

        # prm = [d, max_iter, tol]
        @numba.njit(nogil=True)
        def coef(x, prm, dirs, p, S, pbar, q, a, w, v, sig, mu, aux, st):
            jet(x, p, S)
            pn, lap = _derive(p, S, pbar, q)
            if pn < GRADIENT_FLOOR:
                st[4] = FAIL_GRADIENT
                return
            m = x.size
            h = -2.0 * lap
            d = prm[0]
            solve_point(pbar, p, pn, S, h, d, int(prm[1]), prm[2], dirs, a, w, v, st)
            aux[0] = h
            aux[2] = 0.0
            aux[3] = d
            if direct:
                for i in range(m):
                    sig[i] = a[i] + pbar[i]
                    mu[i] = d * (a[i] - pbar[i])
                aux[1] = 0.0
                return
            # Game form with A = a, C = 0, B = -p̄, D = d.
            quad = 0.0
            lin = 0.0
            for i in range(m):
                sig[i] = a[i] - (-pbar[i])
                mu[i] = (0.0 + d) * (a[i] + (-pbar[i]))
            for i in range(m):
                for j in range(m):
                    quad += sig[i] * S[i, j] * sig[j]
                lin += (a[i] + (-pbar[i])) * p[i]
            aux[1] = -h + (-0.5 * quad - (0.0 + d) * lin)

        return coef

    if kind == ALIGNED_GAME:
        # prm = [C, D, s_A, s_B, t_A (m), t_B (m)];  A = normalize(s_A p̄ + t_A), same for B.
        @numba.njit(nogil=True)
        def coef(x, prm, dirs, p, S, pbar, q, a, w, v, sig, mu, aux, st):
            jet(x, p, S)
            pn, lap = _derive(p, S, pbar, q)
            if pn < GRADIENT_FLOOR:
                st[4] = FAIL_GRADIENT
                return
            m = x.size
            h = -2.0 * lap
            C = prm[0]
            D = prm[1]
            na = 0.0
            nb = 0.0
            for i in range(m):
                a[i] = prm[2] * pbar[i] + prm[4 + i]
                w[i] = prm[3] * pbar[i] + prm[4 + m + i]
                na += a[i] * a[i]
                nb += w[i] * w[i]
            na = math.sqrt(na)
            nb = math.sqrt(nb)
            if na < 1e-12 or nb < 1e-12:
                st[4] = FAIL_CONTROL
                return
            for i in range(m):
                a[i] = a[i] / na
                w[i] = w[i] / nb
            quad = 0.0
            lin = 0.0
            for i in range(m):
                sig[i] = a[i] - w[i]
                mu[i] = (C + D) * (a[i] + w[i])
            for i in range(m):
                for j in range(m):
                    quad += sig[i] * S[i, j] * sig[j]
                lin += (a[i] + w[i]) * p[i]
            aux[0] = h
            aux[1] = -h + (-0.5 * quad - (C + D) * lin)
            aux[2] = C
            aux[3] = D

        return coef

    raise ValueError(f"unknown coefficient kind {kind!r}")


@numba.njit(cache=True, nogil=True, inline="always")
def _crossing(x, xn, center, radii, is_ball):
    """Fraction of the step x -> xn at the first boundary crossing; -1 if xn is inside."""
    m = x.size
    inside = False
    if is_ball:
        r2 = 0.0
        for i in range(m):
            r2 += (xn[i] - center[i]) ** 2
        inside = math.sqrt(r2) < radii[0]
    else:
        lv = 0.0
        for i in range(m):
            lv += ((xn[i] - center[i]) / radii[i]) ** 2
        inside = lv < 1.0
    if inside:
        return -1.0
    qa = 0.0
    qb = 0.0
    qc = 0.0
    for i in range(m):
        ya = (x[i] - center[i]) / radii[i]
        vi = (xn[i] - x[i]) / radii[i]
        qa += vi * vi
        qb += ya * vi
        qc += ya * ya
    qc = min(qc - 1.0, 0.0)
    disc = math.sqrt(max(qb * qb - qa * qc, 0.0))
    if qb > 0:
        theta = -qc / (qb + disc)
    elif qa > 0:
        theta = (disc - qb) / qa
    else:
        theta = 0.0
    if not theta == theta:
        theta = 0.0
    return min(max(theta, 0.0), 1.0)


@numba.njit(cache=True, nogil=True, inline="always")
def _gap(x, center, radii, is_ball):
    m = x.size
    if is_ball:
        r2 = 0.0
        for i in range(m):
            r2 += (x[i] - center[i]) ** 2
        return radii[0] - math.sqrt(r2)
    lv = 0.0
    rmin = np.inf
    for i in range(m):
        lv += ((x[i] - center[i]) / radii[i]) ** 2
        rmin = min(rmin, radii[i])
    return rmin * (1.0 - math.sqrt(lv))


def make_kernel(coef):
    @numba.njit(nogil=True)
    def run(x0, path_ids, k0, k1, dt, n_steps, nsub, zone, center, radii, is_ball, prm, dirs,
            exited, tau, xf, cost, psi_int, cmax, dmax, st):
        m = x0.size
        sq = math.sqrt(dt)
        hsub = dt / nsub
        p = np.empty(m)
        S = np.empty((m, m))
        pbar = np.empty(m)
        q = np.empty(m)
        a = np.empty(m)
        w = np.empty(m)
        v = np.empty(m)
        sig = np.empty(m)
        mu = np.empty(m)
        aux = np.empty(4)
        x = np.empty(m)
        xn = np.empty(m)
        for n in range(path_ids.shape[0]):
            pid = path_ids[n]
            for i in range(m):
                x[i] = x0[i]
            done = False
            for k in range(n_steps):
                t = k * dt
                coef(x, prm, dirs, p, S, pbar, q, a, w, v, sig, mu, aux, st)
                if st[4] != FAIL_NONE:
                    return
                dW = sq * normal_at(pid, k, 0, k0, k1)
                snorm = 0.0
                for i in range(m):
                    snorm += sig[i] * sig[i]
                snorm = math.sqrt(snorm)
                sub = nsub > 1 and _gap(x, center, radii, is_ball) < zone * snorm * sq
                reps = nsub if sub else 1
                step = hsub if sub else dt
                w_rem = dW
                for j in range(reps):
                    if j > 0:
                        coef(x, prm, dirs, p, S, pbar, q, a, w, v, sig, mu, aux, st)
                        if st[4] != FAIL_NONE:
                            return
                    if not sub:
                        dw = dW
                    elif j < nsub - 1:
                        r = (nsub - j) * hsub
                        z = normal_at(pid, k, j + 1, k0, k1)
                        dw = w_rem * (hsub / r) + math.sqrt(hsub * (r - hsub) / r) * z
                    else:
                        dw = w_rem
                    w_rem = w_rem - dw
                    for i in range(m):
                        xn[i] = x[i] + sig[i] * dw + mu[i] * step
                    theta = _crossing(x, xn, center, radii, is_ball)
                    eff = (theta if theta >= 0.0 else 1.0) * step
                    cost[n] += aux[0] * eff
                    psi_int[n] += aux[1] * eff
                    if aux[2] > cmax[n]:
                        cmax[n] = aux[2]
                    if aux[3] > dmax[n]:
                        dmax[n] = aux[3]
                    if theta >= 0.0:
                        exited[n] = True
                        tau[n] = (t + j * hsub) + theta * step if sub else t + theta * step
                        for i in range(m):
                            xf[n, i] = x[i] + theta * (xn[i] - x[i])
                        done = True
                        break
                    for i in range(m):
                        x[i] = xn[i]
                if done:
                    break
            if not done:
                for i in range(m):
                    xf[n, i] = x[i]

    return run


_KERNELS: dict = {}


def kernel_for(jet, kind: str):
    """Compiled (jet, kind) kernel; built once per process."""
    key = (jet, kind)
    if key not in _KERNELS:
        _KERNELS[key] = make_kernel(make_coef(jet, kind))
    return _KERNELS[key]
