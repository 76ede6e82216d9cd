# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loops.

Line-for-line ports of ``_pykernels``; see that module for the contracts.
The loops run without the GIL so replications can use a thread pool.
"""
from libc.math cimport log1p, sqrt, INFINITY, NAN
from libc.stdint cimport int64_t

import numpy as np

cdef enum:
    DONE = 0
    REFILL = 1
    OVERFLOW = 2
    VIOLATION = 3
    LOG_FULL = 4
    STEP_TOO_LARGE = 5
    PAUSED = 6

cdef enum:
    SA_JSQ = 0
    JSQ = 1
    POD = 2
    JIQ = 3

cdef double TAIL_TOL = -1e-9


cdef inline int policy_draws(int policy, int d) noexcept nogil:
    if policy == SA_JSQ:
        return 0
    if policy == POD:
        return d + 1
    return 1


cdef inline double _expo(double u) noexcept nogil:
    return -log1p(-u)


cdef inline int64_t _exact(int64_t[:, ::1] c, const int64_t[::1] N, Py_ssize_t j,
                           Py_ssize_t ell, Py_ssize_t L) noexcept nogil:
    cdef int64_t nxt
    if ell == 0:
        return N[j] - c[j, 0]
    nxt = c[j, ell] if ell < L else 0
    return c[j, ell - 1] - nxt


cdef inline Py_ssize_t _level_of(int64_t[:, ::1] c, Py_ssize_t j, Py_ssize_t L,
                                 int64_t offset) noexcept nogil:
    cdef Py_ssize_t i = 0
    while i < L and c[j, i] > offset:
        i += 1
    return i


cdef inline Py_ssize_t _min_level(int64_t[:, ::1] c, const int64_t[::1] N, Py_ssize_t M,
                                  Py_ssize_t L) noexcept nogil:
    cdef Py_ssize_t ell, j
    for ell in range(L + 1):
        for j in range(M):
            if _exact(c, N, j, ell, L) > 0:
                return ell
    return L


cdef inline Py_ssize_t _locate(const int64_t[::1] N, Py_ssize_t M, int64_t k,
                               int64_t* off) noexcept nogil:
    cdef Py_ssize_t j = 0
    while j < M - 1 and k >= N[j]:
        k -= N[j]
        j += 1
    off[0] = k
    return j


cdef void _route(int64_t[:, ::1] c, const int64_t[::1] N, int64_t n, int policy, int d,
                 const double[::1] u, Py_ssize_t p, int64_t[::1] chosen,
                 Py_ssize_t* pool, Py_ssize_t* level) noexcept nogil:
    cdef Py_ssize_t M = N.shape[0]
    cdef Py_ssize_t L = c.shape[1]
    cdef Py_ssize_t ell, j, m, q, nch
    cdef int64_t tot, k, e, idle, r, off, best, ties, lvl
    if policy == SA_JSQ:
        for ell in range(L + 1):
            for j in range(M):
                if _exact(c, N, j, ell, L) > 0:
                    pool[0] = j
                    level[0] = ell
                    return
        pool[0] = M - 1
        level[0] = L
        return
    if policy == JSQ:
        ell = _min_level(c, N, M, L)
        tot = 0
        for j in range(M):
            tot += _exact(c, N, j, ell, L)
        k = <int64_t>(u[p] * tot)
        if k > tot - 1:
            k = tot - 1
        level[0] = ell
        for j in range(M):
            e = _exact(c, N, j, ell, L)
            if k < e:
                pool[0] = j
                return
            k -= e
        pool[0] = M - 1
        return
    if policy == JIQ:
        idle = 0
        for j in range(M):
            idle += N[j] - c[j, 0]
        if idle > 0:
            k = <int64_t>(u[p] * idle)
            if k > idle - 1:
                k = idle - 1
            level[0] = 0
            for j in range(M):
                e = N[j] - c[j, 0]
                if k < e:
                    pool[0] = j
                    return
                k -= e
            pool[0] = M - 1
            return
        k = <int64_t>(u[p] * n)
        if k > n - 1:
            k = n - 1
        j = _locate(N, M, k, &off)
        pool[0] = j
        level[0] = _level_of(c, j, L, off)
        return
    # power-of-d
    nch = 0
    for m in range(d):
        r = <int64_t>(u[p + m] * (n - m))
        if r > n - m - 1:
            r = n - m - 1
        for q in range(nch):
            if r >= chosen[q]:
                r += 1
            else:
                break
        q = nch
        while q > 0 and chosen[q - 1] > r:
            chosen[q] = chosen[q - 1]
            q -= 1
        chosen[q] = r
        nch += 1
    best = L + 1
    ties = 0
    for q in range(nch):
        j = _locate(N, M, chosen[q], &off)
        lvl = _level_of(c, j, L, off)
        if lvl < best:
            best = lvl
            ties = 1
        elif lvl == best:
            ties += 1
    k = <int64_t>(u[p + d] * ties)
    if k > ties - 1:
        k = ties - 1
    level[0] = best
    for q in range(nch):
        j = _locate(N, M, chosen[q], &off)
        if _level_of(c, j, L, off) == best:
            if k == 0:
                pool[0] = j
                return
            k -= 1
    pool[0] = M - 1


def route(int64_t[:, ::1] c, const int64_t[::1] N, int64_t n, int policy, int d,
          const double[::1] u, Py_ssize_t p):
    """Routing decision ``(pool, level)``; exposed for cross-checking."""
    cdef Py_ssize_t pool = 0, level = 0
    cdef int64_t[::1] chosen = np.zeros(max(d, 1), dtype=np.int64)
    _route(c, N, n, policy, d, u, p, chosen, &pool, &level)
    return pool, level


cdef int _ctmc_loop(int64_t[:, ::1] c, const int64_t[::1] N, const double[::1] mu,
                    double arr_rate, int policy, int d,
                    const double[::1] ua, const double[::1] us, const double[::1] up,
                    int64_t[::1] pos, double[::1] clk, double t_stop, int64_t max_events,
                    const double[::1] grid, int64_t[::1] gpos, int64_t[:, :, ::1] samples,
                    double[:, ::1] area, double[::1] ind, int64_t[::1] stats,
                    int64_t[::1] scratch) noexcept nogil:
    cdef Py_ssize_t M = c.shape[0]
    cdef Py_ssize_t L = c.shape[1]
    cdef Py_ssize_t j, i, jsel, pool, ell, lvl
    cdef int64_t n = 0, busy, idle, o
    cdef int kpol = policy_draws(policy, d)
    cdef Py_ssize_t pa = pos[0], ps = pos[1], pp = pos[2]
    cdef Py_ssize_t na = ua.shape[0], ns = us.shape[0], npl = up.shape[0]
    cdef double t = clk[0], ta = clk[1], td = clk[2], tsup = clk[3], maxidle = clk[4]
    cdef Py_ssize_t gp = gpos[0], ng = grid.shape[0]
    cdef double D, tn, te, dt, x, w
    cdef int status = DONE
    cdef bint over
    for j in range(M):
        n += N[j]
    while True:
        if stats[2] >= max_events:
            status = PAUSED
            break
        if na - pa < 2 or ns - ps < 2 or npl - pp < kpol:
            status = REFILL
            break
        if ta < 0:
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        if td < 0:
            D = 0.0
            for j in range(M):
                D += mu[j] * c[j, 0]
            if D > 0:
                td = t + _expo(us[ps]) / D
                ps += 1
            else:
                td = INFINITY
        tn = ta if ta <= td else td
        while gp < ng and grid[gp] < tn and grid[gp] <= t_stop:
            for j in range(M):
                for i in range(L):
                    samples[gp, j, i] = c[j, i]
            gp += 1
        te = tn if tn < t_stop else t_stop
        if te > t:
            dt = te - t
            busy = 0
            for j in range(M):
                for i in range(L):
                    area[j, i] += c[j, i] * dt
                busy += c[j, 0]
            if busy == n:
                ind[0] += dt
                if c[0, 1] == N[0]:
                    ind[1] += dt
        if te >= tsup:
            idle = 0
            for j in range(M - 1):
                idle += N[j] - c[j, 0]
            if idle > maxidle:
                maxidle = <double>idle
        if tn > t_stop:
            t = t_stop
            break
        t = tn
        if ta <= td:
            _route(c, N, n, policy, d, up, pp, scratch, &pool, &ell)
            pp += kpol
            c[pool, ell] += 1
            stats[0] += 1
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        else:
            D = 0.0
            for j in range(M):
                D += mu[j] * c[j, 0]
            x = us[ps] * D
            ps += 1
            jsel = -1
            for j in range(M):
                w = mu[j] * c[j, 0]
                if x < w:
                    jsel = j
                    break
                x -= w
            if jsel < 0:
                for j in range(M):
                    if c[j, 0] > 0:
                        jsel = j
                o = c[jsel, 0] - 1
            else:
                o = <int64_t>(x / mu[jsel])
                if o > c[jsel, 0] - 1:
                    o = c[jsel, 0] - 1
            lvl = _level_of(c, jsel, L, o)
            c[jsel, lvl - 1] -= 1
            stats[1] += 1
        td = -1.0
        stats[2] += 1
        over = False
        for j in range(M):
            if c[j, L - 1] > 0:
                over = True
        if over:
            status = OVERFLOW
            break
    pos[0] = pa
    pos[1] = ps
    pos[2] = pp
    clk[0] = t
    clk[1] = ta
    clk[2] = td
    clk[3] = tsup
    clk[4] = maxidle
    gpos[0] = gp
    return status


def ctmc_advance(int64_t[:, ::1] c, const int64_t[::1] N, const double[::1] mu,
                 double arr_rate, int policy, int d,
                 const double[::1] ua, const double[::1] us, const double[::1] up,
                 int64_t[::1] pos, double[::1] clk, double t_stop, int64_t max_events,
                 const double[::1] grid, int64_t[::1] gpos, int64_t[:, :, ::1] samples,
                 double[:, ::1] area, double[::1] ind, int64_t[::1] stats,
                 int64_t[::1] scratch):
    cdef int status
    with nogil:
        status = _ctmc_loop(c, N, mu, arr_rate, policy, d, ua, us, up, pos, clk, t_stop,
                            max_events, grid, gpos, samples, area, ind, stats, scratch)
    return status


cdef inline double _tilde_mu(int64_t count, const int64_t[::1] N,
                             const double[::1] mu) noexcept nogil:
    cdef double r = 0.0
    cdef int64_t start = 0, k
    cdef Py_ssize_t j
    for j in range(N.shape[0]):
        k = count - start
        if k <= 0:
            break
        if k > N[j]:
            k = N[j]
        r += mu[j] * k
        start += N[j]
    return r


def tilde_mu(int64_t count, const int64_t[::1] N, const double[::1] mu):
    return _tilde_mu(count, N, mu)


cdef int _coupled_loop(int64_t[:, ::1] c, const int64_t[::1] N, const double[::1] mu,
                       double arr_rate, double R, int policy, int d,
                       const double[::1] ua, const double[::1] us, const double[::1] up,
                       int64_t[::1] pos, double[::1] clk, double t_stop,
                       int64_t[::1] mod, int64_t[::1] counters,
                       double[::1] log_t, double[::1] log_u, int64_t[::1] log_kind,
                       int64_t[:, ::1] log_q, int64_t[::1] lpos, int64_t[::1] stats,
                       int64_t[::1] scratch) noexcept nogil:
    cdef Py_ssize_t M = c.shape[0]
    cdef Py_ssize_t L = c.shape[1]
    cdef Py_ssize_t j, i, istar, jsel, jlast, pool, ell
    cdef int64_t n = 0, q1 = mod[0], q2 = mod[1], Q1, Qp2, nxt
    cdef int kpol = policy_draws(policy, d)
    cdef Py_ssize_t pa = pos[0], ps = pos[1], pp = pos[2]
    cdef Py_ssize_t na = ua.shape[0], ns = us.shape[0], npl = up.shape[0]
    cdef Py_ssize_t lp = lpos[0], cap = log_t.shape[0]
    cdef double t = clk[0], ta = clk[1], tp = clk[2]
    cdef double tn, U, x, s, below, r, cum, w, m1, m2
    cdef int kind
    cdef int status = DONE
    cdef bint over
    for j in range(M):
        n += N[j]
    while True:
        if na - pa < 2 or ns - ps < 3 or npl - pp < kpol:
            status = REFILL
            break
        if cap > 0 and lp >= cap:
            status = LOG_FULL
            break
        if ta < 0:
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        if tp < 0:
            tp = t + _expo(us[ps]) / R
            ps += 1
        tn = ta if ta <= tp else tp
        if tn > t_stop:
            t = t_stop
            break
        t = tn
        if ta <= tp:
            kind = 0
            U = NAN
            _route(c, N, n, policy, d, up, pp, scratch, &pool, &ell)
            pp += kpol
            c[pool, ell] += 1
            stats[0] += 1
            counters[0] += 1
            if q1 < n:
                q1 += 1
            elif q2 < n:
                q2 += 1
                counters[1] += 1
            else:
                counters[2] += 1
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        else:
            kind = 1
            U = us[ps]
            ps += 1
            tp = t + _expo(us[ps]) / R
            ps += 1
            stats[1] += 1
            x = U * R
            istar = 0
            for i in range(1, L + 1):
                s = 0.0
                for j in range(M):
                    s += mu[j] * c[j, i - 1]
                if s >= x and s > 0:
                    istar = i
                else:
                    break
            if istar > 0:
                below = 0.0
                if istar < L:
                    for j in range(M):
                        below += mu[j] * c[j, istar]
                r = x - below
                cum = 0.0
                jsel = -1
                jlast = -1
                for j in range(M):
                    nxt = c[j, istar] if istar < L else 0
                    w = mu[j] * (c[j, istar - 1] - nxt)
                    if w > 0:
                        jlast = j
                        cum += w
                        if r <= cum:
                            jsel = j
                            break
                if jsel < 0:
                    jsel = jlast
                c[jsel, istar - 1] -= 1
                stats[2] += 1
            m2 = _tilde_mu(q2, N, mu)
            m1 = _tilde_mu(q1, N, mu)
            if x <= m2 and q2 > 0:
                q2 -= 1
                counters[3] += 1
                counters[4] += 1
            elif x <= m1 and q1 > 0:
                q1 -= 1
                counters[3] += 1
        stats[3] += 1
        Q1 = 0
        Qp2 = 0
        for j in range(M):
            Q1 += c[j, 0]
            for i in range(1, L):
                Qp2 += c[j, i]
        if cap > 0:
            log_t[lp] = t
            log_u[lp] = U
            log_kind[lp] = kind
            log_q[lp, 0] = Q1
            log_q[lp, 1] = Qp2
            log_q[lp, 2] = q1
            log_q[lp, 3] = q2
            lp += 1
        if q2 > Qp2 or q1 + q2 > Q1 + Qp2:
            status = VIOLATION
            break
        over = False
        for j in range(M):
            if c[j, L - 1] > 0:
                over = True
        if over:
            status = OVERFLOW
            break
    pos[0] = pa
    pos[1] = ps
    pos[2] = pp
    clk[0] = t
    clk[1] = ta
    clk[2] = tp
    mod[0] = q1
    mod[1] = q2
    lpos[0] = lp
    return status


def coupled_advance(int64_t[:, ::1] c, const int64_t[::1] N, const double[::1] mu,
                    double arr_rate, double R, int policy, int d,
                    const double[::1] ua, const double[::1] us, const double[::1] up,
                    int64_t[::1] pos, double[::1] clk, double t_stop,
                    int64_t[::1] mod, int64_t[::1] counters,
                    double[::1] log_t, double[::1] log_u, int64_t[::1] log_kind,
                    int64_t[:, ::1] log_q, int64_t[::1] lpos, int64_t[::1] stats,
                    int64_t[::1] scratch):
    cdef int status
    with nogil:
        status = _coupled_loop(c, N, mu, arr_rate, R, policy, d, ua, us, up, pos, clk,
                               t_stop, mod, counters, log_t, log_u, log_kind, log_q,
                               lpos, stats, scratch)
    return status


cdef int _modified_loop(const int64_t[::1] N, const double[::1] mu, double arr_rate,
                        const double[::1] ua, const double[::1] us, int64_t[::1] pos,
                        double[::1] clk, double t_stop, int64_t[::1] mod,
                        int64_t[::1] counters, double[::1] area,
                        int64_t[::1] stats) noexcept nogil:
    cdef Py_ssize_t j
    cdef int64_t n = 0, q1 = mod[0], q2 = mod[1]
    cdef Py_ssize_t pa = pos[0], ps = pos[1]
    cdef Py_ssize_t na = ua.shape[0], ns = us.shape[0]
    cdef double t = clk[0], ta = clk[1], td = clk[2]
    cdef double tn, te, dt, m1, m2, x
    cdef int status = DONE
    for j in range(N.shape[0]):
        n += N[j]
    while True:
        if na - pa < 2 or ns - ps < 2:
            status = REFILL
            break
        if ta < 0:
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        if td < 0:
            m1 = _tilde_mu(q1, N, mu)
            if m1 > 0:
                td = t + _expo(us[ps]) / m1
                ps += 1
            else:
                td = INFINITY
        tn = ta if ta <= td else td
        te = tn if tn < t_stop else t_stop
        if te > t:
            dt = te - t
            area[0] += q1 * dt
            area[1] += q2 * dt
        if tn > t_stop:
            t = t_stop
            break
        t = tn
        if ta <= td:
            counters[0] += 1
            if q1 < n:
                q1 += 1
            elif q2 < n:
                q2 += 1
                counters[1] += 1
            else:
                counters[2] += 1
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        else:
            m1 = _tilde_mu(q1, N, mu)
            m2 = _tilde_mu(q2, N, mu)
            x = us[ps] * m1
            ps += 1
            if x < m2:
                q2 -= 1
                counters[3] += 1
                counters[4] += 1
            else:
                q1 -= 1
                counters[3] += 1
        td = -1.0
        stats[0] += 1
    pos[0] = pa
    pos[1] = ps
    clk[0] = t
    clk[1] = ta
    clk[2] = td
    mod[0] = q1
    mod[1] = q2
    return status


def modified_advance(const int64_t[::1] N, const double[::1] mu, double arr_rate,
                     const double[::1] ua, const double[::1] us, int64_t[::1] pos,
                     double[::1] clk, double t_stop, int64_t[::1] mod,
                     int64_t[::1] counters, double[::1] area, int64_t[::1] stats):
    cdef int status
    with nogil:
        status = _modified_loop(N, mu, arr_rate, ua, us, pos, clk, t_stop, mod,
                                counters, area, stats)
    return status


cdef int _sde_loop(double[::1] y, double[:, ::1] tail, const double[::1] speeds,
                   double beta, double sigma, double h, const double[::1] z,
                   Py_ssize_t stride, double[:, ::1] out, double[:, :, ::1] out_tail,
                   int64_t[::1] opos, double[::1] acc) noexcept nogil:
    cdef Py_ssize_t M = tail.shape[0]
    cdef Py_ssize_t K = tail.shape[1]
    cdef Py_ssize_t s, j, k, op = opos[0]
    cdef double muM = speeds[M - 1]
    cdef double yM1 = y[0], u1 = y[1]
    cdef double sq = sigma * sqrt(h)
    cdef double drift, rate, nxt, y12
    cdef bint rec = out.shape[0] > 0
    cdef bint rec_tail = out_tail.shape[0] > 0
    cdef bint neg
    cdef int status = DONE
    for s in range(z.shape[0]):
        drift = -beta - muM * yM1
        for j in range(M):
            drift += speeds[j] * tail[j, 0]
        neg = False
        for j in range(M):
            rate = speeds[j] * h
            for k in range(K):
                nxt = tail[j, k + 1] if k + 1 < K else 0.0
                tail[j, k] = tail[j, k] - rate * (tail[j, k] - nxt)
                if tail[j, k] < TAIL_TOL:
                    neg = True
        yM1 = yM1 + drift * h + sq * z[s]
        if yM1 > 0:
            u1 += yM1
            tail[0, 0] += yM1
            yM1 = 0.0
        y12 = tail[0, 0]
        acc[0] += yM1
        acc[1] += y12
        acc[2] += yM1 * yM1
        acc[3] += y12 * y12
        acc[4] += 1.0
        if rec and (s + 1) % stride == 0:
            out[op, 0] = yM1
            out[op, 1] = y12
            out[op, 2] = u1
            if rec_tail:
                for j in range(M):
                    for k in range(K):
                        out_tail[op, j, k] = tail[j, k]
            op += 1
        if neg:
            status = STEP_TOO_LARGE
            break
    y[0] = yM1
    y[1] = u1
    opos[0] = op
    return status


def sde_advance(double[::1] y, double[:, ::1] tail, const double[::1] speeds,
                double beta, double sigma, double h, const double[::1] z,
                Py_ssize_t stride, double[:, ::1] out, double[:, :, ::1] out_tail,
                int64_t[::1] opos, double[::1] acc):
    cdef int status
    with nogil:
        status = _sde_loop(y, tail, speeds, beta, sigma, h, z, stride, out, out_tail,
                           opos, acc)
    return status
