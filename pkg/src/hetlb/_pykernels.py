"""Pure-Python event loops.

These mirror ``_kernels.pyx`` operation for operation, including the order
of floating-point sums, so both backends produce bit-identical paths from the
same uniform blocks. Arrays passed in are updated in place; each advance
function returns a status code.

Uniform buffers are consumed front to back starting at ``pos[k]``. A loop
stops with ``REFILL`` before it could run past the end of any buffer.
"""
from __future__ import annotations

import math

DONE, REFILL, OVERFLOW, VIOLATION, LOG_FULL, STEP_TOO_LARGE, PAUSED = 0, 1, 2, 3, 4, 5, 6
SA_JSQ, JSQ, POD, JIQ = 0, 1, 2, 3
INF = math.inf
TAIL_TOL = -1e-9


def policy_draws(policy: int, d: int) -> int:
    if policy == SA_JSQ:
        return 0
    if policy == POD:
        return d + 1
    return 1


def _exact(c, N, j, ell, L):
    """Number of pool-j servers holding exactly `ell` jobs."""
    if ell == 0:
        return N[j] - c[j][0]
    nxt = c[j][ell] if ell < L else 0
    return c[j][ell - 1] - nxt


def _level_of(row, L, offset):
    # servers of a pool are ordered longest first; length of the offset-th one
    i = 0
    while i < L and row[i] > offset:
        i += 1
    return i


def _min_level(c, N, M, L):
    for ell in range(L + 1):
        for j in range(M):
            if _exact(c, N, j, ell, L) > 0:
                return ell
    return L


def _locate(N, M, k):
    j = 0
    while j < M - 1 and k >= N[j]:
        k -= N[j]
        j += 1
    return j, k


def route(c, N, n, policy, d, u, p):
    """Return ``(pool, level)`` for one arrival; reads uniforms ``u[p:]``."""
    M = len(N)
    L = len(c[0])
    if policy == SA_JSQ:
        for ell in range(L + 1):
            for j in range(M):
                if _exact(c, N, j, ell, L) > 0:
                    return j, ell
        return M - 1, L
    if policy == JSQ:
        ell = _min_level(c, N, M, L)
        tot = 0
        for j in range(M):
            tot += _exact(c, N, j, ell, L)
        k = int(u[p] * tot)
        if k > tot - 1:
            k = tot - 1
        for j in range(M):
            e = _exact(c, N, j, ell, L)
            if k < e:
                return j, ell
            k -= e
        return M - 1, ell
    if policy == JIQ:
        idle = 0
        for j in range(M):
            idle += N[j] - c[j][0]
        if idle > 0:
            k = int(u[p] * idle)
            if k > idle - 1:
                k = idle - 1
            for j in range(M):
                e = N[j] - c[j][0]
                if k < e:
                    return j, 0
                k -= e
            return M - 1, 0
        k = int(u[p] * n)
        if k > n - 1:
            k = n - 1
        j, off = _locate(N, M, k)
        return j, _level_of(c[j], L, off)
    # power-of-d: d distinct server indices, kept sorted
    chosen = []
    for m in range(d):
        r = int(u[p + m] * (n - m))
        if r > n - m - 1:
            r = n - m - 1
        for x in chosen:
            if r >= x:
                r += 1
            else:
                break
        k = 0
        while k < len(chosen) and chosen[k] < r:
            k += 1
        chosen.insert(k, r)
    best = L + 1
    ties = 0
    for idx in chosen:
        j, off = _locate(N, M, idx)
        lvl = _level_of(c[j], L, off)
        if lvl < best:
            best = lvl
            ties = 1
        elif lvl == best:
            ties += 1
    k = int(u[p + d] * ties)
    if k > ties - 1:
        k = ties - 1
    for idx in chosen:
        j, off = _locate(N, M, idx)
        if _level_of(c[j], L, off) == best:
            if k == 0:
                return j, best
            k -= 1
    return M - 1, best


def _expo(u):
    return -math.log1p(-u)


def ctmc_advance(c, N, mu, arr_rate, policy, d, ua, us, up, pos, clk, t_stop, max_events,
                 grid, gpos, samples, area, ind, stats, scratch):
    """Advance the occupancy CTMC with two competing exponential clocks.

    ``clk`` holds (time, next arrival, pending departure, sup-tracking start,
    running max of idle servers outside the slowest pool); negative clock
    entries mean "not drawn yet". The departure clock is redrawn after every
    event, which is exact by memorylessness. The loop pauses once the event
    counter ``stats[2]`` reaches `max_events`.
    """
    M, L = c.shape
    cl = c.tolist()
    Nl = [int(v) for v in N]
    mul = [float(v) for v in mu]
    n = sum(Nl)
    kpol = policy_draws(policy, d)
    pa, ps, pp = int(pos[0]), int(pos[1]), int(pos[2])
    na, ns, npl = len(ua), len(us), len(up)
    t, ta, td, tsup, maxidle = (float(v) for v in clk[:5])
    gp, ng = int(gpos[0]), len(grid)
    areal = area.tolist()
    w0, w1 = float(ind[0]), float(ind[1])
    narr, ndep, nev = int(stats[0]), int(stats[1]), int(stats[2])
    status = DONE
    while True:
        if nev >= max_events:
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
                D += mul[j] * cl[j][0]
            if D > 0:
                td = t + _expo(us[ps]) / D
                ps += 1
            else:
                td = INF
        tn = ta if ta <= td else td
        while gp < ng and grid[gp] < tn and grid[gp] <= t_stop:
            samples[gp, :, :L] = cl
            gp += 1
        te = tn if tn < t_stop else t_stop
        if te > t:
            dt = te - t
            busy = 0
            for j in range(M):
                row = cl[j]
                arow = areal[j]
                for i in range(L):
                    arow[i] += row[i] * dt
                busy += row[0]
            if busy == n:
                w0 += dt
                if cl[0][1] == Nl[0]:
                    w1 += dt
        if te >= tsup:
            idle = 0
            for j in range(M - 1):
                idle += Nl[j] - cl[j][0]
            if idle > maxidle:
                maxidle = float(idle)
        if tn > t_stop:
            t = t_stop
            break
        t = tn
        if ta <= td:
            j, ell = route(cl, Nl, n, policy, d, up, pp)
            pp += kpol
            cl[j][ell] += 1
            narr += 1
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        else:
            D = 0.0
            for j in range(M):
                D += mul[j] * cl[j][0]
            x = us[ps] * D
            ps += 1
            jsel = -1
            for j in range(M):
                w = mul[j] * cl[j][0]
                if x < w:
                    jsel = j
                    break
                x -= w
            if jsel < 0:
                for j in range(M):
                    if cl[j][0] > 0:
                        jsel = j
                o = cl[jsel][0] - 1
            else:
                o = int(x / mul[jsel])
                if o > cl[jsel][0] - 1:
                    o = cl[jsel][0] - 1
            lvl = _level_of(cl[jsel], L, o)
            cl[jsel][lvl - 1] -= 1
            ndep += 1
        td = -1.0
        nev += 1
        over = False
        for j in range(M):
            if cl[j][L - 1] > 0:
                over = True
        if over:
            status = OVERFLOW
            break
    c[:, :] = cl
    pos[0], pos[1], pos[2] = pa, ps, pp
    clk[0], clk[1], clk[2], clk[3], clk[4] = t, ta, td, tsup, maxidle
    gpos[0] = gp
    area[:, :] = areal
    ind[0], ind[1] = w0, w1
    stats[0], stats[1], stats[2] = narr, ndep, nev
    return status


def tilde_mu(count, N, mu):
    """Departure rate of `count` busy queues placed on the fastest servers."""
    r = 0.0
    start = 0
    for j in range(len(N)):
        k = count - start
        if k <= 0:
            break
        if k > N[j]:
            k = N[j]
        r += mu[j] * k
        start += N[j]
    return r


def coupled_advance(c, N, mu, arr_rate, R, policy, d, ua, us, up, pos, clk, t_stop,
                    mod, counters, log_t, log_u, log_kind, log_q, lpos, stats, scratch):
    """Advance the original system and the buffer-two comparison system together.

    Both share one arrival clock (rate `arr_rate`) and one potential-departure
    clock of rate ``R = sum_j mu_j N_j`` with a mark ``U`` per epoch. ``mod``
    is (queues with >= 1 job, queues with 2 jobs); ``counters`` is
    (arrivals, arrivals to one-job queues, rejections, departures from
    >= 1, departures from >= 2). ``stats`` is (arrivals, potential
    departures, original departures, events).
    """
    M, L = c.shape
    cl = c.tolist()
    Nl = [int(v) for v in N]
    mul = [float(v) for v in mu]
    n = sum(Nl)
    kpol = policy_draws(policy, d)
    pa, ps, pp = int(pos[0]), int(pos[1]), int(pos[2])
    na, ns, npl = len(ua), len(us), len(up)
    t, ta, tp = float(clk[0]), float(clk[1]), float(clk[2])
    q1, q2 = int(mod[0]), int(mod[1])
    A, A1, AR, D1, D2 = (int(v) for v in counters[:5])
    lp, cap = int(lpos[0]), len(log_t)
    narr, npot, ndep, nev = (int(v) for v in stats[:4])
    status = DONE
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
            U = math.nan
            j, ell = route(cl, Nl, n, policy, d, up, pp)
            pp += kpol
            cl[j][ell] += 1
            narr += 1
            A += 1
            if q1 < n:
                q1 += 1
            elif q2 < n:
                q2 += 1
                A1 += 1
            else:
                AR += 1
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        else:
            kind = 1
            U = us[ps]
            ps += 1
            tp = t + _expo(us[ps]) / R
            ps += 1
            npot += 1
            x = U * R
            # deepest level whose potential rate still covers x
            istar = 0
            for i in range(1, L + 1):
                s = 0.0
                for j in range(M):
                    s += mul[j] * cl[j][i - 1]
                if s >= x and s > 0:
                    istar = i
                else:
                    break
            if istar > 0:
                below = 0.0
                if istar < L:
                    for j in range(M):
                        below += mul[j] * cl[j][istar]
                r = x - below
                cum = 0.0
                jsel = -1
                jlast = -1
                for j in range(M):
                    nxt = cl[j][istar] if istar < L else 0
                    w = mul[j] * (cl[j][istar - 1] - nxt)
                    if w > 0:
                        jlast = j
                        cum += w
                        if r <= cum:
                            jsel = j
                            break
                if jsel < 0:
                    jsel = jlast
                cl[jsel][istar - 1] -= 1
                ndep += 1
            m2 = tilde_mu(q2, Nl, mul)
            m1 = tilde_mu(q1, Nl, mul)
            if x <= m2 and q2 > 0:
                q2 -= 1
                D1 += 1
                D2 += 1
            elif x <= m1 and q1 > 0:
                q1 -= 1
                D1 += 1
        nev += 1
        Q1 = 0
        Qp2 = 0
        for j in range(M):
            Q1 += cl[j][0]
            for i in range(1, L):
                Qp2 += cl[j][i]
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
            if cl[j][L - 1] > 0:
                over = True
        if over:
            status = OVERFLOW
            break
    c[:, :] = cl
    pos[0], pos[1], pos[2] = pa, ps, pp
    clk[0], clk[1], clk[2] = t, ta, tp
    mod[0], mod[1] = q1, q2
    counters[0], counters[1], counters[2], counters[3], counters[4] = A, A1, AR, D1, D2
    lpos[0] = lp
    stats[0], stats[1], stats[2], stats[3] = narr, npot, ndep, nev
    return status


def modified_advance(N, mu, arr_rate, ua, us, pos, clk, t_stop, mod, counters, area, stats):
    """Advance the buffer-two comparison system alone (competing clocks).

    ``area`` accumulates the time integrals of the two queue counts.
    """
    Nl = [int(v) for v in N]
    mul = [float(v) for v in mu]
    n = sum(Nl)
    pa, ps = int(pos[0]), int(pos[1])
    na, ns = len(ua), len(us)
    t, ta, td = float(clk[0]), float(clk[1]), float(clk[2])
    q1, q2 = int(mod[0]), int(mod[1])
    A, A1, AR, D1, D2 = (int(v) for v in counters[:5])
    a1, a2 = float(area[0]), float(area[1])
    nev = int(stats[0])
    status = DONE
    while True:
        if na - pa < 2 or ns - ps < 2:
            status = REFILL
            break
        if ta < 0:
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        if td < 0:
            m1 = tilde_mu(q1, Nl, mul)
            if m1 > 0:
                td = t + _expo(us[ps]) / m1
                ps += 1
            else:
                td = INF
        tn = ta if ta <= td else td
        te = tn if tn < t_stop else t_stop
        if te > t:
            dt = te - t
            a1 += q1 * dt
            a2 += q2 * dt
        if tn > t_stop:
            t = t_stop
            break
        t = tn
        if ta <= td:
            A += 1
            if q1 < n:
                q1 += 1
            elif q2 < n:
                q2 += 1
                A1 += 1
            else:
                AR += 1
            ta = t + _expo(ua[pa]) / arr_rate
            pa += 1
        else:
            m1 = tilde_mu(q1, Nl, mul)
            m2 = tilde_mu(q2, Nl, mul)
            x = us[ps] * m1
            ps += 1
            if x < m2:
                q2 -= 1
                D1 += 1
                D2 += 1
            else:
                q1 -= 1
                D1 += 1
        td = -1.0
        nev += 1
    pos[0], pos[1] = pa, ps
    clk[0], clk[1], clk[2] = t, ta, td
    mod[0], mod[1] = q1, q2
    counters[0], counters[1], counters[2], counters[3], counters[4] = A, A1, AR, D1, D2
    area[0], area[1] = a1, a2
    stats[0] = nev
    return status


def sde_advance(y, tail, speeds, beta, sigma, h, z, stride, out, out_tail, opos, acc):
    """Euler-Maruyama steps of the reflected limit system, one per entry of `z`.

    ``y`` is (yM1, u1); ``tail[j, k]`` is the scaled count of pool-j servers
    with at least k+2 jobs, so ``tail[0, 0]`` is y12. Excess of yM1 above
    zero is moved into u1 and y12 after each step. Every `stride` steps the
    state is written to ``out`` (and ``out_tail`` when it has rows). ``acc``
    collects running sums of yM1, y12, their squares and the step count.
    """
    M, K = tail.shape
    tl = tail.tolist()
    sp = [float(v) for v in speeds]
    muM = sp[M - 1]
    yM1, u1 = float(y[0]), float(y[1])
    sq = sigma * math.sqrt(h)
    op = int(opos[0])
    rec = out.shape[0] > 0
    rec_tail = out_tail.shape[0] > 0
    s0, s1, s2, s3, cnt = (float(v) for v in acc[:5])
    status = DONE
    for s in range(len(z)):
        drift = -beta - muM * yM1
        for j in range(M):
            drift += sp[j] * tl[j][0]
        neg = False
        for j in range(M):
            row = tl[j]
            rate = sp[j] * h
            for k in range(K):
                nxt = row[k + 1] if k + 1 < K else 0.0
                row[k] = row[k] - rate * (row[k] - nxt)
                if row[k] < TAIL_TOL:
                    neg = True
        yM1 = yM1 + drift * h + sq * z[s]
        if yM1 > 0:
            u1 += yM1
            tl[0][0] += yM1
            yM1 = 0.0
        y12 = tl[0][0]
        s0 += yM1
        s1 += y12
        s2 += yM1 * yM1
        s3 += y12 * y12
        cnt += 1.0
        if rec and (s + 1) % stride == 0:
            out[op, 0] = yM1
            out[op, 1] = y12
            out[op, 2] = u1
            if rec_tail:
                out_tail[op, :, :] = tl
            op += 1
        if neg:
            status = STEP_TOO_LARGE
            break
    tail[:, :] = tl
    y[0], y[1] = yM1, u1
    opos[0] = op
    acc[0], acc[1], acc[2], acc[3], acc[4] = s0, s1, s2, s3, cnt
    return status
