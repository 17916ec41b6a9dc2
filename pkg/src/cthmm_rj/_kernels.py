"""Compiled inner loops.

All kernels take flattened observation arrays: ``offsets[n]:offsets[n+1]``
indexes subject ``n`` and ``P[i]`` is the transition kernel from visit
``i-1`` to visit ``i`` (unused at a subject's first visit).
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def seed(s):
    np.random.seed(s)


@njit(cache=True)
def forward_loglik(log_em, P, offsets, pi, strict):
    """Per-subject log marginal likelihood.

    Returns ``(ll, bad_index)``. With ``strict`` the first impossible visit
    stops the pass and is reported; otherwise that subject gets ``-inf``.
    """
    n_sub = offsets.size - 1
    K = log_em.shape[1]
    ll = np.zeros(n_sub)
    alpha = np.empty(K)
    nxt = np.empty(K)
    e = np.empty(K)
    bad = -1
    for n in range(n_sub):
        start = offsets[n]
        stop = offsets[n + 1]
        total = 0.0
        for i in range(start, stop):
            m = log_em[i, 0]
            for k in range(1, K):
                if log_em[i, k] > m:
                    m = log_em[i, k]
            c = 0.0
            if m > -np.inf:
                for k in range(K):
                    e[k] = np.exp(log_em[i, k] - m)
                if i == start:
                    for k in range(K):
                        nxt[k] = pi[k] * e[k]
                else:
                    for k in range(K):
                        acc = 0.0
                        for j in range(K):
                            acc += alpha[j] * P[i, j, k]
                        nxt[k] = acc * e[k]
                for k in range(K):
                    c += nxt[k]
            if not c > 0.0:
                if strict:
                    return ll, i
                if bad < 0:
                    bad = i
                total = -np.inf
                break
            for k in range(K):
                alpha[k] = nxt[k] / c
            total += np.log(c) + m
        ll[n] = total
    return ll, -1 if strict else bad


@njit(cache=True)
def forward_backward(log_em, P, offsets, pi):
    """Smoothed marginals ``a``, pairwise posteriors ``b`` and per-subject log-likelihoods.

    ``b[i, j, k]`` is ``P(X_{i-1}=j, X_i=k | data)``; zero at first visits.
    """
    n_obs, K = log_em.shape
    n_sub = offsets.size - 1
    alpha = np.zeros((n_obs, K))
    beta = np.ones((n_obs, K))
    e = np.zeros((n_obs, K))
    scale = np.zeros(n_obs)
    ll = np.zeros(n_sub)
    a = np.zeros((n_obs, K))
    b = np.zeros((n_obs, K, K))
    for n in range(n_sub):
        start = offsets[n]
        stop = offsets[n + 1]
        total = 0.0
        for i in range(start, stop):
            m = log_em[i, 0]
            for k in range(1, K):
                if log_em[i, k] > m:
                    m = log_em[i, k]
            if m == -np.inf:
                return a, b, ll, i
            for k in range(K):
                e[i, k] = np.exp(log_em[i, k] - m)
            c = 0.0
            for k in range(K):
                if i == start:
                    v = pi[k] * e[i, k]
                else:
                    acc = 0.0
                    for j in range(K):
                        acc += alpha[i - 1, j] * P[i, j, k]
                    v = acc * e[i, k]
                alpha[i, k] = v
                c += v
            if not c > 0.0:
                return a, b, ll, i
            for k in range(K):
                alpha[i, k] /= c
            scale[i] = c
            total += np.log(c) + m
        ll[n] = total
        for i in range(stop - 2, start - 1, -1):
            for j in range(K):
                acc = 0.0
                for k in range(K):
                    acc += P[i + 1, j, k] * e[i + 1, k] * beta[i + 1, k]
                beta[i, j] = acc / scale[i + 1]
        for i in range(start, stop):
            s = 0.0
            for k in range(K):
                a[i, k] = alpha[i, k] * beta[i, k]
                s += a[i, k]
            for k in range(K):
                a[i, k] /= s
            if i > start:
                s = 0.0
                for j in range(K):
                    for k in range(K):
                        v = alpha[i - 1, j] * P[i, j, k] * e[i, k] * beta[i, k]
                        b[i, j, k] = v
                        s += v
                for j in range(K):
                    for k in range(K):
                        b[i, j, k] /= s
    return a, b, ll, -1


@njit(cache=True)
def _pick(weights, total):
    u = np.random.random() * total
    acc = 0.0
    last = 0
    for j in range(weights.size):
        if weights[j] > 0.0:
            last = j
            acc += weights[j]
            if u < acc:
                return j
    return last


@njit(cache=True)
def _forward_stats(Q, exit_rates, state, t, horizon, N, R):
    K = Q.shape[0]
    w = np.empty(K)
    while True:
        rate = exit_rates[state]
        if rate <= 0.0:
            R[state] += horizon - t
            return state
        hold = -np.log(1.0 - np.random.random()) / rate
        if t + hold >= horizon:
            R[state] += horizon - t
            return state
        R[state] += hold
        t += hold
        for j in range(K):
            w[j] = Q[state, j] if j != state else 0.0
        nxt = _pick(w, rate)
        N[state, nxt] += 1
        state = nxt


@njit(cache=True)
def _uniformization_stats(Q, exit_rates, a, b, delta, N, R):
    """Direct sampler; returns False when the endpoint pair is numerically unreachable."""
    K = Q.shape[0]
    lam = 0.0
    for k in range(K):
        if exit_rates[k] > lam:
            lam = exit_rates[k]
    if lam == 0.0:
        if a != b:
            return False
        R[a] += delta
        return True
    U = np.eye(K) + Q / lam
    x = lam * delta
    n_max = int(x + 12.0 * np.sqrt(x) + 60.0)
    powers = np.zeros((n_max + 1, K, K))
    powers[0] = np.eye(K)
    for n in range(1, n_max + 1):
        powers[n] = powers[n - 1] @ U
    log_pmf = -x
    terms = np.zeros(n_max + 1)
    tot = 0.0
    for n in range(n_max + 1):
        terms[n] = np.exp(log_pmf) * powers[n, a, b]
        tot += terms[n]
        log_pmf += np.log(x) - np.log(n + 1.0)
    if not tot > 0.0:
        return False
    n_jumps = _pick(terms, tot)
    times = np.sort(np.random.random(n_jumps) * delta)
    cur = a
    t_prev = 0.0
    w = np.empty(K)
    for i in range(n_jumps):
        remaining = n_jumps - i - 1
        s = 0.0
        for j in range(K):
            w[j] = U[cur, j] * powers[remaining, j, b]
            s += w[j]
        if not s > 0.0:
            return False
        nxt = _pick(w, s)
        if nxt != cur:
            R[cur] += times[i] - t_prev
            t_prev = times[i]
            N[cur, nxt] += 1
        cur = nxt
    R[cur] += delta - t_prev
    return True


@njit(cache=True)
def endpoint_statistics(Q, starts, ends, deltas, max_rejections):
    """Accumulated jump counts and occupancies of endpoint-conditioned paths.

    Returns ``(N, R, failed)``; ``failed`` is the first interval whose
    endpoints could not be connected, or -1.
    """
    K = Q.shape[0]
    exit_rates = np.empty(K)
    for k in range(K):
        exit_rates[k] = -Q[k, k]
    N = np.zeros((K, K), dtype=np.int64)
    R = np.zeros(K)
    Nt = np.zeros((K, K), dtype=np.int64)
    Rt = np.zeros(K)
    w = np.empty(K)
    for idx in range(starts.size):
        a = starts[idx]
        b = ends[idx]
        delta = deltas[idx]
        done = False
        for _ in range(max_rejections):
            Nt[:, :] = 0
            Rt[:] = 0.0
            if a == b:
                last = _forward_stats(Q, exit_rates, a, 0.0, delta, Nt, Rt)
            else:
                r = exit_rates[a]
                if r <= 0.0:
                    break
                u = np.random.random()
                tau = -np.log1p(-u * -np.expm1(-r * delta)) / r
                for j in range(K):
                    w[j] = Q[a, j] if j != a else 0.0
                nxt = _pick(w, r)
                Rt[a] += tau
                Nt[a, nxt] += 1
                last = _forward_stats(Q, exit_rates, nxt, tau, delta, Nt, Rt)
            if last == b:
                done = True
                break
        if not done:
            Nt[:, :] = 0
            Rt[:] = 0.0
            if not _uniformization_stats(Q, exit_rates, a, b, delta, Nt, Rt):
                return N, R, idx
        N += Nt
        R += Rt
    return N, R, -1


@njit(cache=True)
def poisson_window(x, tail):
    """Term range ``[lo, hi)`` outside of which ``Poisson(x)`` has mass below ``tail`` on each side."""
    if x <= 0.0:
        return 0, 1
    sd = math.sqrt(x)
    lo = max(0, int(x - 9.0 * sd - 5.0))
    # right end: walk the pmf until the upper tail is below ``tail``
    n = int(x)
    logw = -x + n * math.log(x) - math.lgamma(n + 1.0)
    w = math.exp(logw)
    # bound on the remaining tail: geometric with ratio x / (n + 1) once n > x
    while True:
        n += 1
        w *= x / n
        ratio = x / (n + 1.0)
        if ratio < 1.0 and w / (1.0 - ratio) < tail:
            break
    return lo, n + 1


@njit(cache=True)
def poisson_mix(powers, xs, tail):
    """``out[i] = sum_n Poisson(n; xs[i]) * powers[n]`` over each gap's own term window.

    Rows are clamped at 0 and renormalized.
    """
    n_terms, K, _ = powers.shape
    out = np.zeros((xs.size, K, K))
    for i in range(xs.size):
        x = xs[i]
        lo, hi = poisson_window(x, tail)
        hi = min(hi, n_terms)
        if x > 0.0:
            w = math.exp(-x + lo * math.log(x) - math.lgamma(lo + 1.0))
        else:
            w = 1.0
        for n in range(lo, hi):
            if n > lo:
                w *= x / n
            for a in range(K):
                for b in range(K):
                    out[i, a, b] += w * powers[n, a, b]
        for a in range(K):
            s = 0.0
            for b in range(K):
                if out[i, a, b] < 0.0:
                    out[i, a, b] = 0.0
                s += out[i, a, b]
            for b in range(K):
                out[i, a, b] /= s
    return out


@njit(cache=True)
def gth_stationary(A):
    """Stationary law from off-diagonal rates by Grassmann-Taksar-Heyman elimination."""
    K = A.shape[0]
    A = A.copy()
    for n in range(K - 1, 0, -1):
        total = 0.0
        for j in range(n):
            total += A[n, j]
        for i in range(n):
            A[i, n] /= total
        for i in range(n):
            for j in range(n):
                A[i, j] += A[i, n] * A[n, j]
    x = np.zeros(K)
    x[0] = 1.0
    for j in range(1, K):
        acc = 0.0
        for i in range(j):
            acc += x[i] * A[i, j]
        x[j] = acc
    return x / x.sum()


@njit(cache=True)
def _log_beta_pdf(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


@njit(cache=True)
def _log_normal_pdf(x, sd):
    return -0.5 * (x / sd) ** 2 - np.log(sd) - 0.5 * np.log(2.0 * np.pi)


@njit(cache=True, error_model="numpy")
def combine_states(pi_n, Qn, Bn, A, Bi, s_n, kappa, col_conc, q_shape, q_rate, split_sd, slope_sd):
    """Merge states ``A`` and ``Bi`` of a model with off-diagonal rates ``Qn``.

    Returns the merged parameters, the auxiliary variables that the
    reversing split would have drawn, the merged stationary law, the log
    Jacobian and log auxiliary density of that split, and a validity flag.
    """
    K1 = pi_n.size
    D = Bn.shape[0]
    K = K1 - 1
    u = s_n[A] / (s_n[A] + s_n[Bi])
    keep = np.empty(K, dtype=np.int64)
    p = 0
    m = 0
    for k in range(K1):
        if k != Bi:
            if k == A:
                m = p
            keep[p] = k
            p += 1
    Q = np.zeros((K, K))
    for a_ in range(K):
        for b_ in range(K):
            if a_ != m and b_ != m and a_ != b_:
                Q[a_, b_] = Qn[keep[a_], keep[b_]]
    n_oth = K - 1
    q_col = np.empty(n_oth)
    q_row = np.empty(n_oth)
    col_w = np.empty(n_oth)
    row_f = np.empty(n_oth)
    others = np.empty(n_oth, dtype=np.int64)
    p = 0
    for a_ in range(K):
        if a_ == m:
            continue
        k = keep[a_]
        others[p] = a_
        q_col[p] = Qn[k, A] + Qn[k, Bi]
        q_row[p] = u * Qn[A, k] + (1.0 - u) * Qn[Bi, k]
        Q[a_, m] = q_col[p]
        Q[m, a_] = q_row[p]
        col_w[p] = Qn[k, A] / q_col[p]
        row_f[p] = u * Qn[A, k] / q_row[p]
        p += 1
    pi = np.empty(K)
    for a_ in range(K):
        pi[a_] = pi_n[keep[a_]]
    pi[m] = pi_n[A] + pi_n[Bi]
    pi /= pi.sum()
    B = np.empty((D, K))
    eps = np.empty(D)
    for d in range(D):
        for a_ in range(K):
            B[d, a_] = Bn[d, keep[a_]]
        B[d, m] = u * Bn[d, A] + (1.0 - u) * Bn[d, Bi]
        eps[d] = Bn[d, Bi] - B[d, m]
    s = np.empty(K)
    for a_ in range(K):
        s[a_] = s_n[keep[a_]]
    s[m] = s_n[A] + s_n[Bi]
    new_rate = Qn[A, Bi]
    w = pi_n[A] / (pi_n[A] + pi_n[Bi])
    # a split cannot reach merged states with zero mass or zero rates
    degenerate = not (0.0 < u < 1.0) or not (0.0 < w < 1.0) or not (s[m] > 0.0)
    for p in range(n_oth):
        if not (q_col[p] > 0.0 and q_row[p] > 0.0 and 0.0 < col_w[p] < 1.0 and 0.0 < row_f[p] < 1.0):
            degenerate = True
    if degenerate:
        return pi, Q, B, m, col_w, row_f, u, new_rate, w, eps, s, -np.inf, -np.inf, False

    # reversing split: reverse rate and its derivative in u
    row_A = np.empty(n_oth)
    row_B = np.empty(n_oth)
    col_A = np.empty(n_oth)
    sum_row_A = 0.0
    rho_col = 0.0
    for p in range(n_oth):
        row_A[p] = q_row[p] * row_f[p] / u
        row_B[p] = q_row[p] * (1.0 - row_f[p]) / (1.0 - u)
        col_A[p] = col_w[p] * q_col[p]
        sum_row_A += row_A[p]
        rho_col += s[others[p]] / s[m] * col_A[p]
    c = (u * (sum_row_A + new_rate) - rho_col) / (1.0 - u)
    valid = c > 0.0
    if K == 1:
        dcdu = (new_rate + c) / (1.0 - u)
    else:
        G = Q.copy()
        for a_ in range(K):
            G[a_, a_] = -G[a_].sum()
        dQ = np.zeros((K, K))
        for p in range(n_oth):
            dQ[m, others[p]] = row_A[p] - row_B[p]
            dQ[m, m] -= row_A[p] - row_B[p]
        M_ = G.T.copy()
        rhs = -(s @ dQ)
        M_[K - 1, :] = 1.0
        rhs[K - 1] = 0.0
        ds = np.linalg.solve(M_, rhs)
        drho_col = 0.0
        for p in range(n_oth):
            o = others[p]
            drho_col += (ds[o] * s[m] - s[o] * ds[m]) / s[m] ** 2 * col_A[p]
        dcdu = (sum_row_A + new_rate - drho_col) / (1.0 - u) + c / (1.0 - u)
    log_jac = -(K - 1) * (np.log(u) + np.log1p(-u)) - D * np.log(u) + np.log(pi[m]) + np.log(abs(dcdu))
    for p in range(n_oth):
        log_jac += np.log(q_col[p]) + np.log(q_row[p])

    # density of the auxiliary draw
    if col_conc > 0:
        ca = col_conc * u
        cb = col_conc * (1.0 - u)
    else:
        ca = 2.0
        cb = 2.0
    if eps[0] > 0:
        log_aux = _log_beta_pdf(u, 2.0, 2.0) + _log_beta_pdf(w, 2.0, 2.0)
        log_aux += q_shape * np.log(q_rate) - math.lgamma(q_shape) + (q_shape - 1.0) * np.log(new_rate) - q_rate * new_rate
        for p in range(n_oth):
            log_aux += _log_beta_pdf(col_w[p], ca, cb) + _log_beta_pdf(row_f[p], kappa * u, kappa * (1.0 - u))
        log_aux += _log_normal_pdf(eps[0], split_sd) + np.log(2.0)
        for d in range(1, D):
            log_aux += _log_normal_pdf(eps[d], slope_sd)
    else:
        log_aux = -np.inf
    return pi, Q, B, m, col_w, row_f, u, new_rate, w, eps, s, log_jac, log_aux, valid


@njit(cache=True)
def log_prior_params(pi, Q, B, q_shape, q_rate, alpha, kind, loc, scale, shape, rate):
    """Log prior density of one parameter set; ``kind[d]`` is 0 flat, 1 normal, 2 gamma on exp(beta)."""
    K = pi.size
    lp = 0.0
    if K > 1:
        c = q_shape * np.log(q_rate) - math.lgamma(q_shape)
        for i in range(K):
            for j in range(K):
                if i != j:
                    q = Q[i, j]
                    if q_shape != 1.0:
                        lp += (q_shape - 1.0) * np.log(q)
                    lp += c - q_rate * q
        lp += math.lgamma(K * alpha) - K * math.lgamma(alpha)
        if alpha != 1.0:
            for i in range(K):
                lp += (alpha - 1.0) * np.log(pi[i])
    for d in range(B.shape[0]):
        if kind[d] == 1:
            for k in range(K):
                z = (B[d, k] - loc[d]) / scale[d]
                lp += -0.5 * z * z - np.log(scale[d]) - 0.5 * np.log(2.0 * np.pi)
        elif kind[d] == 2:
            for k in range(K):
                lp += shape[d] * np.log(rate[d]) - math.lgamma(shape[d]) + shape[d] * B[d, k] - rate[d] * np.exp(B[d, k])
    return lp
