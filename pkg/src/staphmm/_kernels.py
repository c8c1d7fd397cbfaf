"""Compiled inner loops for latent-path updates.

Both kernels operate on a dense view of the currently instantiated labels:
``pi`` holds one transition row per label, ``logemis`` one emission
log-density column per label (row 0 is zero because the pre-initial state
carries no emission).  Slice variables enter only through comparisons
``pi > u``, so transition probabilities cancel out of the sampled weights;
the initial state is constrained through its lexicographic rank instead.

Randomness comes in as pre-drawn uniforms, which keeps the draws bitwise
reproducible for a given generator stream regardless of compilation.
"""

import numpy as np
from numba import njit

__all__ = ["ffbs_pass", "split_scan"]


@njit(cache=True)
def _pick(weights, k_n, u):
    """Inverse-CDF draw from an unnormalized weight vector of length k_n."""
    tot = 0.0
    for k in range(k_n):
        tot += weights[k]
    target = u * tot
    acc = 0.0
    last = -1
    for k in range(k_n):
        if weights[k] > 0.0:
            last = k
            acc += weights[k]
            if acc >= target:
                return k
    return last


@njit(cache=True)
def ffbs_pass(logemis, pi, u, init_allowed, u_draws, z_out):
    """Forward-filter backward-sample the whole path under slice constraints.

    logemis : (T, K) emission log densities, row 0 all zeros.
    pi : (K, K) transition probabilities among instantiated labels.
    u : (T,) slice values; u[0] is unused (rank bound handled by
        ``init_allowed``), u[t] constrains the transition into time t.
    init_allowed : (K,) admissible labels for the pre-initial state.
    u_draws : (T,) uniforms consumed by the backward draws.
    z_out : (T,) receives the sampled label indices.

    Returns 1 on success, 0 if some time point had no admissible label
    (the caller re-draws slices in that case).
    """
    T, K = logemis.shape
    M = np.zeros((T, K))
    any0 = False
    for k in range(K):
        if init_allowed[k]:
            M[0, k] = 1.0
            any0 = True
    if not any0:
        return 0
    for t in range(1, T):
        shift = -np.inf
        for k in range(K):
            s = 0.0
            ut = u[t]
            for kp in range(K):
                if pi[kp, k] > ut and M[t - 1, kp] > 0.0:
                    s += M[t - 1, kp]
            M[t, k] = s
            if s > 0.0 and logemis[t, k] > shift:
                shift = logemis[t, k]
        if shift == -np.inf:
            return 0
        tot = 0.0
        for k in range(K):
            if M[t, k] > 0.0:
                M[t, k] *= np.exp(logemis[t, k] - shift)
                tot += M[t, k]
        if tot <= 0.0:
            return 0
        inv = 1.0 / tot
        for k in range(K):
            M[t, k] *= inv
    z_out[T - 1] = _pick(M[T - 1], K, u_draws[T - 1])
    w = np.empty(K)
    for t in range(T - 2, -1, -1):
        nxt = z_out[t + 1]
        ut1 = u[t + 1]
        any_w = False
        for k in range(K):
            if pi[k, nxt] > ut1 and M[t, k] > 0.0:
                w[k] = M[t, k]
                any_w = True
            else:
                w[k] = 0.0
        if not any_w:
            return 0
        z_out[t] = _pick(w, K, u_draws[t])
    return 1


@njit(cache=True)
def split_scan(components, fam, z, logemis, pi, u, rank_bound, ranks, u_draws):
    """Resample one family's label component at every time point in turn.

    components : (K, F) per-label atom indices; candidates for time t are
        the labels agreeing with the current label on every family but
        ``fam``.
    z : (T,) current label indices, updated in place.
    u : (T,) slice values as in :func:`ffbs_pass`; ``rank_bound`` replaces
        the t = 0 slice, ``ranks`` holds each label's lexicographic rank.

    Returns 1 on success, 0 on an empty candidate set.
    """
    T, K = logemis.shape
    F = components.shape[1]
    w = np.empty(K)
    for t in range(T):
        zc = z[t]
        shift = -np.inf
        for k in range(K):
            ok = True
            for g in range(F):
                if g != fam and components[k, g] != components[zc, g]:
                    ok = False
                    break
            if ok:
                if t == 0:
                    ok = ranks[k] <= rank_bound
                else:
                    ok = pi[z[t - 1], k] > u[t]
            if ok and t < T - 1:
                ok = pi[k, z[t + 1]] > u[t + 1]
            if ok:
                w[k] = 1.0
                if logemis[t, k] > shift:
                    shift = logemis[t, k]
            else:
                w[k] = 0.0
        if shift == -np.inf:
            return 0
        tot = 0.0
        for k in range(K):
            if w[k] > 0.0:
                w[k] = np.exp(logemis[t, k] - shift)
                tot += w[k]
        if tot <= 0.0:
            return 0
        z[t] = _pick(w, K, u_draws[t])
    return 1
