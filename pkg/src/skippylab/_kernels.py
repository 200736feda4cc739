"""Hot loops: episode simulation and the suffix correction recursion.

Each kernel has a numba implementation and a vectorised numpy twin with the same
arithmetic, so both paths return bitwise-identical arrays. Set
``SKIPPYLAB_DISABLE_NUMBA=1`` to force the numpy path (also used automatically
when numba is missing).
"""
import os

import numpy as np

_DISABLED = os.environ.get("SKIPPYLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

HAVE_NUMBA = nb is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------- numpy path

def _pick_np(cdf_rows, u):
    idx = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def rollout_memoryless_np(P_cdf, R_vals, R_cdf, pi_cdf, s0, U):
    n, L = U.shape[0], U.shape[1]
    states = np.empty((n, L), dtype=np.int64)
    actions = np.empty((n, L), dtype=np.int64)
    rewards = np.empty((n, L))
    s = np.full(n, s0, dtype=np.int64)
    for t in range(L):
        states[:, t] = s
        a = _pick_np(pi_cdf[s], U[:, t, 1])
        actions[:, t] = a
        rewards[:, t] = R_vals[s, a, _pick_np(R_cdf[s, a], U[:, t, 3])]
        if t + 1 < L:
            s = _pick_np(P_cdf[s, a], U[:, t, 2])
    return states, actions, rewards


def rollout_skippy_np(P_cdf, R_vals, R_cdf, tau, aplus, s0, k, U):
    n, H = U.shape[0], U.shape[1]
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    bern = np.zeros((n, H), dtype=np.int8)
    pmap = np.full((n, H), H + 1, dtype=np.int64)
    landed = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    s = np.full(n, s0, dtype=np.int64)
    for t in range(H):
        states[:, t] = s
        b = U[:, t, 0] < tau[s]
        bern[:, t] = b
        pmap[rows[b], landed[b]] = t + 1
        a = np.where(b & (landed < k), aplus[s], 0)
        landed = landed + b
        actions[:, t] = a
        rewards[:, t] = R_vals[s, a, _pick_np(R_cdf[s, a], U[:, t, 3])]
        if t + 1 < H:
            s = _pick_np(P_cdf[s, a], U[:, t, 2])
    return states, actions, rewards, bern, pmap


def suffix_corrections_np(states, rewards, tau_tab, C_tab):
    n, L = states.shape
    e_to = np.zeros((n, L + 1))
    e_step = np.zeros((n, L))
    tail = np.zeros(n)
    for j in range(L - 1, -1, -1):
        tail = tail + rewards[:, j]
        tau = tau_tab[states[:, j]]
        D = C_tab[states[:, j]] - tail
        e_step[:, j] = tau * (D - e_to[:, j + 1])
        e_to[:, j] = tau * D + (1.0 - tau) * e_to[:, j + 1]
    return e_to, e_step


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:
    _jit = nb.njit(cache=True, nogil=True)

    @_jit
    def _pick(row, u):
        j = 0
        m = row.shape[0]
        while j < m and row[j] <= u:
            j += 1
        return min(j, m - 1)

    @_jit
    def rollout_memoryless_nb(P_cdf, R_vals, R_cdf, pi_cdf, s0, U):
        n, L = U.shape[0], U.shape[1]
        states = np.empty((n, L), dtype=np.int64)
        actions = np.empty((n, L), dtype=np.int64)
        rewards = np.empty((n, L))
        for e in range(n):
            s = s0
            for t in range(L):
                states[e, t] = s
                a = _pick(pi_cdf[s], U[e, t, 1])
                actions[e, t] = a
                rewards[e, t] = R_vals[s, a, _pick(R_cdf[s, a], U[e, t, 3])]
                if t + 1 < L:
                    s = _pick(P_cdf[s, a], U[e, t, 2])
        return states, actions, rewards

    @_jit
    def rollout_skippy_nb(P_cdf, R_vals, R_cdf, tau, aplus, s0, k, U):
        n, H = U.shape[0], U.shape[1]
        states = np.empty((n, H), dtype=np.int64)
        actions = np.empty((n, H), dtype=np.int64)
        rewards = np.empty((n, H))
        bern = np.zeros((n, H), dtype=np.int8)
        pmap = np.full((n, H), H + 1, dtype=np.int64)
        for e in range(n):
            s = s0
            landed = 0
            for t in range(H):
                states[e, t] = s
                a = 0
                if U[e, t, 0] < tau[s]:
                    bern[e, t] = 1
                    pmap[e, landed] = t + 1
                    if landed < k:
                        a = aplus[s]
                    landed += 1
                actions[e, t] = a
                rewards[e, t] = R_vals[s, a, _pick(R_cdf[s, a], U[e, t, 3])]
                if t + 1 < H:
                    s = _pick(P_cdf[s, a], U[e, t, 2])
        return states, actions, rewards, bern, pmap

    @_jit
    def suffix_corrections_nb(states, rewards, tau_tab, C_tab):
        n, L = states.shape
        e_to = np.zeros((n, L + 1))
        e_step = np.zeros((n, L))
        for e in range(n):
            tail = 0.0
            for j in range(L - 1, -1, -1):
                tail = tail + rewards[e, j]
                tau = tau_tab[states[e, j]]
                D = C_tab[states[e, j]] - tail
                e_step[e, j] = tau * (D - e_to[e, j + 1])
                e_to[e, j] = tau * D + (1.0 - tau) * e_to[e, j + 1]
        return e_to, e_step


# ---------------------------------------------------------------- dispatch

def _choose(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def rollout_memoryless(P_cdf, R_vals, R_cdf, pi_cdf, s0, U):
    return _choose("rollout_memoryless")(P_cdf, R_vals, R_cdf, pi_cdf, np.int64(s0), U)


def rollout_skippy(P_cdf, R_vals, R_cdf, tau, aplus, s0, k, U):
    fn = _choose("rollout_skippy")
    return fn(P_cdf, R_vals, R_cdf, np.ascontiguousarray(tau, dtype=float),
              np.ascontiguousarray(aplus, dtype=np.int64), np.int64(s0), np.int64(k), U)


def suffix_corrections(states, rewards, tau_tab, C_tab):
    """Backward E-to / E recursion along every row of ``states``.

    Returns ``(e_to, e_step)`` with shapes (n, L+1) and (n, L); column j refers to
    the suffix starting at column j, and ``e_to[:, L] == 0``.
    """
    fn = _choose("suffix_corrections")
    return fn(np.ascontiguousarray(states, dtype=np.int64), np.ascontiguousarray(rewards, dtype=float),
              np.ascontiguousarray(tau_tab, dtype=float), np.ascontiguousarray(C_tab, dtype=float))
