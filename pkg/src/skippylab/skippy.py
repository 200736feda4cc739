"""Skipping policy, stage maps and the correction-term calculus.

A suffix is described by three aligned arrays (skip-free probabilities ``tau``,
clipped values ``C`` and realised rewards ``r``) starting at some stage i and
running to stage H.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .features import range_Q_guess_table
from .mdp import N_UNIFORMS, Trajectory


@dataclass(frozen=True, eq=False)
class Guess:
    """Guessed preconditioned design parameters; ``vectors[h]`` has shape (d0, d) for h >= 2."""

    vectors: np.ndarray   # (H + 1, d0, d); rows 0 and 1 unused

    @classmethod
    def zeros(cls, H, d0, d):
        return cls(np.zeros((H + 1, d0, d)))

    @property
    def H(self):
        return self.vectors.shape[0] - 1

    def max_norm(self):
        if self.vectors.shape[0] <= 2:
            return 0.0
        return float(np.linalg.norm(self.vectors[2:], axis=-1).max(initial=0.0))

    def check(self, radius, tol=1e-9):
        if self.max_norm() > radius + tol:
            raise ValueError(f"guess vector norm {self.max_norm():.6g} exceeds {radius:.6g}")


def correct_guess(designs, H, d0, d):
    """Guess made of the design supports (zero-padded), one block per stage 2..H."""
    vec = np.zeros((H + 1, d0, d))
    for h in range(2, H + 1):
        vec[h] = designs[h].guess_block(d0)
    return Guess(vec)


@dataclass(frozen=True, eq=False)
class OptimisticParams:
    theta: np.ndarray     # (H, d); row t-1 is theta_bar_t

    def check(self, radius, tol=1e-6):
        nrm = np.linalg.norm(self.theta, axis=1).max(initial=0.0)
        if nrm > radius + tol:
            raise ValueError(f"optimistic parameter norm {nrm:.6g} exceeds {radius:.6g}")


@dataclass(frozen=True, eq=False)
class SkippyTrajectory:
    trajectory: Trajectory
    pmap: np.ndarray      # (H,) landing stages, H+1 once exhausted
    tau: np.ndarray       # (H,)
    bern: np.ndarray      # (H,)
    k: int


def tau_table(mdp, features, guess, Q, eps):
    """Probability of not skipping, for every state (1 at the initial state)."""
    if mdp.stage_sizes[0] != 1:
        raise AssertionError("stage 1 must hold only the initial state")
    rng_ = range_Q_guess_table(mdp, features, guess, Q)
    tau = np.minimum(1.0, rng_ * math.sqrt(2 * features.d) * mdp.H / eps)
    tau[mdp.stage_states(1)] = 1.0
    return tau


def tau(mdp, features, s, guess, Q, eps):
    return float(tau_table(mdp, features, guess, Q, eps)[s])


def pi_plus_table(mdp, features, theta_bar):
    """Greedy action w.r.t. <phi, theta_bar_stage> and its value clipped to [0, H]."""
    th = np.asarray(theta_bar.theta if hasattr(theta_bar, "theta") else theta_bar)
    vals = np.einsum("sad,sd->sa", features.phi, th[mdp.stage_of - 1])
    aplus = vals.argmax(axis=1)
    C = np.clip(vals[np.arange(mdp.S), aplus], 0.0, mdp.H)
    return aplus, C


def pi_plus_and_C(mdp, features, s, theta_bar):
    # same arithmetic as the table, so ties break identically
    aplus, C = pi_plus_table(mdp, features, theta_bar)
    return int(aplus[s]), float(C[s])


def run_skippy_batch(mdp, tau_tab, aplus, k, U):
    """Simulate ``len(U)`` episodes of the skipping policy with landing budget ``k``.

    Returns (states, actions, rewards, bern, pmap), each of shape (n, H).
    """
    if not 1 <= k <= mdp.H:
        raise ValueError(f"landing budget k={k} outside [1, {mdp.H}]")
    P_cdf, R_vals, R_cdf = mdp.sampling_tables()
    U = np.ascontiguousarray(U, dtype=float)
    return _kernels.rollout_skippy(P_cdf, R_vals, R_cdf, tau_tab, aplus, 0, k, U)


def run_skippy_policy(mdp, features, guess, theta_bar, k, Q, eps, rng):
    """One episode; ``rng`` is a seed or Generator, or a (H, 4) uniform block."""
    tau_tab = tau_table(mdp, features, guess, Q, eps)
    aplus, _ = pi_plus_table(mdp, features, theta_bar)
    if isinstance(rng, np.ndarray):
        U, seed = rng[None], None
    else:
        seed = rng if isinstance(rng, (int, np.integer)) else None
        U = np.random.default_rng(rng).random((1, mdp.H, N_UNIFORMS))
    st, ac, rw, bern, pmap = run_skippy_batch(mdp, tau_tab, aplus, k, U)
    traj = Trajectory(st[0], ac[0], rw[0], seed)
    return SkippyTrajectory(traj, pmap[0], tau_tab[st[0]], bern[0], k)


# --------------------------------------------------------------- suffix calculus

def D_value(C_i, rewards):
    """C(s_i) minus the realised reward tail from stage i."""
    return float(C_i - np.sum(rewards))


def E_to(tau, C, r):
    """Correction term of a suffix in its explicit probability form."""
    tau, C, r = (np.asarray(x, dtype=float) for x in (tau, C, r))
    total, stay = 0.0, 1.0
    tails = np.cumsum(r[::-1])[::-1]
    for j in range(len(tau)):
        total += (C[j] - tails[j]) * tau[j] * stay
        stay *= 1.0 - tau[j]
    return total


def E_step(tau, C, r):
    """Stage-wise correction: tau_i (D_i - E_to of the suffix from i+1)."""
    if len(tau) == 0:
        return 0.0
    return float(tau[0] * (D_value(C[0], r) - E_to(tau[1:], C[1:], r[1:])))


def correction_arrays(states, rewards, tau_tab, C_tab):
    """E_to and E for every suffix of every row (backward recursion, kernel-backed)."""
    return _kernels.suffix_corrections(states, rewards, tau_tab, C_tab)


def suffix_of(traj, i, tau_tab, C_tab):
    """(tau, C, r) arrays of a trajectory's suffix starting at 1-based stage i."""
    st = traj.trajectory.states[i - 1:] if hasattr(traj, "trajectory") else traj.states[i - 1:]
    rw = traj.trajectory.rewards[i - 1:] if hasattr(traj, "trajectory") else traj.rewards[i - 1:]
    return tau_tab[st], C_tab[st], rw


# --------------------------------------------------------------- matrix lift

def phi_bar_table(mdp, features, Q):
    """Unit vector along the largest preconditioned feature difference of each state."""
    out = np.zeros((mdp.S, features.d))
    A = features.phi.shape[1]
    for s in range(mdp.S):
        h = int(mdp.stage_of[s])
        phiQ = features.phi[s] @ Q.matrix(h)
        best, arg = 0.0, None
        for i in range(A):
            for j in range(A):
                nrm = np.linalg.norm(phiQ[i] - phiQ[j])
                if nrm > best:
                    best, arg = nrm, phiQ[i] - phiQ[j]
        if arg is not None and best > 1e-15:
            out[s] = arg / best
    return out


def phi_bar_Q(mdp, features, s, Q):
    if mdp.stage_of[s] < 2:
        raise ValueError("defined for stages 2..H")
    return phi_bar_table(mdp, features, Q)[s]


def F_value(phi_bar, E):
    return np.outer(phi_bar, phi_bar) * E


def expected_corrections(mdp, tau_tab, C_tab):
    """Exact expectations under the default policy, for each starting state.

    Returns (v0, e_to, e_step): value of the default policy, expected E_to and
    expected E of the suffix starting at each state.
    """
    v0 = np.zeros(mdp.S)
    e_to = np.zeros(mdp.S)
    e_step = np.zeros(mdp.S)
    for h in range(mdp.H, 0, -1):
        idx = mdp.stage_states(h)
        nxt_v = mdp.P[idx, 0] @ v0 if h < mdp.H else 0.0
        nxt_e = mdp.P[idx, 0] @ e_to if h < mdp.H else 0.0
        v0[idx] = mdp.r_mean[idx, 0] + nxt_v
        D = C_tab[idx] - v0[idx]
        e_step[idx] = tau_tab[idx] * (D - nxt_e)
        e_to[idx] = tau_tab[idx] * D + (1 - tau_tab[idx]) * nxt_e
    return v0, e_to, e_step


def bar_F_table(mdp, features, Q, tau_tab, C_tab, phi_bar=None):
    """Expected matrix correction at every state, by dynamic programming."""
    if phi_bar is None:
        phi_bar = phi_bar_table(mdp, features, Q)
    _, _, e_step = expected_corrections(mdp, tau_tab, C_tab)
    return np.einsum("si,sj,s->sij", phi_bar, phi_bar, e_step)


def bar_F_monte_carlo(mdp, features, Q, tau_tab, C_tab, s, n, seed, phi_bar=None):
    """Monte-Carlo mean and standard error of F at state ``s`` under the default policy."""
    from .mdp import MemorylessPolicy, rollout_batch

    if phi_bar is None:
        phi_bar = phi_bar_table(mdp, features, Q)
    U = np.random.default_rng(seed).random((n, mdp.H, N_UNIFORMS))
    st, _, rw = rollout_batch(mdp, MemorylessPolicy.default(mdp), U, start_state=s)
    _, e_step = correction_arrays(st, rw, tau_tab, C_tab)
    F = np.outer(phi_bar[s], phi_bar[s])[None] * e_step[:, 0, None, None]
    return F.mean(axis=0), F.std(axis=0, ddof=1) / math.sqrt(n)


def skippy_policy_value(mdp, tau_tab, aplus, k):
    """Exact values of the skipping policy with landing budget ``k``.

    Dynamic programming over (landings so far, state); ``V[0, 0]`` is the value
    at the initial state.
    """
    H, S = mdp.H, mdp.S
    V = np.zeros((H + 2, S))
    for h in range(H, 0, -1):
        idx = mdp.stage_states(h)
        for j in range(H + 1):
            a_land = np.where(j < k, aplus[idx], 0)
            q_land = mdp.r_mean[idx, a_land]
            q_skip = mdp.r_mean[idx, 0].copy()
            if h < H:
                q_land = q_land + mdp.P[idx, a_land] @ V[j + 1]
                q_skip = q_skip + mdp.P[idx, 0] @ V[j]
            V[j, idx] = tau_tab[idx] * q_land + (1 - tau_tab[idx]) * q_skip
    return V
