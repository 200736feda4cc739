"""Staged finite-horizon MDPs: model, exact evaluation and seeded simulation.

States carry a global index 0..S-1. Stage numbers are 1-based (stage 1 holds the
single initial state, stage H the last decision states). Action 0 is the default
action used by the skipping policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

# column layout of the per-stage uniform block used by every simulator
U_BERN, U_ACT, U_TRANS, U_REW = 0, 1, 2, 3
N_UNIFORMS = 4

ROW_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mdp:
    """Episodic MDP with ``H`` stages and ``A`` actions.

    Parameters
    ----------
    stage_sizes : sequence of int
        Number of states per stage; ``stage_sizes[0]`` must be 1.
    A : int
        Number of actions available in every state.
    P : ndarray, shape (S, A, S)
        Transition probabilities over global state indices. Rows of last-stage
        states are ignored (and should be zero).
    reward_values, reward_probs : ndarray, shape (S, A, K)
        Finite reward support and its probabilities (pad with probability 0).
    """

    stage_sizes: tuple
    A: int
    P: np.ndarray
    reward_values: np.ndarray
    reward_probs: np.ndarray
    name: str = "mdp"
    offsets: np.ndarray = field(init=False, repr=False)
    stage_of: np.ndarray = field(init=False, repr=False)
    r_mean: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(x) for x in self.stage_sizes)
        object.__setattr__(self, "stage_sizes", sizes)
        object.__setattr__(self, "A", int(self.A))
        rv = np.asarray(self.reward_values, dtype=float)
        rp = np.asarray(self.reward_probs, dtype=float)
        if rv.ndim == 2:
            rv, rp = rv[..., None], rp[..., None]
        object.__setattr__(self, "P", _frozen(self.P))
        object.__setattr__(self, "reward_values", _frozen(rv))
        object.__setattr__(self, "reward_probs", _frozen(rp))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        object.__setattr__(self, "offsets", _frozen(offsets, int))
        stage_of = np.repeat(np.arange(1, len(sizes) + 1), sizes)
        object.__setattr__(self, "stage_of", _frozen(stage_of, int))
        object.__setattr__(self, "r_mean", _frozen((rv * rp).sum(-1)))

    @property
    def H(self):
        return len(self.stage_sizes)

    @property
    def S(self):
        return int(self.offsets[-1])

    def stage_states(self, h):
        """Global indices of the states at 1-based stage ``h``."""
        return np.arange(self.offsets[h - 1], self.offsets[h])

    def state_id(self, stage, index):
        return int(self.offsets[stage - 1] + index)

    def stage_index(self, s):
        """(stage, index-within-stage) pair for global state ``s``."""
        h = int(self.stage_of[s])
        return h, int(s - self.offsets[h - 1])

    # cumulative tables shared by the simulators
    def sampling_tables(self):
        cache = self.__dict__.get("_tables")
        if cache is None:
            P_cdf = np.cumsum(self.P, axis=-1)
            last = P_cdf[..., -1:]
            P_cdf = np.where(last > 0, P_cdf / np.where(last > 0, last, 1.0), 0.0)
            R_cdf = np.cumsum(self.reward_probs, axis=-1)
            R_cdf = R_cdf / R_cdf[..., -1:]
            cache = (np.ascontiguousarray(P_cdf), np.ascontiguousarray(self.reward_values),
                     np.ascontiguousarray(R_cdf))
            object.__setattr__(self, "_tables", cache)
        return cache


def deterministic_rewards(r):
    """Point-mass reward support arrays from a mean table of shape (S, A)."""
    r = np.asarray(r, dtype=float)
    return r[..., None], np.ones(r.shape + (1,))


def bernoulli_rewards(r):
    """Rewards in {0, 1} with success probability ``r``."""
    r = np.asarray(r, dtype=float)
    vals = np.stack([np.zeros_like(r), np.ones_like(r)], axis=-1)
    probs = np.stack([1.0 - r, r], axis=-1)
    return vals, probs


@dataclass(frozen=True, eq=False)
class MemorylessPolicy:
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))

    @classmethod
    def deterministic(cls, actions, A):
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(A)[actions])

    @classmethod
    def default(cls, mdp):
        """The policy that always takes action 0."""
        return cls.deterministic(np.zeros(mdp.S, dtype=int), mdp.A)

    @classmethod
    def uniform(cls, mdp):
        return cls(np.full((mdp.S, mdp.A), 1.0 / mdp.A))


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    seed: object = None

    @property
    def total_reward(self):
        return float(self.rewards.sum())


@dataclass(frozen=True, eq=False)
class ValueTables:
    v: np.ndarray
    q: np.ndarray


def validate_mdp(mdp, reward_bound=1.0):
    """List the violated structural invariants of ``mdp`` (empty list = valid).

    Reward supports must lie in [0, reward_bound]; converted MDPs that bundle
    several stages into one step use a larger bound.
    """
    problems = []
    if mdp.H < 1 or mdp.stage_sizes[0] != 1:
        problems.append("stage 1 must contain exactly one state")
    if any(n < 1 for n in mdp.stage_sizes):
        problems.append("every stage needs at least one state")
    if mdp.A < 1:
        problems.append("need at least one action")
    S, A = mdp.S, mdp.A
    if mdp.P.shape != (S, A, S):
        problems.append(f"transition array has shape {mdp.P.shape}, expected {(S, A, S)}")
        return problems
    if np.any(mdp.P < 0):
        problems.append("negative transition probability")
    for s in range(S):
        h = int(mdp.stage_of[s])
        for a in range(A):
            row = mdp.P[s, a]
            if h < mdp.H:
                total = row.sum()
                if abs(total - 1.0) > ROW_TOL:
                    problems.append(f"transition row (state {s}, action {a}) sums to {total:.12g}")
                outside = np.delete(row, mdp.stage_states(h + 1))
                if np.any(outside != 0):
                    problems.append(f"transition row (state {s}, action {a}) leaves stage {h + 1}")
            elif np.any(row != 0):
                problems.append(f"last-stage state {s} has a transition row for action {a}")
    rv, rp = mdp.reward_values, mdp.reward_probs
    if np.any(rp < 0) or np.any(np.abs(rp.sum(-1) - 1.0) > ROW_TOL):
        problems.append("reward probabilities must be a distribution")
    bad = (rp > 0) & ((rv < 0) | (rv > reward_bound))
    for s, a in sorted({(int(i), int(j)) for i, j, _ in zip(*np.nonzero(bad))}):
        problems.append(f"reward support of (state {s}, action {a}) leaves [0, {reward_bound:g}]")
    return problems


def _check_sa(mdp, s, a):
    if not 0 <= s < mdp.S:
        raise IndexError(f"state {s} not in MDP")
    if not 0 <= a < mdp.A:
        raise IndexError(f"invalid action {a}")


def step_uniform(mdp, s, a, u_trans, u_rew):
    """Inverse-CDF step driven by two uniforms; next state is -1 at the last stage."""
    _check_sa(mdp, s, a)
    P_cdf, R_vals, R_cdf = mdp.sampling_tables()
    r = float(R_vals[s, a, np.searchsorted(R_cdf[s, a], u_rew, side="right")])
    if mdp.stage_of[s] == mdp.H:
        return -1, r
    return int(np.searchsorted(P_cdf[s, a], u_trans, side="right")), r


def step(mdp, s, a, rng):
    """Sample ``(next_state, reward)``; next_state is None at stage H."""
    u = rng.random(2)
    nxt, r = step_uniform(mdp, s, a, u[0], u[1])
    return (None if nxt < 0 else nxt), r


def episode_uniforms(seed, n, H):
    """Uniform block of shape (n, H, 4); row e drives episode e of the batch."""
    return np.random.default_rng(seed).random((n, H, N_UNIFORMS))


def rollout(mdp, policy, rng):
    """Simulate one episode. ``rng`` may be a Generator or an integer seed."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng)
    U = gen.random((1, mdp.H, N_UNIFORMS))
    states, actions, rewards = rollout_batch(mdp, policy, U)
    return Trajectory(states[0], actions[0], rewards[0], seed)


def rollout_batch(mdp, policy, U, start_state=None):
    """Simulate ``len(U)`` episodes from ``start_state`` (default: the initial state).

    Returns arrays (states, actions, rewards), each of shape (n, H - t0) where t0
    is the start stage minus one.
    """
    P_cdf, R_vals, R_cdf = mdp.sampling_tables()
    pi_cdf = np.cumsum(np.asarray(policy.probs, dtype=float), axis=1)
    pi_cdf = np.ascontiguousarray(pi_cdf / pi_cdf[:, -1:])
    s0 = 0 if start_state is None else int(start_state)
    t0 = int(mdp.stage_of[s0]) - 1
    U = np.ascontiguousarray(U[:, t0:, :], dtype=float)
    return _kernels.rollout_memoryless(P_cdf, R_vals, R_cdf, pi_cdf, s0, U)


def evaluate_policy_exact(mdp, policy):
    """Backward induction for q^pi and v^pi."""
    pi = np.asarray(policy.probs, dtype=float)
    q = np.zeros((mdp.S, mdp.A))
    v = np.zeros(mdp.S)
    for h in range(mdp.H, 0, -1):
        idx = mdp.stage_states(h)
        q[idx] = mdp.r_mean[idx]
        if h < mdp.H:
            q[idx] += mdp.P[idx] @ v
        v[idx] = (pi[idx] * q[idx]).sum(1)
    return ValueTables(v, q)


def optimal_values(mdp):
    """Optimal values and the greedy policy (ties go to the lowest action)."""
    q = np.zeros((mdp.S, mdp.A))
    v = np.zeros(mdp.S)
    for h in range(mdp.H, 0, -1):
        idx = mdp.stage_states(h)
        q[idx] = mdp.r_mean[idx]
        if h < mdp.H:
            q[idx] += mdp.P[idx] @ v
        v[idx] = q[idx].max(1)
    greedy = MemorylessPolicy.deterministic(q.argmax(1), mdp.A)
    return ValueTables(v, q), greedy
