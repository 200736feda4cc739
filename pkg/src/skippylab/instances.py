"""Instance generators for featurized episodic MDPs."""
from __future__ import annotations

import math

import numpy as np

from .features import FeatureTable
from .mdp import Mdp, bernoulli_rewards, deterministic_rewards


def _blank(stage_sizes, A):
    S = int(sum(stage_sizes))
    return np.zeros((S, A, S)), np.zeros((S, A))


def two_path():
    """Two-path example: both actions at the start state return exactly 1.

    States: 0 = start, 1 and 2 at stage 2, 3 at stage 3. Action 0 leads to
    state 1 with reward 1, action 1 to state 2 with reward 0.5; state 2 pays 0.5
    more, state 1 nothing. One-dimensional features 1, 0, 0.5, 0.
    """
    sizes = (1, 2, 1)
    P, r = _blank(sizes, 2)
    P[0, 0, 1] = P[0, 1, 2] = 1.0
    P[1, :, 3] = P[2, :, 3] = 1.0
    r[0] = (1.0, 0.5)
    r[2] = (0.5, 0.5)
    vals, probs = deterministic_rewards(r)
    mdp = Mdp(sizes, 2, P, vals, probs, name="two_path")
    phi = np.zeros((4, 2, 1))
    phi[0] = 1.0
    phi[2] = 0.5
    return mdp, FeatureTable(phi, L1=1.0, L2=1.0)


def tabular(H=3, states_per_stage=2, A=2, seed=0, reward="bernoulli"):
    """Random MDP with one-hot (state, action) features within each stage."""
    rng = np.random.default_rng(seed)
    sizes = (1,) + (states_per_stage,) * (H - 1)
    P, r = _blank(sizes, A)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for h in range(H - 1):
        nxt = np.arange(offsets[h + 1], offsets[h + 2])
        for s in range(offsets[h], offsets[h + 1]):
            P[s][:, nxt] = rng.dirichlet(np.ones(len(nxt)), size=A)
    r[:] = rng.uniform(0, 1, size=r.shape)
    mdp = Mdp(sizes, A, P, *_rewards(r, reward), name="tabular")
    d = max(sizes) * A
    phi = np.zeros((mdp.S, A, d))
    for s in range(mdp.S):
        h, i = mdp.stage_index(s)
        for a in range(A):
            phi[s, a, i * A + a] = 1.0
    return mdp, FeatureTable(phi, L1=1.0, L2=H * math.sqrt(d))


def _rewards(r, kind):
    if kind == "bernoulli":
        return bernoulli_rewards(r)
    if kind == "deterministic":
        return deterministic_rewards(r)
    raise ValueError(f"unknown reward kind {kind!r}")


def _simplex_features(rng, n, A, d, concentration):
    return rng.dirichlet(np.full(d, concentration), size=(n, A))


def random_linear(d=2, H=3, A=2, states_per_stage=3, seed=0, reward="bernoulli",
                  concentration=0.5):
    """Linear MDP with simplex features and a nonnegative mixture factorisation.

    P(s' | s, a) = sum_k phi_k(s, a) mu_k(s') and E[R(s, a)] = <phi(s, a), theta_r>.
    """
    rng = np.random.default_rng(seed)
    sizes = (1,) + (states_per_stage,) * (H - 1)
    P, r = _blank(sizes, A)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    phi = np.zeros((int(offsets[-1]), A, d))
    theta_r = rng.uniform(0, 1, size=d)
    for h in range(H):
        idx = np.arange(offsets[h], offsets[h + 1])
        phi[idx] = _simplex_features(rng, len(idx), A, d, concentration)
        r[idx] = phi[idx] @ theta_r
        if h < H - 1:
            nxt = np.arange(offsets[h + 1], offsets[h + 2])
            mu = rng.dirichlet(np.ones(len(nxt)), size=d)        # (d, n_next)
            P[np.ix_(idx, range(A), nxt)] = phi[idx] @ mu
    mdp = Mdp(sizes, A, P, *_rewards(r, reward), name="random_linear")
    return mdp, FeatureTable(phi, L1=1.0, L2=H * math.sqrt(d))


def padded_layout(H, chain):
    """Stage kinds: 'core' at stage 1 and H, blocks of ``chain`` padding stages between cores."""
    kinds = ["core"]
    while len(kinds) < H:
        room = H - len(kinds) - 1
        kinds += ["chain"] * min(chain, room) + ["core"]
    return kinds[:H]


def padded_linear(d=2, H=5, chain=2, A=2, core_states=3, seed=0, reward="bernoulli",
                  concentration=0.5):
    """Linear MDP whose core stages are separated by zero-range padding chains.

    Leaving a core state moves to padding group k with probability phi_k(s, a).
    A padding state of group k has feature e_k for every action and pays the
    group reward rho_k, but which copy of the next padding stage is entered
    depends on the action, so transitions are not linear in the features while
    all action values stay realizable. The last padding stage of group k leads
    to the next core stage with distribution mu_k.
    """
    rng = np.random.default_rng(seed)
    kinds = padded_layout(H, chain)
    theta_r = rng.uniform(0, 1, size=d)
    rho = rng.uniform(0, 0.5, size=d)
    sizes = []
    for h, kind in enumerate(kinds):
        if kind == "core":
            sizes.append(1 if h == 0 else core_states)
        else:
            first = h == 0 or kinds[h - 1] == "core"
            sizes.append(d if first else d * A)
    sizes = tuple(sizes)
    P, r = _blank(sizes, A)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    S = int(offsets[-1])
    phi = np.zeros((S, A, d))
    group = {}
    for h, kind in enumerate(kinds):
        idx = np.arange(offsets[h], offsets[h + 1])
        if kind == "core":
            phi[idx] = _simplex_features(rng, len(idx), A, d, concentration)
            r[idx] = phi[idx] @ theta_r
        else:
            for n, s in enumerate(idx):
                k = n if sizes[h] == d else n // A
                group[s] = k
                phi[s, :, k] = 1.0
                r[s] = rho[k]
    # mixture components into each core stage after the first
    mu = {h: rng.dirichlet(np.ones(sizes[h]), size=d) for h, kind in enumerate(kinds)
          if kind == "core" and h > 0}
    for h in range(H - 1):
        idx = np.arange(offsets[h], offsets[h + 1])
        nxt = np.arange(offsets[h + 1], offsets[h + 2])
        if kinds[h] == "core":
            if kinds[h + 1] == "core":
                P[np.ix_(idx, range(A), nxt)] = phi[idx] @ mu[h + 1]
            else:
                # enter group k of the first padding stage
                P[np.ix_(idx, range(A), nxt)] = phi[idx]
        else:
            for s in idx:
                k = group[s]
                if kinds[h + 1] == "core":
                    P[s][:, nxt] = mu[h + 1][k]
                else:
                    for a in range(A):
                        P[s, a, nxt[k * A + a]] = 1.0
    mdp = Mdp(sizes, A, P, *_rewards(r, reward), name="padded_linear")
    return mdp, FeatureTable(phi, L1=1.0, L2=H * math.sqrt(d))


def zero_range(H=3, states_per_stage=2, A=2, seed=0, reward="bernoulli"):
    """Every action of a state shares its feature vector, transitions and rewards."""
    rng = np.random.default_rng(seed)
    sizes = (1,) + (states_per_stage,) * (H - 1)
    P, r = _blank(sizes, A)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for h in range(H - 1):
        nxt = np.arange(offsets[h + 1], offsets[h + 2])
        for s in range(offsets[h], offsets[h + 1]):
            P[s][:, nxt] = rng.dirichlet(np.ones(len(nxt)))
    r[:] = rng.uniform(0, 1, size=(r.shape[0], 1))
    mdp = Mdp(sizes, A, P, *_rewards(r, reward), name="zero_range")
    d = max(sizes)
    phi = np.zeros((mdp.S, A, d))
    for s in range(mdp.S):
        phi[s, :, mdp.stage_index(s)[1]] = 1.0
    return mdp, FeatureTable(phi, L1=1.0, L2=H * math.sqrt(d))


GENERATORS = {
    "two_path": two_path,
    "tabular": tabular,
    "random_linear": random_linear,
    "padded_linear": padded_linear,
    "zero_range": zero_range,
}


def make(name, **params):
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(**params)
