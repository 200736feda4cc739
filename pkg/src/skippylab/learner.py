"""Optimistic skipping learner: data collection, least squares, consistency checks."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import (Preconditioning, append_direction, compute_near_optimal_design,
                       validate_preconditioning, z_projector)
from .mdp import N_UNIFORMS
from .skippy import (Guess, correct_guess, phi_bar_table, pi_plus_table, run_skippy_batch,
                     skippy_policy_value, tau_table)


@dataclass
class LearnerConfig:
    eps: float
    zeta: float
    constants: object                  # ConstantSet
    opt1: str = "search"               # "search" | "oracle"
    theta_samples: list | None = None  # per-stage parameter samples, needed by oracle mode and audits
    restarts: int = 32
    iterations: int = 8
    seed: int = 0
    episode_cap: int = 1_000_000
    log_path: str | None = None

    def __post_init__(self):
        if not (0 < self.eps < 1 and 0 < self.zeta < 1):
            raise ValueError("eps and zeta must lie in (0, 1)")
        if self.restarts < 1 or self.iterations < 0 or self.episode_cap < 1:
            raise ValueError("budgets must be positive")
        if self.opt1 not in ("oracle", "search"):
            raise ValueError(f"unknown opt1 mode {self.opt1!r}")
        if self.opt1 == "oracle" and self.theta_samples is None:
            raise ValueError("oracle mode needs per-stage parameter samples")


# ------------------------------------------------------------------ data

class DataStore:
    """Skipping-policy episodes with their stage maps, one row per episode."""

    def __init__(self, H):
        self.H = H
        self.states = np.zeros((0, H), dtype=np.int64)
        self.actions = np.zeros((0, H), dtype=np.int64)
        self.rewards = np.zeros((0, H))
        self.pmap = np.zeros((0, H), dtype=np.int64)
        self.k = np.zeros(0, dtype=np.int64)
        self.iteration = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.k)

    def extend(self, batch):
        for name in ("states", "actions", "rewards", "pmap", "k", "iteration"):
            setattr(self, name, np.concatenate([getattr(self, name), getattr(batch, name)]))

    @property
    def landing(self):
        """Stage of the k-th landing of every row (H+1 when saturated)."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        return self.pmap[np.arange(len(self)), self.k - 1]

    def index_set(self, t, before=None):
        rows = self.landing == t
        if before is not None:
            rows &= self.iteration < before
        return np.flatnonzero(rows)

    def tails(self):
        return np.cumsum(self.rewards[:, ::-1], axis=1)[:, ::-1]


def collect_iteration(mdp, tau_tab, aplus, n, seed, m_prime, iteration):
    """n episodes for every landing budget k = 1..H, seeded by (seed, m', k)."""
    H = mdp.H
    out = DataStore(H)
    for k in range(1, H + 1):
        U = np.random.default_rng([seed, m_prime, k]).random((n, H, N_UNIFORMS))
        st, ac, rw, _, pm = run_skippy_batch(mdp, tau_tab, aplus, k, U)
        part = DataStore(H)
        part.states, part.actions, part.rewards, part.pmap = st, ac, rw, pm
        part.k = np.full(n, k, dtype=np.int64)
        part.iteration = np.full(n, iteration, dtype=np.int64)
        out.extend(part)
    return out


def lsq_target(states, rewards, t, tau_tab, C_tab):
    """Reward tail from stage t plus the correction term of the suffix from t+1."""
    states = np.asarray(states)
    rewards = np.asarray(rewards, dtype=float)
    e_to, _ = _kernels.suffix_corrections(states[None, t:], rewards[None, t:], tau_tab, C_tab)
    return float(rewards[t - 1:].sum() + e_to[0, 0])


# ------------------------------------------------------------------ least squares

@dataclass
class LsState:
    """Per-stage design rows and regularised Gram matrices of the stored data."""

    lam: float
    rows: list        # stage t-1 -> row indices into the store
    Phi: list         # stage t-1 -> (n_t, d) covariates
    X: np.ndarray     # (H, d, d)
    X_inv: np.ndarray

    @classmethod
    def build(cls, mdp, features, store, lam):
        H, d = mdp.H, features.d
        rows, Phi = [], []
        X = np.zeros((H, d, d))
        for t in range(1, H + 1):
            r = store.index_set(t)
            P = features.phi[store.states[r, t - 1], store.actions[r, t - 1]]
            rows.append(r)
            Phi.append(P)
            X[t - 1] = lam * np.eye(d) + P.T @ P
        return cls(lam, rows, Phi, X, np.linalg.inv(X))

    def theta_hat(self, t, y):
        return self.X_inv[t - 1] @ (self.Phi[t - 1].T @ y)

    def uncertainty(self, t, phi):
        return np.sqrt(np.einsum("ni,ij,nj->n", phi, self.X_inv[t - 1], phi))


def ridge_targets(store, tau_tab, C_tab):
    """Least-squares target of every stored row at its landing stage (nan when saturated)."""
    if len(store) == 0:
        return np.zeros(0)
    e_to, _ = _kernels.suffix_corrections(store.states, store.rewards, tau_tab, C_tab)
    tail = store.tails()
    land = store.landing
    out = np.full(len(store), np.nan)
    ok = land <= store.H
    r = np.flatnonzero(ok)
    out[r] = tail[r, land[r] - 1] + e_to[r, land[r]]
    return out


def matrix_lse(ls, store, t, i, phi_bar, e_step):
    """Ridge coefficients for the matrix targets F at stage i, regressed on stage-t covariates.

    Returns a (d, d, d) array; the prediction at covariate x is ``x @ coef``.
    """
    r = ls.rows[t - 1]
    d = ls.X.shape[1]
    if len(r) == 0:
        return np.zeros((d, d, d))
    pb = phi_bar[store.states[r, i - 1]]
    rhs = np.einsum("li,la,lb,l->iab", ls.Phi[t - 1], pb, pb, e_step[r, i - 1])
    return np.einsum("ij,jab->iab", ls.X_inv[t - 1], rhs)


# ------------------------------------------------------------------ optimistic estimation

@dataclass
class OptResult:
    guess: Guess
    theta_bar: np.ndarray      # (H, d)
    theta_hat: np.ndarray      # (H, d)
    tau: np.ndarray            # (S,)
    aplus: np.ndarray
    C: np.ndarray              # (S,)
    value: float               # clipped optimistic value at the initial state
    slack: np.ndarray          # (H,) beta*H - ||theta_bar - theta_hat||_X
    flag: str


def _stage_weights(mdp, store, t, tau_tab):
    idx = mdp.stage_states(t)
    if len(store):
        counts = np.bincount(store.states[:, t - 1], minlength=mdp.S)[idx].astype(float)
    else:
        counts = np.zeros(len(idx))
    w = counts * tau_tab[idx]
    if w.sum() <= 0:
        w = np.ones(len(idx))
    return idx, w / w.sum()


def optimistic_pass(mdp, features, store, ls, tau_tab, consts):
    """Backward pass over stages choosing each theta_bar inside its confidence ellipsoid.

    Candidates at stage t are the ridge estimate and its shifts by beta*H along
    X^-1 phi for every (state, action) of the stage; the candidate with the
    largest weighted clipped greedy value is kept.
    """
    H, d = mdp.H, features.d
    bonus = consts.beta * H
    radius = consts.theta_bar_radius
    theta_bar = np.zeros((H, d))
    theta_hat = np.zeros((H, d))
    C = np.zeros(mdp.S)
    slack = np.zeros(H)
    for t in range(H, 0, -1):
        y = ridge_targets(store, tau_tab, C)
        th = ls.theta_hat(t, y[ls.rows[t - 1]]) if len(ls.rows[t - 1]) else np.zeros(d)
        Xi = ls.X_inv[t - 1]
        idx, w = _stage_weights(mdp, store, t, tau_tab)
        cand = [th]
        for s in idx:
            for a in range(mdp.A):
                g = Xi @ features.phi[s, a]
                nrm = math.sqrt(max(features.phi[s, a] @ g, 0.0))
                if nrm > 0:
                    cand.append(th + bonus * g / nrm)
        cand = np.array(cand)
        norms = np.linalg.norm(cand, axis=1, keepdims=True)
        cand = np.where(norms > radius, cand * radius / np.maximum(norms, 1e-300), cand)
        vals = np.clip((features.phi[idx] @ cand.T).max(axis=1), 0, H)   # (n_idx, n_cand)
        best = int(np.argmax(w @ vals))
        theta_bar[t - 1] = cand[best]
        theta_hat[t - 1] = th
        diff = cand[best] - th
        slack[t - 1] = bonus - math.sqrt(max(diff @ ls.X[t - 1] @ diff, 0.0))
        _, Cs = pi_plus_table(mdp, features, theta_bar)
        C[idx] = Cs[idx]
    aplus, C = pi_plus_table(mdp, features, theta_bar)
    return theta_bar, theta_hat, aplus, C, slack


def oracle_guess(mdp, consts, Q, samples, cache=None):
    """Correct guess: the design supports of the preconditioned parameter samples."""
    key = tuple(Q.counts())
    if cache is not None and key in cache:
        return cache[key]
    designs = {}
    for h in range(2, mdp.H + 1):
        pts = np.atleast_2d(samples[h - 1]) @ Q.inverse(h)
        designs[h] = compute_near_optimal_design(pts, consts.d0, stage=h)
    guess = correct_guess(designs, mdp.H, consts.d0, consts.d)
    if cache is not None:
        cache[key] = guess
    return guess


def _evaluate_guess(mdp, features, store, ls, Q, consts, eps, guess):
    tau_tab = tau_table(mdp, features, guess, Q, eps)
    tb, th, aplus, C, slack = optimistic_pass(mdp, features, store, ls, tau_tab, consts)
    return OptResult(guess, tb, th, tau_tab, aplus, C, float(C[0]), slack, "")


def _random_guess(rng, H, d0, d, radius):
    v = rng.normal(size=(H + 1, d0, d))
    v *= radius * rng.uniform(0, 1, size=(H + 1, d0, 1)) / np.linalg.norm(v, axis=-1, keepdims=True)
    v[:2] = 0.0
    return Guess(v)


def _better(a, b, tol=1e-12):
    """Higher optimistic value wins; near-ties go to the guess that skips less."""
    if a.value > b.value + tol:
        return True
    return a.value >= b.value - tol and a.tau.sum() > b.tau.sum()


def solve_optimistic(mdp, features, store, ls, Q, config, cache=None):
    consts = config.constants
    if config.opt1 == "oracle":
        guess = oracle_guess(mdp, consts, Q, config.theta_samples, cache)
        res = _evaluate_guess(mdp, features, store, ls, Q, consts, config.eps, guess)
        res.flag = "oracle"
    else:
        rng = np.random.default_rng([config.seed, len(store), 7])
        radius = consts.guess_radius
        best = _evaluate_guess(mdp, features, store, ls, Q, consts, config.eps,
                               Guess.zeros(mdp.H, consts.d0, consts.d))
        for _ in range(config.restarts):
            cur = _evaluate_guess(mdp, features, store, ls, Q, consts, config.eps,
                                  _random_guess(rng, mdp.H, consts.d0, consts.d, radius))
            for _ in range(config.iterations):
                h = int(rng.integers(2, mdp.H + 1)) if mdp.H >= 2 else 1
                vec = cur.guess.vectors.copy()
                vec[h] = _random_guess(rng, mdp.H, consts.d0, consts.d, radius).vectors[h]
                trial = _evaluate_guess(mdp, features, store, ls, Q, consts, config.eps, Guess(vec))
                if _better(trial, cur):
                    cur = trial
            if _better(cur, best):
                best = cur
        res = best
        res.flag = "search-optimum"
    if np.any(res.slack < -1e-7 * consts.beta * mdp.H):
        raise AssertionError(f"optimistic parameters infeasible: slack {res.slack}")
    return res


# ------------------------------------------------------------------ consistency

@dataclass
class ConsistencyStats:
    y: np.ndarray        # (H+1, H+1, d, d) indexed [k, i]
    F_hat: np.ndarray
    sigma: np.ndarray    # (H+1,) indexed by k; entry 0 unused
    terms: dict = field(default_factory=dict)   # (k, i) -> (n, d, d) per-episode prediction minus F


@dataclass
class ConsistencyResult:
    x: float
    v: np.ndarray
    i: int
    k: int
    w: np.ndarray
    M: np.ndarray
    projection_gap: float
    std_error: float = 0.0   # standard error of v^T M v across the episodes of the batch


def consistency_stats(mdp, features, store, batch, ls, opt, Q, consts, n):
    H, d = mdp.H, features.d
    phi_bar = phi_bar_table(mdp, features, Q)
    cap = consts.sigma_cap
    _, e_store = (_kernels.suffix_corrections(store.states, store.rewards, opt.tau, opt.C)
                  if len(store) else (None, np.zeros((0, H))))
    _, e_batch = _kernels.suffix_corrections(batch.states, batch.rewards, opt.tau, opt.C)
    coef = {}
    for i in range(2, H + 1):
        for t in range(1, i):
            coef[t, i] = matrix_lse(ls, store, t, i, phi_bar, e_store)
    y = np.zeros((H + 1, H + 1, d, d))
    F_hat = np.zeros_like(y)
    sigma = np.zeros(H + 1)
    terms = {}
    land = batch.landing
    for k in range(1, H + 1):
        rows = np.flatnonzero(batch.k == k)
        pk = land[rows]
        live = pk <= H
        phi = np.zeros((len(rows), d))
        unc = np.full(len(rows), np.inf)
        nonneg = np.zeros(len(rows), dtype=bool)
        for t in np.unique(pk[live]):
            sel = np.flatnonzero(pk == t)
            r = rows[sel]
            phi[sel] = features.phi[batch.states[r, t - 1], batch.actions[r, t - 1]]
            unc[sel] = ls.uncertainty(t, phi[sel])
            nonneg[sel] = phi[sel] @ opt.theta_bar[t - 1] >= 0
        sigma[k] = np.where(live, np.minimum(cap, np.where(live, unc, 0.0)), 0.0).sum() / n
        for i in range(k + 1, H + 1):
            c = (pk < i) & (unc < cap) & nonneg
            D = np.zeros((n, d, d))
            if c.any():
                sel = np.flatnonzero(c)
                pred = np.stack([phi[j] @ coef[int(pk[j]), i] for j in sel])
                r = rows[sel]
                pb = phi_bar[batch.states[r, i - 1]]
                F = np.einsum("la,lb,l->lab", pb, pb, e_batch[r, i - 1])
                y[k, i] = pred.sum(0) / n
                F_hat[k, i] = F.sum(0) / n
                D[: len(sel)] = pred - F
            terms[k, i] = D
    return ConsistencyStats(y, F_hat, sigma, terms)


def _top_eig(M):
    w, U = np.linalg.eigh(M)
    v = U[:, -1]
    j = int(np.argmax(np.abs(v)))
    return float(w[-1]), v * np.sign(v[j])


def solve_consistency(stats, Q):
    H = stats.y.shape[0] - 1
    d = stats.y.shape[-1]
    best = None
    for k in range(1, H):
        for i in range(k + 1, H + 1):
            M = stats.y[k, i] - stats.F_hat[k, i]
            M = 0.5 * (M + M.T)
            if not np.any(M):
                x, v = 0.0, np.eye(d)[0]
            else:
                x, v = _top_eig(M)
            if best is None or x > best[0]:
                best = (x, v, k, i, M)
    if best is None:
        # H = 1: nothing to compare
        return ConsistencyResult(0.0, np.eye(d)[0], 1, 1, np.eye(d)[0], np.zeros((d, d)), 0.0)
    x, v, k, i, M = best
    w = z_projector(Q, i) @ v
    gap = float(v @ M @ v - w @ M @ w)
    se = 0.0
    D = stats.terms.get((k, i))
    if D is not None and len(D) > 1:
        se = float(np.einsum("a,jab,b->j", v, D, v).std(ddof=1) / math.sqrt(len(D)))
    return ConsistencyResult(x, v, i, k, w, M, gap, se)


# ------------------------------------------------------------------ main loop

@dataclass
class LearnerResult:
    guess: Guess
    theta_bar: np.ndarray
    k: int
    Q: Preconditioning
    tau: np.ndarray
    aplus: np.ndarray
    value: float                  # exact value of the returned policy at the initial state
    optimistic_value: float
    terminated_by: str
    episodes: int
    q_updates: int
    log: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def run_skippy_eleanor(mdp, features, config):
    consts = config.constants
    H, d = mdp.H, features.d
    n = consts.n
    Q = Preconditioning.initial(H, d, features.L2, consts.L3, d1=consts.d1)
    store = DataStore(H)
    cache = {}
    log = []
    audit = {"max_m": 0, "max_m_prime": 0, "q_counts_ok": True, "precond_ok": True,
             "projection_ok": True, "projection_worst": -np.inf, "feasible": True, "pass_C": []}
    sink = open(config.log_path, "w") if config.log_path else None

    def emit(rec):
        log.append(rec)
        if sink:
            sink.write(json.dumps(rec, default=_jsonable) + "\n")

    m = m_prime = 0
    episodes = q_updates = 0
    terminated_by = "m_prime_max"
    opt = None
    try:
        while m_prime <= consts.m_prime_max:
            m += 1
            m_prime += 1
            if m > consts.m_max:
                raise AssertionError(f"m = {m} exceeds m_max = {consts.m_max}")
            audit["max_m"] = max(audit["max_m"], m)
            audit["max_m_prime"] = m_prime
            t0 = time.perf_counter()
            ls = LsState.build(mdp, features, store, consts.lam)
            opt = solve_optimistic(mdp, features, store, ls, Q, config, cache)
            batch = collect_iteration(mdp, opt.tau, opt.aplus, n, config.seed, m_prime, m)
            episodes += len(batch)
            stats = consistency_stats(mdp, features, store, batch, ls, opt, Q, consts, n)
            res = solve_consistency(stats, Q)
            if res.projection_gap > consts.projection_tolerance + 1e-9:
                audit["projection_ok"] = False
            audit["projection_worst"] = max(audit["projection_worst"], res.projection_gap)
            threshold = consts.discrepancy_threshold(stats.sigma[res.k])
            rec = {"event": "iteration", "m": m, "m_prime": m_prime, "C": opt.value, "x": res.x,
                   "k": res.k, "i": res.i, "threshold": threshold, "std_error": res.std_error,
                   "sigma_k": float(stats.sigma[res.k]), "v": res.v, "w": res.w,
                   "projection_gap": res.projection_gap, "sigma": stats.sigma[1:],
                   "sum_sigma": float(stats.sigma.sum()), "episodes": episodes,
                   "opt1": opt.flag, "min_slack": float(opt.slack.min())}
            if res.x > threshold and np.linalg.norm(res.w) > 1e-12:
                Q = append_direction(Q, res.i, res.w)
                q_updates += 1
                if max(Q.counts()) > consts.d1:
                    audit["q_counts_ok"] = False
                valid = None
                if config.theta_samples is not None:
                    rep = validate_preconditioning(Q, config.theta_samples, consts.d1)
                    valid = rep.valid
                    audit["precond_ok"] &= rep.valid
                m -= 1
                # the batch is dropped, never stored; only its size is logged
                rec.update(branch="q_update", stage=res.i, w_norm=float(np.linalg.norm(res.w)),
                           valid=valid, counts=Q.counts(), discarded=len(batch))
                rec["wall"] = time.perf_counter() - t0
                emit(rec)
            else:
                store.extend(batch)
                passed = stats.sigma.sum() <= consts.uncertainty_threshold
                rec.update(branch="return" if passed else "continue")
                audit["pass_C"].append(opt.value)
                rec["wall"] = time.perf_counter() - t0
                emit(rec)
                if passed:
                    terminated_by = "uncertainty"
                    break
            if episodes >= config.episode_cap:
                terminated_by = "episode_cap"
                break
        if opt is None:
            raise RuntimeError("no iteration ran")
        value = float(skippy_policy_value(mdp, opt.tau, opt.aplus, H)[0, 0])
        emit({"event": "final", "terminated_by": terminated_by, "value": value,
              "C": opt.value, "episodes": episodes, "q_updates": q_updates,
              "theta_bar": opt.theta_bar, "k": H, "q_counts": Q.counts()})
    finally:
        if sink:
            sink.close()
    return LearnerResult(opt.guess, opt.theta_bar, H, Q, opt.tau, opt.aplus, value, opt.value,
                         terminated_by, episodes, q_updates, log, audit)
