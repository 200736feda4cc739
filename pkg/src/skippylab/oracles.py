"""Brute-force and statistical verifiers."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureTable, chebyshev_fit, fit_stage_batch, range_table
from .geometry import design_size
from .mdp import Mdp, MemorylessPolicy, deterministic_rewards, evaluate_policy_exact, validate_mdp

POLICY_CAP = 2 ** 20


# ------------------------------------------------------------------ enumeration

@dataclass(frozen=True, eq=False)
class PolicyEnumeration:
    """All deterministic memoryless policies with exact values and fitted parameters.

    ``thetas[p, h-1]`` is the fitted parameter of policy p at stage h.
    ``samples[h-1]`` holds the distinct stage-h parameters and
    ``representatives[h-1][i]`` a policy index producing ``samples[h-1][i]``.
    """

    policies: np.ndarray     # (P, S) action per state
    q: np.ndarray            # (P, S, A)
    v: np.ndarray            # (P, S)
    thetas: np.ndarray       # (P, H, d)
    errors: np.ndarray       # (P, H)
    samples: list
    representatives: list

    @property
    def count(self):
        return len(self.policies)

    @property
    def eta(self):
        return float(self.errors.max())

    def policy(self, p, A):
        return MemorylessPolicy.deterministic(self.policies[p], A)


def enumerate_policies(mdp, features, cap=POLICY_CAP):
    """Exhaustive evaluation of the A**S deterministic policies (batched backward induction)."""
    S, A, H = mdp.S, mdp.A, mdp.H
    count = A ** S
    if count > cap:
        raise ValueError(f"{count} policies exceed the enumeration cap {cap}")
    # policy p takes action digit_s(p) in base A, state 0 most significant
    pol = np.array(list(itertools.product(range(A), repeat=S)), dtype=np.int64).reshape(count, S)
    q = np.zeros((count, S, A))
    v = np.zeros((count, S))
    rows = np.arange(count)
    for h in range(H, 0, -1):
        idx = mdp.stage_states(h)
        q[:, idx, :] = mdp.r_mean[idx][None]
        if h < H:
            q[:, idx, :] += np.einsum("pt,nat->pna", v, mdp.P[idx])
        v[:, idx] = q[rows[:, None], idx[None, :], pol[:, idx]]
    thetas = np.zeros((count, H, features.d))
    errors = np.zeros((count, H))
    samples, reps = [], []
    for h in range(1, H + 1):
        idx = mdp.stage_states(h)
        Phi = features.stage_matrix(mdp, h)
        Y = q[:, idx, :].reshape(count, -1)
        # values at stage h depend only on later-stage actions; fit each distinct row once
        uniq, first, inv = np.unique(np.round(Y, 12), axis=0, return_index=True, return_inverse=True)
        th, err, _ = fit_stage_batch(Phi, Y[first], features.L2)
        inv = np.asarray(inv).ravel()
        thetas[:, h - 1] = th[inv]
        errors[:, h - 1] = err[inv]
        _, keep = np.unique(np.round(th, 12), axis=0, return_index=True)
        keep = np.sort(keep)
        samples.append(th[keep])
        reps.append(first[keep])
    return PolicyEnumeration(pol, q, v, thetas, errors, samples, reps)


def random_policies(mdp, n, seed):
    rng = np.random.default_rng(seed)
    return [MemorylessPolicy(rng.dirichlet(np.ones(mdp.A), size=mdp.S)) for _ in range(n)]


# ------------------------------------------------------------------ admissible realizability

@dataclass
class AdmissibilityReport:
    admissible: bool
    max_error: float          # max |E f(S_h) - <phi, theta_tilde>| over (s, a, t < h)
    error_bound: float        # eta0
    theta_norm: float
    norm_bound: float
    passed: bool
    details: dict = field(default_factory=dict)


def _pushforward(mdp, policy_probs, h, f):
    """E[f(S_h) | S_t = s, A_t = a] for every stage t < h, as an (S, A) table."""
    g = np.zeros((mdp.S, mdp.A))
    val = np.zeros(mdp.S)
    val[mdp.stage_states(h)] = f
    for t in range(h - 1, 0, -1):
        idx = mdp.stage_states(t)
        g[idx] = mdp.P[idx] @ val
        val = val.copy()
        val[idx] = (policy_probs[idx] * g[idx]).sum(1)
    return g


def verify_admissible_realizability(mdp, features, h, f, alpha, Q, design, enum, prefix,
                                    eta=0.0, tol=1e-8):
    """Build the paired policies of the admissible-realizability construction and check the fit.

    ``design`` is a near-optimal design over the stage-h sample of ``enum``
    (preconditioned by ``Q``); ``prefix`` is the memoryless policy followed before
    stage h; ``f`` gives one value per stage-h state.
    """
    idx = mdp.stage_states(h)
    f = np.asarray(f, dtype=float)
    Qh = Q.matrix(h)
    pols = enum.representatives[h - 1][design.support]
    d0 = design_size(features.d)

    # admissibility against range_Q
    phiQ = features.phi[idx] @ Qh
    vals = phiQ @ design.points.T if design.size else np.zeros((len(idx), mdp.A, 0))
    rangeQ = np.maximum((vals.max(1) - vals.min(1)).max(-1, initial=0.0), 0.0) if design.size \
        else np.zeros(len(idx))
    admissible = bool(np.all(np.abs(f) <= rangeQ / alpha + 1e-12))

    K = len(pols)
    qk = enum.q[pols][:, idx, :]                          # (K, n, A)
    spreads = qk.max(-1) - qk.min(-1)                     # (K, n)
    order = np.argmax(spreads, axis=0) if K else np.zeros(len(idx), int)
    probs = np.asarray(prefix.probs, dtype=float)
    theta_tilde = np.zeros((h - 1, features.d))
    for k in range(K):
        base = np.eye(mdp.A)[enum.policies[pols[k]]]      # G_k as a probability table
        plus, minus = base.copy(), base.copy()
        earlier = np.flatnonzero(mdp.stage_of < h)
        plus[earlier] = minus[earlier] = probs[earlier]
        for n, s in enumerate(idx):
            if order[n] != k:
                continue
            qs = qk[k, n]
            if f[n] >= 0:
                a_hi, a_lo = int(np.argmax(qs)), int(np.argmin(qs))
            else:
                a_hi, a_lo = int(np.argmin(qs)), int(np.argmax(qs))
            gap = qs[a_hi] - qs[a_lo]
            fprime = 0.0
            if f[n] != 0 and alpha * abs(f[n]) >= 4 * eta and gap != 0:
                fprime = alpha * f[n] / 2 / gap
            plus[s] = 0.0
            plus[s, a_hi] += fprime
            plus[s, a_lo] += 1 - fprime
            minus[s] = np.eye(mdp.A)[a_lo]
        qp = evaluate_policy_exact(mdp, MemorylessPolicy(plus)).q
        qm = evaluate_policy_exact(mdp, MemorylessPolicy(minus)).q
        for t in range(1, h):
            Phi = features.stage_matrix(mdp, t)
            sidx = mdp.stage_states(t)
            tp, _, _ = chebyshev_fit(Phi, qp[sidx].ravel(), features.L2)
            tm, _, _ = chebyshev_fit(Phi, qm[sidx].ravel(), features.L2)
            theta_tilde[t - 1] += 2 / alpha * (tp - tm)

    target = _pushforward(mdp, probs, h, f)
    max_err = 0.0
    for t in range(1, h):
        sidx = mdp.stage_states(t)
        pred = features.phi[sidx] @ theta_tilde[t - 1]
        max_err = max(max_err, float(np.abs(pred - target[sidx]).max()))
    eta0 = 5 * d0 * eta / alpha
    nrm = float(np.linalg.norm(theta_tilde, axis=1).max(initial=0.0))
    bound = 4 * d0 * features.L2 / alpha
    passed = admissible and max_err <= eta0 + tol and nrm <= bound
    return AdmissibilityReport(admissible, max_err, eta0, nrm, bound, passed,
                               {"policies": K, "theta_tilde": theta_tilde})


# ------------------------------------------------------------------ skip conversion

@dataclass(frozen=True, eq=False)
class ConvertedMdp:
    mdp: Mdp
    features: FeatureTable
    origin: np.ndarray          # original state of each converted state, -1 for episode-over
    kept: np.ndarray            # boolean mask over original states
    episode_over: np.ndarray    # converted indices of the episode-over copies
    kappa: float = 0.0
    reward_residual: float = 0.0
    transition_residual: float = 0.0


def _landing(mdp, kept):
    """Distribution of the first kept state reached from each state under action 0.

    Returns (L, R): L[u] over original states plus a final END column, and R[u]
    the expected reward collected before landing.
    """
    S = mdp.S
    L = np.zeros((S, S + 1))
    R = np.zeros(S)
    for h in range(mdp.H, 0, -1):
        for u in mdp.stage_states(h):
            if kept[u]:
                L[u, u] = 1.0
                continue
            R[u] = mdp.r_mean[u, 0]
            if h < mdp.H:
                R[u] += mdp.P[u, 0] @ R
                L[u] = mdp.P[u, 0] @ L[:S]
            else:
                L[u, S] = 1.0
    return L, R


def skip_convert_to_linear(mdp, features, alpha, theta_sample, n_policies=50, n_random=50,
                           seed=0):
    """Skip low-range states under action 0 and certify linearity of the result.

    The initial state is always kept. Kept states are copied per reachable
    skippy-step count; features are embedded in the chunk of their original
    stage, followed by a constant-1 coordinate and an episode-over indicator.
    The certificate is the largest residual of Chebyshev fits of expected
    rewards and of expected next-state values for a battery of test functions.
    """
    S, A, H, d = mdp.S, mdp.A, mdp.H, features.d
    ranges = range_table(mdp, features, theta_sample)
    kept = ranges >= alpha
    kept[0] = True
    L, R = _landing(mdp, kept)
    # one-step skippy kernel from kept states
    step_P = np.einsum("sau,uv->sav", mdp.P, L[:S])
    step_P[:, :, S] += 0.0
    end_prob = np.einsum("sau,u->sa", mdp.P, L[:S, S])
    step_R = mdp.r_mean + np.einsum("sau,u->sa", mdp.P, R)
    last = mdp.stage_of == H
    end_prob[last] = 1.0

    # layered copies reachable from the initial state
    layers = [[0]]
    while True:
        nxt = sorted({int(v) for u in layers[-1] for a in range(A)
                      for v in np.flatnonzero(step_P[u, a, :S] > 0)})
        if not nxt:
            break
        layers.append(nxt)
    Hc = len(layers) + 1
    sizes = [len(layer) for layer in layers] + [0]
    sizes = [sz + (1 if h >= 1 else 0) for h, sz in enumerate(sizes)]   # episode-over copies
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    Sc = int(offsets[-1])
    origin = np.full(Sc, -1)
    eo = np.zeros(Hc, dtype=int)          # eo[h-1]: converted index of the stage-h copy
    pos = {}
    for h in range(1, Hc + 1):
        base = offsets[h - 1]
        members = layers[h - 1] if h <= len(layers) else []
        for i, u in enumerate(members):
            origin[base + i] = u
            pos[(h, u)] = base + i
        if h >= 2:
            eo[h - 1] = base + len(members)
    Pc = np.zeros((Sc, A, Sc))
    rc = np.zeros((Sc, A))
    dc = d * H + 2
    phic = np.zeros((Sc, A, dc))
    for c in range(Sc):
        h = int(np.searchsorted(offsets, c, side="right"))
        u = origin[c]
        if u < 0:
            phic[c, :, dc - 2] = 1.0
            phic[c, :, dc - 1] = 1.0
            if h < Hc:
                Pc[c, :, eo[h]] = 1.0
            continue
        hu = int(mdp.stage_of[u])
        phic[c, :, (hu - 1) * d:hu * d] = features.phi[u]
        phic[c, :, dc - 2] = 1.0
        rc[c] = step_R[u]
        for a in range(A):
            for v in np.flatnonzero(step_P[u, a, :S] > 0):
                Pc[c, a, pos[(h + 1, int(v))]] += step_P[u, a, v]
            Pc[c, a, eo[h]] += end_prob[u, a] if not last[u] else 1.0
    vals, probs = deterministic_rewards(rc)
    cmdp = Mdp(tuple(sizes), A, Pc, vals, probs, name=f"{mdp.name}-skipped")
    cfeat = FeatureTable(phic, L1=math.sqrt(features.L1 ** 2 + 2), L2=1e6)

    # certificate
    rng = np.random.default_rng(seed)
    battery = [evaluate_policy_exact(cmdp, pi).v for pi in random_policies(cmdp, n_policies, seed)]
    battery += [rng.uniform(0, H, size=Sc) for _ in range(n_random)]
    rew_res = 0.0
    trans_res = 0.0
    for h in range(1, Hc + 1):
        cidx = cmdp.stage_states(h)
        Phi = phic[cidx].reshape(-1, dc)
        _, err, _ = chebyshev_fit(Phi, rc[cidx].ravel(), 1e6)
        rew_res = max(rew_res, err)
        if h < Hc:
            for fvals in battery:
                tgt = (Pc[cidx] @ fvals).ravel()
                _, err, _ = chebyshev_fit(Phi, tgt, 1e6)
                trans_res = max(trans_res, err)
    kappa = max(rew_res, trans_res)
    return ConvertedMdp(cmdp, cfeat, origin, kept, eo[1:], kappa, rew_res, trans_res)


def converted_value_pairs(conv, mdp):
    """Values of matching policies on the converted and original MDPs.

    Enumerates deterministic choices on the kept original states; skipped states
    take action 0. Returns a list of (converted value, original value) pairs.
    """
    kept_states = np.flatnonzero(conv.kept)
    out = []
    cm = conv.mdp
    for choice in itertools.product(range(mdp.A), repeat=len(kept_states)):
        act = np.zeros(mdp.S, dtype=int)
        act[kept_states] = choice
        orig = evaluate_policy_exact(mdp, MemorylessPolicy.deterministic(act, mdp.A)).v[0]
        cact = np.where(conv.origin >= 0, act[np.maximum(conv.origin, 0)], 0)
        conv_v = evaluate_policy_exact(cm, MemorylessPolicy.deterministic(cact, cm.A)).v[0]
        out.append((float(conv_v), float(orig)))
    return out


# ------------------------------------------------------------------ suffix identity

def estimated_value_by_enumeration(tau, C, r):
    """E over the first landing index I >= 1 of sum_{u<I} r_u + C(s_I) (0 past the end).

    The arrays start at stage t; the landing search starts at stage t+1, so the
    result should equal sum(r) + E_to of the suffix from t+1.
    """
    L = len(tau)
    total = 0.0
    stay = 1.0
    for I in range(1, L + 1):
        p = stay * (tau[I] if I < L else 1.0)
        gain = r[:I].sum() + (C[I] if I < L else 0.0)
        total += p * gain
        if I < L:
            stay *= 1.0 - tau[I]
    return total


# ------------------------------------------------------------------ concentration

@dataclass
class ConfidenceReport:
    coverage: float
    trials: int
    j2_min_slack: float
    runtime_steps: int


def lse_confidence_check(sigma, xi, lam, d, trials, zeta, steps=100, seed=0):
    """Coverage of the misspecified ridge-regression confidence bound.

    Covariates are uniform in the unit ball, noise is Gaussian with scale sigma
    and the bias is xi times the sign of a fixed per-trial projection of the
    covariate (worst case for the aligned direction). Returns the fraction of
    trials for which the bound holds at every step, and the smallest slack of
    the bias-norm inequality seen along the way.
    """
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(trials, d))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    theta *= rng.uniform(0, 1, size=(trials, 1)) ** (1 / d)
    u = rng.normal(size=(trials, d))
    V = np.broadcast_to(lam * np.eye(d), (trials, d, d)).copy()
    b = np.zeros((trials, d))
    bias_sum = np.zeros((trials, d))
    ok = np.ones(trials, dtype=bool)
    j2_slack = np.inf
    for k in range(1, steps + 1):
        a = rng.normal(size=(trials, d))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        a *= rng.uniform(0, 1, size=(trials, 1)) ** (1 / d)
        delta = xi * np.sign(np.einsum("td,td->t", a, u))
        y = np.einsum("td,td->t", a, theta) + delta + sigma * rng.normal(size=trials)
        V += np.einsum("ti,tj->tij", a, a)
        b += a * y[:, None]
        bias_sum += a * delta[:, None]
        est = np.linalg.solve(V, b[..., None])[..., 0]
        err = est - theta
        lhs = np.sqrt(np.einsum("ti,tij,tj->t", err, V, err))
        _, logdet = np.linalg.slogdet(V)
        rhs = (math.sqrt(lam) * np.linalg.norm(theta, axis=1) + xi * math.sqrt(k)
               + sigma * np.sqrt(2 * math.log(1 / zeta) + logdet - d * math.log(lam)))
        ok &= lhs < rhs
        sol = np.linalg.solve(V, bias_sum[..., None])[..., 0]
        j2 = np.einsum("ti,ti->t", bias_sum, sol)
        j2_slack = min(j2_slack, float((k * xi ** 2 - j2).min()))
    return ConfidenceReport(float(ok.mean()), trials, j2_slack, steps)


def elliptical_potential_slacks(V0, seq, L):
    """Slacks (middle - left, right - middle) of the elliptical potential chain."""
    d = V0.shape[0]
    V = V0.copy()
    lhs = 0.0
    for a in seq:
        lhs += min(1.0, float(a @ np.linalg.solve(V, a)))
        V = V + np.outer(a, a)
    mid = 2 * (np.linalg.slogdet(V)[1] - np.linalg.slogdet(V0)[1])
    n = len(seq)
    rhs = 2 * d * math.log((np.trace(V0) + n * L ** 2) / (d * math.exp(np.linalg.slogdet(V0)[1] / d)))
    return mid - lhs, rhs - mid


def infrequent_update_sums(V, seq):
    """(sum ||a_i||^2_{V_i^-1}, sum ||a_i||^2_{V^-1}) where V_i includes a_1..a_i."""
    Vi = V.copy()
    left = 0.0
    base = 0.0
    for a in seq:
        Vi = Vi + np.outer(a, a)
        left += float(a @ np.linalg.solve(Vi, a))
        base += float(a @ np.linalg.solve(V, a))
    return left, base


def infrequent_update_slack(V, seq):
    """sum ||a_i||^2_{V_i^-1} - min(1, sum ||a_i||^2_{V^-1} / 2)."""
    left, base = infrequent_update_sums(V, seq)
    return left - min(1.0, base / 2)


# ------------------------------------------------------------------ optimism

@dataclass
class OptimismReport:
    value: float                 # clipped value at the initial state
    v_star: float
    fit_errors: np.ndarray       # (H,) sup error of each stage fit of the exact targets
    slack: np.ndarray            # (H,) beta*H - ||theta_bar - theta_hat||_X on the data
    feasible: bool
    passed: bool
    theta_bar: np.ndarray = None


def optimism_check(mdp, features, store, Q, consts, eps, samples, tol=0.0):
    """Exact-target optimistic parameters under the correct guess, checked on the data.

    Going backwards over stages, the stage-t parameter is a Chebyshev fit of
    r(s, a) + E[v0(S') + E_to(S')], the expected least-squares target when the
    default policy is followed after (s, a); the clipped greedy value of the fit
    then feeds the earlier stages.
    """
    from .learner import LsState, oracle_guess, ridge_targets
    from .mdp import optimal_values
    from .skippy import expected_corrections, tau_table

    H, d = mdp.H, features.d
    guess = oracle_guess(mdp, consts, Q, samples)
    tau_tab = tau_table(mdp, features, guess, Q, eps)
    theta_bar = np.zeros((H, d))
    C = np.zeros(mdp.S)
    errs = np.zeros(H)
    for t in range(H, 0, -1):
        idx = mdp.stage_states(t)
        g = mdp.r_mean[idx].copy()
        if t < H:
            v0, e_to, _ = expected_corrections(mdp, tau_tab, C)
            g += mdp.P[idx] @ (v0 + e_to)
        theta_bar[t - 1], errs[t - 1], _ = chebyshev_fit(features.stage_matrix(mdp, t), g.ravel(),
                                                         consts.theta_bar_radius)
        vals = features.phi[idx] @ theta_bar[t - 1]
        C[idx] = np.clip(vals.max(axis=1), 0, H)
    ls = LsState.build(mdp, features, store, consts.lam)
    y = ridge_targets(store, tau_tab, C)
    slack = np.zeros(H)
    for t in range(1, H + 1):
        r = ls.rows[t - 1]
        th = ls.theta_hat(t, y[r]) if len(r) else np.zeros(d)
        diff = theta_bar[t - 1] - th
        slack[t - 1] = consts.beta * H - math.sqrt(max(diff @ ls.X[t - 1] @ diff, 0.0))
    v_star = float(optimal_values(mdp)[0].v[0])
    feasible = bool(np.all(slack >= -1e-9))
    passed = feasible and C[0] >= v_star - 2 * eps - tol
    return OptimismReport(float(C[0]), v_star, errs, slack, feasible, passed, theta_bar)
