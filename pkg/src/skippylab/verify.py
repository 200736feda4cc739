"""Acceptance suite: each check returns a CheckResult with a one-line verdict."""
from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import instances, oracles
from .features import range_Q, range_table
from .geometry import (Preconditioning, append_direction, compute_constants,
                       compute_near_optimal_design, sym_power, validate_preconditioning)
from .learner import LearnerConfig, run_skippy_eleanor
from .mdp import optimal_values, validate_mdp
from .skippy import E_step, E_to, F_value

EPS = 0.1
ZETA = 0.1
PADDED_SEEDS = tuple(range(10))


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number}: {self.name} ({self.seconds:.1f}s) {self.detail}"


def _timed(number, name):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            passed, detail, data = fn(*args, **kwargs)
            return CheckResult(number, name, bool(passed), detail, time.perf_counter() - t0, data)
        return inner
    return wrap


# ------------------------------------------------------------------ shared learner runs

@functools.lru_cache(maxsize=None)
def learner_run(name, run_seed=0, **params):
    mdp, feats = instances.make(name, **params)
    enum = oracles.enumerate_policies(mdp, feats)
    consts = compute_constants(feats.d, mdp.H, EPS, ZETA, feats.L1, feats.L2, mode="practical")
    cfg = LearnerConfig(EPS, ZETA, consts, opt1="oracle", theta_samples=enum.samples, seed=run_seed)
    res = run_skippy_eleanor(mdp, feats, cfg)
    v_star = float(optimal_values(mdp)[0].v[0])
    return mdp, feats, enum, consts, res, v_star


def acceptance_runs():
    runs = [("two_path", {})] + [("padded_linear", {"seed": s}) for s in PADDED_SEEDS]
    return [(name, params, learner_run(name, **params)) for name, params in runs]


# ------------------------------------------------------------------ 1

@_timed(1, "two-path example: exact realizability, conversion structure, linearity certificate")
def check_two_path():
    mdp, feats = instances.two_path()
    enum = oracles.enumerate_policies(mdp, feats)
    conv = oracles.skip_convert_to_linear(mdp, feats, 0.01, enum.samples)
    cm = conv.mdp
    structure = (cm.stage_sizes == (1, 1) and conv.origin[0] == 0 and conv.origin[1] == -1
                 and np.allclose(cm.P[0, :, 1], 1.0) and np.allclose(cm.r_mean[0], 1.0)
                 and np.allclose(cm.r_mean[1], 0.0) and not validate_mdp(cm, reward_bound=mdp.H))
    ok = enum.count == 16 and enum.eta <= 1e-12 and structure and conv.kappa <= 1e-9
    detail = (f"policies={enum.count} eta_hat={enum.eta:.2e} structure={structure} "
              f"kappa_hat={conv.kappa:.2e}")
    return ok, detail, {"eta": enum.eta, "kappa": conv.kappa}


# ------------------------------------------------------------------ 2

def random_small_instance(rng):
    """Random instance with d <= 4, H <= 4, A <= 3 and at most 2^16 deterministic policies."""
    kind = rng.choice(["random_linear", "padded_linear", "zero_range", "tabular"])
    H = int(rng.integers(2, 5))
    A = int(rng.integers(2, 4))
    seed = int(rng.integers(0, 2 ** 31))
    cap = 16 if A == 2 else 10
    if kind == "random_linear":
        d = int(rng.integers(1, 5))
        per = int(rng.integers(1, max(2, min(5, (cap - 1) // (H - 1)) + 1)))
        return instances.random_linear(d=d, H=H, A=A, states_per_stage=per, seed=seed)
    if kind == "padded_linear":
        d = 2
        return instances.padded_linear(d=d, H=min(H, 3), chain=1, A=2, core_states=2, seed=seed)
    if kind == "zero_range":
        per = int(rng.integers(1, 4))
        return instances.zero_range(H=H, states_per_stage=per, A=A, seed=seed)
    return instances.tabular(H=H, states_per_stage=2, A=2, seed=seed)


def random_preconditioning(rng, H, d, L2):
    dirs = [tuple(rng.normal(size=d) * rng.uniform(0, 3) for _ in range(int(rng.integers(0, 3))))
            for _ in range(H)]
    return Preconditioning(H, d, L2, 1e6, directions=tuple(dirs))


@_timed(2, "range vs preconditioned design range")
def check_range_bound(n_instances=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    states = 0
    for _ in range(n_instances):
        mdp, feats = random_small_instance(rng)
        assert mdp.S <= 20 and feats.d <= 4 and mdp.A <= 3 and mdp.H <= 4
        enum = oracles.enumerate_policies(mdp, feats)
        Q = random_preconditioning(rng, mdp.H, feats.d, feats.L2)
        rng_exact = range_table(mdp, feats, enum.samples)
        for h in range(1, mdp.H + 1):
            pts = enum.samples[h - 1] @ Q.inverse(h)
            design = compute_near_optimal_design(pts, max(16, 2 * feats.d), stage=h)
            for s in mdp.stage_states(h):
                rq = range_Q(mdp, feats, s, design, Q)
                worst = max(worst, rng_exact[s] - math.sqrt(2 * feats.d) * rq)
                states += 1
    return worst <= 1e-8, f"instances={n_instances} states={states} worst excess={worst:.3e}", {}


# ------------------------------------------------------------------ 3

def _sup_abs(thetas, u):
    return float(np.abs(np.atleast_2d(thetas) @ u).max(initial=0.0))


def _try_append(Q, h, u, thetas, consts):
    """Append ``u`` when it meets the three validity conditions; returns the new Q or None."""
    sup = _sup_abs(thetas, u)
    if sup <= 0:
        return None
    u = u / sup
    G = np.eye(Q.d) / Q.L2 ** 2
    for v in Q.directions[h - 1]:
        G = G + np.outer(v, v)
    if np.sum((sym_power(G, -0.5) @ u) ** 2) < 0.5 or np.linalg.norm(u) > consts.L3:
        return None
    if len(Q.directions[h - 1]) >= consts.d1:
        return None
    return append_direction(Q, h, Q.matrix(h) @ u)


@_timed(3, "enclosing ellipsoid after valid direction appends")
def check_ellipsoid(n_instances=20, synthetic=40, seed=0):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    appends = learner_dirs = 0
    valid = True
    for r in range(n_instances):
        name, params = (("padded_linear", {"seed": r}) if r < 10
                        else ("random_linear", {"seed": r, "d": 3, "H": 3, "states_per_stage": 3}))
        mdp, feats, enum, consts, res, _ = learner_run(name, **params)
        Q = Preconditioning.initial(mdp.H, feats.d, feats.L2, consts.L3, d1=consts.d1)
        cands = [(rec["i"], np.asarray(rec["v"])) for rec in res.log if rec["event"] == "iteration"]
        cands = [(h, Q.inverse(h) @ v) for h, v in cands]
        n_learner = len(cands)
        for _ in range(synthetic):
            h = int(rng.integers(1, mdp.H + 1))
            cands.append((h, rng.normal(size=feats.d)))
        for j, (h, u) in enumerate(cands):
            new = _try_append(Q, h, u, enum.samples[h - 1], consts)
            if new is None:
                continue
            Q = new
            appends += 1
            learner_dirs += j < n_learner
            rep = validate_preconditioning(Q, enum.samples, consts.d1)
            valid &= rep.valid
            worst = max(worst, float((rep.ellipsoid_norms - rep.ellipsoid_bound).max()))
    ok = valid and worst <= 1e-8 and appends > 0
    return ok, (f"instances={n_instances} appends={appends} (learner-derived {learner_dirs}) "
                f"max norm excess={worst:.3e} all valid={valid}"), {}


# ------------------------------------------------------------------ 4

def random_sequence(rng):
    d = int(rng.integers(1, 9))
    n = int(rng.integers(1, 501))
    B = rng.normal(size=(d, d))
    V0 = B @ B.T * 10 ** rng.uniform(-2, 1) + 10 ** rng.uniform(-2, 1) * np.eye(d)
    scale = 10 ** rng.uniform(-1.5, 0.5)
    seq = rng.normal(size=(n, d)) * scale
    return V0, seq


@_timed(4, "elliptical potential and infrequent-update inequalities")
def check_potential(n_sequences=200, seed=0):
    rng = np.random.default_rng(seed)
    worst1 = worst2 = np.inf
    for _ in range(n_sequences):
        V0, seq = random_sequence(rng)
        L = float(np.linalg.norm(seq, axis=1).max())
        a, b = oracles.elliptical_potential_slacks(V0, seq, L)
        worst1 = min(worst1, a, b)
    weak = np.inf
    for _ in range(n_sequences):
        V0, seq = random_sequence(rng)
        left, base = oracles.infrequent_update_sums(V0, seq)
        worst2 = min(worst2, left - min(1.0, base / 2))
        # the halved form min(1, S)/2 is not part of the verdict, only reported
        weak = min(weak, left - min(1.0, base) / 2)
    ok = worst1 >= -1e-9 and worst2 >= -1e-9
    return ok, (f"sequences={n_sequences}x2 min potential slack={worst1:.3e} "
                f"min update slack={worst2:.3e} (halved form: {weak:.3e})"), \
        {"potential": worst1, "update": worst2, "halved": weak}


# ------------------------------------------------------------------ 5

@_timed(5, "ridge confidence coverage and bias-norm bound")
def check_confidence(trials=2000, seed=0):
    rows = []
    ok = True
    for i, sigma in enumerate((0.5, 1.0, 2.0)):
        for j, xi in enumerate((0.0, 0.05)):
            rep = oracles.lse_confidence_check(sigma, xi, 1.0, 3, trials, ZETA, steps=100,
                                               seed=seed + 10 * i + j)
            ok &= rep.coverage >= 0.88 and rep.j2_min_slack >= -1e-9
            rows.append(f"({sigma},{xi}):{rep.coverage:.3f}/{rep.j2_min_slack:.1e}")
    return ok, "coverage/J2-slack " + " ".join(rows), {}


# ------------------------------------------------------------------ 6

def admissible_function(rng, mdp, feats, h, design, Q, alpha):
    idx = mdp.stage_states(h)
    phiQ = feats.phi[idx] @ Q.matrix(h)
    if design.size == 0:
        return np.zeros(len(idx))
    vals = phiQ @ design.points.T
    cap = np.maximum((vals.max(1) - vals.min(1)).max(-1), 0.0) / alpha
    mode = rng.integers(3)
    if mode == 0:
        return np.zeros(len(idx))
    if mode == 1:
        return cap * rng.choice([-1.0, 1.0], size=len(idx))
    return cap * rng.uniform(-1, 1, size=len(idx))


def eta_zero_instances(n, seed):
    rng = np.random.default_rng(seed)
    out = [instances.two_path()]
    while len(out) < n:
        kind = len(out) % 3
        s = int(rng.integers(0, 2 ** 31))
        if kind == 0:
            out.append(instances.random_linear(d=int(rng.integers(1, 4)), H=3, A=2, states_per_stage=3, seed=s))
        elif kind == 1:
            out.append(instances.padded_linear(d=2, H=4, chain=1, core_states=2, seed=s))
        else:
            out.append(instances.tabular(H=3, states_per_stage=2, A=2, seed=s))
    return out


@_timed(6, "admissible-function realizability construction")
def check_admissible(n_instances=20, n_functions=20, seed=0):
    rng = np.random.default_rng(seed)
    worst_err = worst_norm = -np.inf
    admissible = True
    for mdp, feats in eta_zero_instances(n_instances, seed):
        enum = oracles.enumerate_policies(mdp, feats)
        d0 = max(16, 2 * feats.d)
        for _ in range(n_functions):
            h = int(rng.integers(2, mdp.H + 1))
            Q = random_preconditioning(rng, mdp.H, feats.d, feats.L2)
            design = compute_near_optimal_design(enum.samples[h - 1] @ Q.inverse(h), d0, stage=h)
            alpha = float(10 ** rng.uniform(-2, 0))
            f = admissible_function(rng, mdp, feats, h, design, Q, alpha)
            prefix = oracles.random_policies(mdp, 1, int(rng.integers(2 ** 31)))[0]
            rep = oracles.verify_admissible_realizability(mdp, feats, h, f, alpha, Q, design, enum,
                                                          prefix, eta=0.0)
            admissible &= rep.admissible
            worst_err = max(worst_err, rep.max_error - rep.error_bound)
            worst_norm = max(worst_norm, rep.theta_norm - 4 * d0 * feats.L2 / alpha)
    ok = admissible and worst_err <= 1e-8 and worst_norm <= 0
    return ok, (f"cases={n_instances}x{n_functions} worst error excess={worst_err:.3e} "
                f"worst norm excess={worst_norm:.3e}"), {}


# ------------------------------------------------------------------ 7

def random_suffix(rng):
    H = int(rng.integers(1, 11))
    L = int(rng.integers(1, H + 1))
    tau = rng.uniform(0, 1, size=L)
    tau[rng.random(L) < 0.2] = 0.0
    tau[rng.random(L) < 0.1] = 1.0
    C = rng.uniform(0, H, size=L)
    r = rng.uniform(0, 1, size=L)
    return H, tau, C, r


@_timed(7, "correction-term calculus")
def check_corrections(n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    err_a = err_c = err_d = 0.0
    bounds_ok = True
    for _ in range(n):
        H, tau, C, r = random_suffix(rng)
        L = len(tau)
        total = E_to(tau, C, r)
        steps = [E_step(tau[j:], C[j:], r[j:]) for j in range(L)]
        err_a = max(err_a, abs(total - sum(steps)))
        tail = r.sum()
        D = C[0] - tail
        bounds_ok &= -tail - 1e-12 <= D <= H + 1e-12
        bounds_ok &= -tail - 1e-12 <= total <= H + 1e-12
        bounds_ok &= abs(steps[0]) <= 2 * tau[0] * H + 1e-12
        u = rng.normal(size=int(rng.integers(1, 6)))
        u /= np.linalg.norm(u)
        err_c = max(err_c, abs(np.trace(F_value(u, steps[0])) - steps[0]))
        est = oracles.estimated_value_by_enumeration(np.concatenate([[1.0], tau]),
                                                     np.concatenate([[0.0], C]),
                                                     np.concatenate([[0.0], r]))
        err_d = max(err_d, abs(est - (r.sum() + total)))
    ok = err_a <= 1e-10 and bounds_ok and err_c <= 1e-12 and err_d <= 1e-10
    return ok, (f"suffixes={n} telescoping={err_a:.1e} bounds={bounds_ok} trace={err_c:.1e} "
                f"enumeration={err_d:.1e}"), {}


# ------------------------------------------------------------------ 8-10

@_timed(8, "end-to-end learning (practical constants, oracle-assisted)")
def check_learning():
    rows = []
    good = 0
    runs = acceptance_runs()
    for name, params, (_, _, _, _, res, v_star) in runs:
        hit = res.value >= v_star - EPS
        good += hit
        rows.append(f"{name}{params.get('seed', '')}:{v_star - res.value:+.3f}")
    frac = good / len(runs)
    return frac >= 0.9, f"{good}/{len(runs)} within eps; suboptimality " + " ".join(rows), {"fraction": frac}


@_timed(9, "run-invariant audit")
def check_audit():
    bad = []
    updates = checks = 0
    runs = acceptance_runs()
    extra = [("random_linear", p, learner_run("random_linear", **p))
             for p in ({"seed": r, "d": 3, "H": 3, "states_per_stage": 3} for r in range(10, 20))]
    for name, params, (_, _, _, consts, res, _) in runs + extra:
        a = res.audit
        updates += res.q_updates
        for rec in res.log:
            if rec["event"] != "iteration":
                continue
            checks += 1
            if rec["projection_gap"] > consts.projection_tolerance + 1e-9:
                bad.append(f"{name}{params}: projection gap {rec['projection_gap']:.3g}")
            if rec.get("valid") is False:
                bad.append(f"{name}{params}: invalid Q after update")
        if not (a["q_counts_ok"] and a["precond_ok"] and a["max_m"] <= consts.m_max
                and a["max_m_prime"] <= consts.m_prime_max):
            bad.append(f"{name}{params}: audit {a}")
    return not bad, f"runs={len(runs) + len(extra)} checks={checks} q_updates={updates} problems={bad[:3]}", {}


@_timed(10, "optimism at every consistency-pass iteration")
def check_optimism():
    worst = np.inf
    n = 0
    for name, params, (_, _, enum, _, res, v_star) in acceptance_runs():
        if enum.eta > 1e-9:
            continue
        for C in res.audit["pass_C"]:
            worst = min(worst, C - (v_star - 2 * EPS))
            n += 1
    return n > 0 and worst >= 0, f"pass iterations={n} min C - (v* - 2 eps)={worst:.3f}", {}


CHECKS = [check_two_path, check_range_bound, check_ellipsoid, check_potential, check_confidence,
          check_admissible, check_corrections, check_learning, check_audit, check_optimism]


QUICK = {2: {"n_instances": 20}, 3: {"n_instances": 5}, 4: {"n_sequences": 50},
         5: {"trials": 1000}, 6: {"n_instances": 5, "n_functions": 5}, 7: {"n": 1000}}


def run_all(seed=0, quick=False, out=print):
    """Run every check; ``quick`` shrinks the sample sizes (verdicts then are indicative only)."""
    ok = True
    for number, fn in enumerate(CHECKS, start=1):
        res = fn(**QUICK.get(number, {})) if quick else fn()
        out(res.line())
        ok &= res.passed
    return ok
