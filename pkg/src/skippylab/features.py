"""Feature maps, per-policy parameter fits, misspecification and range quantities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .mdp import evaluate_policy_exact

EXACT_TOL = 1e-10
GAP_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Feature vectors phi(s, a) stored as an (S, A, d) array."""

    phi: np.ndarray
    L1: float = 1.0
    L2: float = 1.0

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "L1", float(self.L1))
        object.__setattr__(self, "L2", float(self.L2))

    @property
    def d(self):
        return self.phi.shape[2]

    def stage_matrix(self, mdp, h):
        """Rows phi(s, a) for s in stage h, ordered (state, action)."""
        return self.phi[mdp.stage_states(h)].reshape(-1, self.d)

    def norm_violations(self):
        norms = np.linalg.norm(self.phi, axis=-1)
        return np.argwhere(norms > self.L1 + 1e-12)


@dataclass(frozen=True, eq=False)
class PolicyParameter:
    theta: np.ndarray    # (H, d)
    errors: np.ndarray   # (H,) achieved sup-norm error per stage
    gaps: np.ndarray     # (H,) certified optimality gap of the fit


@dataclass(frozen=True)
class MisspecReport:
    eta: float
    errors: np.ndarray   # (n_policies, H)
    description: str
    lower_bound: bool = True


def feature_diff(features, s, i, j):
    A = features.phi.shape[1]
    if not (0 <= i < A and 0 <= j < A):
        raise IndexError(f"invalid action pair ({i}, {j})")
    return features.phi[s, i] - features.phi[s, j]


def _dual_bound(Phi, y, lam, L2):
    """Lower bound on min_{|theta|<=L2} max_i |y_i - phi_i theta| from signed weights lam."""
    total = np.abs(lam).sum()
    if total <= 0:
        return 0.0
    lam = lam / total
    return float(lam @ y - L2 * np.linalg.norm(Phi.T @ lam))


def chebyshev_fit(Phi, y, L2):
    """Minimise max_i |y_i - <Phi_i, theta>| over the ball |theta| <= L2.

    Returns ``(theta, error, gap)`` where ``gap`` is the certified distance between
    the achieved error and a dual lower bound.
    """
    if L2 <= 0:
        raise ValueError("parameter bound L2 must be positive")
    Phi = np.asarray(Phi, dtype=float)
    y = np.asarray(y, dtype=float)
    m, d = Phi.shape
    theta = np.linalg.pinv(Phi) @ y
    err = float(np.max(np.abs(y - Phi @ theta), initial=0.0))
    if err <= EXACT_TOL and np.linalg.norm(theta) <= L2 + 1e-9:
        return theta, err, err

    # LP over the enclosing box; optimal for the ball whenever it lands inside
    c = np.zeros(d + 1)
    c[-1] = 1.0
    A_ub = np.block([[Phi, -np.ones((m, 1))], [-Phi, -np.ones((m, 1))]])
    b_ub = np.concatenate([y, -y])
    bounds = [(-L2, L2)] * d + [(0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status == 0:
        theta = res.x[:d]
        marg = np.abs(res.ineqlin.marginals)
        lam = marg[m:] - marg[:m]
        err = float(np.max(np.abs(y - Phi @ theta)))
        gap = err - _dual_bound(Phi, y, lam, L2)
        if np.linalg.norm(theta) <= L2 + 1e-9 and gap <= GAP_TOL:
            return theta, err, max(gap, 0.0)
    return _socp_fit(Phi, y, L2)


def _socp_fit(Phi, y, L2):
    import cvxpy as cp

    m, d = Phi.shape
    th = cp.Variable(d)
    t = cp.Variable()
    resid = y - Phi @ th
    upper = resid <= t
    lower = -resid <= t
    prob = cp.Problem(cp.Minimize(t), [upper, lower, cp.norm(th, 2) <= L2])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    theta = np.asarray(th.value, dtype=float)
    nrm = np.linalg.norm(theta)
    if nrm > L2:
        theta = theta * (L2 / nrm)
    err = float(np.max(np.abs(y - Phi @ theta)))
    lam = np.asarray(upper.dual_value, dtype=float) - np.asarray(lower.dual_value, dtype=float)
    gap = err - _dual_bound(Phi, y, lam, L2)
    return theta, err, max(gap, 0.0)


def fit_stage_batch(Phi, Y, L2):
    """Fit many value vectors (rows of ``Y``) against one stage design matrix.

    Uses one pseudo-inverse for all rows and falls back to the convex program
    only for rows that are not interpolated exactly within the norm bound.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    thetas = Y @ np.linalg.pinv(Phi).T
    errs = np.abs(Y - thetas @ Phi.T).max(axis=1, initial=0.0)
    gaps = errs.copy()
    bad = (errs > EXACT_TOL) | (np.linalg.norm(thetas, axis=1) > L2 + 1e-9)
    for r in np.flatnonzero(bad):
        thetas[r], errs[r], gaps[r] = chebyshev_fit(Phi, Y[r], L2)
    return thetas, errs, gaps


def fit_q_values(mdp, features, q):
    H, d = mdp.H, features.d
    theta = np.zeros((H, d))
    errors = np.zeros(H)
    gaps = np.zeros(H)
    for h in range(1, H + 1):
        idx = mdp.stage_states(h)
        theta[h - 1], errors[h - 1], gaps[h - 1] = chebyshev_fit(
            features.stage_matrix(mdp, h), q[idx].ravel(), features.L2)
    return PolicyParameter(theta, errors, gaps)


def fit_policy_parameters(mdp, features, policy, values=None):
    """Per-stage Chebyshev fit of q^pi within the L2 ball."""
    if values is None:
        values = evaluate_policy_exact(mdp, policy)
    return fit_q_values(mdp, features, values.q)


def measure_misspecification(mdp, features, policies, description="given policies"):
    policies = list(policies)
    if not policies:
        raise ValueError("policy sample is empty")
    errors = np.array([fit_policy_parameters(mdp, features, pi).errors for pi in policies])
    return MisspecReport(float(errors.max()), errors, description)


def _spread(vals):
    # max_{i,j} (vals_i - vals_j) along the last-but-one axis
    return vals.max(axis=-2) - vals.min(axis=-2)


def action_spread(phi_s, thetas):
    """max over theta of max_{i,j} <phi(s,i) - phi(s,j), theta> for one state."""
    thetas = np.atleast_2d(thetas)
    if thetas.shape[0] == 0:
        return 0.0
    return float(max(_spread(phi_s @ thetas.T).max(), 0.0))


def range_exact(mdp, features, s, theta_by_stage):
    """Largest action-value spread at ``s`` over the sampled parameters of its stage."""
    h = int(mdp.stage_of[s])
    return action_spread(features.phi[s], theta_by_stage[h - 1])


def range_table(mdp, features, theta_by_stage):
    out = np.zeros(mdp.S)
    for s in range(mdp.S):
        out[s] = range_exact(mdp, features, s, theta_by_stage)
    return out


def precondition_features(features, Q, s, a, mdp):
    h = int(mdp.stage_of[s])
    return Q.matrix(h) @ features.phi[s, a]


def precondition_parameter(theta, Q, h):
    return np.linalg.solve(Q.matrix(h), theta)


def range_Q(mdp, features, s, design, Q):
    """Spread at ``s`` over the design policies' parameters."""
    h = int(mdp.stage_of[s])
    if design.stage != h:
        raise ValueError(f"design is for stage {design.stage}, state is at stage {h}")
    phiQ = features.phi[s] @ Q.matrix(h)
    return action_spread(phiQ, design.points)


def range_Q_guess(mdp, features, s, guess, Q):
    """Spread at ``s`` over the guessed preconditioned parameters of its stage."""
    h = int(mdp.stage_of[s])
    if h < 2:
        raise ValueError("guesses are only defined for stages 2..H")
    phiQ = features.phi[s] @ Q.matrix(h)
    vec = np.asarray(guess.vectors[h])
    # zero padding rows never widen the spread; dropping them keeps the arithmetic of range_Q
    return action_spread(phiQ, vec[np.any(vec != 0, axis=1)])


def range_Q_guess_table(mdp, features, guess, Q):
    """range_Q_guess for every state (0 at stage 1, where it is undefined)."""
    out = np.zeros(mdp.S)
    for h in range(2, mdp.H + 1):
        idx = mdp.stage_states(h)
        phiQ = features.phi[idx] @ Q.matrix(h)             # (n, A, d)
        vals = phiQ @ np.asarray(guess.vectors[h]).T       # (n, A, d0)
        if vals.shape[-1]:
            out[idx] = np.maximum(_spread(vals).max(axis=-1), 0.0)
    return out
