"""Preconditioning ellipsoids, near-optimal designs, projectors and constants."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

EIG_TOL = 1e-12
PRECOND_TOL = 1e-8


# ------------------------------------------------------------------ matrices

def sym_power(A, p, floor=0.0):
    """A**p for a symmetric PSD matrix via its eigendecomposition."""
    A = 0.5 * (A + A.T)
    w, U = np.linalg.eigh(A)
    w = np.maximum(w, floor)
    return (U * w ** p) @ U.T


def psd_sqrt(A):
    return sym_power(A, 0.5)


def q_from_sequence(directions, L2, d):
    """(L2^-2 I + sum v v^T)^(-1/2)."""
    base = np.eye(d) / L2 ** 2
    for v in directions:
        v = np.asarray(v, dtype=float)
        base = base + np.outer(v, v)
    return sym_power(base, -0.5)


@dataclass(frozen=True, eq=False)
class Preconditioning:
    """Per-stage direction sequences and the matrices Q_h they define.

    Stages are 1-based; ``Q[h - 1]`` is Q_h.
    """

    H: int
    d: int
    L2: float
    L3: float
    directions: tuple = ()
    Q: np.ndarray = None
    d1: int | None = None

    def __post_init__(self):
        dirs = self.directions or tuple(() for _ in range(self.H))
        dirs = tuple(tuple(np.asarray(v, dtype=float) for v in c) for c in dirs)
        object.__setattr__(self, "directions", dirs)
        if self.Q is None:
            Q = np.stack([q_from_sequence(c, self.L2, self.d) for c in dirs])
            object.__setattr__(self, "Q", Q)

    @classmethod
    def initial(cls, H, d, L2, L3, d1=None):
        return cls(H, d, L2, L3, d1=d1)

    def matrix(self, h):
        return self.Q[h - 1]

    def inverse(self, h):
        return np.linalg.inv(self.Q[h - 1])

    def counts(self):
        return [len(c) for c in self.directions]


def append_direction(Q, h, w):
    """Append Q_h^-1 w to C_h and update Q_h = (Q_h^-2 + Q_h^-1 w w^T Q_h^-1)^(-1/2)."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        raise ValueError("direction must be nonzero")
    # work with the Gram matrix Q_h^-2 = L2^-2 I + sum u u^T directly
    G = np.eye(Q.d) / Q.L2 ** 2
    for v in Q.directions[h - 1]:
        G = G + np.outer(v, v)
    u = sym_power(G, 0.5) @ w
    new_h = sym_power(G + np.outer(u, u), -0.5)
    dirs = list(Q.directions)
    dirs[h - 1] = dirs[h - 1] + (u,)
    if Q.d1 is not None and len(dirs[h - 1]) > Q.d1:
        raise AssertionError(f"stage {h} direction count {len(dirs[h - 1])} exceeds d1 = {Q.d1}")
    mats = Q.Q.copy()
    mats[h - 1] = new_h
    return replace(Q, directions=tuple(dirs), Q=mats)


@dataclass
class PreconditioningReport:
    valid: bool
    violations: list
    ellipsoid_norms: np.ndarray     # per stage max ||theta||_{Q_h^-2}
    ellipsoid_bound: float


def validate_preconditioning(Q, theta_by_stage, d1, tol=PRECOND_TOL):
    """Check the prefix conditions of every direction and the ellipsoid bound."""
    violations = []
    norms = np.zeros(Q.H)
    bound = math.sqrt(d1 + 1)
    for h in range(1, Q.H + 1):
        thetas = np.atleast_2d(np.asarray(theta_by_stage[h - 1], dtype=float))
        base = np.eye(Q.d) / Q.L2 ** 2
        for i, v in enumerate(Q.directions[h - 1]):
            sup = float(np.abs(thetas @ v).max(initial=0.0))
            if sup > 1 + tol:
                violations.append(f"stage {h} direction {i}: sup |<theta, v>| = {sup:.6g} > 1")
            gain = float(np.sum((sym_power(base, -0.5) @ v) ** 2))
            if gain < 0.5 - tol:
                violations.append(f"stage {h} direction {i}: prefix gain {gain:.6g} < 1/2")
            if np.linalg.norm(v) > Q.L3 + tol:
                violations.append(f"stage {h} direction {i}: norm {np.linalg.norm(v):.6g} > L3")
            base = base + np.outer(v, v)
        if len(Q.directions[h - 1]) > d1:
            violations.append(f"stage {h}: {len(Q.directions[h - 1])} directions exceed d1 = {d1}")
        Qinv = np.linalg.inv(Q.matrix(h))
        if thetas.size:
            norms[h - 1] = np.linalg.norm(thetas @ Qinv, axis=1).max()
        if norms[h - 1] > bound + tol:
            violations.append(f"stage {h}: ellipsoid norm {norms[h - 1]:.6g} > sqrt(d1+1)")
    return PreconditioningReport(not violations, violations, norms, bound)


def z_projector(Q, h):
    """Projector onto the eigenvectors of Q_h with eigenvalue >= L3^-2."""
    w, U = np.linalg.eigh(Q.matrix(h))
    keep = w >= Q.L3 ** -2 - EIG_TOL
    Uk = U[:, keep]
    return Uk @ Uk.T


# ------------------------------------------------------------------ designs

@dataclass(frozen=True, eq=False)
class DesignSet:
    """Weighted support of a near-optimal design for one stage.

    ``points`` are the preconditioned parameters of the support, ``support``
    their indices into the sample the design was computed from.
    """

    stage: int
    support: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    V: np.ndarray
    V_pinv: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    max_leverage: float
    iterations: int = 0

    @property
    def size(self):
        return len(self.support)

    def guess_block(self, d0):
        """Support points padded with zeros to ``d0`` rows."""
        out = np.zeros((d0, self.V.shape[0]))
        out[: self.size] = self.points
        return out


def design_size(d):
    """d0 = max(16, ceil(4 d log log max(d, 3)) + 16)."""
    return max(16, math.ceil(4 * d * math.log(math.log(max(d, 3)))) + 16)


def _caratheodory(Z, w, max_support):
    """Drop support points while keeping sum_i w_i z_i z_i^T fixed."""
    r = Z.shape[1]
    iu = np.triu_indices(r)
    w = w.copy()
    while True:
        idx = np.flatnonzero(w > 0)
        n_rows = len(iu[0]) + 1
        if len(idx) <= max_support or len(idx) <= n_rows:
            return w
        rows = np.vstack([np.array([np.outer(z, z)[iu] for z in Z[idx]]).T, np.ones(len(idx))])
        c = np.linalg.svd(rows)[2][-1]
        if c.max() <= 0:
            c = -c
        pos = np.flatnonzero(c > 1e-14)
        ratios = w[idx[pos]] / c[pos]
        w[idx] = w[idx] - ratios.min() * c
        w[idx[pos[np.argmin(ratios)]]] = 0.0
        w = np.where(w > 1e-15, w, 0.0)
        w /= w.sum()


def compute_near_optimal_design(points, d0, stage=0, budget=10_000, margin=1e-3):
    """Frank-Wolfe D-optimal design over the span of ``points``.

    Stops once every point has leverage ||theta||^2_{V^+} <= 2d - margin, then
    trims the support to at most ``d0`` points without changing V.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    M, d = X.shape
    if M == 0:
        raise ValueError("design needs at least one point")
    zero = np.zeros((d, d))
    scale = np.abs(X).max()
    if scale == 0:
        return DesignSet(stage, np.zeros(0, int), np.zeros(0), np.zeros((0, d)), zero, zero,
                         np.zeros(d), np.eye(d), 0.0)
    _, sv, vt = np.linalg.svd(X, full_matrices=False)
    r = int(np.sum(sv > 1e-10 * sv[0]))
    B = vt[:r].T
    Z = X @ B

    # greedy linearly independent start (largest residual norm first)
    chosen = []
    R = Z.copy()
    for _ in range(r):
        i = int(np.argmax(np.einsum("ij,ij->i", R, R)))
        chosen.append(i)
        u = R[i] / np.linalg.norm(R[i])
        R = R - np.outer(R @ u, u)
    w = np.zeros(M)
    w[chosen] = 1.0 / r

    target = 2 * d - margin
    it = 0
    while True:
        Minv = np.linalg.inv((Z.T * w) @ Z)
        lev = np.einsum("ij,jk,ik->i", Z, Minv, Z)
        j = int(np.argmax(lev))
        g = lev[j]
        if g <= max(target, r) or it >= budget:
            break
        step = (g / r - 1.0) / (g - 1.0)
        w *= 1.0 - step
        w[j] += step
        it += 1
    if lev.max() > 2 * d:
        raise RuntimeError(f"design stalled: max leverage {lev.max():.4g} > 2d after {it} steps")

    w[w < 1e-14] = 0.0
    w /= w.sum()
    w = _caratheodory(Z, w, d0)
    support = np.flatnonzero(w > 0)
    weights = w[support]
    pts = X[support]
    V = (pts.T * weights) @ pts
    V = 0.5 * (V + V.T)
    V_pinv = np.linalg.pinv(V, rcond=1e-12, hermitian=True)
    ev, U = np.linalg.eigh(V)
    lev_all = np.einsum("ij,jk,ik->i", X, V_pinv, X)
    if len(support) > d0:
        raise RuntimeError(f"support {len(support)} exceeds d0 = {d0}")
    return DesignSet(stage, support, weights, pts, V, V_pinv, ev, U, float(lev_all.max()), it)


def design_violations(design, points, d, tol_lev=1e-6, tol_ker=1e-8):
    """Failures of the two design conditions against the sample ``points``."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    out = []
    lev = np.einsum("ij,jk,ik->i", X, design.V_pinv, X) if design.size else np.zeros(len(X))
    if lev.max(initial=0.0) > 2 * d + tol_lev:
        out.append(f"leverage {lev.max():.6g} > 2d")
    top = design.eigvals.max(initial=0.0)
    kernel = design.eigvecs[:, design.eigvals <= 1e-10 * max(top, 1.0)]
    if design.size == 0:
        kernel = np.eye(X.shape[1])
    if kernel.size and np.abs(X @ kernel).max(initial=0.0) > tol_ker:
        out.append("sample has a component in kernel(V)")
    return out


def parallel_perp_projectors(design, gamma):
    keep = design.eigvals >= gamma - EIG_TOL
    U = design.eigvecs[:, keep]
    P_par = U @ U.T
    return P_par, np.eye(design.V.shape[0]) - P_par


# ------------------------------------------------------------------ constants

PRACTICAL_DEFAULTS = {
    "n": 200,
    "beta": 2.0,
    "omega": 1.0,
    "lam": 1.0,
    "uncertainty_scale": 100.0,
    "discrepancy_scale": 4.0,
}


@dataclass(frozen=True)
class ConstantSet:
    d: int
    H: int
    eps: float
    zeta: float
    L1: float
    L2: float
    mode: str
    d0: int
    d1: int
    omega: float
    gamma: float
    beta: float
    alpha: float
    lam: float
    n: int
    m_max: int
    m_prime_max: int
    L3: float
    eta: float
    eta0: float
    eta_max: float
    xi: float
    iterations: int = 0
    multipliers: dict = field(default_factory=dict)
    uncertainty_scale: float = 1.0
    discrepancy_scale: float = 1.0

    @property
    def sigma_cap(self):
        return 2.0 / (self.beta * self.omega * self.d * self.H)

    @property
    def uncertainty_threshold(self):
        return self.uncertainty_scale * self.eps / (self.d * self.H ** 2 * self.beta * self.omega)

    def discrepancy_threshold(self, sigma_k):
        return self.discrepancy_scale * (sigma_k * self.beta * self.omega + 3 * self.eps / (self.d * self.H ** 2))

    @property
    def projection_tolerance(self):
        return self.eps / (self.d * self.H ** 2 * self.omega)

    @property
    def theta_bar_radius(self):
        return 4 * self.d0 * self.H * self.L2 / self.alpha

    @property
    def guess_radius(self):
        return math.sqrt(self.d1 + 1)

    def report(self):
        keys = ["mode", "d", "H", "eps", "zeta", "L1", "L2", "d0", "d1", "omega", "gamma", "alpha",
                "lam", "beta", "n", "m_max", "m_prime_max", "L3", "xi", "eta", "eta0", "eta_max",
                "iterations"]
        lines = [f"{k} = {getattr(self, k)}" for k in keys]
        lines += [f"sigma_cap = {self.sigma_cap}", f"uncertainty_threshold = {self.uncertainty_threshold}",
                  f"projection_tolerance = {self.projection_tolerance}"]
        lines += [f"override.{k} = {v}" for k, v in sorted(self.multipliers.items())]
        return "\n".join(lines)


def _d1_from_L3(d, L2, L3):
    return math.ceil(4 * d * math.log(1 + 16 * L3 ** 4 * L2 ** 4))


def _m_max(beta, n, lam, d, H, L1):
    # m = beta^2 log(1 + H m n L1^2 / (d lam)) + 1, solved from m = 1 upward
    m = 1.0
    for _ in range(500):
        nxt = beta ** 2 * math.log(1 + H * m * n * L1 ** 2 / (d * lam)) + 1
        if abs(nxt - m) < 1e-9 * max(1.0, m):
            m = nxt
            break
        m = nxt
    return math.ceil(m)


def _L3(d, H, eps, L1, d1, lam, m_max, n, omega):
    lhs = 8 * L1 * math.sqrt(d1 + 1) * math.sqrt(2 * d) * H ** 2 / eps
    lhs *= 1 + L1 * lam ** -0.5 * math.sqrt(m_max * n * H * d)
    return math.sqrt(lhs * d * H ** 2 * omega / eps)


def compute_constants(d, H, eps, zeta, L1=1.0, L2=1.0, mode="theory", eta=0.0, overrides=None,
                      budget=100):
    """Algorithm constants, solved as a joint fixed point.

    In ``practical`` mode the entries of ``overrides`` (defaults in
    ``PRACTICAL_DEFAULTS``) replace n, beta, omega and lambda after the theory
    values are formed, and the remaining constants are recomputed from them.
    """
    if min(d, H, eps, zeta, L1, L2) <= 0:
        raise ValueError("all inputs must be positive")
    if mode not in ("theory", "practical"):
        raise ValueError(f"unknown mode {mode!r}")
    over = dict(PRACTICAL_DEFAULTS) if mode == "practical" else {}
    unknown = set(overrides or {}) - set(PRACTICAL_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown overrides {sorted(unknown)}")
    over.update(overrides or {})

    d0 = design_size(d)
    gamma = 1.0 / (8 * d)
    d1 = _d1_from_L3(d, L2, 1.0)
    m_max, n = 1, 1
    state = None
    trace = []
    for it in range(1, budget + 1):
        omega = over.get("omega", 7 * (d1 + 1) + 7 / 3)
        alpha = math.sqrt(gamma) * eps / (math.sqrt(2 * d) * math.sqrt(d1 + 1) * H ** 2)
        lam = over.get("lam", (alpha / (4 * d0 * L2)) ** 2)
        eta0 = 5 * d0 * eta / alpha
        m_prime = m_max + H * d1
        if "n" in over:
            n = int(over["n"])
        else:
            n = math.ceil(64 * (d * H ** 2 * omega) ** 2 / eps ** 2 * H ** 2
                          * (2 * d * math.log(18 * d * H ** 3 / eps) + math.log(2 * m_prime * H ** 2 / zeta)))
        small = min(eps / (d * H ** 2 * omega), 1 / math.sqrt(m_prime * n * H))
        xi = eps / (5 * math.sqrt(2 * d) * (H + 1) ** 3 * L1) * (small - eta0)
        if xi <= 0:
            raise ValueError("eta too large: the concentration slack xi is not positive")
        if "beta" in over:
            beta = float(over["beta"])
        else:
            beta = 2 + 2 * H * math.sqrt(
                2 * d * H * (d0 + 1) * math.log(12 * d0 * H * L2 / (alpha * xi))
                + 2 * math.log(m_prime * H ** 2 / zeta)
                + d * math.log(lam + m_prime * n * H * L1 ** 2 / d))
        m_max = _m_max(beta, n, lam, d, H, L1)
        L3 = _L3(d, H, eps, L1, d1, lam, m_max, n, omega)
        new_d1 = _d1_from_L3(d, L2, L3)
        new_state = (new_d1, n, m_max)
        trace.append(new_state)
        if new_state == state and new_d1 == d1:
            break
        state = new_state
        d1 = new_d1
    else:
        raise RuntimeError(f"constants did not converge in {budget} rounds: {trace[-5:]}")
    eta_max = alpha / (10 * d0) * min(eps / (d * H ** 3 * omega), 1 / math.sqrt((m_max + H * d1) * n * H))
    return ConstantSet(
        d=d, H=H, eps=eps, zeta=zeta, L1=L1, L2=L2, mode=mode, d0=d0, d1=d1, omega=omega,
        gamma=gamma, beta=beta, alpha=alpha, lam=lam, n=n, m_max=m_max, m_prime_max=m_max + H * d1,
        L3=L3, eta=eta, eta0=5 * d0 * eta / alpha, eta_max=eta_max, xi=xi, iterations=it,
        multipliers={k: over[k] for k in sorted(over)},
        uncertainty_scale=float(over.get("uncertainty_scale", 1.0)),
        discrepancy_scale=float(over.get("discrepancy_scale", 1.0)),
    )
