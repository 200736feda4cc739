import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skippylab import _kernels, instances
from skippylab.features import FeatureTable
from skippylab.geometry import Preconditioning, compute_near_optimal_design, design_size
from skippylab.mdp import Mdp, MemorylessPolicy, N_UNIFORMS, deterministic_rewards, evaluate_policy_exact
from skippylab.oracles import enumerate_policies, estimated_value_by_enumeration
from skippylab.skippy import (D_value, E_step, E_to, F_value, Guess, bar_F_monte_carlo, bar_F_table,
                              correct_guess, correction_arrays, phi_bar_Q, phi_bar_table,
                              pi_plus_and_C, pi_plus_table, run_skippy_batch, run_skippy_policy,
                              skippy_policy_value, tau, tau_table)

EPS = 0.1


def _correct(mdp, feats, Q):
    samples = enumerate_policies(mdp, feats).samples
    d0 = design_size(feats.d)
    designs = {h: compute_near_optimal_design(np.atleast_2d(samples[h - 1]) @ Q.inverse(h), d0, stage=h)
               for h in range(2, mdp.H + 1)}
    return correct_guess(designs, mdp.H, d0, feats.d)


def _two_state_chain(phi_last):
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    mdp = Mdp((1, 1), 2, P, *deterministic_rewards(np.zeros((2, 2))))
    phi = np.zeros((2, 2, len(phi_last[0])))
    phi[1] = phi_last
    return mdp, FeatureTable(phi)


# ---------------------------------------------------------------- tau

def test_tau_examples(two_path):
    mdp, feats = two_path
    Q = Preconditioning.initial(mdp.H, 1, 1.0, 10.0)
    g = _correct(mdp, feats, Q)
    assert tau(mdp, feats, 0, g, Q, EPS) == 1.0
    assert np.all(tau_table(mdp, feats, g, Q, EPS)[1:] == 0.0)


def test_tau_boundary_is_one():
    d, H = 1, 2
    edge = EPS / (math.sqrt(2 * d) * H)
    mdp, feats = _two_state_chain([[edge], [0.0]])
    Q = Preconditioning.initial(H, d, 1.0, 10.0)
    g = Guess.zeros(H, 16, d)
    g.vectors[2, 0] = 1.0
    assert tau(mdp, feats, 1, g, Q, EPS) == 1.0
    g.vectors[2, 0] = 0.5
    assert tau(mdp, feats, 1, g, Q, EPS) == pytest.approx(0.5, abs=1e-15)


# ---------------------------------------------------------------- greedy

def test_pi_plus_examples(two_path):
    mdp, feats = _two_state_chain([[-3.0], [2.5]])
    assert pi_plus_and_C(mdp, feats, 1, np.zeros((2, 1))) == (0, 0.0)
    assert pi_plus_and_C(mdp, feats, 1, np.ones((2, 1))) == (1, 2.0)
    fm, ff = two_path
    assert pi_plus_and_C(fm, ff, 0, np.ones((3, 1))) == (0, 1.0)


def test_pi_plus_table_matches_pointwise():
    mdp, feats = instances.random_linear(d=3, H=4, seed=2)
    th = np.random.default_rng(0).normal(size=(4, 3))
    a, C = pi_plus_table(mdp, feats, th)
    for s in range(mdp.S):
        assert (a[s], C[s]) == pi_plus_and_C(mdp, feats, s, th)
        assert 0 <= C[s] <= mdp.H


# ---------------------------------------------------------------- trajectories

def test_zero_range_stage_map():
    mdp, feats = instances.zero_range(H=4, seed=1)
    Q = Preconditioning.initial(4, feats.d, feats.L2, 10.0)
    g = _correct(mdp, feats, Q)
    th = np.random.default_rng(1).normal(size=(4, feats.d))
    aplus, _ = pi_plus_table(mdp, feats, th)
    for k in range(1, 5):
        tr = run_skippy_policy(mdp, feats, g, th, k, Q, EPS, 3)
        assert list(tr.pmap) == [1, 5, 5, 5]
        assert tr.trajectory.actions[0] == aplus[0]
        assert np.all(tr.trajectory.actions[1:] == 0)


def test_always_landing_stage_map():
    mdp, feats = instances.tabular(H=5, seed=3)
    tau_tab = np.ones(mdp.S)
    aplus = np.full(mdp.S, 1)
    U = np.random.default_rng(0).random((50, 5, N_UNIFORMS))
    for k in range(1, 6):
        st_, ac, _, _, pm = run_skippy_batch(mdp, tau_tab, aplus, k, U)
        assert np.all(pm == np.arange(1, 6))
        assert np.all(ac[:, :k] == 1) and np.all(ac[:, k:] == 0)


def test_two_path_skippy_return(two_path):
    mdp, feats = two_path
    Q = Preconditioning.initial(mdp.H, 1, 1.0, 10.0)
    g = _correct(mdp, feats, Q)
    for seed in range(20):
        tr = run_skippy_policy(mdp, feats, g, np.ones((3, 1)), mdp.H, Q, EPS, seed)
        assert tr.trajectory.total_reward == 1.0
        assert list(tr.pmap) == [1, 4, 4]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), H=st.integers(2, 6))
def test_prefix_law_under_coupling(seed, H):
    mdp, _ = instances.tabular(H=H, A=3, seed=seed % 997)
    rng = np.random.default_rng(seed)
    tau_tab = rng.uniform(size=mdp.S)
    tau_tab[0] = 1.0
    aplus = rng.integers(0, 3, size=mdp.S)
    U = rng.random((40, H, N_UNIFORMS))
    for k in range(1, H):
        a = run_skippy_batch(mdp, tau_tab, aplus, k, U)
        b = run_skippy_batch(mdp, tau_tab, aplus, k + 1, U)
        for e in range(len(U)):
            p = a[4][e, k]                      # stage of landing k+1
            stop = min(p, H)
            assert np.array_equal(a[0][e, :stop], b[0][e, :stop])
            assert np.array_equal(a[1][e, :p - 1], b[1][e, :p - 1])
            assert np.array_equal(a[4][e, :k + 1], b[4][e, :k + 1])


def test_exact_skippy_value_matches_simulation():
    mdp, _ = instances.tabular(H=4, seed=6)
    rng = np.random.default_rng(2)
    tau_tab = rng.uniform(size=mdp.S)
    tau_tab[0] = 1.0
    aplus = rng.integers(0, 2, size=mdp.S)
    U = rng.random((200_000, 4, N_UNIFORMS))
    for k in (1, 3):
        ret = run_skippy_batch(mdp, tau_tab, aplus, k, U)[2].sum(1)
        v = skippy_policy_value(mdp, tau_tab, aplus, k)[0, 0]
        assert abs(ret.mean() - v) <= 4 * ret.std(ddof=1) / math.sqrt(len(ret))


# ---------------------------------------------------------------- suffix calculus

def test_D_value_examples():
    assert D_value(0.0, np.zeros(3)) == 0.0
    assert D_value(4.0, np.zeros(3)) == 4.0


def test_correction_examples(rng):
    C, r = rng.uniform(0, 3, size=4), rng.uniform(size=4)
    assert E_to(np.zeros(4), C, r) == 0.0
    assert all(E_step(np.zeros(4)[j:], C[j:], r[j:]) == 0.0 for j in range(4))
    t = rng.uniform(size=4)
    t[0] = 1.0
    assert E_to(t, C, r) == pytest.approx(D_value(C[0], r), abs=1e-15)


def _suffix(rng):
    L = int(rng.integers(1, 9))
    H = int(rng.integers(L, 11))
    t = rng.uniform(size=L)
    t[rng.random(L) < 0.25] = 0.0
    return H, t, rng.uniform(0, H, size=L), rng.uniform(size=L)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_suffix_invariants(seed):
    rng = np.random.default_rng(seed)
    H, t, C, r = _suffix(rng)
    L = len(t)
    total = E_to(t, C, r)
    steps = [E_step(t[j:], C[j:], r[j:]) for j in range(L)]
    assert abs(total - sum(steps)) <= 1e-10
    for j in range(L):
        tail = r[j:].sum()
        assert -tail - 1e-12 <= D_value(C[j], r[j:]) <= H
        assert -tail - 1e-12 <= E_to(t[j:], C[j:], r[j:]) <= H + 1e-12
        assert abs(steps[j]) <= 2 * t[j] * H + 1e-12
        nxt = E_to(t[j + 1:], C[j + 1:], r[j + 1:])
        assert abs(steps[j] - (E_to(t[j:], C[j:], r[j:]) - nxt)) <= 1e-10
    est = estimated_value_by_enumeration(np.r_[1.0, t], np.r_[0.0, C], np.r_[0.0, r])
    assert abs(est - (r.sum() + total)) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_kernel_recursion_matches_probability_form(seed):
    rng = np.random.default_rng(seed)
    S, n, L = 9, 20, 6
    states = rng.integers(0, S, size=(n, L))
    rewards = rng.uniform(size=(n, L))
    tau_tab, C_tab = rng.uniform(size=S), rng.uniform(0, L, size=S)
    e_to, e_step = correction_arrays(states, rewards, tau_tab, C_tab)
    for e in range(n):
        for j in range(L):
            t, C, r = tau_tab[states[e, j:]], C_tab[states[e, j:]], rewards[e, j:]
            assert abs(e_to[e, j] - E_to(t, C, r)) <= 1e-10
            assert abs(e_step[e, j] - E_step(t, C, r)) <= 1e-10


# ---------------------------------------------------------------- matrix lift

def test_phi_bar_examples():
    mdp, feats = _two_state_chain([[0.3, 0.2], [0.3, 0.2]])
    Q = Preconditioning.initial(2, 2, 1.0, 10.0)
    assert np.all(phi_bar_Q(mdp, feats, 1, Q) == 0)
    mdp, feats = _two_state_chain([[3.0, 0.0], [0.0, 0.0]])
    assert np.allclose(np.abs(phi_bar_Q(mdp, feats, 1, Q)), [1.0, 0.0])
    # three actions: the length-3 difference beats the two of length 2.5
    P = np.zeros((2, 3, 2))
    P[0, :, 1] = 1.0
    m3 = Mdp((1, 1), 3, P, *deterministic_rewards(np.zeros((2, 3))))
    phi = np.zeros((2, 3, 2))
    phi[1] = [[1.5, 0.0], [-1.5, 0.0], [0.0, 2.0]]
    got = phi_bar_Q(m3, FeatureTable(phi, L1=2.0), 1, Q)
    assert np.allclose(np.abs(got), [1.0, 0.0])
    with pytest.raises(ValueError):
        phi_bar_Q(mdp, feats, 0, Q)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_phi_bar_is_unit_or_zero(seed):
    mdp, feats = instances.random_linear(d=3, H=3, seed=seed % 500)
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3, 3))
    Q = Preconditioning(3, 3, feats.L2, 10.0, Q=np.stack([M @ M.T + 0.1 * np.eye(3)] * 3))
    norms = np.linalg.norm(phi_bar_table(mdp, feats, Q), axis=1)
    assert np.all(np.minimum(np.abs(norms), np.abs(norms - 1)) <= 1e-12)


def test_F_examples(rng):
    mdp, feats = instances.zero_range(seed=0)
    Q = Preconditioning.initial(mdp.H, feats.d, feats.L2, 10.0)
    tau_tab = np.zeros(mdp.S)
    tau_tab[0] = 1.0
    F = bar_F_table(mdp, feats, Q, tau_tab, np.ones(mdp.S))
    assert np.all(F[1:] == 0)
    u = rng.normal(size=4)
    u /= np.linalg.norm(u)
    M = F_value(u, 2.5) / 2.5
    assert np.allclose(M @ M, M) and np.linalg.matrix_rank(M) <= 1
    assert abs(np.trace(F_value(u, -0.7)) + 0.7) <= 1e-12


def test_F_dp_matches_monte_carlo():
    mdp, feats = instances.random_linear(d=2, H=4, seed=9)
    Q = Preconditioning.initial(mdp.H, 2, feats.L2, 10.0)
    rng = np.random.default_rng(4)
    tau_tab = rng.uniform(size=mdp.S)
    C_tab = rng.uniform(0, mdp.H, size=mdp.S)
    F = bar_F_table(mdp, feats, Q, tau_tab, C_tab)
    for s in mdp.stage_states(2):
        mean, se = bar_F_monte_carlo(mdp, feats, Q, tau_tab, C_tab, s, 100_000, seed=int(s))
        assert np.all(np.abs(mean - F[s]) <= 4 * se + 1e-12)


def test_expected_correction_value_identity():
    # sum of rewards plus E_to over default-policy suffixes = value of the skipping estimate
    mdp, _ = instances.tabular(H=4, seed=11)
    rng = np.random.default_rng(5)
    tau_tab, C_tab = rng.uniform(size=mdp.S), rng.uniform(0, 4, size=mdp.S)
    from skippylab.skippy import expected_corrections
    v0, e_to, _ = expected_corrections(mdp, tau_tab, C_tab)
    assert np.allclose(v0, evaluate_policy_exact(mdp, MemorylessPolicy.default(mdp)).v)
    U = rng.random((200_000, mdp.H, N_UNIFORMS))
    from skippylab.mdp import rollout_batch
    st_, _, rw = rollout_batch(mdp, MemorylessPolicy.default(mdp), U)
    got = _kernels.suffix_corrections(st_, rw, tau_tab, C_tab)[0][:, 0]
    assert abs(got.mean() - e_to[0]) <= 4 * got.std(ddof=1) / math.sqrt(len(got))
