import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skippylab import instances
from skippylab.features import (FeatureTable, action_spread, chebyshev_fit, feature_diff,
                                fit_policy_parameters, measure_misspecification,
                                precondition_features, precondition_parameter, range_exact,
                                range_Q, range_Q_guess, range_table)
from skippylab.geometry import Preconditioning, compute_near_optimal_design, design_size
from skippylab.mdp import Mdp, MemorylessPolicy, deterministic_rewards, evaluate_policy_exact
from skippylab.oracles import enumerate_policies
from skippylab.skippy import Guess, correct_guess


def _all_deterministic(mdp):
    enum = np.array(np.meshgrid(*[range(mdp.A)] * mdp.S)).reshape(mdp.S, -1).T
    return [MemorylessPolicy.deterministic(a, mdp.A) for a in enum]


def test_feature_diff_examples(two_path):
    _, feats = two_path
    assert np.array_equal(feature_diff(feats, 0, 0, 1), [0.0])
    assert np.array_equal(feature_diff(feats, 2, 1, 1), [0.0])
    phi = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert np.array_equal(feature_diff(FeatureTable(phi), 0, 0, 1), [1.0, -1.0])
    with pytest.raises(IndexError):
        feature_diff(feats, 0, 0, 2)


def test_two_path_fit_is_exact_for_every_policy(two_path):
    mdp, feats = two_path
    for pi in _all_deterministic(mdp):
        fit = fit_policy_parameters(mdp, feats, pi)
        # the last stage has only zero features, so its parameter is the min-norm 0
        assert np.allclose(fit.theta[:2], 1.0, atol=1e-12)
        assert np.all(fit.theta[2] == 0)
        assert fit.errors.max() <= 1e-12


def test_zero_features_zero_rewards():
    mdp = Mdp((1, 2), 2, np.array([[[0, .5, .5]] * 2] + [[[0, 0, 0]] * 2] * 2, float),
              *deterministic_rewards(np.zeros((3, 2))))
    fit = fit_policy_parameters(mdp, FeatureTable(np.zeros((3, 2, 2))), MemorylessPolicy.default(mdp))
    assert np.all(fit.theta == 0) and np.all(fit.errors == 0)


def test_one_hot_fit_interpolates():
    mdp, feats = instances.tabular(H=3, states_per_stage=2, seed=8)
    pi = MemorylessPolicy.uniform(mdp)
    q = evaluate_policy_exact(mdp, pi).q
    fit = fit_policy_parameters(mdp, feats, pi)
    assert fit.errors.max() <= 1e-10
    for h in range(1, mdp.H + 1):
        idx = mdp.stage_states(h)
        assert np.allclose(fit.theta[h - 1][: q[idx].size], q[idx].ravel(), atol=1e-10)


def test_misspecification_examples(two_path):
    mdp, feats = two_path
    assert measure_misspecification(mdp, feats, _all_deterministic(mdp)).eta <= 1e-12
    tab, tfeats = instances.tabular(seed=1)
    assert measure_misspecification(tab, tfeats, [MemorylessPolicy.uniform(tab)]).eta <= 1e-10
    r = np.array(mdp.r_mean)
    r[1] = 0.3
    bent = Mdp(mdp.stage_sizes, mdp.A, mdp.P, *deterministic_rewards(r))
    assert measure_misspecification(bent, feats, _all_deterministic(bent)).eta > 0.1


def test_chebyshev_fit_certificate(rng):
    for _ in range(20):
        Phi = rng.normal(size=(12, 3))
        y = rng.normal(size=12)
        theta, err, gap = chebyshev_fit(Phi, y, 0.5)
        assert np.linalg.norm(theta) <= 0.5 + 1e-8
        assert abs(err - np.abs(y - Phi @ theta).max()) <= 1e-12
        assert 0 <= gap <= 1e-6


def test_chebyshev_fit_matches_brute_force_1d(rng):
    # 1-d fit: the optimum over a fine grid is a hard lower bound up to grid spacing
    Phi = rng.uniform(-1, 1, size=(8, 1))
    y = rng.uniform(-1, 1, size=8)
    _, err, _ = chebyshev_fit(Phi, y, 2.0)
    grid = np.linspace(-2, 2, 400_001)
    brute = np.abs(y[None] - grid[:, None] * Phi[:, 0][None]).max(1).min()
    assert err <= brute + 1e-9
    assert err >= brute - 1e-4


def test_range_examples(two_path):
    mdp, feats = two_path
    samples = enumerate_policies(mdp, feats).samples
    assert range_exact(mdp, feats, 1, samples) == 0.0
    assert range_exact(mdp, feats, 0, samples) == 0.0
    phi = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert action_spread(phi, [[0.7, 0.0]]) == pytest.approx(0.7, abs=0)
    assert action_spread(phi, np.zeros((0, 2))) == 0.0


def _design_for(points, h):
    return compute_near_optimal_design(points, design_size(points.shape[1]), stage=h)


def test_range_Q_single_design():
    sizes = (1, 1)
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    mdp = Mdp(sizes, 2, P, *deterministic_rewards(np.zeros((2, 2))))
    phi = np.zeros((2, 2, 1))
    phi[1, 0] = 0.5
    feats = FeatureTable(phi)
    Q = Preconditioning.initial(2, 1, 1.0, 1.0)
    design = _design_for(np.array([[1.0]]), 2)
    assert range_Q(mdp, feats, 1, design, Q) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        range_Q(mdp, feats, 0, design, Q)


def test_range_Q_guess_examples(rng):
    mdp, feats = instances.random_linear(d=2, H=3, seed=3)
    samples = enumerate_policies(mdp, feats).samples
    Q = Preconditioning.initial(mdp.H, 2, feats.L2, 10.0)
    d0 = design_size(2)
    designs = {h: _design_for(samples[h - 1], h) for h in range(2, mdp.H + 1)}
    guess = correct_guess(designs, mdp.H, d0, 2)
    zero = Guess.zeros(mdp.H, d0, 2)
    delta = 1e-3
    for s in range(1, mdp.S):
        h = int(mdp.stage_of[s])
        exact = range_Q(mdp, feats, s, designs[h], Q)
        assert range_Q_guess(mdp, feats, s, guess, Q) == exact
        assert range_Q_guess(mdp, feats, s, zero, Q) == 0.0
        vec = guess.vectors.copy()
        vec[h, 0] += delta * rng.normal(size=2) / np.sqrt(2)
        moved = range_Q_guess(mdp, feats, s, Guess(vec), Q)
        bound = 2 * feats.L1 * np.linalg.norm(Q.matrix(h), 2) * np.linalg.norm(vec[h, 0] - guess.vectors[h, 0])
        assert abs(moved - exact) <= bound + 1e-12


def test_preconditioning_example():
    Q = Preconditioning(1, 2, 1.0, 1.0, Q=np.diag([2.0, 0.5])[None])
    phi = FeatureTable(np.array([[[1.0, 1.0]]]))
    mdp = Mdp((1,), 1, np.zeros((1, 1, 1)), *deterministic_rewards(np.zeros((1, 1))))
    pq = precondition_features(phi, Q, 0, 0, mdp)
    tq = precondition_parameter(np.array([3.0, 4.0]), Q, 1)
    assert np.allclose(pq, [2.0, 0.5]) and np.allclose(tq, [1.5, 8.0])
    assert pq @ tq == pytest.approx(7.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), d=st.integers(1, 6))
def test_preconditioning_preserves_inner_products(seed, d):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, d))
    Qm = M @ M.T + 0.1 * np.eye(d)
    Q = Preconditioning(1, d, 1.0, 1.0, Q=Qm[None])
    phi = rng.normal(size=d)
    theta = rng.normal(size=d)
    got = (Qm @ phi) @ precondition_parameter(theta, Q, 1)
    assert abs(got - phi @ theta) <= 1e-10 * max(1.0, np.abs(phi).sum() * np.abs(theta).sum())


def test_range_table_zero_on_zero_range_instance():
    mdp, feats = instances.zero_range(seed=2)
    samples = enumerate_policies(mdp, feats).samples
    assert np.all(range_table(mdp, feats, samples) == 0)
