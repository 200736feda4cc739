import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skippylab import instances
from skippylab.features import fit_policy_parameters
from skippylab.mdp import evaluate_policy_exact, optimal_values, validate_mdp
from skippylab.oracles import (converted_value_pairs, elliptical_potential_slacks, enumerate_policies,
                               infrequent_update_slack, infrequent_update_sums,
                               lse_confidence_check, random_policies,
                               skip_convert_to_linear)


def test_enumeration_matches_direct_evaluation():
    mdp, feats = instances.random_linear(d=2, H=3, states_per_stage=2, seed=4)
    enum = enumerate_policies(mdp, feats)
    assert enum.count == mdp.A ** mdp.S
    for p in (0, 7, enum.count - 1):
        pi = enum.policy(p, mdp.A)
        vt = evaluate_policy_exact(mdp, pi)
        assert np.allclose(enum.q[p], vt.q, atol=1e-14)
        fit = fit_policy_parameters(mdp, feats, pi)
        assert np.allclose(enum.errors[p], fit.errors, atol=1e-9)
    assert enum.v[:, 0].max() == pytest.approx(optimal_values(mdp)[0].v[0], abs=1e-12)


def test_enumeration_cap():
    mdp, feats = instances.tabular(H=4, states_per_stage=3, seed=0)
    with pytest.raises(ValueError):
        enumerate_policies(mdp, feats, cap=100)


def test_random_policies_are_distributions():
    mdp, _ = instances.tabular(seed=0)
    for pi in random_policies(mdp, 5, seed=1):
        assert np.allclose(pi.probs.sum(1), 1.0)


def test_linear_instance_has_zero_misspecification():
    mdp, feats = instances.random_linear(d=2, H=3, states_per_stage=2, seed=1)
    assert enumerate_policies(mdp, feats).eta <= 1e-9


# ---------------------------------------------------------------- skip conversion

def test_two_path_conversion_is_linear(two_path):
    mdp, feats = two_path
    samples = enumerate_policies(mdp, feats).samples
    conv = skip_convert_to_linear(mdp, feats, 0.01, samples)
    assert conv.kappa <= 1e-9
    assert validate_mdp(conv.mdp, reward_bound=mdp.H) == []
    for c, o in converted_value_pairs(conv, mdp):
        assert abs(c - o) <= 1e-12


def test_padded_conversion_keeps_values():
    mdp, feats = instances.padded_linear(d=2, H=5, chain=2, core_states=2, seed=3)
    enum = enumerate_policies(mdp, feats)
    conv = skip_convert_to_linear(mdp, feats, 1e-6, enum.samples, n_policies=10, n_random=10)
    assert not conv.kept.all()
    assert conv.features.d == feats.d * mdp.H + 2
    assert validate_mdp(conv.mdp, reward_bound=mdp.H) == []
    for c, o in converted_value_pairs(conv, mdp):
        assert abs(c - o) <= 1e-10


# ---------------------------------------------------------------- concentration and potentials

def test_confidence_bound_coverage():
    rep = lse_confidence_check(sigma=0.5, xi=0.01, lam=1.0, d=3, trials=500, zeta=0.1, steps=50)
    assert rep.coverage >= 0.9
    assert rep.j2_min_slack >= -1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), d=st.integers(1, 6), n=st.integers(1, 120))
def test_elliptical_potential_chain(seed, d, n):
    rng = np.random.default_rng(seed)
    L = float(rng.uniform(0.1, 3))
    a = rng.normal(size=(n, d))
    a *= (L * rng.uniform(size=(n, 1))) / np.linalg.norm(a, axis=1, keepdims=True)
    M = rng.normal(size=(d, d))
    V0 = M @ M.T + rng.uniform(0.1, 2) * np.eye(d)
    left, right = elliptical_potential_slacks(V0, a, L)
    assert left >= -1e-9 and right >= -1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), d=st.integers(1, 5), n=st.integers(1, 30),
       scale=st.floats(1e-3, 1e3))
def test_infrequent_update_weak_bound(seed, d, n, scale):
    # left >= S/(1+S) >= min(1, S)/2 with S the sum of norms under the base matrix
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, d))
    V = M @ M.T + np.eye(d)
    a = scale * rng.normal(size=(n, d))
    left, base = infrequent_update_sums(V, a)
    assert left >= base / (1 + base) - 1e-9
    assert base / (1 + base) >= min(1.0, base) / 2 - 1e-12


def test_infrequent_update_bound_fails_for_one_dominant_vector():
    # one vector with ||a||^2_{V^-1} = x >= 2: left side x/(1+x) < 1 = min(1, x/2)
    for x in (2.0, 4.0, 100.0):
        slack = infrequent_update_slack(np.eye(1), [np.array([math.sqrt(x)])])
        assert slack == pytest.approx(x / (1 + x) - 1.0, abs=1e-12)
        assert slack < 0


def test_infrequent_update_bound_fails_for_two_unit_steps():
    slack = infrequent_update_slack(np.eye(1), [np.ones(1), np.ones(1)])
    assert slack == pytest.approx(1 / 2 + 1 / 3 - 1.0, abs=1e-12)
