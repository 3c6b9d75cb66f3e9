import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmala.errors import NumericalError
from pmala.filtering import make_adapter, run_apf
from pmala.models import TRUE_PARAMS, LinearGaussianSSM, kalman_score, lgss_simulate
from pmala.score import (ScoreRecursionState, ancestral_path_sums, final_score, init_score,
                         score_increment, score_variance_study, update_score)


def test_update_two_particles_by_hand():
    means = np.array([[1.0, 0.0], [3.0, 2.0]])
    state = ScoreRecursionState(means, zeta=0.5)
    inc = np.array([[0.5, 0.5], [-1.0, 1.0]])
    out = update_score(state, np.array([1, 1]), np.array([0.25, 0.75]), inc)
    shared = np.array([2.5, 1.5])
    expected = 0.5 * means[[1, 1]] + 0.5 * shared + inc
    assert np.allclose(out.means, expected)
    assert np.allclose(out.means, [[3.25, 2.25], [1.75, 2.75]])


def test_final_score_is_weighted_mean():
    state = ScoreRecursionState(np.array([[1.0, 2.0], [3.0, -2.0]]), 0.9)
    assert np.allclose(final_score(state, [0.25, 0.75]), [2.5, -1.0])


def test_small_shrinkage_forgets_lineage():
    rng = np.random.default_rng(0)
    state = ScoreRecursionState(rng.normal(size=(5, 3)), zeta=1e-12)
    inc = rng.normal(size=(5, 3))
    w = rng.dirichlet(np.ones(5))
    out = update_score(state, rng.integers(0, 5, 5), w, inc)
    base = out.means - inc
    assert np.allclose(base, base[0], atol=1e-10)
    assert np.allclose(base[0], w @ state.means)


def test_shrinkage_validation():
    with pytest.raises(ValueError):
        ScoreRecursionState(np.zeros((2, 1)), zeta=0.0)
    with pytest.raises(ValueError):
        ScoreRecursionState(np.zeros((2, 1)), zeta=1.5)


def test_nonfinite_gradient_rejected():
    class Broken(LinearGaussianSSM):
        def grad_observation_logdensity(self, x, states, z_t):
            g = super().grad_observation_logdensity(x, states, z_t)
            g[1, 0] = np.nan
            return g

    with pytest.raises(NumericalError):
        init_score(Broken(), TRUE_PARAMS.to_unconstrained(), np.zeros((3, 1)), np.array([0.0]))


@pytest.mark.parametrize("zeta", [0.3, 0.95, 1.0])
def test_single_particle_is_path_gradient(lgss, x_true, lgss_data, zeta):
    out = run_apf(lgss, x_true, lgss_data, 1, rng=2, with_score=True, shrinkage=zeta, keep_history=True)
    s = out.history["states"]
    total = lgss.grad_observation_logdensity(x_true, s[0], lgss_data.values[0]) \
        + lgss.grad_initial_logdensity(x_true, s[0])
    for t in range(1, lgss_data.T):
        total = total + score_increment(lgss, x_true, s[t], s[t - 1], lgss_data.values[t])
    assert np.allclose(out.score, total[0], rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_unit_shrinkage_equals_path_sums(seed, N):
    model = LinearGaussianSSM()
    _, z = lgss_simulate(TRUE_PARAMS, 12, seed)
    x = TRUE_PARAMS.to_unconstrained()
    out = run_apf(model, x, z, N, rng=seed, with_score=True, shrinkage=1.0, keep_history=True)
    sums = ancestral_path_sums(out.history["increments"], out.history["ancestors"])
    assert np.array_equal(sums, out.cloud.score_means)


def test_unit_shrinkage_is_unbiased():
    model = LinearGaussianSSM()
    _, z = lgss_simulate(TRUE_PARAMS, 10, 4)
    x = TRUE_PARAMS.to_unconstrained()
    exact = kalman_score(TRUE_PARAMS, z)
    rng = np.random.default_rng(0)
    ad = make_adapter(model, "fully-adapted")
    S = np.array([run_apf(model, x, z, 200, ad, rng, with_score=True, shrinkage=1.0).score
                  for _ in range(200)])
    se = S.std(axis=0, ddof=1) / np.sqrt(S.shape[0])
    assert np.all(np.abs(S.mean(axis=0) - exact) < 4 * se + 1e-12)


def test_variance_study_shape_and_checks(lgss, x_true, lgss_data):
    out = score_variance_study(lgss, x_true, lgss_data, 10, 0.95, [10, 20], 50, 0)
    assert sorted(out) == [10, 20]
    assert all(v.shape == (6,) and np.all(v >= 0) for v in out.values())
    with pytest.raises(ValueError):
        score_variance_study(lgss, x_true, lgss_data, 10, 0.95, [10], 49, 0)
