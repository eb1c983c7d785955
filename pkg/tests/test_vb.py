import numpy as np
import pytest

from glmar_bayes.errors import ConfigError
from glmar_bayes.lattice import block_mask, build_kernel
from glmar_bayes.model import (Dataset, HyperPriors, ModelContext, ParamState, ols_init,
                               reduced_gaussian_posterior)
from glmar_bayes.selfcheck import random_problem, random_state
from glmar_bayes.vb import (VBConfig, expected_log_joint, free_energy, initial_posterior, run_vb,
                            summarize, vb_update_factor)

from helpers import make_dataset


@pytest.mark.parametrize("K,P", [(2, 1), (2, 3), (5, 1), (5, 3), (13, 1), (13, 3)])
def test_free_energy_never_decreases(K, P):
    rng = np.random.default_rng(100 + 10 * K + P)
    for _ in range(4):
        data, kernel, _ = random_problem(rng, dims=(3, 3), T=60, K=K, P=P)
        result = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=30, tol=1e-10))
        trace = np.asarray(result.posterior.free_energy_trace)
        assert np.all(np.diff(trace) >= -1e-8)
        assert "free_energy_decrease" not in result.flags


def test_single_factor_updates_raise_free_energy(small_problem, small_context):
    data, kernel, _ = small_problem
    q = initial_posterior(ols_init(data, kernel), small_context)
    current = free_energy(q, small_context)
    for factor in [("w", 0), ("w", 4), ("a", 2), "alpha", "beta", "lambda"]:
        q = vb_update_factor(q, factor, small_context)
        new = free_energy(q, small_context)
        assert new >= current - 1e-8
        current = new


def test_update_factor_leaves_input_untouched(small_problem, small_context):
    data, kernel, _ = small_problem
    q = initial_posterior(ols_init(data, kernel), small_context)
    before = q.w_mean.copy()
    vb_update_factor(q, ("w", 3), small_context)
    assert np.array_equal(q.w_mean, before)
    with pytest.raises(ValueError):
        vb_update_factor(q, "gamma", small_context)


def test_converged_posterior_is_a_fixed_point(small_problem):
    data, kernel, _ = small_problem
    context = ModelContext.from_data(data, kernel)
    result = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=2000, tol=1e-12),
                    context=context)
    q = result.posterior
    assert result.converged
    updated = q
    for n in range(data.N):
        updated = vb_update_factor(updated, ("w", n), context)
    assert np.allclose(updated.w_mean, q.w_mean, rtol=1e-4, atol=1e-6)
    updated = vb_update_factor(q, "lambda", context)
    assert np.allclose(updated.lam_mean, q.lam_mean, rtol=1e-4)


def test_matches_gaussian_posterior_when_precisions_are_fixed():
    rng = np.random.default_rng(31)
    kernel = build_kernel(block_mask(3, 3))
    data = make_dataset(rng, N=9, T=50, K=2)
    lam = np.full(9, 1.0)
    alpha = np.array([2.0, 0.5])
    mean, _ = reduced_gaussian_posterior(data, kernel, lam, alpha)

    start = ols_init(data, kernel)
    init = ParamState(W=start.W, A=np.zeros((1, 9)), lam=lam, alpha=alpha, beta=np.ones(1))
    cfg = VBConfig(max_iter=1000, tol=1e-14, frozen=frozenset({"a", "alpha", "lambda"}))
    result = run_vb(data, kernel, HyperPriors(), cfg, init=init)
    q = result.posterior
    assert np.allclose(q.lam_mean, lam)
    assert np.allclose(q.alpha_mean, alpha)
    assert np.allclose(q.w_mean.T, mean, rtol=0.05, atol=1e-3)


def test_colored_sweeps_reach_the_same_optimum(small_problem):
    data, kernel, _ = small_problem
    plain = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=500, tol=1e-12))
    colored = run_vb(data, kernel, HyperPriors(),
                     VBConfig(max_iter=500, tol=1e-12, colored=True))
    f_plain = plain.posterior.free_energy_trace[-1]
    f_colored = colored.posterior.free_energy_trace[-1]
    assert f_colored == pytest.approx(f_plain, rel=1e-5)
    assert np.allclose(colored.posterior.w_mean, plain.posterior.w_mean, rtol=1e-2, atol=1e-3)


def test_not_converged_is_flagged(small_problem):
    data, kernel, _ = small_problem
    result = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=2, tol=1e-15))
    assert not result.converged
    assert result.iterations == 2
    assert "not_converged" in result.flags
    report = result.report()
    assert report["iterations"] == 2
    assert report["final_free_energy"] == result.posterior.free_energy_trace[-1]


def test_summary_layout(small_problem):
    data, kernel, _ = small_problem
    result = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=20))
    summary = summarize(result.posterior)
    assert summary.method == "vb"
    assert summary.has_variance
    assert np.allclose(summary.block("w"), result.posterior.w_mean.T)
    assert np.allclose(summary.block("lambda"), result.posterior.lam_mean)
    assert np.all(summary.variance > 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        VBConfig(max_iter=0).validate()
    with pytest.raises(ConfigError):
        VBConfig(tol=0.0).validate()
    with pytest.raises(ConfigError):
        VBConfig(frozen=frozenset({"w"})).validate()


def test_zero_signal_gives_zero_coefficients(rng):
    data, kernel, _ = random_problem(rng)
    silent = Dataset(Y=np.zeros_like(data.Y), Xfull=data.Xfull, P=data.P)
    start = random_state(rng, 2, 1, 9)
    at_zero = ParamState(W=np.zeros((2, 9)), A=start.A, lam=start.lam, alpha=start.alpha,
                         beta=start.beta)
    result = run_vb(silent, kernel, HyperPriors(), VBConfig(max_iter=20), init=at_zero)
    assert np.array_equal(result.posterior.w_mean, np.zeros((9, 2)))
    moved = run_vb(silent, kernel, HyperPriors(), VBConfig(max_iter=500, tol=1e-14), init=start)
    assert np.allclose(moved.posterior.w_mean, 0.0, atol=1e-3)


def test_runs_are_deterministic(small_problem):
    data, kernel, _ = small_problem
    first = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=25))
    second = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=25))
    assert np.array_equal(first.posterior.w_mean, second.posterior.w_mean)
    assert first.posterior.free_energy_trace == second.posterior.free_energy_trace


def test_point_mass_limit_recovers_log_posterior(small_problem, small_context):
    _, _, state = small_problem
    K, P, N = state.shape
    q = initial_posterior(state, small_context, frozen=frozenset({"alpha", "beta", "lambda"}))
    q.w_cov = np.broadcast_to(1e-10 * np.eye(K), (N, K, K)).copy()
    q.a_cov = np.broadcast_to(1e-10 * np.eye(P), (N, P, P)).copy()
    expected = expected_log_joint(q, small_context)
    assert expected == pytest.approx(small_context.log_posterior(state), abs=1e-4)
