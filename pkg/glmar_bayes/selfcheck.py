"""Fast oracle checks behind the ``check`` command."""

import logging
from dataclasses import dataclass

import numpy as np

from .lattice import block_mask, build_kernel
from .metrics import MoranWeights, morans_i
from .model import (Dataset, HyperPriors, ModelContext, ParamState, direct_log_posterior,
                    log_posterior)
from .vb import VBConfig, run_vb

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_problem(rng, dims=(3, 3), T=40, K=2, P=1):
    """A random dataset on a block mask with a matching random valid state."""
    mask = block_mask(*dims)
    kernel = build_kernel(mask)
    N = mask.n_voxels
    data = Dataset(Y=rng.standard_normal((T, N)), Xfull=rng.standard_normal((T, K)), P=P)
    return data, kernel, random_state(rng, K, P, N)


def random_state(rng, K, P, N):
    return ParamState(
        W=rng.standard_normal((K, N)),
        A=rng.uniform(-0.3, 0.3, size=(P, N)),
        lam=rng.uniform(0.5, 2.0, size=N),
        alpha=rng.uniform(0.5, 2.0, size=K),
        beta=rng.uniform(0.5, 2.0, size=P),
    )


def finite_difference_gradient(context, state, h=1e-5):
    K, P, N = state.shape
    x = state.flatten()
    grad = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (context.log_posterior(ParamState.unflatten(up, K, P, N))
                   - context.log_posterior(ParamState.unflatten(down, K, P, N))) / (2 * h)
    return grad


def gradient_error(context, state, h=1e-5):
    exact = context.grad_log_posterior(state)
    approx = finite_difference_gradient(context, state, h)
    return float(np.max(np.abs(exact - approx) / np.maximum(np.abs(approx), 1.0)))


def check_likelihood(rng, instances=20):
    hp = HyperPriors()
    worst = 0.0
    for _ in range(instances):
        data, kernel, state = random_problem(
            rng, dims=(int(rng.integers(1, 5)), int(rng.integers(2, 5))),
            T=int(rng.integers(10, 64)), K=int(rng.integers(1, 6)), P=int(rng.integers(1, 4)))
        context = ModelContext.from_data(data, kernel, hp)
        fast = log_posterior(state, context.stats, kernel, hp)
        direct = direct_log_posterior(state, data, kernel, hp)
        worst = max(worst, abs(fast - direct) / max(abs(direct), 1.0))
    return CheckResult("likelihood", worst < 1e-10, f"max relative difference {worst:.2e}")


def check_gradient(rng, states=3):
    worst = 0.0
    for _ in range(states):
        data, kernel, state = random_problem(rng, K=2, P=2)
        worst = max(worst, gradient_error(ModelContext.from_data(data, kernel), state))
    return CheckResult("gradient", worst < 1e-4, f"max relative error {worst:.2e}")


def check_kernel(rng):
    worst = 0.0
    for dims in ((1, 3), (4, 5), (2, 3, 3)):
        kernel = build_kernel(block_mask(*dims))
        S = kernel.S.toarray()
        worst = max(worst, float(np.max(np.abs(kernel.StS.toarray() - S.T @ S))))
    line = build_kernel(block_mask(1, 3)).StS.toarray()
    expected = np.array([[17, -8, 1], [-8, 18, -8], [1, -8, 17]], dtype=float)
    passed = worst == 0.0 and np.array_equal(line, expected)
    return CheckResult("kernel", passed, f"max |StS - S'S| = {worst:.1e}")


def check_moran(rng):
    mask = block_mask(6, 7)
    values = rng.standard_normal(mask.n_voxels)
    weights = MoranWeights(mask.centroid, chunk=10)
    phi = weights.dense()
    z = values - values.mean()
    brute = 0.0
    for i in range(z.size):
        for j in range(z.size):
            brute += phi[i, j] * z[i] * z[j]
    brute *= z.size / phi.sum() / np.sum(z * z)
    diff = abs(morans_i(values, weights) - brute)
    return CheckResult("moran", diff < 1e-12, f"|fast - brute force| = {diff:.1e}")


def check_vb(rng):
    data, kernel, _ = random_problem(rng, dims=(3, 4), T=50, K=2, P=1)
    result = run_vb(data, kernel, HyperPriors(), VBConfig(max_iter=30, tol=1e-12))
    trace = np.diff(result.posterior.free_energy_trace)
    worst = float(trace.min()) if trace.size else 0.0
    return CheckResult("vb-monotone", worst >= -1e-8, f"smallest free-energy step {worst:.2e}")


CHECKS = (check_likelihood, check_gradient, check_kernel, check_moran, check_vb)


def run_checks(seed=0):
    rng = np.random.default_rng(seed)
    results = []
    for check in CHECKS:
        result = check(rng)
        logger.info("%-12s %s  %s", result.name, "ok" if result.passed else "FAILED",
                    result.detail)
        results.append(result)
    return results
