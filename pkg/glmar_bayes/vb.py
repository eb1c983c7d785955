"""Mean-field variational Bayes for the GLM-AR model.

The approximating family factorizes as

    q = prod_n q(w_n) prod_n q(a_n) prod_k q(alpha_k) prod_p q(beta_p) prod_n q(lambda_n)

with Gaussian q(w_n), q(a_n) and Gamma (shape, rate) factors for the precisions.
Every update is the exact conjugate optimum of the free energy given the other
factors, so a sweep can only raise the free energy; the trace is checked for that.
Spatial coupling enters the voxel updates through the neighbours' current means.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln
from tqdm.auto import tqdm

from .errors import ConfigError, NotPositiveDefiniteError
from .lattice import color_voxels, quad_forms
from .model import ModelContext, ols_init
from .summary import PosteriorSummary

logger = logging.getLogger(__name__)

FACTORS = ("w", "a", "alpha", "beta", "lambda")
FROZEN_SHAPE = 1e10
LOG_2PI_E = np.log(2.0 * np.pi) + 1.0


@dataclass(frozen=True)
class VBConfig:
    max_iter: int = 200
    tol: float = 1e-6
    colored: bool = False
    seed: int = 0
    frozen: frozenset = frozenset()
    slack: float = 1e-8
    progress: bool = False

    def validate(self):
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        unknown = set(self.frozen) - set(FACTORS[1:])
        if unknown:
            raise ConfigError(f"cannot freeze {sorted(unknown)}")
        return self


@dataclass
class VBPosterior:
    w_mean: np.ndarray
    w_cov: np.ndarray
    a_mean: np.ndarray
    a_cov: np.ndarray
    alpha_shape: np.ndarray
    alpha_rate: np.ndarray
    beta_shape: np.ndarray
    beta_rate: np.ndarray
    lam_shape: np.ndarray
    lam_rate: np.ndarray
    free_energy_trace: list = field(default_factory=list)

    @property
    def alpha_mean(self):
        return self.alpha_shape / self.alpha_rate

    @property
    def beta_mean(self):
        return self.beta_shape / self.beta_rate

    @property
    def lam_mean(self):
        return self.lam_shape / self.lam_rate

    def copy(self):
        return VBPosterior(**{
            name: (value.copy() if isinstance(value, np.ndarray) else list(value))
            for name, value in self.__dict__.items()
        })

    def validate(self, frozen=frozenset()):
        for name in ("alpha", "beta", "lam"):
            if not (np.all(getattr(self, f"{name}_shape") > 0)
                    and np.all(getattr(self, f"{name}_rate") > 0)):
                raise NotPositiveDefiniteError(f"q({name}) has a nonpositive Gamma parameter")
        blocks = [("w", self.w_cov)] + ([] if "a" in frozen else [("a", self.a_cov)])
        for name, cov in blocks:
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError(f"q({name}) covariance is not SPD") from None
        return self


def _gamma_log_mean(shape, rate):
    return digamma(shape) - np.log(rate)


def _gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def _gaussian_entropy(cov):
    dim = cov.shape[-1]
    _, logdet = np.linalg.slogdet(cov)
    return 0.5 * (dim * LOG_2PI_E + logdet)


def _a_second_moment(q, idx):
    """E[astar astar'] for the voxels in idx; astar = (-1, a)."""
    astar = np.column_stack([-np.ones(len(idx)), q.a_mean[idx]])
    moment = astar[:, :, None] * astar[:, None, :]
    moment[:, 1:, 1:] += q.a_cov[idx]
    return moment


def _expected_residual(q, stats, idx):
    """E_q(w)[F_n] = F_n(m_n) + tr(Cxx[p, q] Sigma_n) for the voxels in idx."""
    m = q.w_mean[idx]
    cross = np.einsum("npqk,nk->npq", stats.Cyx[idx], m)
    fitted = np.einsum("pqkl,nk,nl->npq", stats.Cxx, m, m)
    spread = np.einsum("pqkl,nlk->npq", stats.Cxx, q.w_cov[idx])
    return stats.Cyy[idx] - cross - cross.transpose(0, 2, 1) + fitted + spread


def _neighbour_sum(kernel, idx, means):
    """sum over m != n of StS[n, m] * means[m] for the voxels in idx."""
    return kernel.StS[idx] @ means - kernel.diagonal[idx, None] * means[idx]


def _solve_gaussian(precision, rhs, name):
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"q({name}) update precision is not SPD") from None
    eye = np.broadcast_to(np.eye(precision.shape[-1]), precision.shape)
    inv_chol = np.linalg.solve(chol, eye)
    cov = np.einsum("nji,njk->nik", inv_chol, inv_chol)
    mean = np.einsum("nij,nj->ni", cov, rhs)
    return mean, 0.5 * (cov + cov.transpose(0, 2, 1))


def _w_system(q, context, idx):
    stats, kernel = context.stats, context.kernel
    K = stats.K
    moment = _a_second_moment(q, idx)
    b = np.einsum("npq,npqk->nk", moment, stats.Cyx[idx])
    M = np.einsum("npq,pqkl->nkl", moment, stats.Cxx)
    lam = q.lam_mean[idx]
    alpha = q.alpha_mean
    diag = kernel.diagonal[idx]
    precision = lam[:, None, None] * M
    precision[:, np.arange(K), np.arange(K)] += diag[:, None] * alpha[None, :]
    rhs = lam[:, None] * b - alpha[None, :] * _neighbour_sum(kernel, idx, q.w_mean)
    return precision, rhs


def _a_system(q, context, idx):
    stats, kernel = context.stats, context.kernel
    P = stats.P
    F = _expected_residual(q, stats, idx)
    lam = q.lam_mean[idx]
    beta = q.beta_mean
    diag = kernel.diagonal[idx]
    precision = lam[:, None, None] * F[:, 1:, 1:]
    precision[:, np.arange(P), np.arange(P)] += diag[:, None] * beta[None, :]
    rhs = lam[:, None] * F[:, 1:, 0] - beta[None, :] * _neighbour_sum(kernel, idx, q.a_mean)
    return precision, rhs


def _update_w(q, context, idx):
    mean, cov = _solve_gaussian(*_w_system(q, context, idx), "w")
    q.w_mean[idx] = mean
    q.w_cov[idx] = cov


def _update_a(q, context, idx):
    mean, cov = _solve_gaussian(*_a_system(q, context, idx), "a")
    q.a_mean[idx] = mean
    q.a_cov[idx] = cov


def _spatial_expectation(kernel, means, covs):
    """E[r StS r'] for each coefficient row r, under independent voxel factors."""
    marginal = np.diagonal(covs, axis1=1, axis2=2)
    return quad_forms(kernel, means.T) + kernel.diagonal @ marginal


def _update_alpha(q, context):
    hp, N = context.hp, context.stats.N
    q.alpha_shape = np.full_like(q.alpha_shape, hp.q1 + 0.5 * N)
    q.alpha_rate = 1.0 / hp.q2 + 0.5 * _spatial_expectation(context.kernel, q.w_mean, q.w_cov)


def _update_beta(q, context):
    hp, N = context.hp, context.stats.N
    q.beta_shape = np.full_like(q.beta_shape, hp.r1 + 0.5 * N)
    q.beta_rate = 1.0 / hp.r2 + 0.5 * _spatial_expectation(context.kernel, q.a_mean, q.a_cov)


def _expected_quadratic(q, stats):
    idx = np.arange(stats.N)
    return np.einsum("npq,npq->n", _a_second_moment(q, idx), _expected_residual(q, stats, idx))


def _update_lambda(q, context):
    hp, stats = context.hp, context.stats
    q.lam_shape = np.full_like(q.lam_shape, hp.u1 + 0.5 * stats.n_obs)
    q.lam_rate = 1.0 / hp.u2 + 0.5 * _expected_quadratic(q, stats)


def vb_update_factor(q, factor, context):
    """Return a copy of q with one factor replaced by its conjugate optimum.

    ``factor`` is ``("w", n)``, ``("a", n)`` (n an index or index array of voxels
    with no StS coupling between them) or one of ``"alpha"``, ``"beta"``, ``"lambda"``.
    """
    q = q.copy()
    name, index = (factor, None) if isinstance(factor, str) else factor
    if name in ("w", "a"):
        idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
        (_update_w if name == "w" else _update_a)(q, context, idx)
    elif name == "alpha":
        _update_alpha(q, context)
    elif name == "beta":
        _update_beta(q, context)
    elif name == "lambda":
        _update_lambda(q, context)
    else:
        raise ValueError(f"unknown factor {factor!r}")
    return q


def expected_log_joint(q, context):
    """E_q[log p(Y, theta | X)] without the constants log_posterior also drops."""
    stats, kernel, hp = context.stats, context.kernel, context.hp
    N = stats.N
    log_lam = _gamma_log_mean(q.lam_shape, q.lam_rate)
    log_alpha = _gamma_log_mean(q.alpha_shape, q.alpha_rate)
    log_beta = _gamma_log_mean(q.beta_shape, q.beta_rate)

    value = np.sum(-0.5 * q.lam_mean * _expected_quadratic(q, stats) + 0.5 * stats.n_obs * log_lam)
    value += np.sum(-0.5 * q.alpha_mean * _spatial_expectation(kernel, q.w_mean, q.w_cov)
                    + 0.5 * N * log_alpha)
    value += np.sum(-0.5 * q.beta_mean * _spatial_expectation(kernel, q.a_mean, q.a_cov)
                    + 0.5 * N * log_beta)
    value += np.sum((hp.q1 - 1.0) * log_alpha - q.alpha_mean / hp.q2)
    value += np.sum((hp.r1 - 1.0) * log_beta - q.beta_mean / hp.r2)
    value += np.sum((hp.u1 - 1.0) * log_lam - q.lam_mean / hp.u2)
    return float(value)


def entropy(q, frozen=frozenset()):
    """Entropy of the free factors; frozen factors are constants and left out."""
    value = np.sum(_gaussian_entropy(q.w_cov))
    if "a" not in frozen:
        value += np.sum(_gaussian_entropy(q.a_cov))
    for name, shape, rate in (("alpha", q.alpha_shape, q.alpha_rate),
                              ("beta", q.beta_shape, q.beta_rate),
                              ("lambda", q.lam_shape, q.lam_rate)):
        if name not in frozen:
            value += np.sum(_gamma_entropy(shape, rate))
    return float(value)


def free_energy(q, context, frozen=frozenset()):
    return expected_log_joint(q, context) + entropy(q, frozen)


def initial_posterior(state, context, frozen=frozenset()):
    """q centred on a point estimate (usually OLS), covariances from the update equations."""
    hp, stats = context.hp, context.stats
    K, P, N = state.shape

    def gamma(value, shape, name):
        shape = np.full(value.shape, FROZEN_SHAPE if name in frozen else shape)
        return shape, shape / value

    alpha_shape, alpha_rate = gamma(state.alpha, hp.q1 + 0.5 * N, "alpha")
    beta_shape, beta_rate = gamma(state.beta, hp.r1 + 0.5 * N, "beta")
    lam_shape, lam_rate = gamma(state.lam, hp.u1 + 0.5 * stats.n_obs, "lambda")
    q = VBPosterior(
        w_mean=state.W.T.copy(), w_cov=np.zeros((N, K, K)),
        a_mean=state.A.T.copy(), a_cov=np.zeros((N, P, P)),
        alpha_shape=alpha_shape, alpha_rate=alpha_rate,
        beta_shape=beta_shape, beta_rate=beta_rate,
        lam_shape=lam_shape, lam_rate=lam_rate,
    )
    idx = np.arange(N)
    precision, _ = _w_system(q, context, idx)
    q.w_cov = _solve_gaussian(precision, np.zeros((N, K)), "w")[1]
    if "a" not in frozen:
        precision, _ = _a_system(q, context, idx)
        q.a_cov = _solve_gaussian(precision, np.zeros((N, P)), "a")[1]
    return q


def sweep(q, context, cfg, groups):
    """One coordinate-ascent pass: all w_n, all a_n, alpha, beta, lambda (in place)."""
    for idx in groups:
        _update_w(q, context, idx)
    if "a" not in cfg.frozen:
        for idx in groups:
            _update_a(q, context, idx)
    if "alpha" not in cfg.frozen:
        _update_alpha(q, context)
    if "beta" not in cfg.frozen:
        _update_beta(q, context)
    if "lambda" not in cfg.frozen:
        _update_lambda(q, context)
    return q


def sweep_groups(context, cfg):
    if cfg.colored:
        return color_voxels(context.kernel)
    return [np.array([n]) for n in range(context.stats.N)]


@dataclass
class VBResult:
    posterior: VBPosterior
    summary: PosteriorSummary
    converged: bool
    iterations: int
    final_relative_change: float
    flags: list

    def report(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_relative_change": self.final_relative_change,
            "final_free_energy": self.posterior.free_energy_trace[-1],
            "flags": list(self.flags),
        }


def summarize(q):
    N, K = q.w_mean.shape
    P = q.a_mean.shape[1]
    mean = np.concatenate([q.w_mean.T.ravel(), q.a_mean.T.ravel(),
                           q.alpha_mean, q.beta_mean, q.lam_mean])
    variance = np.concatenate([
        np.diagonal(q.w_cov, axis1=1, axis2=2).T.ravel(),
        np.diagonal(q.a_cov, axis1=1, axis2=2).T.ravel(),
        q.alpha_shape / q.alpha_rate ** 2,
        q.beta_shape / q.beta_rate ** 2,
        q.lam_shape / q.lam_rate ** 2,
    ])
    return PosteriorSummary(method="vb", K=K, P=P, N=N, mean=mean, variance=variance,
                            w_cov=q.w_cov.copy())


def run_vb(data, kernel, hp, cfg, init=None, context=None):
    cfg.validate()
    context = context or ModelContext.from_data(data, kernel, hp)
    state = init if init is not None else ols_init(data, kernel)
    q = initial_posterior(state, context, cfg.frozen)
    groups = sweep_groups(context, cfg)
    flags = []

    current = free_energy(q, context, cfg.frozen)
    q.free_energy_trace.append(current)
    converged, change, iterations = False, float("inf"), 0
    bar = tqdm(total=cfg.max_iter, desc="VB", disable=not cfg.progress, leave=False)
    for iterations in range(1, cfg.max_iter + 1):
        sweep(q, context, cfg, groups)
        new = free_energy(q, context, cfg.frozen)
        q.free_energy_trace.append(new)
        if new < current - cfg.slack:
            logger.warning("free energy decreased at sweep %d: %.10g -> %.10g",
                           iterations, current, new)
            if "free_energy_decrease" not in flags:
                flags.append("free_energy_decrease")
        change = abs(new - current) / max(abs(current), np.finfo(float).tiny)
        current = new
        bar.update(1)
        if change < cfg.tol:
            converged = True
            break
    bar.close()
    if not converged:
        logger.warning("VB stopped at max_iter=%d with relative change %.3g", cfg.max_iter, change)
        flags.append("not_converged")
    logger.info("VB finished after %d sweeps, free energy %.6g", iterations, current)
    q.validate(cfg.frozen)
    return VBResult(posterior=q, summary=summarize(q), converged=converged,
                    iterations=iterations, final_relative_change=float(change), flags=flags)