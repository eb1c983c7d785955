"""GLM-AR model: data containers, sufficient statistics and the exact log-posterior.

The per-voxel likelihood is evaluated through the lag cross-product form

    l_n = -(lam_n / 2) * astar_n' F_n astar_n + ((T - P) / 2) * log(lam_n)

with ``astar_n = (-1, a_1n, ..., a_Pn)`` and ``F_n`` the (P+1)x(P+1) matrix of lagged
residual cross products.  ``F_n`` is bilinear in ``(1, w_n)`` and is assembled from
cross products of Y and X that are computed once, so a log-density evaluation costs
O(N K^2 P^2) regardless of T.  Additive constants are never evaluated.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, DesignRankError, InvalidStateError
from .lattice import quad_forms

logger = logging.getLogger(__name__)

BLOCKS = ("w", "a", "alpha", "beta", "lambda")

# ols_init clamps for the method-of-moments hyperparameter starts
PRECISION_CLAMP = (1e-6, 1e6)
VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class HyperPriors:
    """Gamma(shape, scale) hyperpriors on alpha (q), beta (r) and lambda (u)."""

    q1: float = 0.01
    q2: float = 100.0
    r1: float = 0.01
    r2: float = 100.0
    u1: float = 0.01
    u2: float = 100.0

    def validate(self):
        for name in ("q1", "q2", "r1", "r2", "u1", "u2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"hyperprior {name} must be positive")
        return self


@dataclass
class Dataset:
    Y: np.ndarray
    Xfull: np.ndarray
    P: int
    regressors: list = field(default=None)

    def __post_init__(self):
        self.Y = np.ascontiguousarray(self.Y, dtype=float)
        self.Xfull = np.ascontiguousarray(self.Xfull, dtype=float)
        if self.regressors is None:
            self.regressors = [f"x{k + 1}" for k in range(self.Xfull.shape[1])]
        self.validate()

    @property
    def T(self):
        return self.Y.shape[0]

    @property
    def N(self):
        return self.Y.shape[1]

    @property
    def K(self):
        return self.Xfull.shape[1]

    @property
    def X(self):
        """Design rows P+1..T, the rows the likelihood conditions on."""
        return self.Xfull[self.P:]

    def validate(self):
        if self.Y.ndim != 2 or self.Xfull.ndim != 2:
            raise DataError("Y must be T x N and Xfull T x K")
        if self.Xfull.shape[0] != self.T:
            raise DataError(f"design has {self.Xfull.shape[0]} rows but series has T={self.T}")
        if not 1 <= self.P < self.T:
            raise DataError(f"need T > P >= 1, got T={self.T}, P={self.P}")
        if len(self.regressors) != self.K:
            raise DataError("regressor names do not match design columns")
        return self


@dataclass
class ParamState:
    W: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def shape(self):
        K, N = self.W.shape
        return K, self.A.shape[0], N

    @property
    def dim(self):
        K, P, N = self.shape
        return state_dim(K, P, N)

    def is_valid(self):
        return bool(
            np.all(self.lam > 0) and np.all(self.alpha > 0) and np.all(self.beta > 0)
            and np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.A))
        )

    def flatten(self):
        return np.concatenate(
            [self.W.ravel(), self.A.ravel(), self.alpha, self.beta, self.lam]
        )

    @classmethod
    def unflatten(cls, vector, K, P, N):
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (state_dim(K, P, N),):
            raise ValueError(f"expected a vector of length {state_dim(K, P, N)}, got {vector.shape}")
        sl = block_slices(K, P, N)
        return cls(
            W=vector[sl["w"]].reshape(K, N).copy(),
            A=vector[sl["a"]].reshape(P, N).copy(),
            alpha=vector[sl["alpha"]].copy(),
            beta=vector[sl["beta"]].copy(),
            lam=vector[sl["lambda"]].copy(),
        )

    def copy(self):
        return ParamState(self.W.copy(), self.A.copy(), self.lam.copy(),
                          self.alpha.copy(), self.beta.copy())


def state_dim(K, P, N):
    return (K + P + 1) * N + K + P


def block_slices(K, P, N):
    """Slices of the stacked vector: w-rows, a-rows, alpha, beta, lambda."""
    sizes = [K * N, P * N, K, P, N]
    bounds = np.cumsum([0] + sizes)
    return {name: slice(int(lo), int(hi)) for name, lo, hi in zip(BLOCKS, bounds[:-1], bounds[1:])}


def coordinate_labels(K, P, N):
    labels = [f"w[{k},{n}]" for k in range(K) for n in range(N)]
    labels += [f"a[{p},{n}]" for p in range(P) for n in range(N)]
    labels += [f"alpha[{k}]" for k in range(K)]
    labels += [f"beta[{p}]" for p in range(P)]
    labels += [f"lambda[{n}]" for n in range(N)]
    return labels


@dataclass(frozen=True)
class SuffStats:
    """Lag cross products over t = P+1..T.

    Cyy[n, p, q]    = sum_t y[t-p, n] y[t-q, n]
    Cyx[n, p, q, k] = sum_t y[t-p, n] Xfull[t-q, k]
    Cxx[p, q, k, l] = sum_t Xfull[t-p, k] Xfull[t-q, l]
    """

    Cyy: np.ndarray
    Cyx: np.ndarray
    Cxx: np.ndarray
    T: int
    P: int

    @property
    def n_obs(self):
        return self.T - self.P

    @property
    def N(self):
        return self.Cyy.shape[0]

    @property
    def K(self):
        return self.Cxx.shape[2]


def _lagged(array, P):
    T = array.shape[0]
    return np.stack([array[P - p:T - p] for p in range(P + 1)])


def precompute_suffstats(data):
    bad = np.argwhere(~np.isfinite(data.Y))
    if bad.size:
        t, n = bad[0]
        raise DataError(f"non-finite value in series at voxel {n}, time {t} ({len(bad)} total)")
    bad = np.argwhere(~np.isfinite(data.Xfull))
    if bad.size:
        t, k = bad[0]
        raise DataError(f"non-finite value in design at row {t}, column {data.regressors[k]}")

    Ylag = _lagged(data.Y, data.P)
    Xlag = _lagged(data.Xfull, data.P)
    Cyy = np.einsum("ptn,qtn->npq", Ylag, Ylag)
    Cyx = np.einsum("ptn,qtk->npqk", Ylag, Xlag)
    Cxx = np.einsum("ptk,qtl->pqkl", Xlag, Xlag)
    logger.debug("suffstats: T=%d N=%d K=%d P=%d", data.T, data.N, data.K, data.P)
    return SuffStats(Cyy=Cyy, Cyx=Cyx, Cxx=Cxx, T=data.T, P=data.P)


@dataclass(frozen=True)
class ResidualForm:
    F: np.ndarray
    astar: np.ndarray

    def quadratic(self):
        return np.einsum("np,npq,nq->n", self.astar, self.F, self.astar)


def residual_matrix(W, stats):
    """F_n for every voxel given regression coefficients W (K x N)."""
    Wt = W.T
    cross = np.einsum("npqk,nk->npq", stats.Cyx, Wt)
    fitted = np.einsum("pqkl,nk,nl->npq", stats.Cxx, Wt, Wt)
    return stats.Cyy - cross - cross.transpose(0, 2, 1) + fitted


def astar_of(A):
    return np.column_stack([-np.ones(A.shape[1]), A.T])


def residual_form(state, stats):
    return ResidualForm(F=residual_matrix(state.W, stats), astar=astar_of(state.A))


def _check_shapes(state, stats, kernel):
    K, P, N = state.shape
    if (N, K, P) != (stats.N, stats.K, stats.P) or kernel.n_voxels != N:
        raise ValueError(
            f"state (K={K}, P={P}, N={N}) does not match stats "
            f"(K={stats.K}, P={stats.P}, N={stats.N}) and kernel (N={kernel.n_voxels})"
        )


def log_posterior(state, stats, kernel, hp):
    """Unnormalized log posterior; -inf for states with a nonpositive precision."""
    _check_shapes(state, stats, kernel)
    if not state.is_valid():
        return -np.inf
    N = stats.N
    quad = residual_form(state, stats).quadratic()
    log_lam = np.log(state.lam)
    log_alpha = np.log(state.alpha)
    log_beta = np.log(state.beta)

    value = np.sum(-0.5 * state.lam * quad + 0.5 * stats.n_obs * log_lam)
    value += np.sum(-0.5 * state.alpha * quad_forms(kernel, state.W) + 0.5 * N * log_alpha)
    value += np.sum(-0.5 * state.beta * quad_forms(kernel, state.A) + 0.5 * N * log_beta)
    value += np.sum((hp.q1 - 1.0) * log_alpha - state.alpha / hp.q2)
    value += np.sum((hp.r1 - 1.0) * log_beta - state.beta / hp.r2)
    value += np.sum((hp.u1 - 1.0) * log_lam - state.lam / hp.u2)
    return float(value)


def grad_log_posterior(state, stats, kernel, hp):
    """Gradient of ``log_posterior`` stacked like ``ParamState.flatten``."""
    _check_shapes(state, stats, kernel)
    if not state.is_valid():
        raise InvalidStateError("gradient requested at a state with a nonpositive precision")
    N = stats.N
    F = residual_matrix(state.W, stats)
    astar = astar_of(state.A)
    outer = astar[:, :, None] * astar[:, None, :]
    quad = np.einsum("npq,npq->n", outer, F)

    # d quad / d w_n = -2 b_n + 2 M_n w_n
    b = np.einsum("npq,npqk->nk", outer, stats.Cyx)
    M = np.einsum("npq,pqkl->nkl", outer, stats.Cxx)
    Wt = state.W.T
    g_w = (state.lam[:, None] * (b - np.einsum("nkl,nl->nk", M, Wt))).T
    g_w -= state.alpha[:, None] * (kernel.StS @ Wt).T

    Fa = np.einsum("npq,nq->np", F, astar)
    g_a = (-state.lam[:, None] * Fa[:, 1:]).T
    g_a -= state.beta[:, None] * (kernel.StS @ state.A.T).T

    g_alpha = -0.5 * quad_forms(kernel, state.W) + (0.5 * N + hp.q1 - 1.0) / state.alpha - 1.0 / hp.q2
    g_beta = -0.5 * quad_forms(kernel, state.A) + (0.5 * N + hp.r1 - 1.0) / state.beta - 1.0 / hp.r2
    g_lam = -0.5 * quad + (0.5 * stats.n_obs + hp.u1 - 1.0) / state.lam - 1.0 / hp.u2
    return np.concatenate([g_w.ravel(), g_a.ravel(), g_alpha, g_beta, g_lam])


def direct_log_likelihood(state, data):
    """Time-loop evaluation of the GLM-AR log likelihood (no precomputation)."""
    e = data.Y - data.Xfull @ state.W
    total = np.zeros(data.N)
    for t in range(data.P, data.T):
        z = e[t] - sum(state.A[p - 1] * e[t - p] for p in range(1, data.P + 1))
        total += z * z
    n_obs = data.T - data.P
    return float(np.sum(-0.5 * state.lam * total + 0.5 * n_obs * np.log(state.lam)))


def direct_log_posterior(state, data, kernel, hp):
    if not state.is_valid():
        return -np.inf
    N = data.N
    StS = kernel.StS.toarray()
    w_quad = np.array([w @ StS @ w for w in state.W])
    a_quad = np.array([a @ StS @ a for a in state.A])
    prior = np.sum(-0.5 * state.alpha * w_quad + 0.5 * N * np.log(state.alpha))
    prior += np.sum(-0.5 * state.beta * a_quad + 0.5 * N * np.log(state.beta))
    prior += np.sum((hp.q1 - 1.0) * np.log(state.alpha) - state.alpha / hp.q2)
    prior += np.sum((hp.r1 - 1.0) * np.log(state.beta) - state.beta / hp.r2)
    prior += np.sum((hp.u1 - 1.0) * np.log(state.lam) - state.lam / hp.u2)
    return direct_log_likelihood(state, data) + float(prior)


def _dependent_columns(X, names):
    rank = np.linalg.matrix_rank(X)
    if rank == X.shape[1]:
        return []
    _, _, pivots = scipy.linalg.qr(X, mode="economic", pivoting=True)
    return [names[j] for j in sorted(pivots[rank:])]


def ols_init(data, kernel):
    """Per-voxel OLS starting values for W, A and lambda; moment-matched alpha, beta."""
    dependent = _dependent_columns(data.X, data.regressors)
    if dependent:
        raise DesignRankError(dependent)
    P, T, N = data.P, data.T, data.N

    W = np.linalg.lstsq(data.X, data.Y[P:], rcond=None)[0]
    e = data.Y - data.Xfull @ W
    lags = np.stack([e[P - p:T - p] for p in range(1, P + 1)])
    target = e[P:]
    gram = np.einsum("ptn,qtn->npq", lags, lags)
    rhs = np.einsum("ptn,tn->np", lags, target)
    A = np.einsum("npq,nq->np", np.linalg.pinv(gram, hermitian=True), rhs).T

    z = target - np.einsum("pn,ptn->tn", A, lags)
    dof = T - P - data.K - P
    dof = dof if dof > 0 else T - P
    var = np.sum(z * z, axis=0) / dof
    lam = 1.0 / np.maximum(var, VARIANCE_FLOOR)

    alpha = _moment_precision(kernel, W, N)
    beta = _moment_precision(kernel, A, N)
    logger.info("OLS init: mean residual variance %.4g, alpha=%s", float(np.mean(var)),
                np.array2string(alpha, precision=3))
    return ParamState(W=W, A=A, lam=lam, alpha=alpha, beta=beta)


def _moment_precision(kernel, rows, N):
    quad = quad_forms(kernel, rows)
    with np.errstate(divide="ignore"):
        prec = np.where(quad > 0, N / np.where(quad > 0, quad, 1.0), PRECISION_CLAMP[1])
    return np.clip(prec, *PRECISION_CLAMP)


def reduced_gaussian_posterior(data, kernel, lam, alpha):
    """Exact posterior of W with A = 0 and lambda, alpha held fixed.

    Returns (mean K x N, covariance KN x KN) in the row-major w-stacking order.
    Dense; meant for small N.
    """
    K, N = data.K, data.N
    X, Yt = data.X, data.Y[data.P:]
    XtX = X.T @ X
    StS = kernel.StS.toarray()
    precision = np.kron(np.diag(alpha), StS)
    for n in range(N):
        idx = np.arange(K) * N + n
        precision[np.ix_(idx, idx)] += lam[n] * XtX
    rhs = ((X.T @ Yt) * lam[None, :]).ravel()
    chol = scipy.linalg.cho_factor(precision)
    mean = scipy.linalg.cho_solve(chol, rhs).reshape(K, N)
    cov = scipy.linalg.cho_solve(chol, np.eye(K * N))
    return mean, cov


@dataclass(frozen=True)
class ModelContext:
    """Everything the samplers need besides the parameter state."""

    stats: SuffStats
    kernel: object
    hp: HyperPriors

    @classmethod
    def from_data(cls, data, kernel, hp=None):
        hp = (hp or HyperPriors()).validate()
        if kernel.n_voxels != data.N:
            raise DataError(f"mask has {kernel.n_voxels} voxels but series has N={data.N}")
        return cls(stats=precompute_suffstats(data), kernel=kernel, hp=hp)

    @property
    def shape(self):
        return self.stats.K, self.stats.P, self.stats.N

    def log_posterior(self, state):
        return log_posterior(state, self.stats, self.kernel, self.hp)

    def grad_log_posterior(self, state):
        return grad_log_posterior(state, self.stats, self.kernel, self.hp)
