"""Whole-vector Hamiltonian Monte Carlo for the GLM-AR posterior.

All R coordinates move jointly in every proposal.  Momenta are drawn from N(0, M)
with a diagonal mass M and kinetic energy xi' M^-1 xi / 2.  The step size is
adapted in batches during burn-in and frozen afterwards.
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from .errors import ConfigError, InvalidStateError
from .model import (BLOCKS, ModelContext, ParamState, block_slices, coordinate_labels,
                    ols_init)
from .summary import PosteriorSummary

logger = logging.getLogger(__name__)

FREEZABLE = ("a", "alpha", "beta", "lambda")
POSITIVE = ("alpha", "beta", "lambda")


@dataclass(frozen=True)
class HmcConfig:
    delta0: float = 2e-5
    L: int = 250
    n_iter: int = 3000
    n_burn: int = 2000
    target_accept: float = 0.65
    mass: np.ndarray = None
    adapt_window: int = 50
    kappa: float = 1.0
    seed: int = 0
    thin: int = 1
    pilot_rounds: int = 0
    pilot_iter: int = 500
    mass_floor: float = 1e-8
    log_scale: bool = False
    frozen: frozenset = frozenset()
    monitor: tuple = None
    bmse_batches: int = None
    progress: bool = False

    def validate(self):
        if not self.delta0 > 0:
            raise ConfigError("delta0 must be positive")
        if self.L < 1 or self.n_iter < 1 or self.adapt_window < 1 or self.thin < 1:
            raise ConfigError("L, n_iter, adapt_window and thin must be positive")
        if not 0 <= self.n_burn < self.n_iter:
            raise ConfigError(f"need 0 <= n_burn < n_iter, got {self.n_burn} and {self.n_iter}")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.mass is not None and not np.all(np.asarray(self.mass) > 0):
            raise ConfigError("mass entries must be positive")
        unknown = set(self.frozen) - set(FREEZABLE)
        if unknown:
            raise ConfigError(f"cannot freeze {sorted(unknown)}; choose from {FREEZABLE}")
        return self


class PosteriorTarget:
    """Log posterior restricted to the free coordinates, optionally log-scaled.

    Frozen blocks stay at their values in ``base``.  With ``log_scale`` the
    precisions are sampled as logs and the Jacobian ``sum(log x)`` is added.
    """

    def __init__(self, context, base, frozen=frozenset(), log_scale=False):
        self.context = context
        self.K, self.P, self.N = context.shape
        self.base = base.flatten()
        self.log_scale = log_scale
        slices = block_slices(self.K, self.P, self.N)
        free = np.ones(self.base.size, dtype=bool)
        positive = np.zeros(self.base.size, dtype=bool)
        for name in BLOCKS:
            if name in frozen:
                free[slices[name]] = False
            if name in POSITIVE:
                positive[slices[name]] = True
        self.free = np.flatnonzero(free)
        self.positive = positive[self.free]

    @property
    def dim(self):
        return self.free.size

    def to_free(self, state):
        x = state.flatten()[self.free]
        if self.log_scale:
            x = x.copy()
            x[self.positive] = np.log(x[self.positive])
        return x

    def to_full(self, x):
        full = self.base.copy()
        if self.log_scale:
            x = x.copy()
            with np.errstate(over="ignore"):
                x[self.positive] = np.exp(x[self.positive])
        full[self.free] = x
        return full

    def to_state(self, x):
        return ParamState.unflatten(self.to_full(x), self.K, self.P, self.N)

    def log_density(self, x):
        value = self.context.log_posterior(self.to_state(x))
        if np.isnan(value):
            return -np.inf
        if self.log_scale:
            value += float(np.sum(x[self.positive]))
        return value

    def gradient(self, x):
        try:
            grad = self.context.grad_log_posterior(self.to_state(x))[self.free]
        except InvalidStateError:
            return None
        if self.log_scale:
            grad[self.positive] = grad[self.positive] * np.exp(x[self.positive]) + 1.0
        return grad


def leapfrog(theta, xi, delta, L, mass, target):
    """Half momentum step, then L position/momentum steps, the last momentum step halved.

    Returns ``(theta, xi, ok)``; ``ok`` is False when an intermediate gradient is
    undefined or non-finite, in which case the proposal must be rejected.
    """
    theta = np.array(theta, dtype=float)
    xi = np.array(xi, dtype=float)
    grad = target.gradient(theta)
    if grad is None or not np.all(np.isfinite(grad)):
        return theta, xi, False
    xi += 0.5 * delta * grad
    for step in range(1, L + 1):
        theta += delta * xi / mass
        grad = target.gradient(theta)
        if grad is None or not np.all(np.isfinite(grad)):
            return theta, xi, False
        xi += (delta if step < L else 0.5 * delta) * grad
    return theta, xi, True


def hamiltonian(log_density, xi, mass):
    return -log_density + 0.5 * float(np.sum(xi * xi / mass))


@dataclass
class HmcState:
    theta: np.ndarray
    log_density: float
    rng: np.random.Generator = field(repr=False)
    xi: np.ndarray = field(default=None, repr=False)
    iteration: int = 0
    accepted: int = 0
    last_accepted: bool = False
    last_delta_h: float = 0.0


def hmc_step(state, target, delta, L, mass):
    rng = state.rng
    xi0 = rng.standard_normal(state.theta.size) * np.sqrt(mass)
    theta1, xi1, ok = leapfrog(state.theta, xi0, delta, L, mass, target)
    h0 = hamiltonian(state.log_density, xi0, mass)
    if ok:
        lp1 = target.log_density(theta1)
        delta_h = hamiltonian(lp1, xi1, mass) - h0 if np.isfinite(lp1) else np.inf
    else:
        lp1, delta_h = -np.inf, np.inf
    if np.isnan(delta_h):
        delta_h = np.inf
    # the uniform is drawn on every step so the stream does not depend on outcomes
    accept = np.log(rng.uniform()) < -delta_h
    if accept:
        return HmcState(theta=theta1, log_density=lp1, rng=rng, xi=xi1,
                        iteration=state.iteration + 1, accepted=state.accepted + 1,
                        last_accepted=True, last_delta_h=float(delta_h))
    return HmcState(theta=state.theta, log_density=state.log_density, rng=rng, xi=xi1,
                    iteration=state.iteration + 1, accepted=state.accepted,
                    last_accepted=False, last_delta_h=float(delta_h))


def adapt_step_size(history, delta, cfg):
    """Multiplicative update after a burn-in window: delta * exp(kappa * (rate - target))."""
    rate = float(np.mean(history)) if len(history) else cfg.target_accept
    return float(delta * np.exp(cfg.kappa * (rate - cfg.target_accept)))


class RunningMoments:
    """Welford running mean and (ddof=1) variance per coordinate."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    def add(self, x):
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self._m2 += d * (x - self.mean)

    @property
    def variance(self):
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self._m2 / (self.count - 1)


class SampleStore:
    def __init__(self, dim, thin=1, keep_draws=True):
        self.thin = thin
        self.keep_draws = keep_draws
        self.moments = RunningMoments(dim)
        self._draws = []
        self.acceptance = []
        self.energy_error = []
        self._seen = 0

    def record_step(self, accepted, delta_h):
        self.acceptance.append(bool(accepted))
        self.energy_error.append(float(delta_h))

    def add(self, x):
        if self._seen % self.thin == 0:
            self.moments.add(x)
            if self.keep_draws:
                self._draws.append(np.array(x, dtype=float))
        self._seen += 1

    @property
    def count(self):
        return self.moments.count

    @property
    def mean(self):
        return self.moments.mean.copy()

    @property
    def variance(self):
        return self.moments.variance

    @property
    def draws(self):
        if not self._draws:
            return np.empty((0, self.moments.mean.size))
        return np.vstack(self._draws)


def tune_mass(pilot, floor=1e-8, previous=None):
    """Diagonal mass from pilot variances: m_i = 1 / max(var_i, floor).

    Coordinates that never moved in the pilot (zero variance) keep their
    ``previous`` mass, unit mass when none is given.
    """
    variance = pilot.variance if isinstance(pilot, SampleStore) else np.asarray(pilot, dtype=float)
    previous = np.ones_like(variance) if previous is None else np.asarray(previous, dtype=float)
    mass = 1.0 / np.maximum(variance, floor)
    degenerate = ~(variance > 0)
    if degenerate.any():
        logger.warning("%d coordinates did not move in the pilot run; keeping their mass",
                       int(degenerate.sum()))
        warnings.warn(f"{int(degenerate.sum())} zero-variance coordinates in pilot run",
                      RuntimeWarning, stacklevel=2)
        mass[degenerate] = previous[degenerate]
    return mass


def bmse(chain, b):
    """Batch-means Monte Carlo standard error with ``b`` equal batches."""
    chain = np.asarray(chain, dtype=float)
    size = chain.shape[0] // b if b > 0 else 0
    if b < 2 or size < 2:
        raise ValueError(f"need at least 2 batches of 2 draws, got {chain.shape[0]} draws, b={b}")
    means = chain[:b * size].reshape((b, size) + chain.shape[1:]).mean(axis=1)
    return np.sqrt(np.var(means, axis=0, ddof=1) / b)


def default_batches(count):
    return int(np.floor(np.sqrt(count)))


def _autocov(chain):
    n = chain.size
    centred = chain - chain.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centred, size)
    return np.fft.irfft(spectrum * np.conjugate(spectrum), size)[:n] / n


def effective_sample_size(chain):
    """Single-chain ESS with Geyer's initial monotone sequence."""
    chain = np.asarray(chain, dtype=float)
    n = chain.size
    if n < 4:
        raise ValueError("need at least 4 draws for an effective sample size")
    acov = _autocov(chain)
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    pairs = []
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pairs.append(pair)
        t += 2
    pairs = np.minimum.accumulate(np.asarray(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * np.sum(pairs)
    return float(n / max(tau, 1.0 / np.log10(n)))


@dataclass
class ChainResult:
    state: HmcState
    store: SampleStore
    delta: float
    traces: np.ndarray
    acceptance_rate: float


def run_chain(target, x0, cfg, mass, delta, n_iter, n_burn, rng, record=None,
              monitor=None, keep_draws=True, desc="HMC"):
    """Run one chain with burn-in step-size adaptation.

    ``record`` maps the sampling-space vector to what is stored (identity by
    default); ``monitor`` indexes the recorded vector for per-iteration traces.
    """
    record = record or (lambda x: x)
    x0 = np.asarray(x0, dtype=float)
    lp0 = target.log_density(x0)
    if not np.isfinite(lp0):
        raise InvalidStateError("chain started at a state with zero posterior density")
    state = HmcState(theta=x0, log_density=lp0, rng=rng)
    store = SampleStore(record(x0).size, thin=cfg.thin, keep_draws=keep_draws)
    monitor = np.asarray(monitor if monitor is not None else [], dtype=np.int64)
    traces = np.empty((n_iter, monitor.size))
    window = []
    kept_accepts = 0

    bar = tqdm(range(n_iter), desc=desc, disable=not cfg.progress, leave=False)
    for it in bar:
        state = hmc_step(state, target, delta, cfg.L, mass)
        store.record_step(state.last_accepted, state.last_delta_h)
        recorded = record(state.theta)
        traces[it] = recorded[monitor]
        if it < n_burn:
            window.append(state.last_accepted)
            if len(window) == cfg.adapt_window:
                delta = adapt_step_size(window, delta, cfg)
                logger.debug("iteration %d: window acceptance %.2f, delta -> %.3g",
                             it + 1, np.mean(window), delta)
                window = []
        else:
            kept_accepts += state.last_accepted
            store.add(recorded)
        if cfg.progress and it % 50 == 0:
            bar.set_postfix(acc=f"{state.accepted / (it + 1):.2f}", delta=f"{delta:.2e}")
    kept = n_iter - n_burn
    rate = kept_accepts / kept if kept else float("nan")
    return ChainResult(state=state, store=store, delta=delta, traces=traces, acceptance_rate=rate)


def default_monitor(K, P, N, rng):
    """5 random w entries, 2 random a entries and every alpha and beta."""
    sl = block_slices(K, P, N)
    w_pick = rng.choice(K * N, size=min(5, K * N), replace=False) + sl["w"].start
    a_pick = rng.choice(P * N, size=min(2, P * N), replace=False) + sl["a"].start
    hyper = np.arange(sl["alpha"].start, sl["beta"].stop)
    return np.concatenate([np.sort(w_pick), np.sort(a_pick), hyper])


@dataclass
class HmcResult:
    summary: PosteriorSummary
    store: SampleStore
    acceptance_rate: float
    delta: float
    mass: np.ndarray
    monitor: list
    traces: np.ndarray
    bmse: dict
    ess: dict
    mean_abs_delta_h: float

    def trace_frame(self, index):
        return pd.DataFrame({"iteration": np.arange(1, self.traces.shape[0] + 1),
                             "value": self.traces[:, index]})

    def write_traces(self, directory):
        """One (iteration, value) CSV per monitored coordinate, e.g. traces/alpha_0.csv."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for index, label in enumerate(self.monitor):
            stem = label.replace("[", "_").replace("]", "").replace(",", "_")
            paths.append(directory / f"{stem}.csv")
            self.trace_frame(index).to_csv(paths[-1], index=False, float_format="%.17g")
        return paths


def run_hmc(data, kernel, hp, cfg, init=None, context=None):
    cfg.validate()
    context = context or ModelContext.from_data(data, kernel, hp)
    K, P, N = context.shape
    init = init if init is not None else ols_init(data, kernel)
    if not init.is_valid():
        raise InvalidStateError("initial state has a nonpositive precision")
    target = PosteriorTarget(context, init, frozen=cfg.frozen, log_scale=cfg.log_scale)
    rng = np.random.default_rng(cfg.seed)
    mass = (np.asarray(cfg.mass, dtype=float)[target.free] if cfg.mass is not None
            else np.ones(target.dim))
    if mass.shape != (target.dim,):
        raise ConfigError(f"mass must have length R={init.dim}")
    delta = cfg.delta0
    x = target.to_free(init)

    for round_ in range(cfg.pilot_rounds):
        pilot = run_chain(target, x, cfg, mass, delta, cfg.pilot_iter, cfg.pilot_iter // 2, rng,
                          keep_draws=False, desc=f"pilot {round_ + 1}")
        x, delta = pilot.state.theta, pilot.delta
        logger.info("Pilot round %d: acceptance %.2f, delta %.3g", round_ + 1,
                    pilot.acceptance_rate, delta)
        if not pilot.acceptance_rate > 0:
            logger.warning("Pilot round %d accepted no proposals; keeping the previous mass",
                           round_ + 1)
            warnings.warn(f"pilot round {round_ + 1} accepted nothing; mass not retuned",
                          RuntimeWarning, stacklevel=2)
            continue
        mass = tune_mass(pilot.store, floor=cfg.mass_floor, previous=mass)

    monitor = (np.asarray(cfg.monitor, dtype=np.int64) if cfg.monitor is not None
               else default_monitor(K, P, N, np.random.default_rng([cfg.seed, 1])))
    chain = run_chain(target, x, cfg, mass, delta, cfg.n_iter, cfg.n_burn, rng,
                      record=target.to_full, monitor=monitor)
    store = chain.store
    logger.info("HMC finished: %d retained draws, acceptance %.3f, final delta %.3g",
                store.count, chain.acceptance_rate, chain.delta)

    labels = coordinate_labels(K, P, N)
    draws = store.draws
    bmse_all = None
    batches = cfg.bmse_batches or default_batches(store.count)
    if store.count >= 4 and batches >= 2:
        bmse_all = bmse(draws, batches)
    ess = {}
    if store.count >= 4:
        ess = {labels[i]: effective_sample_size(draws[:, i]) for i in monitor}
    summary = PosteriorSummary(method="hmc", K=K, P=P, N=N, mean=store.mean,
                               variance=store.variance, bmse=bmse_all)
    energy = np.asarray(store.energy_error[cfg.n_burn:])
    finite = energy[np.isfinite(energy)]
    return HmcResult(
        summary=summary,
        store=store,
        acceptance_rate=chain.acceptance_rate,
        delta=chain.delta,
        mass=mass,
        monitor=[labels[i] for i in monitor],
        traces=chain.traces,
        bmse={labels[i]: float(bmse_all[i]) for i in monitor} if bmse_all is not None else {},
        ess=ess,
        mean_abs_delta_h=float(np.mean(np.abs(finite))) if finite.size else float("nan"),
    )


def write_draw_archive(path, draws):
    """Text header ``R count`` then row-major little-endian float64 draws."""
    draws = np.ascontiguousarray(draws, dtype="<f8")
    count, R = draws.shape
    with open(path, "wb") as fh:
        fh.write(f"{R} {count}\n".encode("ascii"))
        fh.write(draws.tobytes())
    return Path(path)


def read_draw_archive(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        R, count = int(header[0]), int(header[1])
        values = np.frombuffer(fh.read(), dtype="<f8")
    if values.size != R * count:
        raise ValueError(f"{path}: archive holds {values.size} values, header says {R}x{count}")
    return values.reshape(count, R).copy()