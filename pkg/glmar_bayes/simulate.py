"""Synthetic GLM-AR datasets drawn from the model's own generating mechanism.

The ground truth (W, A, lambda) is drawn once per scenario from the spatial
priors; every replicate then draws fresh AR noise from its own stream
``default_rng([seed, rep])``.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.sparse.linalg import splu
from tqdm.auto import tqdm

from . import designs
from .bundle import read_design, write_bundle
from .errors import BundleError, ConfigError, FactorizationError
from .lattice import block_mask, build_kernel, ellipse_mask, read_mask
from .model import Dataset

logger = logging.getLogger(__name__)

INIT_RULES = ("stationary", "zero")
BURN_PER_LAG = 10
SCALES = {"desk": {"mask": "desk", "J": 20}, "full": {"mask": "full", "J": 100}}


@dataclass(frozen=True)
class LambdaSpec:
    """Noise precision: ``fixed`` at ``value`` or i.i.d. Gamma(shape, scale)."""

    kind: str = "gamma"
    value: float = None
    shape: float = 10.0
    scale: float = 10.0

    def validate(self):
        if self.kind == "fixed":
            if self.value is None or not self.value > 0:
                raise ConfigError("fixed lambda must be positive")
        elif self.kind == "gamma":
            if not (self.shape > 0 and self.scale > 0):
                raise ConfigError("lambda Gamma shape and scale must be positive")
        else:
            raise ConfigError(f"unknown lambda spec {self.kind!r}")
        return self

    def draw(self, N, rng):
        if self.kind == "fixed":
            return np.full(N, float(self.value))
        return rng.gamma(self.shape, self.scale, size=N)

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed:{self.value:g}"
        return f"gamma:{self.shape:g},{self.scale:g}"

    @classmethod
    def parse(cls, text):
        kind, _, rest = text.partition(":")
        try:
            if kind == "fixed":
                return cls(kind="fixed", value=float(rest)).validate()
            if kind == "gamma":
                shape, scale = (float(v) for v in rest.split(","))
                return cls(kind="gamma", shape=shape, scale=scale).validate()
        except ValueError:
            pass
        raise ConfigError(f"lambda must read 'fixed:V' or 'gamma:SHAPE,SCALE', got {text!r}")


@dataclass(frozen=True)
class SimScenario:
    name: str
    alpha: tuple
    beta: tuple
    lambda_spec: LambdaSpec = field(default_factory=LambdaSpec)
    design: str = "hrf"
    mask: str = "desk"
    J: int = 20
    seed: int = 0
    init: str = "stationary"

    @property
    def K(self):
        return len(self.alpha)

    @property
    def P(self):
        return len(self.beta)

    def validate(self):
        if self.K < 1 or self.P < 1:
            raise ConfigError("a scenario needs at least one alpha and one beta")
        if not (all(a > 0 for a in self.alpha) and all(b > 0 for b in self.beta)):
            raise ConfigError(f"scenario {self.name}: precisions must be positive")
        if self.J < 1:
            raise ConfigError("replicate count J must be at least 1")
        if self.init not in INIT_RULES:
            raise ConfigError(f"init must be one of {INIT_RULES}")
        self.lambda_spec.validate()
        return self

    def to_text(self):
        lines = [
            f"name={self.name}",
            "alpha=" + ",".join(f"{a:g}" for a in self.alpha),
            "beta=" + ",".join(f"{b:g}" for b in self.beta),
            f"lambda={self.lambda_spec}",
            f"design={self.design}",
            f"mask={self.mask}",
            f"J={self.J}",
            f"seed={self.seed}",
            f"init={self.init}",
        ]
        return "\n".join(lines) + "\n"


def read_scenario(path):
    """Parse a key=value scenario file (same keys ``SimScenario.to_text`` writes)."""
    path = Path(path)
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BundleError(path, f"expected key=value, got {raw!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = (value, lineno)

    def get(key, cast, default=None):
        if key not in values:
            if default is None:
                raise BundleError(path, f"missing key {key}")
            return default
        value, lineno = values[key]
        try:
            return cast(value)
        except (ValueError, ConfigError) as exc:
            raise BundleError(path, f"bad value for {key}: {exc}", line=lineno) from None

    def floats(text):
        return tuple(float(v) for v in text.split(","))

    scenario = SimScenario(
        name=get("name", str, path.stem),
        alpha=get("alpha", floats),
        beta=get("beta", floats),
        lambda_spec=get("lambda", LambdaSpec.parse, LambdaSpec()),
        design=get("design", str, "hrf"),
        mask=get("mask", str, "desk"),
        J=get("J", int, 20),
        seed=get("seed", int, 0),
        init=get("init", str, "stationary"),
    )
    return scenario.validate()


def preset_scenarios(scale="desk", seed=0):
    """Simulation studies I-III."""
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {sorted(SCALES)}")
    common = dict(mask=SCALES[scale]["mask"], J=SCALES[scale]["J"], seed=seed)
    return {
        "study1": SimScenario(
            name="study1", alpha=(1.0,) * 5, beta=(1000.0,),
            lambda_spec=LambdaSpec("gamma", shape=10.0, scale=10.0), design="hrf", **common),
        "study2": SimScenario(
            name="study2",
            alpha=(0.1,) * 3 + (0.5,) * 3 + (1.0,) * 3 + (2.0,) * 3 + (1.0,),
            beta=(1000.0, 2000.0, 5000.0),
            lambda_spec=LambdaSpec("gamma", shape=10.0, scale=10.0), design="hrf-derivs",
            **common),
        "study3": SimScenario(
            name="study3", alpha=(100.0,) * 4 + (0.01,), beta=(400.0,),
            lambda_spec=LambdaSpec("fixed", value=0.1), design="hrf", **common),
    }


def resolve_mask(source):
    if source == "desk":
        return block_mask(20, 20)
    if source == "full":
        return ellipse_mask()
    return read_mask(source)


def resolve_design(source):
    if source == "hrf":
        return designs.design_matrix(derivatives=False)
    if source == "hrf-derivs":
        return designs.design_matrix(derivatives=True)
    return read_design(source)


@dataclass
class GroundTruth:
    W: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    seed: int
    init: str = "stationary"

    @property
    def shape(self):
        return self.W.shape[0], self.A.shape[0], self.W.shape[1]

    def to_frame(self):
        K, P, N = self.shape
        rows = [(f"w{k + 1}", self.W[k]) for k in range(K)]
        rows += [(f"a{p + 1}", self.A[p]) for p in range(P)]
        rows += [("lambda", self.lam)]
        return pd.DataFrame({
            "voxel": np.tile(np.arange(N), len(rows)),
            "parameter": np.repeat([name for name, _ in rows], N),
            "value": np.concatenate([values for _, values in rows]),
        })

    def write(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return Path(path)

    @classmethod
    def read(cls, path, seed=0):
        frame = pd.read_csv(path)
        if list(frame.columns) != ["voxel", "parameter", "value"]:
            raise BundleError(path, "truth file needs columns voxel,parameter,value", line=1)
        table = frame.pivot(index="parameter", columns="voxel", values="value")
        w_rows = sorted((p for p in table.index if p.startswith("w")), key=lambda p: int(p[1:]))
        a_rows = sorted((p for p in table.index if p.startswith("a")), key=lambda p: int(p[1:]))
        return cls(W=table.loc[w_rows].to_numpy(), A=table.loc[a_rows].to_numpy(),
                   lam=table.loc["lambda"].to_numpy(), seed=seed)


def draw_truth(scenario, kernel):
    """Draw W and A rows from their GMRF priors and lambda from its spec.

    A row with precision ``c * StS`` is ``S^-1 z / sqrt(c)`` for white noise z.
    """
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    N = kernel.n_voxels
    try:
        lu = splu(kernel.S.tocsc())
    except RuntimeError as exc:
        raise FactorizationError(f"sparse LU of S failed: {exc}") from exc
    alpha = np.asarray(scenario.alpha, dtype=float)
    beta = np.asarray(scenario.beta, dtype=float)
    W = lu.solve(rng.standard_normal((N, scenario.K))).T / np.sqrt(alpha)[:, None]
    A = lu.solve(rng.standard_normal((N, scenario.P))).T / np.sqrt(beta)[:, None]
    lam = scenario.lambda_spec.draw(N, rng)
    return GroundTruth(W=W, A=A, lam=lam, seed=scenario.seed, init=scenario.init)


def companion(a):
    P = a.size
    matrix = np.zeros((P, P))
    matrix[0] = a
    matrix[1:, :-1] = np.eye(P - 1)
    return matrix


def stationary(A):
    """Per voxel: are all roots of the AR polynomial outside the unit circle."""
    return np.array([np.max(np.abs(np.linalg.eigvals(companion(A[:, n])))) < 1.0
                     for n in range(A.shape[1])])


def _stationary_start(a, rng):
    """(e_P, ..., e_1) drawn from the stationary law of a unit-innovation AR process."""
    C = companion(a)
    Q = np.zeros_like(C)
    Q[0, 0] = 1.0
    cov = scipy.linalg.solve_discrete_lyapunov(C, Q)
    return rng.multivariate_normal(np.zeros(a.size), cov, method="eigh")


def generate_replicate(truth, Xfull, rep, regressors=None):
    """One dataset: y = Xfull w_n + e_n with AR(P) errors e_n."""
    K, P, N = truth.shape
    T = Xfull.shape[0]
    rng = np.random.default_rng([truth.seed, rep])
    burn = BURN_PER_LAG * P
    scale = 1.0 / np.sqrt(truth.lam)
    z = rng.standard_normal((burn + T, N)) * scale

    explosive = ~stationary(truth.A)
    is_stationary = ~explosive if truth.init == "stationary" else np.zeros(N, dtype=bool)
    if explosive.any():
        logger.warning("replicate %d: %d voxels have a non-stationary AR draw", rep,
                       int(explosive.sum()))
    e = np.zeros((burn + T, N))
    for n in np.flatnonzero(is_stationary):
        start = _stationary_start(truth.A[:, n], rng) * scale[n]
        e[burn:burn + P, n] = start[::-1]
    first = np.where(is_stationary, burn + P, P)
    for t in range(P, burn + T):
        value = z[t] + sum(truth.A[p - 1] * e[t - p] for p in range(1, P + 1))
        active = t >= first
        e[t, active] = value[active]
    Y = Xfull @ truth.W + e[burn:]
    return Dataset(Y=Y, Xfull=Xfull, P=P, regressors=regressors)


def replicate_name(rep):
    return f"rep_{rep:03d}"


def _write_one(args):
    directory, truth, Xfull, names, mask, rep = args
    data = generate_replicate(truth, Xfull, rep, regressors=names)
    target = write_bundle(Path(directory) / replicate_name(rep), data, mask)
    truth.write(target / "truth.csv")
    return str(target)


def write_scenario(scenario, directory, workers=1, progress=False):
    """Write ``J`` replicate bundles plus truth files under ``directory``."""
    scenario.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mask = resolve_mask(scenario.mask)
    kernel = build_kernel(mask)
    Xfull, names = resolve_design(scenario.design)
    if Xfull.shape[1] != scenario.K:
        raise ConfigError(f"design {scenario.design} has {Xfull.shape[1]} columns but "
                          f"scenario {scenario.name} has K={scenario.K}")
    truth = draw_truth(scenario, kernel)
    (directory / "scenario.txt").write_text(scenario.to_text())
    truth.write(directory / "truth.csv")
    logger.info("Simulating %s: N=%d K=%d P=%d T=%d, J=%d replicates", scenario.name,
                kernel.n_voxels, scenario.K, scenario.P, Xfull.shape[0], scenario.J)

    jobs = [(directory, truth, Xfull, names, mask, rep) for rep in range(scenario.J)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            written = list(tqdm(pool.map(_write_one, jobs), total=len(jobs),
                                desc="replicates", disable=not progress))
    else:
        written = [_write_one(job) for job in tqdm(jobs, desc="replicates", disable=not progress)]
    return [Path(p) for p in written]
