"""Evaluation statistics over replicate sets.

Bias/MSE/variance averages, correlation with the truth, Moran's I, posterior
probability maps with sensitivity curves, and the two-method comparison.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import ConfigError, DataError
from .hmc import read_draw_archive
from .lattice import read_mask
from .model import block_slices
from .simulate import GroundTruth
from .summary import PosteriorSummary

logger = logging.getLogger(__name__)

CONTRASTS = {
    "fame": np.array([-1.0, -1.0, 1.0, 1.0, 0.0]) / 2.0,
    "face": np.array([1.0, 1.0, 1.0, 1.0, 0.0]) / 4.0,
}
# (gamma_e, gamma_p) used by each named contrast unless overridden
CONTRAST_THRESHOLDS = {
    "fame": ("top10pct", 0.9),
    "face": ("above-mean:1pct", 0.95),
}
# Canonical-HRF columns of the 13-column design (derivatives follow each one)
CANONICAL_COLUMNS = (0, 3, 6, 9, 12)
MORAN_CHUNK = 512
DEFAULT_THRESHOLDS = np.round(np.linspace(0.9, 1.0, 11), 10)


@dataclass
class ReplicateSet:
    method: str
    summaries: list
    truth: GroundTruth
    mask: object
    draw_paths: list = field(default=None, repr=False)

    def __post_init__(self):
        if not self.summaries:
            raise DataError(f"{self.method}: replicate set is empty")
        shapes = {(s.K, s.P, s.N) for s in self.summaries}
        if len(shapes) != 1:
            raise DataError(f"{self.method}: replicates disagree on (K, P, N): {sorted(shapes)}")
        if shapes.pop() != self.truth.shape:
            raise DataError(f"{self.method}: replicate shape does not match the truth "
                            f"{self.truth.shape}")
        if self.mask.n_voxels != self.truth.shape[2]:
            raise DataError(f"{self.method}: mask has {self.mask.n_voxels} voxels")

    @property
    def J(self):
        return len(self.summaries)

    @property
    def shape(self):
        return self.truth.shape

    @property
    def has_variance(self):
        return all(s.has_variance for s in self.summaries)

    def block_names(self):
        K, P, _ = self.shape
        return [f"W{k + 1}" for k in range(K)] + [f"A{p + 1}" for p in range(P)]

    def estimates(self, block, which="mean"):
        """(J, N) array of one coefficient row across replicates, or None."""
        name, row = _parse_block(block)
        rows = [s.block(name, which) for s in self.summaries]
        if any(r is None for r in rows):
            return None
        return np.stack([r[row] for r in rows])

    def true_row(self, block):
        name, row = _parse_block(block)
        return (self.truth.W if name == "w" else self.truth.A)[row]

    def draws(self, j):
        if not self.draw_paths or self.draw_paths[j] is None:
            return None
        return read_draw_archive(self.draw_paths[j])


def _parse_block(block):
    """'W3' -> ('w', 2); 'A1' -> ('a', 0)."""
    if isinstance(block, tuple):
        return block
    letter, digits = block[0].upper(), block[1:]
    if letter not in "WA" or not digits.isdigit() or int(digits) < 1:
        raise ConfigError(f"block must look like W1 or A1, got {block!r}")
    return letter.lower(), int(digits) - 1


def load_replicate_set(run_dir, scenario_dir, method=None):
    """Pair every ``rep_*`` fit under ``run_dir`` with the scenario's truth."""
    run_dir, scenario_dir = Path(run_dir), Path(scenario_dir)
    reps = sorted(p for p in run_dir.glob("rep_*") if (p / "summary.csv").exists())
    if not reps:
        raise DataError(f"{run_dir}: no fitted replicates (rep_*/summary.csv)")
    summaries = [PosteriorSummary.read(p) for p in reps]
    draws = [p / "draws.bin" if (p / "draws.bin").exists() else None for p in reps]
    truth = GroundTruth.read(scenario_dir / "truth.csv")
    mask = read_mask(scenario_dir / reps[0].name / "mask.txt")
    method = method or summaries[0].method
    logger.info("Loaded %d %s replicates from %s", len(summaries), method, run_dir)
    return ReplicateSet(method=method, summaries=summaries, truth=truth, mask=mask,
                        draw_paths=draws)


@dataclass(frozen=True)
class BlockStats:
    asbias: float
    amse: float
    avar: float
    correlation: float


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / denom) if denom > 0 else float("nan")


def summary_stats(rset, block):
    """ASBIAS, AMSE, AVAR (None without variances) and mean truth correlation."""
    est = rset.estimates(block)
    truth = rset.true_row(block)
    asbias = float(np.mean((est.mean(axis=0) - truth) ** 2))
    amse = float(np.mean((est - truth[None, :]) ** 2))
    var = rset.estimates(block, "variance")
    avar = float(np.mean(var)) if var is not None else None
    if np.ptp(truth) == 0:
        correlation = float("nan")
    else:
        correlation = float(np.mean([_pearson(e, truth) for e in est]))
    return BlockStats(asbias=asbias, amse=amse, avar=avar, correlation=correlation)


class MoranWeights:
    """Reciprocal centroid distances, generated in row chunks on demand."""

    def __init__(self, centroid, chunk=MORAN_CHUNK):
        self.centroid = np.asarray(centroid, dtype=float)
        self.chunk = chunk
        self._total = None

    @property
    def n(self):
        return self.centroid.shape[0]

    def rows(self, start, stop):
        d = np.linalg.norm(self.centroid[start:stop, None, :] - self.centroid[None, :, :], axis=-1)
        with np.errstate(divide="ignore"):
            phi = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)
        return phi

    def chunks(self):
        for start in range(0, self.n, self.chunk):
            stop = min(start + self.chunk, self.n)
            yield start, stop, self.rows(start, stop)

    @property
    def total(self):
        if self._total is None:
            self._total = float(sum(phi.sum() for _, _, phi in self.chunks()))
        return self._total

    def dense(self):
        return self.rows(0, self.n)


def morans_i(image, weights):
    z = np.asarray(image, dtype=float)
    if z.shape != (weights.n,):
        raise ValueError(f"image has shape {z.shape}, weights cover {weights.n} voxels")
    z = z - z.mean()
    denom = float(np.sum(z * z))
    if not denom > 0:
        raise DataError("Moran's I undefined (zero variance)")
    num = sum(float(z[start:stop] @ (phi @ z)) for start, stop, phi in weights.chunks())
    return (weights.n / weights.total) * num / denom


def image_moran(values, mask, weights=None):
    """Moran's I of a masked image; 3-D masks are averaged over axial slices."""
    if mask.ndim == 2:
        return morans_i(values, weights or MoranWeights(mask.centroid))
    scores = []
    axial = mask.centroid[:, -1]
    for z in np.unique(axial):
        sel = axial == z
        if sel.sum() < 2 or np.ptp(values[sel]) == 0:
            continue
        scores.append(morans_i(values[sel], MoranWeights(mask.centroid[sel])))
    if not scores:
        raise DataError("Moran's I undefined (zero variance)")
    return float(np.mean(scores))


def amoran(rset, block, weights=None):
    weights = weights or (MoranWeights(rset.mask.centroid) if rset.mask.ndim == 2 else None)
    return float(np.mean([image_moran(e, rset.mask, weights) for e in rset.estimates(block)]))


@dataclass(frozen=True)
class Contrast:
    c: np.ndarray
    gamma_e: object = "top10pct"
    gamma_p: float = 0.9
    name: str = "custom"

    def validate(self, K=None):
        c = np.asarray(self.c, dtype=float)
        if not np.any(c != 0):
            raise ConfigError("contrast vector must be nonzero")
        if not 0 < self.gamma_p < 1:
            raise ConfigError("gamma_p must lie in (0, 1)")
        if K is not None and c.size != K:
            raise ConfigError(f"contrast has {c.size} weights but the model has K={K}")
        return self


def contrast_vector(name, K):
    """A named contrast laid out for a 5-column or 13-column design."""
    if name not in CONTRASTS:
        try:
            return np.array([float(v) for v in name.split(",")])
        except ValueError:
            raise ConfigError(f"unknown contrast {name!r}; use {sorted(CONTRASTS)} "
                              "or comma-separated weights") from None
    base = CONTRASTS[name]
    if K == base.size:
        return base.copy()
    if K == 13:
        c = np.zeros(K)
        c[list(CANONICAL_COLUMNS)] = base
        return c
    raise ConfigError(f"contrast {name} is defined for K=5 or K=13, not K={K}")


def named_contrast(name, K, gamma_e=None, gamma_p=None):
    """Contrast for ``name`` with its preset thresholds; explicit values win."""
    preset_e, preset_p = CONTRAST_THRESHOLDS.get(name, ("top10pct", 0.9))
    return Contrast(c=contrast_vector(name, K),
                    gamma_e=preset_e if gamma_e is None else gamma_e,
                    gamma_p=preset_p if gamma_p is None else gamma_p,
                    name=name).validate(K)


def resolve_gamma_e(rule, values):
    """Effect threshold from a number or a rule over contrast values across voxels.

    ``topXpct`` is the (1 - X/100) quantile; ``above-mean:Xpct`` lies X percent
    above the global mean.
    """
    if isinstance(rule, (int, float, np.floating)):
        return float(rule)
    text = str(rule).strip()
    try:
        return float(text)
    except ValueError:
        pass
    values = np.asarray(values, dtype=float)
    if text.startswith("top") and text.endswith("pct"):
        q = float(text[3:-3]) / 100.0
        return float(np.quantile(values, 1.0 - q))
    if text.startswith("above-mean:") and text.endswith("pct"):
        pct = float(text[len("above-mean:"):-3]) / 100.0
        mean = float(np.mean(values))
        return mean + pct * abs(mean)
    raise ConfigError(f"unknown effect threshold rule {rule!r}")


@dataclass
class PpmResult:
    probability: np.ndarray
    active: np.ndarray
    gamma_e: float
    gamma_p: float


def _contrast_draws(draws, c, K, P, N):
    w = draws[:, block_slices(K, P, N)["w"]].reshape(-1, K, N)
    return np.einsum("k,skn->sn", c, w)


def ppm(summary, contrast, draws=None, gamma_e=None):
    """Posterior probability that c'w_n exceeds gamma_e, per voxel.

    With ``draws`` the probability is the fraction of draws above the threshold;
    otherwise the per-voxel Gaussian of ``summary.w_cov`` is used.
    """
    K, P, N = summary.K, summary.P, summary.N
    contrast.validate(K)
    c = np.asarray(contrast.c, dtype=float)
    point = c @ summary.block("w")
    if gamma_e is None:
        gamma_e = resolve_gamma_e(contrast.gamma_e, point)
    if draws is not None:
        values = _contrast_draws(np.asarray(draws, dtype=float), c, K, P, N)
        probability = np.mean(values > gamma_e, axis=0)
    elif summary.w_cov is not None:
        sd = np.sqrt(np.maximum(np.einsum("k,nkl,l->n", c, summary.w_cov, c), 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = norm.sf(gamma_e, loc=point, scale=np.where(sd > 0, sd, 1.0))
        probability = np.where(sd > 0, tail, (point > gamma_e).astype(float))
    else:
        raise DataError(f"{summary.method} summary has neither draws nor w covariances; "
                        "cannot form a posterior probability map")
    return PpmResult(probability=probability, active=probability > contrast.gamma_p,
                     gamma_e=float(gamma_e), gamma_p=contrast.gamma_p)


def sensitivity_curve(probability, truth_active, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of truly active voxels whose probability reaches each threshold."""
    truth_active = np.asarray(truth_active, dtype=bool)
    if not truth_active.any():
        raise DataError("sensitivity undefined: the true activation set is empty")
    probability = np.asarray(probability, dtype=float)[truth_active]
    thresholds = np.asarray(thresholds, dtype=float)
    sens = (probability[None, :] >= thresholds[:, None]).mean(axis=1)
    return pd.DataFrame({"threshold": thresholds, "sensitivity": sens})


def true_activation(rset, contrast):
    """True-active voxels and the effect threshold resolved on the true contrast image."""
    K = rset.shape[0]
    contrast.validate(K)
    values = np.asarray(contrast.c, dtype=float) @ rset.truth.W
    gamma_e = resolve_gamma_e(contrast.gamma_e, values)
    return values > gamma_e, gamma_e


def set_sensitivity(rset, contrast, thresholds=DEFAULT_THRESHOLDS):
    """Mean sensitivity curve over replicates, thresholding at the true gamma_e."""
    active, gamma_e = true_activation(rset, contrast)
    curves, maps = [], []
    for j, summary in enumerate(rset.summaries):
        result = ppm(summary, contrast, draws=rset.draws(j), gamma_e=gamma_e)
        curves.append(sensitivity_curve(result.probability, active, thresholds)["sensitivity"])
        maps.append(result.probability)
    curve = pd.DataFrame({"threshold": np.asarray(thresholds, dtype=float),
                          "sensitivity": np.mean(curves, axis=0)})
    return curve, np.mean(maps, axis=0), gamma_e


@dataclass
class ComparisonReport:
    baseline: str
    other: str
    blocks: list
    amse_ratio: dict
    estimate_correlation: dict
    log_variance_ratio: dict
    moran: dict

    def mean_ratio(self, names=None):
        names = names or self.blocks
        return float(np.mean([self.amse_ratio[n] for n in names]))

    def to_frame(self):
        rows = []
        for name in self.blocks:
            lvr = self.log_variance_ratio.get(name)
            rows.append({
                "block": name,
                "amse_ratio": self.amse_ratio[name],
                "estimate_correlation": self.estimate_correlation[name],
                "mean_log_variance_ratio": float(np.mean(lvr)) if lvr is not None else None,
                f"amoran_{self.baseline}": self.moran[name][self.baseline],
                f"amoran_{self.other}": self.moran[name][self.other],
                "amoran_true": self.moran[name]["true"],
            })
        return pd.DataFrame(rows)

    def summary_line(self):
        w = [b for b in self.blocks if b.startswith("W")]
        a = [b for b in self.blocks if b.startswith("A")]
        return (f"mean AMSE ratio {self.other}/{self.baseline}: "
                f"W {100 * self.mean_ratio(w):.1f}%, A {100 * self.mean_ratio(a):.1f}%, "
                f"all {100 * self.mean_ratio():.1f}%")

    def to_json(self):
        return {
            "baseline": self.baseline,
            "other": self.other,
            "amse_ratio": self.amse_ratio,
            "mean_amse_ratio": self.mean_ratio(),
            "estimate_correlation": self.estimate_correlation,
            "mean_log_variance_ratio": {k: (float(np.mean(v)) if v is not None else None)
                                        for k, v in self.log_variance_ratio.items()},
            "moran": self.moran,
        }


def safe_moran(values, mask, weights):
    try:
        return image_moran(values, mask, weights)
    except DataError:
        return float("nan")


def _ratio(num, den):
    if den > 0:
        return num / den
    return 1.0 if num == 0 else float("inf")


def compare_report(baseline, other):
    """AMSE(other) / AMSE(baseline) per block, plus correlations, variance ratios, Moran."""
    if baseline.J != other.J:
        raise DataError(f"replicate counts differ: {baseline.method} has {baseline.J}, "
                        f"{other.method} has {other.J}")
    if baseline.shape != other.shape:
        raise DataError(f"replicate sets differ in shape: {baseline.shape} vs {other.shape}")
    if not (np.array_equal(baseline.truth.W, other.truth.W)
            and np.array_equal(baseline.truth.A, other.truth.A)):
        raise DataError("replicate sets were fitted to different ground truths")
    weights = MoranWeights(baseline.mask.centroid) if baseline.mask.ndim == 2 else None
    blocks = baseline.block_names()
    ratio, corr, lvr, moran = {}, {}, {}, {}
    for name in blocks:
        ratio[name] = _ratio(summary_stats(other, name).amse, summary_stats(baseline, name).amse)
        ea, eb = baseline.estimates(name), other.estimates(name)
        corr[name] = float(np.mean([_pearson(a, b) for a, b in zip(ea, eb)]))
        va, vb = baseline.estimates(name, "variance"), other.estimates(name, "variance")
        lvr[name] = np.mean(np.log(vb / va), axis=0) if va is not None and vb is not None else None
        moran[name] = {
            baseline.method: float(np.mean([safe_moran(e, baseline.mask, weights) for e in ea])),
            other.method: float(np.mean([safe_moran(e, other.mask, weights) for e in eb])),
            "true": safe_moran(baseline.true_row(name), baseline.mask, weights),
        }
    return ComparisonReport(baseline=baseline.method, other=other.method, blocks=blocks,
                            amse_ratio=ratio, estimate_correlation=corr,
                            log_variance_ratio=lvr, moran=moran)
