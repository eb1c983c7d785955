"""PosteriorSummary: the one output schema shared by the HMC, VB and OLS backends."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import BundleError
from .model import BLOCKS, ParamState, block_slices, coordinate_labels

COLUMNS = ["coordinate", "block", "index", "voxel", "mean", "variance", "bmse"]


@dataclass
class PosteriorSummary:
    """Posterior means and marginal variances per coordinate.

    ``variance`` is None for point-estimate backends (OLS).  ``w_cov`` optionally
    carries per-voxel K x K covariances of w (VB), used for Gaussian PPMs.
    """

    method: str
    K: int
    P: int
    N: int
    mean: np.ndarray
    variance: np.ndarray = None
    bmse: np.ndarray = None
    w_cov: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        R = (self.K + self.P + 1) * self.N + self.K + self.P
        if self.mean.shape != (R,):
            raise ValueError(f"summary mean has shape {self.mean.shape}, expected ({R},)")

    @property
    def has_variance(self):
        return self.variance is not None

    def block(self, name, which="mean"):
        values = getattr(self, which)
        if values is None:
            return None
        part = values[block_slices(self.K, self.P, self.N)[name]]
        if name == "w":
            return part.reshape(self.K, self.N)
        if name == "a":
            return part.reshape(self.P, self.N)
        return part

    def mean_state(self):
        return ParamState.unflatten(self.mean, self.K, self.P, self.N)

    def to_frame(self):
        K, P, N = self.K, self.P, self.N
        block, index, voxel = [], [], []
        for name in BLOCKS:
            if name in ("w", "a"):
                rows = K if name == "w" else P
                block += [name] * (rows * N)
                index += list(np.repeat(np.arange(rows), N))
                voxel += list(np.tile(np.arange(N), rows))
            else:
                size = {"alpha": K, "beta": P, "lambda": N}[name]
                block += [name] * size
                index += list(range(size)) if name != "lambda" else [-1] * size
                voxel += [-1] * size if name != "lambda" else list(range(size))
        nan = np.full(self.mean.shape, np.nan)
        return pd.DataFrame({
            "coordinate": coordinate_labels(K, P, N),
            "block": block,
            "index": np.asarray(index, dtype=np.int64),
            "voxel": np.asarray(voxel, dtype=np.int64),
            "mean": self.mean,
            "variance": self.variance if self.variance is not None else nan,
            "bmse": self.bmse if self.bmse is not None else nan,
        }, columns=COLUMNS)

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(directory / "summary.csv", index=False, float_format="%.17g")
        (directory / "summary_meta.txt").write_text(
            f"method={self.method}\nK={self.K}\nP={self.P}\nN={self.N}\n")
        if self.w_cov is not None:
            n, k, l = np.meshgrid(np.arange(self.N), np.arange(self.K), np.arange(self.K),
                                  indexing="ij")
            pd.DataFrame({"voxel": n.ravel(), "k": k.ravel(), "l": l.ravel(),
                          "value": self.w_cov.ravel()}).to_csv(
                directory / "w_covariance.csv", index=False, float_format="%.17g")
        return directory / "summary.csv"

    @classmethod
    def read(cls, directory):
        directory = Path(directory)
        meta_path = directory / "summary_meta.txt"
        if not meta_path.exists():
            raise BundleError(meta_path, "missing summary metadata")
        meta = dict(line.split("=", 1) for line in meta_path.read_text().split())
        K, P, N = (int(meta[k]) for k in ("K", "P", "N"))
        frame = pd.read_csv(directory / "summary.csv")
        if list(frame.columns) != COLUMNS:
            raise BundleError(directory / "summary.csv", "unexpected summary columns", line=1)
        variance = frame["variance"].to_numpy(dtype=float)
        bmse = frame["bmse"].to_numpy(dtype=float)
        w_cov = None
        cov_path = directory / "w_covariance.csv"
        if cov_path.exists():
            w_cov = pd.read_csv(cov_path)["value"].to_numpy(dtype=float).reshape(N, K, K)
        return cls(
            method=meta["method"], K=K, P=P, N=N,
            mean=frame["mean"].to_numpy(dtype=float),
            variance=None if np.isnan(variance).all() else variance,
            bmse=None if np.isnan(bmse).all() else bmse,
            w_cov=w_cov,
        )


def point_summary(state, method="ols"):
    K, P, N = state.shape
    return PosteriorSummary(method=method, K=K, P=P, N=N, mean=state.flatten())
