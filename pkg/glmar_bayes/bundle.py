"""Dataset bundles on disk.

A bundle is a directory holding::

    design.csv   T rows x K columns, header row of regressor names
    series.f64   row-major little-endian float64, T x N (or series.csv, no header)
    mask.txt     lattice grid file
    meta.txt     key=value lines: T, N, K, P
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import BundleError, MaskError
from .lattice import read_mask, write_mask
from .model import Dataset

logger = logging.getLogger(__name__)

META_KEYS = ("T", "N", "K", "P")


def read_meta(path):
    path = Path(path)
    if not path.exists():
        raise BundleError(path, "missing meta file")
    meta = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BundleError(path, f"expected key=value, got {raw!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            meta[key] = int(value)
        except ValueError:
            raise BundleError(path, f"value of {key} must be an integer", line=lineno) from None
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise BundleError(path, "missing keys " + ", ".join(missing))
    return meta


def _numeric_frame(frame, path, header_lines):
    coerced = frame.apply(pd.to_numeric, errors="coerce")
    bad = coerced.isna().to_numpy()
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise BundleError(path, "non-numeric or missing value", line=row + 1 + header_lines)
    return coerced.to_numpy(dtype=float)


def read_design(path):
    path = Path(path)
    if not path.exists():
        raise BundleError(path, "missing design file")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise BundleError(path, f"cannot parse design ({exc})") from exc
    return _numeric_frame(frame, path, header_lines=1), [str(c) for c in frame.columns]


def read_series(directory, T, N):
    directory = Path(directory)
    binary, text = directory / "series.f64", directory / "series.csv"
    if binary.exists():
        values = np.fromfile(binary, dtype="<f8")
        if values.size != T * N:
            raise BundleError(binary, f"holds {values.size} values, expected T*N = {T * N}")
        return values.reshape(T, N).astype(float)
    if text.exists():
        try:
            frame = pd.read_csv(text, header=None)
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise BundleError(text, f"cannot parse series ({exc})") from exc
        if frame.shape != (T, N):
            raise BundleError(text, f"shape {frame.shape} does not match T x N = ({T}, {N})")
        return _numeric_frame(frame, text, header_lines=0)
    raise BundleError(directory, "no series.f64 or series.csv in bundle")


def read_bundle(directory):
    """Load a bundle; returns (Dataset, Mask)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise BundleError(directory, "bundle directory does not exist")
    meta = read_meta(directory / "meta.txt")
    Xfull, names = read_design(directory / "design.csv")
    if Xfull.shape != (meta["T"], meta["K"]):
        raise BundleError(directory / "design.csv",
                          f"shape {Xfull.shape} does not match meta T={meta['T']}, K={meta['K']}")
    Y = read_series(directory, meta["T"], meta["N"])
    try:
        mask = read_mask(directory / "mask.txt")
    except MaskError as exc:
        raise BundleError(directory / "mask.txt", str(exc)) from exc
    if mask.n_voxels != meta["N"]:
        raise BundleError(directory / "mask.txt",
                          f"mask has {mask.n_voxels} voxels but meta N={meta['N']}")
    logger.info("Loaded bundle %s: T=%d N=%d K=%d P=%d", directory, meta["T"], meta["N"],
                meta["K"], meta["P"])
    return Dataset(Y=Y, Xfull=Xfull, P=meta["P"], regressors=names), mask


def write_bundle(directory, data, mask, binary=True):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(data.Xfull, columns=data.regressors).to_csv(
        directory / "design.csv", index=False, float_format="%.17g")
    if binary:
        np.ascontiguousarray(data.Y, dtype="<f8").tofile(directory / "series.f64")
    else:
        pd.DataFrame(data.Y).to_csv(directory / "series.csv", index=False, header=False,
                                    float_format="%.17g")
    write_mask(mask, directory / "mask.txt")
    meta = {"T": data.T, "N": data.N, "K": data.K, "P": data.P}
    (directory / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return directory


def bundle_files(directory):
    directory = Path(directory)
    names = ("design.csv", "series.f64", "series.csv", "mask.txt", "meta.txt")
    return [directory / n for n in names if (directory / n).exists()]
