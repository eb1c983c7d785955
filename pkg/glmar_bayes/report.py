"""Report documents: statistics tables, comparison tables, maps and curves."""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .metrics import MoranWeights, safe_moran, summary_stats

logger = logging.getLogger(__name__)

STATISTICS = ("ASBIAS", "AMSE", "AVAR", "Correlation", "Moran's I")


def statistics_table(rset, include_truth=True):
    """One row per statistic, one column per coefficient row (W1.., A1..)."""
    weights = MoranWeights(rset.mask.centroid) if rset.mask.ndim == 2 else None
    blocks = rset.block_names()
    rows = []
    if include_truth:
        rows.append({"method": "true", "statistic": "Moran's I",
                     **{b: safe_moran(rset.true_row(b), rset.mask, weights) for b in blocks}})
    values = {b: summary_stats(rset, b) for b in blocks}
    morans = {b: float(np.mean([safe_moran(e, rset.mask, weights) for e in rset.estimates(b)]))
              for b in blocks}
    for statistic in STATISTICS:
        row = {"method": rset.method, "statistic": statistic}
        for b in blocks:
            s = values[b]
            row[b] = {"ASBIAS": s.asbias, "AMSE": s.amse, "AVAR": s.avar,
                      "Correlation": s.correlation, "Moran's I": morans[b]}[statistic]
        rows.append(row)
    return pd.DataFrame(rows, columns=["method", "statistic"] + blocks)


def percentage_table(baseline_table, other_table):
    """``other`` statistics as a percentage of ``baseline``; missing entries stay blank."""
    base = baseline_table[baseline_table["method"] != "true"].set_index("statistic")
    other = other_table[other_table["method"] != "true"].set_index("statistic")
    blocks = [c for c in base.columns if c != "method"]
    num = other[blocks].astype(float)
    den = base[blocks].astype(float)
    pct = 100.0 * num / den.where(den != 0)
    pct.insert(0, "method", f"{other['method'].iloc[0]} % of {base['method'].iloc[0]}")
    return pct.reset_index()[["method", "statistic"] + blocks]


def write_table(frame, directory, stem):
    directory = Path(directory)
    frame.to_csv(directory / f"{stem}.csv", index=False, float_format="%.10g")
    return directory / f"{stem}.csv"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return None if not np.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


def write_json(document, path):
    Path(path).write_text(json.dumps(_jsonable(document), indent=2, sort_keys=True) + "\n")
    return Path(path)


def tables_document(tables):
    return {name: frame.to_dict(orient="records") for name, frame in tables.items()}


def save_to_excel(tables, path):
    """All tables in one workbook, one sheet per table."""
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for name, frame in tables.items():
            frame.to_excel(writer, sheet_name=_sheet_name(name), index=False)
    return Path(path)


def _sheet_name(name):
    # Excel sheet names: at most 31 characters, no []:*?/\
    cleaned = "".join("_" if ch in "[]:*?/\\" else ch for ch in name)
    return cleaned[:31]


def _grid(mask, values):
    image = mask.to_image(values)
    return image.reshape(-1, mask.dims[-1])


def write_grid_csv(mask, values, path):
    """Values on the lattice grid; cells outside the mask are left empty."""
    pd.DataFrame(_grid(mask, values)).to_csv(path, index=False, header=False,
                                             float_format="%.10g", na_rep="")
    return Path(path)


def write_pgm(mask, values, path, vmin=None, vmax=None):
    """8-bit binary PGM; inside cells map linearly onto 1..255, outside cells are 0."""
    grid = _grid(mask, values)
    inside = np.isfinite(grid)
    lo = np.nanmin(grid) if vmin is None else vmin
    hi = np.nanmax(grid) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    pixels = np.zeros(grid.shape, dtype=np.uint8)
    scaled = 1.0 + 254.0 * np.clip((grid[inside] - lo) / span, 0.0, 1.0)
    pixels[inside] = np.round(scaled).astype(np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return Path(path)


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        width, height = (int(v) for v in fh.readline().split())
        fh.readline()
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if magic != b"P5" or data.size != width * height:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return data.reshape(height, width)


def write_map(mask, values, directory, stem):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_grid_csv(mask, values, directory / f"{stem}.csv")
    write_pgm(mask, values, directory / f"{stem}.pgm")


def write_mean_maps(rset, directory):
    """Posterior-mean images averaged over replicates, one per coefficient row."""
    for block in rset.block_names():
        write_map(rset.mask, rset.estimates(block).mean(axis=0), directory,
                  f"{rset.method}_mean_{block}")


def write_comparison(comparison, mask, directory):
    directory = Path(directory)
    stem = f"compare_{comparison.other}_vs_{comparison.baseline}"
    write_table(comparison.to_frame(), directory, stem)
    write_json(comparison.to_json(), directory / f"{stem}.json")
    for block, ratio in comparison.log_variance_ratio.items():
        if ratio is not None and block.startswith("W"):
            write_map(mask, ratio, directory / "maps", f"{stem}_logvar_{block}")
    logger.info(comparison.summary_line())
    return stem
