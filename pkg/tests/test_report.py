import json

import numpy as np
import pandas as pd
import pytest

from glmar_bayes.lattice import Mask, block_mask
from glmar_bayes.metrics import ReplicateSet, compare_report
from glmar_bayes.model import ParamState
from glmar_bayes.report import (percentage_table, read_pgm, save_to_excel, statistics_table,
                                tables_document, write_comparison, write_grid_csv, write_json,
                                write_mean_maps, write_pgm)
from glmar_bayes.simulate import GroundTruth
from glmar_bayes.summary import PosteriorSummary


def _replicates(rng, method, noise, J=3, dims=(3, 3), with_variance=True):
    """Replicate set scattered around a random truth; returns (rset, truth, mask)."""
    mask = block_mask(*dims)
    N = mask.n_voxels
    truth = GroundTruth(W=rng.standard_normal((2, N)), A=rng.uniform(0, 0.5, (1, N)),
                        lam=np.ones(N), seed=0)
    summaries = []
    for _ in range(J):
        state = ParamState(W=truth.W + noise * rng.standard_normal((2, N)),
                           A=truth.A + noise * rng.standard_normal((1, N)),
                           lam=np.ones(N), alpha=np.ones(2), beta=np.ones(1))
        variance = np.full(4 * N + 3, noise ** 2) if with_variance else None
        summaries.append(PosteriorSummary(method=method, K=2, P=1, N=N, mean=state.flatten(),
                                          variance=variance))
    return ReplicateSet(method=method, summaries=summaries, truth=truth, mask=mask), truth, mask


def test_statistics_table_layout(rng):
    rset, _, _ = _replicates(rng, "hmc", 0.1)
    table = statistics_table(rset)
    assert list(table.columns) == ["method", "statistic", "W1", "W2", "A1"]
    assert table["statistic"].tolist() == ["Moran's I", "ASBIAS", "AMSE", "AVAR",
                                           "Correlation", "Moran's I"]
    assert table["method"].tolist()[0] == "true"
    avar = table[table["statistic"] == "AVAR"].iloc[0]
    assert avar["W1"] == pytest.approx(0.01)


def test_point_estimates_leave_avar_blank(rng):
    rset, _, _ = _replicates(rng, "ols", 0.1, with_variance=False)
    table = statistics_table(rset, include_truth=False)
    assert len(table) == 5
    assert pd.isna(table[table["statistic"] == "AVAR"]["W1"].iloc[0])


def test_percentage_table(rng):
    hmc, truth, mask = _replicates(rng, "hmc", 0.1)
    vb = ReplicateSet(method="vb", truth=truth, mask=mask, summaries=hmc.summaries)
    pct = percentage_table(statistics_table(hmc), statistics_table(vb))
    assert pct["method"].iloc[0] == "vb % of hmc"
    amse = pct[pct["statistic"] == "AMSE"].iloc[0]
    assert amse["W1"] == pytest.approx(100.0)
    assert "true" not in pct["method"].tolist()


def test_json_is_sorted_and_nan_free(tmp_path):
    path = write_json({"b": np.float64("nan"), "a": [np.int64(3), np.arange(2.0)]},
                      tmp_path / "doc.json")
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [3, [0.0, 1.0]], "b": None}


def test_excel_workbook(tmp_path, rng):
    rset, _, _ = _replicates(rng, "vb", 0.2)
    tables = {"statistics_vb": statistics_table(rset),
              "a/very:long*name that needs trimming to fit": pd.DataFrame({"x": [1]})}
    save_to_excel(tables, tmp_path / "report.xlsx")
    sheets = pd.read_excel(tmp_path / "report.xlsx", sheet_name=None, engine="openpyxl")
    assert "statistics_vb" in sheets
    assert all(len(name) <= 31 and "/" not in name for name in sheets)
    assert tables_document(tables)["statistics_vb"][0]["method"] == "true"


def test_pgm_map(tmp_path):
    inside = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    mask = Mask.from_array(inside)
    values = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    write_pgm(mask, values, tmp_path / "m.pgm")
    pixels = read_pgm(tmp_path / "m.pgm")
    assert pixels.shape == (2, 3)
    assert pixels[0, 2] == 0
    assert pixels[0, 0] == 1 and pixels[1, 2] == 255
    write_grid_csv(mask, values, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "0,1,"


def test_comparison_and_mean_maps(tmp_path, rng):
    hmc, truth, mask = _replicates(rng, "hmc", 0.1)
    vb_summaries = [PosteriorSummary(method="vb", K=2, P=1, N=9, mean=s.mean.copy(),
                                     variance=s.variance * 2.0) for s in hmc.summaries]
    vb = ReplicateSet(method="vb", truth=truth, mask=mask, summaries=vb_summaries)
    comparison = compare_report(hmc, vb)
    stem = write_comparison(comparison, mask, tmp_path)
    assert stem == "compare_vb_vs_hmc"
    doc = json.loads((tmp_path / f"{stem}.json").read_text())
    assert doc["mean_amse_ratio"] == pytest.approx(1.0)
    assert doc["mean_log_variance_ratio"]["W1"] == pytest.approx(np.log(2.0))
    assert (tmp_path / "maps" / f"{stem}_logvar_W1.pgm").exists()
    write_mean_maps(hmc, tmp_path / "maps")
    assert (tmp_path / "maps" / "hmc_mean_A1.csv").exists()
