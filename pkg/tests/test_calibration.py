"""Scaled replications of the simulation studies. Slow; run with ``pytest -m slow``."""

from dataclasses import replace

import numpy as np
import pytest

from glmar_bayes.bundle import read_bundle
from glmar_bayes.hmc import HmcConfig, run_hmc, write_draw_archive
from glmar_bayes.lattice import build_kernel
from glmar_bayes.metrics import (Contrast, ReplicateSet, compare_report, set_sensitivity,
                                 summary_stats)
from glmar_bayes.model import HyperPriors, ModelContext, ols_init
from glmar_bayes.simulate import GroundTruth, preset_scenarios, write_scenario
from glmar_bayes.vb import VBConfig, run_vb

pytestmark = pytest.mark.slow

HMC = HmcConfig(delta0=1e-3, L=50, n_iter=2000, n_burn=1000, adapt_window=50,
                pilot_rounds=2, pilot_iter=600, log_scale=True)


def _fit_study(name, tmp_path, reps=20):
    scenario = replace(preset_scenarios("desk")[name], J=reps)
    written = write_scenario(scenario, tmp_path / name)
    truth = GroundTruth.read(tmp_path / name / "truth.csv")
    vb_summaries, hmc_summaries, hmc_draws, rates = [], [], [], []
    mask = None
    for j, bundle in enumerate(written):
        data, mask = read_bundle(bundle)
        kernel = build_kernel(mask)
        context = ModelContext.from_data(data, kernel)
        init = ols_init(data, kernel)
        vb_summaries.append(run_vb(data, kernel, HyperPriors(), VBConfig(), init=init,
                                   context=context).summary)
        result = run_hmc(data, kernel, HyperPriors(), replace(HMC, seed=j), init=init,
                         context=context)
        hmc_summaries.append(result.summary)
        rates.append(result.acceptance_rate)
        hmc_draws.append(write_draw_archive(tmp_path / name / f"draws_{j}.bin",
                                            result.store.draws))
    vb = ReplicateSet(method="vb", summaries=vb_summaries, truth=truth, mask=mask)
    hmc = ReplicateSet(method="hmc", summaries=hmc_summaries, truth=truth, mask=mask,
                       draw_paths=hmc_draws)
    return hmc, vb, rates


def test_study1_methods_agree(tmp_path):
    hmc, vb, rates = _fit_study("study1", tmp_path)
    assert sum(0.55 <= r <= 0.75 for r in rates) >= 18
    for block in hmc.block_names()[:5]:
        assert summary_stats(hmc, block).correlation >= 0.95
        assert summary_stats(vb, block).correlation >= 0.95
        agreement = np.mean([np.corrcoef(a, b)[0, 1]
                             for a, b in zip(hmc.estimates(block), vb.estimates(block))])
        assert agreement >= 0.98
    comparison = compare_report(hmc, vb)
    assert 0.8 <= comparison.mean_ratio() <= 1.3


def test_study3_vb_degrades(tmp_path):
    hmc, vb, _ = _fit_study("study3", tmp_path)
    comparison = compare_report(hmc, vb)
    assert comparison.mean_ratio(["W1", "W2", "W3", "W4"]) > 1.5
    contrast = Contrast(c=np.array([-0.5, -0.5, 0.5, 0.5, 0.0]), gamma_e="top10pct")
    hmc_curve, _, _ = set_sensitivity(hmc, contrast)
    vb_curve, _, _ = set_sensitivity(vb, contrast)
    assert hmc_curve["sensitivity"].iloc[0] >= vb_curve["sensitivity"].iloc[0]
