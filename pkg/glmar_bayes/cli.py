"""Command-line interface: simulate, fit, report and check.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__
from .bundle import bundle_files, read_bundle
from .config import (PhaseTimer, RunConfig, default_workers, load_environment,
                     prepare_output, read_config_file)
from .errors import ConfigError, DataError, GlmArError, NumericalError
from .hmc import FREEZABLE, HmcConfig, run_hmc, write_draw_archive
from .lattice import build_kernel
from .metrics import compare_report, load_replicate_set, named_contrast, set_sensitivity
from .model import HyperPriors, ModelContext, ols_init
from .report import (percentage_table, save_to_excel, statistics_table, tables_document,
                     write_comparison, write_json, write_map, write_mean_maps, write_table)
from .selfcheck import run_checks
from .simulate import preset_scenarios, read_scenario, write_scenario
from .summary import point_summary
from .vb import VBConfig, run_vb

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
BACKENDS = ("hmc", "vb", "ols")


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


class GlmArGroup(click.Group):
    """Maps package errors onto exit codes; usage errors exit with 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except GlmArError as exc:
            logger.debug("command failed", exc_info=True)
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(exc.exit_code)

    def main(self, *args, standalone_mode=True, **kwargs):
        try:
            rv = super().main(*args, standalone_mode=False, **kwargs)
            code = rv if isinstance(rv, int) else 0
        except click.ClickException as exc:
            exc.show()
            code = 1
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        if standalone_mode:
            sys.exit(code)
        return code


def bind_defaults(group, raw):
    """Key a parsed config file by click parameter name.

    Keys may be option names (``leapfrog_steps``) or parameter names (``L``);
    multi-value options take comma-separated lists.
    """
    default_map, known = {}, set()
    for command_name, values in raw.items():
        params = {}
        for param in group.commands[command_name].params:
            params[param.name] = param
            for opt in param.opts:
                params[opt.lstrip("-").replace("-", "_")] = param
        bound = {}
        for key, value in values.items():
            param = params.get(key)
            if param is None:
                continue
            known.add(key)
            if param.multiple or param.nargs != 1:
                value = [part.strip() for part in value.split(",") if part.strip()]
            bound[param.name] = value
        default_map[command_name] = bound
    unknown = {key for values in raw.values() for key in values} - known
    if unknown:
        raise ConfigError(f"config file sets unknown options: {', '.join(sorted(unknown))}")
    return default_map


def _state(ctx):
    return ctx.find_root().obj


@click.group(cls=GlmArGroup)
@click.version_option(__version__, prog_name="glmar-bayes")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings only, no progress bars.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="key=value file of option defaults; explicit flags win.")
@click.pass_context
def cli(ctx, verbose, quiet, config_file):
    """Bayesian GLM-AR fitting with HMC and VB, plus simulation and reports."""
    load_environment()
    configure_logging(verbose, quiet)
    if config_file:
        ctx.default_map = bind_defaults(ctx.command, read_config_file(config_file))
    ctx.obj = {"quiet": quiet, "progress": not quiet and sys.stderr.isatty()}


def _workers(value):
    workers = value if value is not None else default_workers()
    if workers < 1:
        raise ConfigError("--workers must be at least 1")
    return workers


def _map_jobs(function, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(function, jobs))
    return [function(job) for job in jobs]


@cli.command()
@click.option("--preset", type=click.Choice(["study1", "study2", "study3"]),
              help="Built-in simulation study.")
@click.option("--scenario", "scenario_file", type=click.Path(exists=True, dir_okay=False),
              help="Custom key=value scenario file.")
@click.option("--scale", type=click.Choice(["desk", "full"]), default="desk", show_default=True)
@click.option("--seed", type=int, default=None, help="Seed (presets default to 0).")
@click.option("--reps", type=click.IntRange(min=1), default=None, help="Override replicate count J.")
@click.option("--init", type=click.Choice(["stationary", "zero"]), default=None,
              help="How the first P noise values are drawn.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True, help="Replace a non-empty output directory.")
@click.option("--workers", type=int, default=None, help="Parallel replicate writers.")
@click.pass_context
def simulate(ctx, preset, scenario_file, scale, seed, reps, init, out_dir, force, workers):
    """Write replicate dataset bundles and truth files for a scenario."""
    if bool(preset) == bool(scenario_file):
        raise ConfigError("give exactly one of --preset or --scenario")
    if preset:
        scenario = preset_scenarios(scale, seed if seed is not None else 0)[preset]
    else:
        scenario = read_scenario(scenario_file)
        if seed is not None:
            scenario = replace(scenario, seed=seed)
    if reps is not None:
        scenario = replace(scenario, J=reps)
    if init is not None:
        scenario = replace(scenario, init=init)
    scenario.validate()

    out = prepare_output(out_dir, force)
    timer = PhaseTimer()
    with timer.phase("simulate"):
        written = write_scenario(scenario, out, workers=_workers(workers),
                                 progress=_state(ctx)["progress"])
    run = RunConfig(command="simulate", seed=scenario.seed, workers=1,
                    settings={"scenario": scenario.to_text().splitlines(), "scale": scale},
                    inputs=[scenario_file] if scenario_file else [])
    run.write_manifest(out)
    timer.write(out)
    click.echo(f"Wrote {len(written)} replicate bundles to {out}")


def replicate_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _fit_one(job):
    """Fit one bundle; returns the phase timings."""
    bundle_dir, out_dir, backend, hmc_cfg, vb_cfg, hp, keep_draws = job
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    with timer.phase("load"):
        data, mask = read_bundle(bundle_dir)
        kernel = build_kernel(mask)
    with timer.phase("precompute"):
        context = ModelContext.from_data(data, kernel, hp)
    with timer.phase("init"):
        init = ols_init(data, kernel)

    if backend == "ols":
        with timer.phase("summarization"):
            point_summary(init, method="ols").write(out_dir)
    elif backend == "hmc":
        with timer.phase("sampling"):
            result = run_hmc(data, kernel, hp, hmc_cfg, init=init, context=context)
        with timer.phase("summarization"):
            result.summary.write(out_dir)
            result.write_traces(out_dir / "traces")
            energy = np.asarray(result.store.energy_error[hmc_cfg.n_burn:])
            write_json({
                "acceptance_rate": result.acceptance_rate,
                "final_delta": result.delta,
                "mean_abs_delta_h": result.mean_abs_delta_h,
                "mean_exp_neg_delta_h": float(np.mean(np.exp(-energy))) if energy.size else None,
                "retained_draws": result.store.count,
                "bmse": result.bmse,
                "ess": result.ess,
            }, out_dir / "diagnostics.json")
            if keep_draws:
                write_draw_archive(out_dir / "draws.bin", result.store.draws)
    else:
        with timer.phase("ascent"):
            result = run_vb(data, kernel, hp, vb_cfg, init=init, context=context)
        with timer.phase("summarization"):
            result.summary.write(out_dir)
            trace = result.posterior.free_energy_trace
            pd.DataFrame({"iteration": np.arange(len(trace)), "free_energy": trace}).to_csv(
                out_dir / "free_energy.csv", index=False, float_format="%.17g")
            write_json(result.report(), out_dir / "convergence.json")
    return timer.phases


@cli.command()
@click.option("--bundle", "bundle_dir", type=click.Path(exists=True, file_okay=False),
              help="A single dataset bundle.")
@click.option("--scenario", "scenario_dir", type=click.Path(exists=True, file_okay=False),
              help="A simulated scenario; every rep_* bundle is fitted.")
@click.option("--backend", type=click.Choice(BACKENDS), default="hmc", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--iters", type=click.IntRange(min=1), default=3000, show_default=True)
@click.option("--burn", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--delta0", type=float, default=2e-5, show_default=True, help="Initial step size.")
@click.option("--leapfrog-steps", "L", type=click.IntRange(min=1), default=250, show_default=True)
@click.option("--target-accept", type=float, default=0.65, show_default=True)
@click.option("--adapt-window", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--pilot-rounds", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--pilot-iters", type=click.IntRange(min=2), default=500, show_default=True)
@click.option("--thin", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--log-scale", is_flag=True, help="Sample the precisions on the log scale.")
@click.option("--freeze", multiple=True, type=click.Choice(FREEZABLE),
              help="Hold a block at its initial value (repeatable).")
@click.option("--keep-draws/--no-draws", default=True, show_default=True,
              help="Write the retained HMC draws to draws.bin.")
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--colored", is_flag=True, help="Update non-interacting VB voxels together.")
@click.option("--workers", type=int, default=None)
@click.pass_context
def fit(ctx, bundle_dir, scenario_dir, backend, out_dir, force, seed, iters, burn, delta0, L,
        target_accept, adapt_window, pilot_rounds, pilot_iters, thin, log_scale, freeze,
        keep_draws, tol, max_iter, colored, workers):
    """Fit the GLM-AR model with HMC, VB or per-voxel OLS."""
    if bool(bundle_dir) == bool(scenario_dir):
        raise ConfigError("give exactly one of --bundle or --scenario")
    progress = _state(ctx)["progress"]
    hmc_cfg = HmcConfig(delta0=delta0, L=L, n_iter=iters, n_burn=burn,
                        target_accept=target_accept, adapt_window=adapt_window, seed=seed,
                        thin=thin, pilot_rounds=pilot_rounds, pilot_iter=pilot_iters,
                        log_scale=log_scale, frozen=frozenset(freeze), progress=progress)
    vb_cfg = VBConfig(max_iter=max_iter, tol=tol, colored=colored, seed=seed,
                      frozen=frozenset(freeze), progress=progress)
    (hmc_cfg if backend == "hmc" else vb_cfg).validate()
    hp = HyperPriors().validate()

    if bundle_dir:
        bundles = [Path(bundle_dir)]
    else:
        bundles = sorted(p for p in Path(scenario_dir).glob("rep_*") if (p / "meta.txt").exists())
        if not bundles:
            raise DataError(f"{scenario_dir}: no rep_* bundles found")
    out = prepare_output(out_dir, force)
    jobs = []
    for index, bundle in enumerate(bundles):
        target = out if bundle_dir else out / bundle.name
        rep_seed = seed if bundle_dir else replicate_seed(seed, index)
        jobs.append((bundle, target, backend, replace(hmc_cfg, seed=rep_seed),
                     replace(vb_cfg, seed=rep_seed), hp, keep_draws))
    logger.info("Fitting %d bundle(s) with %s", len(jobs), backend)
    timer = PhaseTimer()
    for phases in _map_jobs(_fit_one, jobs, _workers(workers)):
        timer.merge(phases)

    settings = {k: v for k, v in ctx.params.items() if k not in ("force", "workers")}
    settings["freeze"] = sorted(freeze)
    inputs = [f for b in bundles for f in bundle_files(b)]
    RunConfig(command="fit", settings=settings, seed=seed, inputs=inputs).write_manifest(out)
    timer.write(out)
    click.echo(f"Fitted {len(jobs)} bundle(s) with {backend}; results in {out}")


def _parse_runs(runs):
    parsed = {}
    for item in runs:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--run expects NAME=DIR, got {item!r}")
        parsed[name] = Path(path)
    return parsed


@cli.command()
@click.option("--scenario", "scenario_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Simulated scenario holding truth.csv.")
@click.option("--run", "runs", multiple=True, required=True,
              help="NAME=DIR of a fitted replicate set (repeatable).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True)
@click.option("--compare", nargs=2, type=str, default=None,
              help="BASELINE OTHER run names; reports AMSE(OTHER)/AMSE(BASELINE).")
@click.option("--ppm", is_flag=True, help="Posterior probability maps and sensitivity curves.")
@click.option("--contrast", default="fame", show_default=True,
              help="fame, face or comma-separated weights.")
@click.option("--gamma-p", type=float, default=None,
              help="Probability threshold [fame 0.9, face 0.95].")
@click.option("--gamma-e", default=None,
              help="Number, topXpct or above-mean:Xpct [fame top10pct, face above-mean:1pct].")
@click.option("--maps/--no-maps", default=True, show_default=True)
@click.option("--xlsx/--no-xlsx", default=True, show_default=True)
@click.pass_context
def report(ctx, scenario_dir, runs, out_dir, force, compare, ppm, contrast, gamma_p, gamma_e,
           maps, xlsx):
    """Summary tables, comparisons, maps and sensitivity curves over replicate sets."""
    named = _parse_runs(runs)
    if compare and any(name not in named for name in compare):
        raise ConfigError(f"--compare names {compare} must match --run names {sorted(named)}")
    timer = PhaseTimer()
    with timer.phase("load"):
        sets = {name: load_replicate_set(path, scenario_dir, method=name)
                for name, path in named.items()}
    counts = {name: rset.J for name, rset in sets.items()}
    if len(set(counts.values())) > 1:
        raise DataError(f"replicate counts differ between methods: {counts}")
    out = prepare_output(out_dir, force)

    tables = {}
    with timer.phase("metrics"):
        for name, rset in sets.items():
            tables[f"table_{name}"] = statistics_table(rset)
            write_table(tables[f"table_{name}"], out, f"table_{name}")
            if maps:
                write_mean_maps(rset, out / "maps")
        if compare:
            base, other = compare
            stem = f"table_pct_{other}_vs_{base}"
            tables[stem] = percentage_table(tables[f"table_{base}"], tables[f"table_{other}"])
            write_table(tables[stem], out, stem)
            comparison = compare_report(sets[base], sets[other])
            write_comparison(comparison, sets[base].mask, out)
            tables[f"compare_{other}_vs_{base}"] = comparison.to_frame()
            click.echo(comparison.summary_line())
        if ppm:
            K = next(iter(sets.values())).shape[0]
            con = named_contrast(contrast, K, gamma_e=gamma_e, gamma_p=gamma_p)
            for name, rset in sets.items():
                try:
                    curve, probability, threshold = set_sensitivity(rset, con)
                except DataError as exc:
                    logger.warning("skipping PPM for %s: %s", name, exc)
                    continue
                write_table(curve, out, f"sensitivity_{name}")
                tables[f"sensitivity_{name}"] = curve
                write_map(rset.mask, probability, out / "maps", f"{name}_ppm_{contrast}")
                first = float(curve["sensitivity"].iloc[0])
                click.echo(f"{name}: gamma_e={threshold:.4g}, sensitivity at "
                           f"{curve['threshold'].iloc[0]:g} = {first:.3f}")

    write_json(tables_document(tables), out / "tables.json")
    if xlsx:
        save_to_excel(tables, out / "report.xlsx")
    inputs = [Path(scenario_dir) / "truth.csv"]
    for path in named.values():
        inputs += sorted(Path(path).glob("rep_*/summary.csv"))
    settings = {k: v for k, v in ctx.params.items() if k != "force"}
    settings["runs"] = {name: str(path) for name, path in named.items()}
    RunConfig(command="report", settings=settings, inputs=inputs).write_manifest(out)
    timer.write(out)
    click.echo(f"Report written to {out}")


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
def check(seed):
    """Run the built-in oracle checks (likelihood, gradient, kernel, Moran, VB)."""
    results = run_checks(seed)
    for result in results:
        click.echo(f"{result.name:<12} {'ok' if result.passed else 'FAILED':<7} {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError("self-check failed: " + ", ".join(failed))


def main():
    cli(prog_name="glmar-bayes")
