"""
QSMC - Main Entry Point

Command line runner for quasi-stationary Monte Carlo experiments.

Subcommands:
    run                 execute the configured engine and write run artifacts
    diagnose            posterior summary, histograms, KS and cost tables of a run
    simulate-fpt        draw first-passage times of Brownian motion from a box
    simulate-kbm        draw kill times and locations of killed Brownian motion
    estimate-phi-bound  advisory grid-and-refine minimum of the killing expression

Any --section.option=value argument overrides the configuration file.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric fault.
"""

import argparse
import logging
import os
import sys
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from bm_paths import FptStats, sample_fpt, unit_fpt_cdf
from config_manager import ConfigManager, ExperimentConfig, build_experiment
from errors import ConfigError, QsmcError
from models import Dataset, build_model, default_preconditioner, find_mode, generate_synthetic, load_csv
from output_manager import format_vector, write_atomically, write_run
from potential import ExactPhi, Preconditioner, TargetModel, estimate_phi_floor
from report_manager import diagnose
from samplers import kbm_kill
from smc_engine import occupation_estimate, run_engine, stream_for

logger = logging.getLogger('qsmc.main')

# spawn_key prefixes for the debug subcommands
FPT_STREAM = 2
KBM_STREAM = 3


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='[%(asctime)s] [%(levelname)s] %(message)s',
                        datefmt='%Y-%m-%d %H:%M:%S', force=True)


def load_dataset(experiment: ExperimentConfig) -> Optional[Dataset]:
    """The configured data file, synthetic data, or None for data-free targets"""
    spec = experiment.model_spec
    if experiment.data_path is not None:
        return load_csv(experiment.data_path, experiment.schema)
    if spec.family == "gaussian-target":
        return None
    try:
        return generate_synthetic(spec, experiment.synthetic_n, experiment.true_params, experiment.data_seed)
    except ValueError as e:
        raise ConfigError(f"cannot generate synthetic data: {e}") from e


def prepare_model(experiment: ExperimentConfig) -> Tuple[TargetModel, Optional[Dataset], np.ndarray, Preconditioner]:
    """Dataset, model, centring point and preconditioner for an experiment"""
    data = load_dataset(experiment)
    model = build_model(experiment.model_spec, data)
    if experiment.x_hat is not None:
        x_hat = np.asarray(experiment.x_hat, dtype=float)
    else:
        x_hat = find_mode(model, seed=experiment.data_seed)
    if experiment.preconditioner == "identity":
        precond = Preconditioner.identity(model.dim)
    else:
        precond = default_preconditioner(model, experiment.model_spec.family, x_hat)
    logger.info("x_hat=%s Lambda=%s", np.round(x_hat, 6).tolist(), precond.diag.tolist())
    return model, data, x_hat, precond


def _experiment(args, overrides: Sequence[str]) -> Tuple[ConfigManager, ExperimentConfig]:
    config = ConfigManager(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        config.set(ConfigManager.SECTION_RUN, "seed", args.seed)
    if getattr(args, "threads", None) is not None:
        config.set(ConfigManager.SECTION_RUN, "threads", args.threads)
    if getattr(args, "output", None) is not None:
        config.set(ConfigManager.SECTION_OUTPUT, "directory", args.output)
    base_dir = os.path.dirname(os.path.abspath(args.config)) if args.config else None
    return config, build_experiment(config, base_dir)


def command_run(args, overrides: Sequence[str]) -> int:
    config, experiment = _experiment(args, overrides)
    model, data, x_hat, precond = prepare_model(experiment)
    run = experiment.run

    started = time.perf_counter()
    records = run_engine(run, model, precond, x_hat=x_hat)
    wall_time = time.perf_counter() - started

    estimate = occupation_estimate(records, run.burn_in, run.horizon)
    touches = sum(r.cost_counters.get("factor_touches", 0) for r in records)
    kills = sum(r.cost_counters.get("kills", 0) for r in records)
    summary = config.as_dict()
    summary["Result"] = {
        "dim": model.dim,
        "n_data": model.n_data,
        "x_hat": format_vector(x_hat),
        "preconditioner": format_vector(precond.diag),
        "posterior_mean": format_vector(estimate.mean),
        "posterior_covariance": format_vector(estimate.covariance),
        "pooled_checkpoints": estimate.n_checkpoints,
        "total_factor_touches": touches,
        "total_kills": kills,
        "wall_time_seconds": f"{wall_time:.3f}",
    }
    if data is not None:
        summary["Data"] = {key: str(value) for key, value in data.provenance.items()}
    write_run(experiment.output_dir, records, summary, experiment.float_format)

    print(f"Engine {run.engine}: {len(records)} checkpoints in {wall_time:.1f}s")
    print(f"Posterior mean: {np.array2string(estimate.mean, precision=6)}")
    print(f"Posterior sd:   {np.array2string(np.sqrt(np.diag(estimate.covariance)), precision=6)}")
    print(f"Artifacts in {experiment.output_dir}")
    return 0


def command_diagnose(args, overrides: Sequence[str]) -> int:
    if overrides:
        raise ConfigError(f"diagnose takes no configuration overrides, got {list(overrides)}")
    if not os.path.isdir(args.run_dir):
        raise ConfigError(f"run directory not found: {args.run_dir}")
    report = diagnose(args.run_dir, reference=args.reference, compare=args.compare or (),
                      bins=args.bins, output_dir=args.output)
    print(f"Posterior mean: {np.array2string(report.mean, precision=6)}")
    if report.ks is not None:
        print(f"KS distance to {report.reference}: {np.array2string(np.asarray(report.ks), precision=5)}")
    print(report.cost_table.drop(columns=["run"]).to_string(index=False))
    print(f"Report written to {report.files.get('report.html')}")
    return 0


def command_simulate_fpt(args, overrides: Sequence[str]) -> int:
    if args.n < 1 or not args.theta > 0.0:
        raise ConfigError("simulate-fpt needs --n >= 1 and --theta > 0")
    rng = stream_for(args.seed, FPT_STREAM, 0)
    counters = FptStats()
    draws = [sample_fpt(args.start, args.theta, rng, counters) for _ in range(args.n)]
    taus = np.array([d.tau for d in draws])
    signs = np.array([d.endpoint_sign for d in draws])
    print(f"Draws: {args.n}  mean tau: {taus.mean():.6f}  (theta^2 = {args.theta ** 2:.6f})")
    print(f"Upper-exit frequency: {np.mean(signs > 0):.5f}")
    print(f"Proposals per draw: {counters.proposals / args.n:.4f}  "
          f"mean refinements: {counters.mean_refinements:.4f}")
    if args.check:
        unit = taus / args.theta ** 2
        result = stats.kstest(unit, np.vectorize(unit_fpt_cdf))
        print(f"KS against the series CDF: D={result.statistic:.5f} p={result.pvalue:.4f}")
    if args.output:
        frame = pd.DataFrame({"tau": taus, "endpoint": [d.endpoint for d in draws]})
        write_atomically(os.path.dirname(os.path.abspath(args.output)),
                         {os.path.basename(args.output): frame.to_csv(index=False, float_format="%.17g",
                                                                      lineterminator="\n")})
    return 0


def command_simulate_kbm(args, overrides: Sequence[str]) -> int:
    config, experiment = _experiment(args, overrides)
    model, _, x_hat, precond = prepare_model(experiment)
    provider = ExactPhi(model, precond)
    run = experiment.run
    rows = []
    for i in range(args.n):
        record = kbm_kill((0.0, x_hat), provider, precond, stream_for(run.seed, KBM_STREAM, i),
                          theta_scale=run.theta_scale, use_lower=run.kbm_use_lower, max_time=args.max_time)
        if record is None:
            rows.append([np.inf] + [np.nan] * model.dim)
        else:
            rows.append([record.kill_time] + record.kill_state.tolist())
    frame = pd.DataFrame(rows, columns=["kill_time"] + [f"x{j + 1}" for j in range(model.dim)])
    killed = np.isfinite(frame["kill_time"])
    print(f"Trajectories: {args.n}  killed before {args.max_time}: {int(killed.sum())}")
    if killed.any():
        print(f"Mean kill time (killed only): {frame['kill_time'][killed].mean():.6f}")
    if args.output:
        write_atomically(os.path.dirname(os.path.abspath(args.output)),
                         {os.path.basename(args.output): frame.to_csv(index=False, float_format="%.17g",
                                                                      lineterminator="\n")})
    return 0


def _box_edge(text: str, dim: int) -> np.ndarray:
    try:
        values = np.array([float(part) for part in text.split(",")])
    except ValueError as e:
        raise ConfigError(f"box edge must be comma-separated numbers, got '{text}'") from e
    if values.shape[0] == 1:
        values = np.full(dim, values[0])
    if values.shape[0] != dim:
        raise ConfigError(f"box edge has {values.shape[0]} entries, model dimension is {dim}")
    return values


def command_estimate_phi_bound(args, overrides: Sequence[str]) -> int:
    _, experiment = _experiment(args, overrides)
    model, _, _, precond = prepare_model(experiment)
    lo = _box_edge(args.lo, model.dim)
    hi = _box_edge(args.hi, model.dim)
    if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ConfigError("search box must be bounded with lo <= hi")
    value, point = estimate_phi_floor(model, precond, lo, hi, grid=args.grid, seed=args.seed or 0)
    print(f"Advisory Phi estimate (search minimum, not a proven bound): {value:.10g}")
    print(f"Attained at: {np.array2string(point, precision=6)}")
    print(f"Model's analytic Phi: {model.phi_lower_bound(precond):.10g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsmc", description="Quasi-stationary Monte Carlo runner")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="experiment INI file")
        p.add_argument("--seed", type=int, help="override [Run] seed")
        p.add_argument("--threads", type=int, help="override [Run] threads")

    p_run = sub.add_parser("run", help="execute the configured engine")
    add_config_flags(p_run)
    p_run.add_argument("--output", help="override [Output] directory")
    p_run.set_defaults(handler=command_run)

    p_diag = sub.add_parser("diagnose", help="report on a completed run")
    p_diag.add_argument("run_dir")
    p_diag.add_argument("--reference", help="norm:MEAN,SD, 'self', or another run directory "
                        "(default [Diagnostics] reference of the run)")
    p_diag.add_argument("--compare", nargs="*", help="further runs for the cost table")
    p_diag.add_argument("--bins", type=int, help="histogram bins (default [Diagnostics] histogram_bins of the run)")
    p_diag.add_argument("--output", help="report directory (default RUN_DIR/diagnostics)")
    p_diag.set_defaults(handler=command_diagnose)

    p_fpt = sub.add_parser("simulate-fpt", help="first-passage times of Brownian motion")
    p_fpt.add_argument("--n", type=int, default=10000)
    p_fpt.add_argument("--seed", type=int, default=0)
    p_fpt.add_argument("--theta", type=float, default=1.0)
    p_fpt.add_argument("--start", type=float, default=0.0)
    p_fpt.add_argument("--check", action="store_true", help="KS test against the series CDF")
    p_fpt.add_argument("--output", help="CSV file for the draws")
    p_fpt.set_defaults(handler=command_simulate_fpt)

    p_kbm = sub.add_parser("simulate-kbm", help="kill times of killed Brownian motion")
    add_config_flags(p_kbm)
    p_kbm.add_argument("--n", type=int, default=1000)
    p_kbm.add_argument("--max-time", type=float, default=float("inf"))
    p_kbm.add_argument("--output", help="CSV file for the kill records")
    p_kbm.set_defaults(handler=command_simulate_kbm)

    p_phi = sub.add_parser("estimate-phi-bound", help="advisory minimum of the killing expression")
    add_config_flags(p_phi)
    p_phi.add_argument("--lo", required=True, help="lower box edge, one value or one per coordinate")
    p_phi.add_argument("--hi", required=True, help="upper box edge, one value or one per coordinate")
    p_phi.add_argument("--grid", type=int, default=101)
    p_phi.set_defaults(handler=command_estimate_phi_bound)
    return parser


def split_overrides(extra: Sequence[str]) -> Tuple[List[str], List[str]]:
    overrides, unknown = [], []
    for arg in extra:
        head = arg.split("=", 1)[0]
        (overrides if arg.startswith("--") and "=" in arg and "." in head else unknown).append(arg)
    return overrides, unknown


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides, unknown = split_overrides(extra)
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    setup_logging(args.verbose)
    try:
        return args.handler(args, overrides)
    except QsmcError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
