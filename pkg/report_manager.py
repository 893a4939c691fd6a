"""
QSMC - Diagnostics Report

Reads a completed run and reports the occupation-measure posterior summary,
marginal histograms (CSV for external plotting), KS distance to a reference,
the ESS trace and a cost-versus-n table across runs. The report is written
as Markdown and rendered to HTML.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import markdown
import numpy as np
import pandas as pd
from scipy import stats

from errors import ConfigError
from output_manager import RunArtifacts, read_run, write_atomically
from smc_engine import OccupationEstimate, occupation_estimate

logger = logging.getLogger('qsmc.report_manager')

REPORT_MARKDOWN = "report.md"
REPORT_HTML = "report.html"

HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="utf-8">
    <title>{title}</title>
    <style>
        body {{
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
            line-height: 1.6;
            max-width: 960px;
            margin: 0 auto;
            padding: 20px;
            color: #333;
        }}
        table {{ border-collapse: collapse; }}
        th, td {{ border: 1px solid #ccc; padding: 4px 8px; text-align: right; }}
    </style>
</head>
<body>
{body}
</body>
</html>
"""


@dataclass
class DiagnoseReport:
    """Results of diagnose for one run"""

    mean: np.ndarray
    covariance: np.ndarray
    ks: Optional[List[float]]
    ess_trace: pd.DataFrame
    cost_table: pd.DataFrame
    reference: Optional[str] = None
    bins: int = 50
    files: Dict[str, str] = field(default_factory=dict)


def recorded_settings(artifacts: RunArtifacts, reference: Optional[str],
                      bins: Optional[int]) -> Tuple[Optional[str], int]:
    """Fill a missing reference or bin count from the run's [Diagnostics] echo"""
    section = "Diagnostics"
    if reference is None:
        reference = artifacts.run_summary.get(section, "reference", fallback="").strip() or None
    if bins is None:
        try:
            bins = artifacts.run_summary.getint(section, "histogram_bins", fallback=50)
        except ValueError as e:
            raise ConfigError(f"histogram_bins in {artifacts.directory} is not an integer") from e
    if bins < 1:
        raise ConfigError(f"histogram_bins must be positive, got {bins}")
    return reference, bins


def run_estimate(artifacts: RunArtifacts) -> OccupationEstimate:
    """Occupation estimate over [burn_in, horizon] as recorded in the run summary"""
    burn_in = artifacts.get_float("Run", "burn_in", 0.0)
    horizon = artifacts.get_float("Run", "horizon")
    if not np.isfinite(horizon):
        horizon = float(artifacts.summary["time"].max())
    return occupation_estimate(artifacts.records, burn_in, horizon)


def ks_against(estimate: OccupationEstimate, reference: str) -> List[float]:
    """
    Per-coordinate KS distance of the estimate to a reference.

    reference is 'norm:MEAN,SD' (applied to every coordinate), 'self', or the
    directory of another run.
    """
    if reference.startswith("norm:"):
        try:
            mean, sd = (float(part) for part in reference[len("norm:"):].split(","))
        except ValueError as e:
            raise ConfigError(f"normal reference must look like norm:MEAN,SD, got '{reference}'") from e
        cdf: Callable = stats.norm(loc=mean, scale=sd).cdf
        return [estimate.ks_distance(cdf, coord=j) for j in range(estimate.dim)]
    if reference == "self":
        return [estimate.ks_distance_to(estimate, coord=j) for j in range(estimate.dim)]
    if not os.path.isdir(reference):
        raise ConfigError(f"reference run directory not found: {reference}")
    other = run_estimate(read_run(reference))
    if other.dim != estimate.dim:
        raise ConfigError(f"reference run has dimension {other.dim}, this run {estimate.dim}")
    return [estimate.ks_distance_to(other, coord=j) for j in range(estimate.dim)]


def ess_trace(artifacts: RunArtifacts) -> pd.DataFrame:
    """ESS, resampling flag and weighted mean per checkpoint"""
    particles = artifacts.particles
    coords = [c for c in particles.columns if c.startswith("x")]
    weighted = particles[coords].multiply(particles["weight"], axis=0)
    weighted["time"] = particles["time"]
    means = weighted.groupby("time", sort=True)[coords].sum().add_prefix("mean_").reset_index()
    return artifacts.summary[["time", "ess", "resampled"]].merge(means, on="time", how="left")


def cost_table(run_dirs: Sequence[str]) -> pd.DataFrame:
    """Factor touches per unit diffusion time for each run, sorted by data size"""
    rows = []
    for run_dir in run_dirs:
        artifacts = read_run(run_dir)
        horizon = float(artifacts.summary["time"].max())
        touches = int(artifacts.summary["factor_touches"].sum())
        n_particles = int(artifacts.particles["particle"].max()) + 1
        rows.append({
            "run": run_dir,
            "n_data": artifacts.run_summary.getint("Result", "n_data", fallback=0),
            "n_particles": n_particles,
            "horizon": horizon,
            "factor_touches": touches,
            "touches_per_unit_time": touches / horizon,
            "touches_per_particle_time": touches / (horizon * n_particles),
            "kills": int(artifacts.summary["kills"].sum()),
        })
    return pd.DataFrame(rows).sort_values(["n_data", "run"], kind="stable").reset_index(drop=True)


def histogram_frames(estimate: OccupationEstimate, bins: int) -> Dict[int, pd.DataFrame]:
    frames = {}
    for j in range(estimate.dim):
        density, edges = estimate.marginal_histogram(j, bins=bins)
        frames[j] = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "density": density})
    return frames


def _markdown_table(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "| " + " | ".join("---" for _ in frame.columns) + " |"
    lines = [header, rule]
    for row in frame.itertuples(index=False):
        cells = [f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_report(run_dir: str, report: DiagnoseReport, reference: Optional[str]) -> str:
    d = report.mean.shape[0]
    lines = [f"# Diagnostics for {run_dir}", "", "## Posterior summary", ""]
    summary = pd.DataFrame({"coordinate": [f"x{j + 1}" for j in range(d)],
                            "mean": report.mean,
                            "sd": np.sqrt(np.diag(report.covariance))})
    if report.ks is not None:
        summary["ks"] = report.ks
    lines += [_markdown_table(summary), ""]
    if report.ks is not None:
        lines += [f"KS distances are against `{reference}`.", ""]
    lines += ["## Covariance", "",
              _markdown_table(pd.DataFrame(report.covariance, columns=[f"x{j + 1}" for j in range(d)])), ""]
    lines += ["## Cost", "", _markdown_table(report.cost_table.drop(columns=["run"])), ""]
    trace = report.ess_trace
    step = max(1, len(trace) // 20)
    lines += ["## ESS trace", "", "Every %d-th checkpoint; the full trace is in `ess_trace.csv`." % step, "",
              _markdown_table(trace.iloc[::step]), ""]
    return "\n".join(lines)


def diagnose(run_dir: str, reference: Optional[str] = None, compare: Sequence[str] = (),
             bins: Optional[int] = None, output_dir: Optional[str] = None) -> DiagnoseReport:
    """
    Build the diagnostics report of a run and write its files.

    reference and bins default to the [Diagnostics] settings recorded in the
    run summary.
    """
    artifacts = read_run(run_dir)
    reference, bins = recorded_settings(artifacts, reference, bins)
    estimate = run_estimate(artifacts)
    report = DiagnoseReport(
        mean=estimate.mean,
        covariance=estimate.covariance,
        ks=ks_against(estimate, reference) if reference else None,
        ess_trace=ess_trace(artifacts),
        cost_table=cost_table([run_dir, *compare]),
        reference=reference,
        bins=bins,
    )

    output_dir = output_dir or os.path.join(run_dir, "diagnostics")
    os.makedirs(output_dir, exist_ok=True)
    contents = {f"histogram_x{j + 1}.csv": frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
                for j, frame in histogram_frames(estimate, bins).items()}
    contents["ess_trace.csv"] = report.ess_trace.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    contents["cost_table.csv"] = report.cost_table.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    text = render_report(run_dir, report, reference)
    contents[REPORT_MARKDOWN] = text
    body = markdown.markdown(text, extensions=['extra', 'tables', 'toc'])
    contents[REPORT_HTML] = HTML_TEMPLATE.format(title=f"QSMC diagnostics: {os.path.basename(run_dir)}", body=body)
    report.files = write_atomically(output_dir, contents)
    logger.info("Diagnostics written to %s", output_dir)
    return report
