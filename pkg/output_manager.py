"""
QSMC - Output Manager

Writes and re-reads run artifacts:
- particles.csv    one row per (checkpoint, particle): time, particle, x1..xd, weight
- summary.csv      one row per checkpoint: time, ess, resampled and cost counters
- run_summary.ini  config echo, posterior summary, data provenance, wall time

Files are written to temporaries in the target directory and renamed only
once all of them are complete, so a failed run leaves no partial artifacts.
"""

import configparser
import io
import logging
import os
import tempfile
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd

from errors import DataError
from smc_engine import CheckpointRecord

logger = logging.getLogger('qsmc.output_manager')

PARTICLES_FILE = "particles.csv"
SUMMARY_FILE = "summary.csv"
RUN_SUMMARY_FILE = "run_summary.ini"

COST_COLUMNS = ("factor_touches", "events", "layers", "kills")


def particles_frame(records: Sequence[CheckpointRecord]) -> pd.DataFrame:
    """Long table of weighted particle states"""
    if not records:
        raise ValueError("no checkpoint records to write")
    n, d = records[0].states.shape
    frames = []
    for record in records:
        frame = pd.DataFrame(record.states, columns=[f"x{j + 1}" for j in range(d)])
        frame.insert(0, "particle", np.arange(n))
        frame.insert(0, "time", record.time)
        frame["weight"] = record.weights
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def summary_frame(records: Sequence[CheckpointRecord]) -> pd.DataFrame:
    rows = []
    for record in records:
        row = {"time": record.time, "ess": record.ess, "resampled": int(record.resampled)}
        row.update({name: int(record.cost_counters.get(name, 0)) for name in COST_COLUMNS})
        rows.append(row)
    return pd.DataFrame(rows, columns=["time", "ess", "resampled", *COST_COLUMNS])


def records_from_frames(particles: pd.DataFrame, summary: pd.DataFrame) -> List[CheckpointRecord]:
    """Rebuild checkpoint records from the two CSV tables"""
    coords = [c for c in particles.columns if c.startswith("x")]
    by_time = {t: group for t, group in particles.groupby("time", sort=True)}
    records = []
    for row in summary.itertuples(index=False):
        group = by_time.get(row.time)
        if group is None:
            raise DataError(f"checkpoint t={row.time} has no particle rows")
        group = group.sort_values("particle")
        records.append(CheckpointRecord(
            time=float(row.time),
            states=group[coords].to_numpy(dtype=float),
            weights=group["weight"].to_numpy(dtype=float),
            ess=float(row.ess),
            resampled=bool(row.resampled),
            cost_counters={name: int(getattr(row, name)) for name in COST_COLUMNS},
        ))
    return records


def format_vector(values) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values, dtype=float).reshape(-1))


def parse_vector(text: str) -> np.ndarray:
    return np.array([float(part) for part in text.split(",") if part.strip()])


def _summary_text(sections: Mapping[str, Mapping[str, object]]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, options in sections.items():
        parser[section] = {key: str(value) for key, value in options.items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def write_run(directory: str, records: Sequence[CheckpointRecord],
              run_summary: Mapping[str, Mapping[str, object]],
              float_format: str = "%.17g") -> Dict[str, str]:
    """Write all three artifacts atomically; returns their paths"""
    os.makedirs(directory, exist_ok=True)
    contents = {
        PARTICLES_FILE: particles_frame(records).to_csv(index=False, float_format=float_format,
                                                        lineterminator="\n"),
        SUMMARY_FILE: summary_frame(records).to_csv(index=False, float_format=float_format,
                                                    lineterminator="\n"),
        RUN_SUMMARY_FILE: _summary_text(run_summary),
    }
    return write_atomically(directory, contents)


def write_atomically(directory: str, contents: Mapping[str, str]) -> Dict[str, str]:
    """Write every file to a temporary first, then rename them all"""
    staged = []
    try:
        for name, text in contents.items():
            handle, temp_path = tempfile.mkstemp(prefix=f".{name}.", dir=directory)
            staged.append((temp_path, os.path.join(directory, name)))
            with os.fdopen(handle, "w", encoding="utf-8", newline="") as f:
                f.write(text)
    except OSError:
        for temp_path, _ in staged:
            if os.path.exists(temp_path):
                os.remove(temp_path)
        raise
    paths = {}
    for temp_path, final_path in staged:
        os.replace(temp_path, final_path)
        paths[os.path.basename(final_path)] = final_path
        logger.info("Wrote %s", final_path)
    return paths


@dataclass
class RunArtifacts:
    """A completed run read back from disk"""

    directory: str
    particles: pd.DataFrame
    summary: pd.DataFrame
    run_summary: configparser.ConfigParser

    @property
    def records(self) -> List[CheckpointRecord]:
        return records_from_frames(self.particles, self.summary)

    def get_float(self, section: str, option: str, fallback: float = float("nan")) -> float:
        return self.run_summary.getfloat(section, option, fallback=fallback)


def read_run(directory: str) -> RunArtifacts:
    """Load the artifacts of a completed run"""
    paths = {name: os.path.join(directory, name) for name in (PARTICLES_FILE, SUMMARY_FILE, RUN_SUMMARY_FILE)}
    missing = [path for path in paths.values() if not os.path.isfile(path)]
    if missing:
        raise DataError(f"{directory} is not a completed run; missing {missing}")
    try:
        particles = pd.read_csv(paths[PARTICLES_FILE])
        summary = pd.read_csv(paths[SUMMARY_FILE])
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read run artifacts in {directory}: {e}") from e
    run_summary = configparser.ConfigParser(interpolation=None)
    run_summary.read(paths[RUN_SUMMARY_FILE])
    return RunArtifacts(directory=directory, particles=particles, summary=summary, run_summary=run_summary)
