"""
Batch evaluation of image metrics over files and run directories.

Inputs are PGM images or trajectory dumps; directories are expanded to
their sorted contents. Unreadable inputs produce an error record and the
batch continues. Output is one NDJSON line per input plus a summary line,
rewritten from scratch on every call.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from .stream_log import NdjsonWriter
from .trajectory import TrajectoryFormatError, load_trajectories
from .vh.images import PgmFormatError, rasterize_samples, read_pgm
from .vh.metrics import (
    ImageTooSmallError,
    IncompleteTrajectoryError,
    NoSmoothRegionError,
    VhParams,
    VhReport,
    evaluate_image,
    latent_consistency,
)

logger = logging.getLogger(__name__)

REPORT_FILE = "vh_report.ndjson"
IMAGE_SUFFIXES = (".pgm",)
DUMP_SUFFIXES = (".ndjson", ".jsonl")
# Streams a run directory holds that are not trajectory dumps.
NON_DUMP_STREAMS = {REPORT_FILE, "metrics.ndjson", "selections.ndjson"}
METRIC_FIELDS = ("laplacian_variance", "high_freq_energy", "edge_artifact", "noise_level", "latent_consistency")

EXPECTED_ERRORS = (
    OSError,
    PgmFormatError,
    TrajectoryFormatError,
    ImageTooSmallError,
    NoSmoothRegionError,
    IncompleteTrajectoryError,
    ValueError,
)


@dataclass
class EvalBatch:
    reports: List[VhReport] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def errors(self) -> List[VhReport]:
        return [r for r in self.reports if r.error is not None]


def expand_inputs(paths: Iterable[Path]) -> List[Path]:
    """Files as given; directories replaced by their image and dump files, sorted."""
    out: List[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(
                q for q in p.iterdir()
                if q.suffix in IMAGE_SUFFIXES + DUMP_SUFFIXES and q.name not in NON_DUMP_STREAMS
            ))
        else:
            out.append(p)
    return out


def evaluate_dump(path: Path, params: VhParams) -> List[VhReport]:
    """
    One latent-consistency record per trajectory, plus one image record for
    the rasterized endpoints of the complete trajectories.
    """
    trajectories = load_trajectories(path)
    reports = []
    endpoints = []
    for i, traj in enumerate(trajectories):
        source = f"{path}#{i}"
        try:
            reports.append(VhReport(source=source, latent_consistency=latent_consistency(traj)))
            endpoints.append(traj.endpoint)
        except IncompleteTrajectoryError as e:
            reports.append(VhReport(source=source, error=str(e)))
    if endpoints and trajectories[0].dim == 2:
        try:
            reports.append(evaluate_image(rasterize_samples(endpoints), source=f"{path}#samples", params=params))
        except EXPECTED_ERRORS as e:
            reports.append(VhReport(source=f"{path}#samples", error=str(e)))
    return reports


def evaluate_input(path: Path, params: VhParams) -> List[VhReport]:
    try:
        if path.suffix in DUMP_SUFFIXES:
            return evaluate_dump(path, params)
        return [evaluate_image(read_pgm(path), source=str(path), params=params)]
    except EXPECTED_ERRORS as e:
        logger.warning(f"eval-vh: {path}: {e}")
        return [VhReport(source=str(path), error=f"{type(e).__name__}: {e}")]


def summarize(reports: List[VhReport]) -> dict:
    """Mean of every metric over the records that have it."""
    summary = {"source": "SUMMARY", "inputs": len(reports), "errors": sum(1 for r in reports if r.error)}
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        summary[name] = float(np.mean(values)) if values else None
    return summary


def run_eval_vh(paths: Iterable[Path], out_dir: Path, params: Optional[VhParams] = None) -> EvalBatch:
    """Evaluate every input and write ``vh_report.ndjson`` under ``out_dir``."""
    params = params or VhParams()
    batch = EvalBatch()
    for path in expand_inputs(paths):
        batch.reports.extend(evaluate_input(path, params))
    batch.summary = summarize(batch.reports)

    with NdjsonWriter(Path(out_dir) / REPORT_FILE, truncate=True) as writer:
        for report in batch.reports:
            writer.write(report)
        writer.write(batch.summary)
    logger.info(f"eval-vh: {len(batch.reports)} records, {len(batch.errors)} errors")
    return batch
