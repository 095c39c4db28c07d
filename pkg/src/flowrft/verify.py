"""
Verification suite: every identity the library relies on, in one report.

The report lists one line per check and ends with OVERALL PASS or FAIL;
the verify command's exit status follows the overall verdict.
"""

import logging
from pathlib import Path
from typing import List, Optional

from .checks import build_fixture, on_policy_check, run_gradient_checks, verify_corollaries
from .config import ExperimentConfig
from .cpgo import verify_consistency_scaling
from .dgr import (
    cache_velocities,
    coarse_progress_perception,
    count_step_units,
    init_group_noises,
    refine_fine_grained,
    select_representatives,
)
from .engine import load_pretrained
from .flow import lipschitz_probe
from .groups import Granularity
from .model import VelocityModel
from .records import ReportLine, VerificationReport
from .sde import rollout
from .seeding import KeyedRNG, Stream, keyed_rng
from .trajectory import TimeGrid
from .vh.oracles import verify_image_metrics

logger = logging.getLogger(__name__)

REPORT_FILE = "verify_report.txt"
SCALING_HALVINGS = 3


def scaling_grids(base: TimeGrid, halvings: int = SCALING_HALVINGS) -> List[TimeGrid]:
    grids = [base]
    for _ in range(halvings):
        grids.append(grids[-1].refined())
    return grids


def step_unit_check(model: VelocityModel, config: ExperimentConfig) -> ReportLine:
    """
    Sampler steps spent by one window rollout plus refinement, against the
    closed form K·(T − t_s) + K1·t_s.
    """
    grid = config.grid()
    K, K1, ts = config.group_size, config.cluster_size, config.perception_knot
    sched = config.noise_schedule()
    init = init_group_noises(Granularity.COARSE, K, config.data_dim, KeyedRNG(config.seed, Stream.INIT_NOISE, (1 << 20,)))
    sde_rng = KeyedRNG(config.seed, Stream.SDE, (1 << 20,))
    trajs = rollout(model, init, grid, 0, sched, sde_rng, stop_at=ts)
    cache_velocities(model, trajs)
    selection = select_representatives(coarse_progress_perception(model, trajs), K1,
                                       keyed_rng(config.seed, Stream.SELECTION, 1 << 20))
    chosen = [trajs[i] for i in selection.g1_indices]
    refine_fine_grained(model, chosen, selection.g1_indices, sched, sde_rng)

    units = count_step_units(trajs)
    expected = K * (grid.T - ts) + K1 * ts
    full = K * grid.T
    return ReportLine("intra_group_step_units", float(units), 0.0, units == expected and units < full,
                      note=f"expected {expected}, full rollout {full}")


def run_verify(config: ExperimentConfig, out_dir: Optional[Path] = None) -> VerificationReport:
    """
    Gradient checks, policy-gradient identities, clipped-region zero gradients,
    consistency-gap scaling and image-metric oracles.

    Needs the pretrained checkpoint for the scaling and Lipschitz checks.
    """
    seed = config.seed
    report = VerificationReport()

    logger.info("verify: gradient checks")
    report.extend(run_gradient_checks(seed))

    logger.info("verify: policy-gradient identities")
    fixture = build_fixture(seed)
    report.extend(verify_corollaries(fixture, clip=config.clip(), beta=config.dpo_beta))
    report.add(on_policy_check(fixture))

    logger.info("verify: consistency scaling")
    model = load_pretrained(config)
    probes = [
        (keyed_rng(seed, Stream.PROBE, 3, i).standard_normal(config.data_dim), i % config.n_modes)
        for i in range(config.verify_probes)
    ]
    scaling = verify_consistency_scaling(model, scaling_grids(config.grid()), probes)
    report.add(scaling.report_line())
    report.extra.extend(f"# {line}" for line in scaling.lines())

    report.add(step_unit_check(model, config))

    logger.info("verify: image metrics")
    report.extend(verify_image_metrics(seed))

    lipschitz = lipschitz_probe(model, config.grid(), 256, keyed_rng(seed, Stream.PROBE, 4))
    report.extra.append(f"# lipschitz_estimate, {lipschitz:.6g}")

    out = Path(out_dir) if out_dir is not None else config.out_path
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(report.to_text(), encoding="utf-8")
    logger.info(f"verify: {'PASS' if report.passed else 'FAIL'} ({len(report.lines)} checks)")
    return report
