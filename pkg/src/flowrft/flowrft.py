#!/usr/bin/env python3
"""
flowrft - reinforcement fine-tuning lab for small flow-matching models

Main CLI entry point. Each command loads the configuration, opens a run
record in the output directory and delegates to the library.
"""

import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from .config import ConfigError, ExperimentConfig, create_example_config, load_experiment_config
from .context import RunContext
from .logs import RunLogger, summarize, verbosity_level
from .state_machine import RunLifecycle

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

CommandResult = Tuple[bool, Dict[str, Any]]

# ============================================================================
# COMMANDS
# ============================================================================


def cmd_pretrain(config: ExperimentConfig, args: argparse.Namespace, ctx: RunContext) -> CommandResult:
    from .engine import run_pretrain

    outcome = run_pretrain(config, progress=args.verbose or args.debug)
    ctx.add_artifact("checkpoint", outcome.checkpoint)
    return True, {
        "checkpoint": str(outcome.checkpoint),
        "final_loss": round(outcome.final_loss, 6),
        "energy_distance": round(outcome.energy_distance, 6),
    }


def cmd_finetune(config: ExperimentConfig, args: argparse.Namespace, ctx: RunContext) -> CommandResult:
    from .engine import METRICS_FILE, run_finetune, summarize_records

    result = run_finetune(config, progress=args.verbose or args.debug)
    ctx.add_artifact("metrics", config.out_path / METRICS_FILE)
    ctx.add_artifact("checkpoint", result.checkpoint)
    return True, summarize_records(result.records)


def cmd_verify(config: ExperimentConfig, args: argparse.Namespace, ctx: RunContext) -> CommandResult:
    from .verify import REPORT_FILE, run_verify

    report = run_verify(config)
    sys.stdout.write(report.to_text())
    ctx.add_artifact("report", config.out_path / REPORT_FILE)
    failed = [line.name for line in report.lines if not line.passed]
    return report.passed, {"checks": len(report.lines), "failed": ",".join(failed) or "none"}


def cmd_diagnose(config: ExperimentConfig, args: argparse.Namespace, ctx: RunContext) -> CommandResult:
    from .diagnose import REPORT_FILE, run_diagnostics

    report = run_diagnostics(config, progress=args.verbose or args.debug)
    sys.stdout.write(report.to_text())
    ctx.add_artifact("report", config.out_path / REPORT_FILE)
    return True, {
        "coarse_wins": f"{report.coarse_wins}/{len(report.diversity)}",
        "fine_init_zero": report.fine_init_zero,
        "correlation_trend_ok": report.correlation_trend_ok,
    }


def cmd_eval_vh(config: ExperimentConfig, args: argparse.Namespace, ctx: RunContext) -> CommandResult:
    from .evaluate import REPORT_FILE, run_eval_vh

    batch = run_eval_vh([Path(p) for p in args.paths], config.out_path)
    ctx.add_artifact("report", config.out_path / REPORT_FILE)
    ok = len(batch.errors) < len(batch.reports)
    return ok, {"records": len(batch.reports), "errors": len(batch.errors)}


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace, RunContext], CommandResult]] = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "verify": cmd_verify,
    "diagnose": cmd_diagnose,
    "eval-vh": cmd_eval_vh,
}

# ============================================================================
# ARGUMENT PARSING
# ============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowrft",
        description="flowrft - reinforcement fine-tuning lab for small flow-matching models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  flowrft --out runs/toy pretrain
  flowrft --out runs/toy finetune
  flowrft --config grpo.json --seed 3 --out runs/grpo finetune
  flowrft --out runs/toy verify
  flowrft --out runs/vh eval-vh runs/toy images/

Configuration:
  Create .flowrft.json, flowrft.config.yaml or .flowrftrc in the working
  directory or your home directory. Command-line options override it.
        """,
    )
    parser.add_argument("--config", type=str, help="Path to a configuration file (overrides discovery)")
    parser.add_argument("--seed", type=int, default=None, help="Run seed")
    parser.add_argument("--out", type=str, default=None, help="Output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="Progress bars and INFO logging")
    parser.add_argument("--debug", action="store_true", help="DEBUG logging and tracebacks")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", help="Flow-matching pretraining on the toy mixture")
    sub.add_parser("finetune", help="Reinforcement fine-tuning of the pretrained model")
    sub.add_parser("verify", help="Gradient checks, policy-gradient identities and metric oracles")
    sub.add_parser("diagnose", help="Group diversity, perception correlation and few-step tables")
    eval_vh = sub.add_parser("eval-vh", help="Image metrics over PGM files and trajectory dumps")
    eval_vh.add_argument("paths", nargs="+", help="Files or directories to evaluate")
    init = sub.add_parser("init-config", help="Write an example configuration file")
    init.add_argument("path", nargs="?", default=".flowrft.json", help="Target file (default: .flowrft.json)")
    init.add_argument("--force", action="store_true", help="Overwrite an existing file")
    return parser


def _init_config(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        print(f"Refusing to overwrite {path} (use --force)", file=sys.stderr)
        return EXIT_FAILED
    path.write_text(create_example_config() + "\n", encoding="utf-8")
    print(f"Wrote example configuration to {path}")
    return EXIT_OK


def run_command(args: argparse.Namespace) -> int:
    """Execute one parsed command and return its exit status."""
    if args.command == "init-config":
        return _init_config(args)

    level = verbosity_level(args.verbose, args.debug)
    try:
        config = load_experiment_config(
            Path(args.config) if args.config else None,
            {"seed": args.seed, "out_dir": args.out},
        )
    except ConfigError as e:
        RunLogger(log_level=level).log_phase_result("config", False, error=str(e))
        return EXIT_CONFIG

    run_log = RunLogger(log_level=level, log_file=config.out_path / "run.log")
    ctx = RunContext.for_run(config.out_path, args.command)
    ctx.set_config(config.to_dict())
    lifecycle = RunLifecycle(ctx)
    lifecycle.start()

    try:
        success, summary = COMMANDS[args.command](config, args, ctx)
    except KeyboardInterrupt:
        lifecycle.interrupt()
        run_log.log_phase_result(args.command, False, error="interrupted")
        run_log.close()
        return EXIT_FAILED
    except Exception as e:
        if args.debug:
            traceback.print_exc()
        lifecycle.fail_with(str(e))
        run_log.log_phase_result(args.command, False, error=str(e))
        run_log.close()
        return EXIT_FAILED

    ctx.set_summary(summary)
    if success:
        lifecycle.finish()
    else:
        lifecycle.fail_with("checks failed")
    run_log.log_phase_result(args.command, success, **summary)
    run_log.close()
    print(f"flowrft {args.command}: {summarize(summary)}", file=sys.stderr)
    return EXIT_OK if success else EXIT_FAILED


def main(argv: Optional[List[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    sys.exit(run_command(args))


if __name__ == "__main__":
    main()
