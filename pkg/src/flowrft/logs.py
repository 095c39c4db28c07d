import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class RunLogger:
    """
    Logging setup for one CLI run.

    Configures the ``flowrft`` package logger with a console handler and,
    when an output directory is given, a file handler at ``<out>/run.log``.
    """

    def __init__(
        self,
        name: str = "flowrft",
        log_level: int = logging.WARNING,
        log_file: Optional[Path] = None,
    ):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(min(log_level, logging.INFO) if log_file else log_level)
        self.logger.handlers.clear()
        self.logger.propagate = False

        formatter = logging.Formatter(LOG_FORMAT)
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(log_level)
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        self.log_file = None
        if log_file:
            self.log_file = Path(log_file)
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(self.log_file, encoding="utf-8")
            file_handler.setLevel(min(log_level, logging.INFO))
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

    def log_phase_result(
        self,
        phase: str,
        success: bool,
        error: Optional[str] = None,
        **metadata: Any,
    ) -> None:
        """
        Log the outcome of a run phase (pretrain, finetune, verify, ...).

        Args:
            phase: Phase name
            success: Whether the phase succeeded
            error: Error message if it failed
            **metadata: Extra key/value pairs for the log line
        """
        details = ", ".join(f"{k}={v}" for k, v in sorted(metadata.items()))
        message = f"Phase {phase}: {'succeeded' if success else 'failed'}"
        if details:
            message += f" ({details})"
        if error:
            message += f": {error}"
        (self.logger.info if success else self.logger.error)(message)

    def close(self) -> None:
        for handler in list(self.logger.handlers):
            handler.close()
            self.logger.removeHandler(handler)

    def get_logger(self) -> logging.Logger:
        return self.logger


def verbosity_level(verbose: bool = False, debug: bool = False) -> int:
    if debug:
        return logging.DEBUG
    if verbose:
        return logging.INFO
    return logging.WARNING


def summarize(metadata: Dict[str, Any]) -> str:
    """One-line ``key=value`` rendering used for command summaries."""
    return " ".join(f"{k}={v}" for k, v in metadata.items())
