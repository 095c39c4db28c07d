"""
Structured records written by the harness.

Every record is a dataclass with to_dict/to_json. JSON uses sorted keys
and repr floats so equal runs produce byte-identical streams.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional


def _clean(value: Any) -> Any:
    """Replace non-finite floats with None so the output stays valid JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def dumps(data: Dict[str, Any]) -> str:
    return json.dumps(_clean(data), sort_keys=True, default=str, allow_nan=False)


@dataclass
class ReportLine:
    """One verified identity: name, measured error, tolerance, verdict."""
    name: str
    value: float
    tolerance: float
    passed: bool
    note: Optional[str] = None

    def format(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        line = f"{self.name}, {self.value:.3e}, {self.tolerance:.1e}, {verdict}"
        return f"{line}  # {self.note}" if self.note else line

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class VerificationReport:
    lines: List[ReportLine] = field(default_factory=list)
    extra: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.lines) and all(line.passed for line in self.lines)

    def add(self, line: ReportLine) -> ReportLine:
        self.lines.append(line)
        return line

    def extend(self, other: "VerificationReport") -> None:
        self.lines.extend(other.lines)
        self.extra.extend(other.extra)

    def to_text(self) -> str:
        body = ["name, max_rel_err, tol, verdict"] + [line.format() for line in self.lines]
        body.extend(self.extra)
        body.append(f"OVERALL {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(body) + "\n"


@dataclass
class MetricsRecord:
    """Per-iteration fine-tuning metrics."""
    iter: int
    method: str
    granularity: str
    mean_reward: float
    reward_std: float
    diversity: float
    latent_consistency: float
    eval_reward: float
    loss_base: float
    loss_cpgo: float
    cpgo_eligible: int
    step_units: int
    wall_time: Optional[float] = None

    def to_dict(self, include_wall_time: bool = False) -> Dict[str, Any]:
        data = asdict(self)
        if not include_wall_time:
            data.pop("wall_time")
        return data

    def to_json(self, include_wall_time: bool = False) -> str:
        return dumps(self.to_dict(include_wall_time))


@dataclass
class SelectionRecord:
    """Schedule and representative-selection decision for one condition."""
    iter: int
    cond: int
    granularity: str
    g1_indices: List[int]
    g2_indices: List[int]
    inertia: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return dumps(self.to_dict())
