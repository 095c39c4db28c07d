"""
Per-condition rollout phases.

Pure transition logic for one condition within one fine-tuning iteration:
noise initialization, rollout (window or full), coarse perception,
representative selection, fine-grained refinement and scoring. The engine
asks ``get_next_action`` what to do and reports the outcome through
``transition``.
"""

from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, Dict, Set


class Phase(Enum):
    CREATED = auto()
    NOISE_READY = auto()
    WINDOW_SAMPLED = auto()
    PERCEIVED = auto()
    SELECTED = auto()
    COMPLETE_SAMPLED = auto()
    SCORED = auto()


class ActionType(Enum):
    INIT_NOISE = auto()
    ROLLOUT = auto()
    PERCEIVE = auto()
    SELECT = auto()
    REFINE = auto()
    SCORE = auto()
    EXIT = auto()


@dataclass
class Action:
    type: ActionType
    payload: Dict[str, Any] = field(default_factory=dict)


class InvalidTransitionError(Exception):
    """Raised when an invalid phase transition is attempted."""
    pass


class PhaseMachine:
    """
    Transition table for one condition's rollout.

    With intra-group refinement the rollout stops at the perception knot
    ("partial"); without it every trajectory is sampled to the end
    ("full") and perception/selection are skipped.
    """

    TRANSITIONS: Dict[Phase, Set[Phase]] = {
        Phase.CREATED: {Phase.NOISE_READY},
        Phase.NOISE_READY: {Phase.WINDOW_SAMPLED, Phase.COMPLETE_SAMPLED},
        Phase.WINDOW_SAMPLED: {Phase.PERCEIVED},
        Phase.PERCEIVED: {Phase.SELECTED},
        Phase.SELECTED: {Phase.COMPLETE_SAMPLED},
        Phase.COMPLETE_SAMPLED: {Phase.SCORED},
        Phase.SCORED: set(),
    }

    _EVENT_TRANSITIONS = {
        (Phase.CREATED, "init"): Phase.NOISE_READY,
        (Phase.NOISE_READY, "partial"): Phase.WINDOW_SAMPLED,
        (Phase.NOISE_READY, "full"): Phase.COMPLETE_SAMPLED,
        (Phase.WINDOW_SAMPLED, "perceive"): Phase.PERCEIVED,
        (Phase.PERCEIVED, "select"): Phase.SELECTED,
        (Phase.SELECTED, "refine"): Phase.COMPLETE_SAMPLED,
        (Phase.COMPLETE_SAMPLED, "score"): Phase.SCORED,
    }

    def __init__(self, intra_group: bool = True):
        self.intra_group = intra_group

    def transition(self, current: Phase, event_type: str) -> Phase:
        """
        Next phase after ``event_type``.

        Raises:
            InvalidTransitionError: If the event is not valid in ``current``

        Examples:
            >>> PhaseMachine().transition(Phase.CREATED, "init")
            <Phase.NOISE_READY: 2>
        """
        key = (current, event_type)
        if key not in self._EVENT_TRANSITIONS:
            raise InvalidTransitionError(f"Invalid transition: ({current.name}, {event_type})")
        next_phase = self._EVENT_TRANSITIONS[key]
        if next_phase not in self.TRANSITIONS.get(current, set()):
            raise InvalidTransitionError(f"Transition from {current.name} to {next_phase.name} is not allowed")
        return next_phase

    def get_next_action(self, phase: Phase) -> Action:
        if phase == Phase.CREATED:
            return Action(ActionType.INIT_NOISE)
        elif phase == Phase.NOISE_READY:
            return Action(ActionType.ROLLOUT, payload={"partial": self.intra_group})
        elif phase == Phase.WINDOW_SAMPLED:
            return Action(ActionType.PERCEIVE)
        elif phase == Phase.PERCEIVED:
            return Action(ActionType.SELECT)
        elif phase == Phase.SELECTED:
            return Action(ActionType.REFINE)
        elif phase == Phase.COMPLETE_SAMPLED:
            return Action(ActionType.SCORE)
        elif phase == Phase.SCORED:
            return Action(ActionType.EXIT)
        raise ValueError(f"Unknown phase: {phase}")
