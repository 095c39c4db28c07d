"""
Run lifecycle state machine.

created -> running -> completed | failed | interrupted. Entering a state
records it in the attached RunContext.
"""

import logging
from enum import Enum
from typing import Optional

from statemachine import State, StateMachine

from .context import RunContext

logger = logging.getLogger(__name__)


class RunState(Enum):
    CREATED = "created"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    INTERRUPTED = "interrupted"


class RunLifecycle(StateMachine):
    """
    Lifecycle of one CLI command run.

    Transitions:
    - start: CREATED -> RUNNING
    - finish: RUNNING -> COMPLETED
    - interrupt: RUNNING -> INTERRUPTED
    - fail: CREATED/RUNNING -> FAILED
    """

    created = State("Created", initial=True)
    running = State("Running")
    completed = State("Completed", final=True)
    failed = State("Failed", final=True)
    interrupted = State("Interrupted", final=True)

    start = created.to(running)
    finish = running.to(completed)
    interrupt = running.to(interrupted)
    fail = created.to(failed) | running.to(failed)

    def __init__(self, context: Optional[RunContext] = None):
        self.context = context
        self.reason: Optional[str] = None
        super().__init__()

    def _record(self, state: RunState) -> None:
        logger.debug(f"Run entered {state.value}")
        if self.context is not None:
            self.context.set_state(state.value, reason=self.reason)

    def on_enter_running(self):
        self._record(RunState.RUNNING)

    def on_enter_completed(self):
        self._record(RunState.COMPLETED)

    def on_enter_failed(self):
        self._record(RunState.FAILED)

    def on_enter_interrupted(self):
        self._record(RunState.INTERRUPTED)

    def fail_with(self, reason: str) -> None:
        self.reason = reason
        self.fail()

    @property
    def current_state_enum(self) -> RunState:
        value = self.current_state.value if hasattr(self.current_state, "value") else self.current_state
        return RunState(value)

    def is_finished(self) -> bool:
        return self.current_state_enum in (RunState.COMPLETED, RunState.FAILED, RunState.INTERRUPTED)
