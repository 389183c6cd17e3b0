"""Mean-teacher exponential-moving-average update with an interval schedule.

The teacher parameter vector moves toward the student only every
``interval``-th call: the counter increments on each call and the element-wise
update ``teacher <- alpha * teacher + (1 - alpha) * student`` applies when the
incremented counter is a multiple of the interval.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError

__all__ = ["EmaState", "ema_step"]

DEFAULT_ALPHA = 0.999
DEFAULT_INTERVAL = 5


@dataclass(frozen=True)
class EmaState:
    teacher_params: np.ndarray
    alpha: float = DEFAULT_ALPHA
    interval: int = DEFAULT_INTERVAL
    iteration_counter: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "teacher_params", np.asarray(self.teacher_params, dtype=float)
        )
        if not (0.0 <= self.alpha <= 1.0):
            raise InvalidInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.interval < 1:
            raise InvalidInputError(f"interval must be >= 1, got {self.interval}")
        if self.iteration_counter < 0:
            raise InvalidInputError("iteration counter must be non-negative")


def ema_step(state: EmaState, student_params: np.ndarray) -> EmaState:
    """Advance the schedule one call; apply the EMA update when due."""
    student = np.asarray(student_params, dtype=float)
    if student.shape != state.teacher_params.shape:
        raise InvalidInputError(
            f"parameter length mismatch: teacher {state.teacher_params.shape} "
            f"vs student {student.shape}"
        )
    counter = state.iteration_counter + 1
    if counter % state.interval == 0:
        teacher = state.alpha * state.teacher_params + (1.0 - state.alpha) * student
    else:
        teacher = state.teacher_params.copy()
    return replace(state, teacher_params=teacher, iteration_counter=counter)
