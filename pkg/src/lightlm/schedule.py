"""Learning-rate schedules: linear warmup to a peak, then linear decay to zero."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

from .config import parse_flat_kv
from .errors import ConfigError


class ScheduleConsistencyWarning(UserWarning):
    """warmup_ratio and warmup_steps disagree; warmup_steps is used as-is."""


@dataclass(frozen=True)
class TrainingSchedule:
    peak_lr: float
    batch_size: int
    warmup_ratio: float
    warmup_steps: int
    total_steps: int

    def validate(self) -> "TrainingSchedule":
        if self.peak_lr < 0:
            raise ConfigError(f"peak_lr must be >= 0, got {self.peak_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps must be in [0, total_steps], got {self.warmup_steps}"
            )
        implied = self.warmup_ratio * self.total_steps
        if abs(implied - self.warmup_steps) > 0.01 * max(self.warmup_steps, 1):
            warnings.warn(
                f"warmup_ratio x total_steps = {implied:.0f} but warmup_steps = "
                f"{self.warmup_steps}; keeping warmup_steps",
                ScheduleConsistencyWarning,
                stacklevel=2,
            )
        return self


def lr_at(step: int, schedule: TrainingSchedule) -> float:
    """Piecewise-linear rate: 0 -> peak over the warmup, then peak -> 0 at the end."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.peak_lr
        return schedule.peak_lr * (step / schedule.warmup_steps)
    return schedule.peak_lr * (
        (schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps)
    )


def schedule_to_text(schedule: TrainingSchedule) -> str:
    return "".join(f"{f.name} = {getattr(schedule, f.name)!r}\n" for f in fields(TrainingSchedule))


def schedule_from_text(text: str, source: str = "<schedule>") -> TrainingSchedule:
    entries = parse_flat_kv(text, source)
    names = {f.name for f in fields(TrainingSchedule)}
    if set(entries) != names:
        raise ConfigError(
            f"{source}: expected exactly keys {sorted(names)}, got {sorted(entries)}"
        )
    return TrainingSchedule(
        peak_lr=float(entries["peak_lr"]),
        batch_size=int(entries["batch_size"]),
        warmup_ratio=float(entries["warmup_ratio"]),
        warmup_steps=int(entries["warmup_steps"]),
        total_steps=int(entries["total_steps"]),
    ).validate()


def save_schedule(schedule: TrainingSchedule, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(schedule_to_text(schedule))


def load_schedule(path) -> TrainingSchedule:
    with open(path, encoding="utf-8") as f:
        return schedule_from_text(f.read(), source=str(path))
