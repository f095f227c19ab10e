"""Length and base curricula, and the operand-count sampler for k-term products."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation

DEFAULT_THRESHOLD = 0.15
NAMED_CURRICULA = {
    "direct10": [10],
    "2-10": [2, 10],
    "2-5-10": [2, 5, 10],
    "2-4-10": [2, 4, 10],
}


@dataclass
class CurriculumStage:
    base: int
    task: str
    min_length: int
    max_length: int
    threshold: float = DEFAULT_THRESHOLD
    representation: str = "padded"

    def __post_init__(self):
        if not 1 <= self.min_length <= self.max_length:
            raise ContractViolation(f"stage needs 1 <= min_length <= max_length, got {self.min_length}..{self.max_length}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractViolation(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass
class CurriculumSchedule:
    stages: list[CurriculumStage]
    reset_length_on_stage: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ContractViolation("a schedule needs at least one stage")

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages], "reset_length_on_stage": self.reset_length_on_stage}


def parse_curriculum_name(name: str) -> list[int]:
    """Bases for a curriculum name.

    Accepts the named schedules ("direct10", "2-10", "2-5-10", "2-4-10"),
    ``direct<b>`` for a single base, and any strictly increasing dash list
    such as ``2-3-10``.
    """
    if name in NAMED_CURRICULA:
        return list(NAMED_CURRICULA[name])
    m = re.fullmatch(r"direct(\d+)", name)
    if m:
        bases = [int(m.group(1))]
    elif re.fullmatch(r"\d+(-\d+)+", name):
        bases = [int(x) for x in name.split("-")]
    else:
        raise ContractViolation(f"unknown curriculum {name!r}; try one of {sorted(NAMED_CURRICULA)} or direct<b>")
    if any(not 2 <= b <= 10 for b in bases) or any(x >= y for x, y in zip(bases, bases[1:])):
        raise ContractViolation(f"curriculum {name!r} must list increasing bases in 2..10")
    return bases


def base_stage_sequence(name: str, task: str, min_length: int = 1, max_length: int = 20,
                        threshold: float = DEFAULT_THRESHOLD, representation: str = "padded") -> CurriculumSchedule:
    stages = [CurriculumStage(b, task, min_length, max_length, threshold, representation)
              for b in parse_curriculum_name(name)]
    return CurriculumSchedule(stages)


def next_length(current_length: int, recent_error: float, stage: CurriculumStage) -> int:
    """Grow by one when the recent error is under the stage threshold."""
    if not stage.min_length <= current_length <= stage.max_length:
        raise ContractViolation(f"length {current_length} outside stage bounds {stage.min_length}..{stage.max_length}")
    if recent_error < stage.threshold:
        return min(current_length + 1, stage.max_length)
    return current_length


def stage_complete(current_length: int, recent_error: float, stage: CurriculumStage) -> bool:
    return current_length == stage.max_length and recent_error < stage.threshold


def operand_count_sampler(n: int, rng: np.random.Generator) -> int:
    """Uniform on ``1 .. (n - 1) // 2``."""
    if n < 3:
        raise ContractViolation(f"operand_count_sampler needs n >= 3, got {n}")
    return int(rng.integers(1, (n - 1) // 2 + 1))


@dataclass
class CurriculumState:
    """Position in a schedule, advanced by one training batch at a time.

    The recent error is an exponential moving average of per-batch sequence
    error, bias-corrected and restarted at every length change so that a
    promotion is always earned at the new length. At least
    ``min_batches`` batches are seen at each length.
    """

    schedule: CurriculumSchedule
    ema_decay: float = 0.99
    min_batches: int = 20
    stage_index: int = 0
    length: int = 0
    ema: float = 0.0
    batches: int = 0
    complete: bool = False
    events: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.length == 0:
            self.length = self.stage.min_length

    @property
    def stage(self) -> CurriculumStage:
        return self.schedule.stages[self.stage_index]

    @property
    def recent_error(self) -> float:
        if self.batches == 0:
            return 1.0
        return self.ema / (1.0 - self.ema_decay ** self.batches)

    def update(self, batch_error: float, step: int = 0) -> list[dict]:
        """Fold in one batch's sequence error; return any transition events."""
        self.ema = self.ema_decay * self.ema + (1.0 - self.ema_decay) * batch_error
        self.batches += 1
        if self.complete or self.batches < self.min_batches:
            return []
        err = self.recent_error
        stage = self.stage
        events: list[dict] = []
        if stage_complete(self.length, err, stage):
            events.append({"event": "stage_complete", "step": step, "stage": self.stage_index,
                           "base": stage.base, "length": self.length, "recent_error": err})
            if self.stage_index + 1 < len(self.schedule.stages):
                self.stage_index += 1
                new = self.stage
                if self.schedule.reset_length_on_stage:
                    self.length = new.min_length
                else:
                    self.length = min(max(self.length, new.min_length), new.max_length)
                events.append({"event": "stage_start", "step": step, "stage": self.stage_index,
                               "base": new.base, "length": self.length})
            else:
                self.complete = True
                events.append({"event": "schedule_complete", "step": step})
            self._restart()
        else:
            new_length = next_length(self.length, err, stage)
            if new_length != self.length:
                events.append({"event": "length", "step": step, "stage": self.stage_index, "base": stage.base,
                               "from": self.length, "to": new_length, "recent_error": err})
                self.length = new_length
                self._restart()
        self.events.extend(events)
        return events

    def _restart(self) -> None:
        self.ema = 0.0
        self.batches = 0

    def to_dict(self) -> dict:
        return {"stage_index": self.stage_index, "length": self.length, "ema": self.ema,
                "batches": self.batches, "complete": self.complete}

    def load_dict(self, d: dict) -> None:
        self.stage_index = int(d["stage_index"])
        self.length = int(d["length"])
        self.ema = float(d["ema"])
        self.batches = int(d["batches"])
        self.complete = bool(d["complete"])
