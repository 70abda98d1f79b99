"""When to take snapshots, and which snapshot each model-selection strategy returns."""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, NamedTuple

from xltavg.averaging import SnapshotSet, TensorSource, average_run_ca
from xltavg.tensorstore import Checkpoint


class SelectionError(ValueError):
    pass


class Split(enum.Enum):
    SOURCE_DEV = "source_dev"
    TARGET_DEV = "target_dev"
    TARGET_TEST = "target_test"


class SelectionStrategy(enum.Enum):
    LAST = "last"
    SRC_DEV = "src-dev"
    TRG_DEV = "trg-dev"
    CA = "ca"

    @property
    def label(self) -> str:
        return self.value.upper()


@dataclass(frozen=True)
class SnapshotSchedule:
    total_steps: int
    count: int
    steps: tuple[int, ...]


def make_schedule(total_steps: int, count: int) -> SnapshotSchedule:
    """``count`` snapshots at a regular interval of total_steps/count steps, the last at total_steps."""
    if count < 1 or total_steps < 1:
        raise ValueError("total_steps and count must be positive")
    if count > total_steps:
        raise ValueError(f"cannot take {count} snapshots in {total_steps} steps")
    steps = [(j + 1) * total_steps // count for j in range(count)]
    steps[-1] = total_steps
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"schedule collides: {steps}")
    return SnapshotSchedule(total_steps, count, tuple(steps))


@dataclass(frozen=True)
class EvalRecord:
    step: int
    split: Split
    scores: dict[str, float]

    def __post_init__(self) -> None:
        if not isinstance(self.split, Split):
            object.__setattr__(self, "split", Split(self.split))
        for lang, value in self.scores.items():
            if not lang:
                raise ValueError("empty language code")
            if not math.isfinite(value):
                raise ValueError(f"non-finite score for {lang!r} at step {self.step}")

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "split": self.split.value, "scores": dict(sorted(self.scores.items()))},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        obj = json.loads(line)
        try:
            return cls(int(obj["step"]), Split(obj["split"]), {str(k): float(v) for k, v in obj["scores"].items()})
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"malformed eval record {line.strip()!r}: {exc}") from None


def write_records(records: Iterable[EvalRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: str | os.PathLike) -> list[EvalRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_json(line) for line in fh if line.strip()]


class Snapshot(NamedTuple):
    step: int
    ref: TensorSource


def _scores_by_step(run: SnapshotSet, records: Iterable[EvalRecord], split: Split) -> dict[int, dict[str, float]]:
    by_step: dict[int, dict[str, float]] = {}
    for rec in records:
        if rec.split is not split:
            continue
        if rec.step in by_step:
            raise SelectionError(f"duplicate {split.value} record for step {rec.step}")
        by_step[rec.step] = rec.scores
    missing = [s for s in run.steps if s not in by_step or not by_step[s]]
    if missing:
        raise SelectionError(f"no {split.value} scores for snapshot steps {missing}")
    return by_step


def _argmax_latest(pairs: Iterable[tuple[int, float]]) -> int:
    # ties go to the later step
    return max(pairs, key=lambda p: (p[1], p[0]))[0]


def select(strategy: SelectionStrategy, run: SnapshotSet, records: Iterable[EvalRecord] = ()):
    """Apply a model-selection strategy to one run.

    Returns a :class:`Snapshot` for LAST and SRC_DEV, a ``{language: Snapshot}``
    map for TRG_DEV (each target language may pick a different step), and the
    averaged :class:`Checkpoint` for CA. Only scheduled snapshot steps are
    candidates.
    """
    strategy = SelectionStrategy(strategy)
    records = list(records)
    if strategy is SelectionStrategy.LAST:
        return Snapshot(run.steps[-1], run.last)
    if strategy is SelectionStrategy.CA:
        return average_run_ca(run)
    if strategy is SelectionStrategy.SRC_DEV:
        by_step = _scores_by_step(run, records, Split.SOURCE_DEV)
        best = _argmax_latest(
            (s, math.fsum(by_step[s].values()) / len(by_step[s])) for s in run.steps
        )
        return Snapshot(best, run.at(best))
    by_step = _scores_by_step(run, records, Split.TARGET_DEV)
    languages = sorted(set().union(*(by_step[s] for s in run.steps)))
    chosen = {}
    for lang in languages:
        missing = [s for s in run.steps if lang not in by_step[s]]
        if missing:
            raise SelectionError(f"no target_dev score for {lang!r} at steps {missing}")
        best = _argmax_latest((s, by_step[s][lang]) for s in run.steps)
        chosen[lang] = Snapshot(best, run.at(best))
    return chosen


def selected_checkpoint(selection, language: str | None = None) -> TensorSource | Checkpoint:
    """The checkpoint to evaluate for ``language`` given any selection result."""
    if isinstance(selection, dict):
        if language is None:
            raise ValueError("TRG_DEV selections are per language")
        return selection[language].ref
    if isinstance(selection, Snapshot):
        return selection.ref
    return selection
