"""Uniform checkpoint averaging within a run (CA) and across runs (RA, SOUP)."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from xltavg import kernels
from xltavg.tensorstore import Checkpoint, CheckpointError, TensorSpec


class TensorSource(Protocol):
    """Anything with a header and per-tensor reads: CheckpointRef or Checkpoint."""

    specs: dict[str, TensorSpec]

    def read_tensor(self, name: str) -> tuple[TensorSpec, np.ndarray]: ...


class IncompatibleCheckpointsError(CheckpointError):
    def __init__(self, message: str, tensor_name: str):
        super().__init__(message)
        self.tensor_name = tensor_name


class AveragingVariant(enum.Enum):
    CA = "ca"
    RA_LAST = "ra-last"
    RA_CA = "ra-ca"
    # arithmetic of SOUP_* is that of RA_*; the tag records that runs varied hyperparameters
    SOUP_LAST = "soup-last"
    SOUP_CA = "soup-ca"

    @property
    def uses_last_only(self) -> bool:
        return self in (AveragingVariant.RA_LAST, AveragingVariant.SOUP_LAST)


@dataclass
class SnapshotSet:
    """Snapshots of one training run, ordered by step; the last one is taken at ``total_steps``."""

    run_id: str
    total_steps: int
    snapshots: list[tuple[int, TensorSource]]
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.snapshots:
            raise ValueError(f"run {self.run_id!r} has no snapshots")
        steps = [step for step, _ in self.snapshots]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"run {self.run_id!r}: snapshot steps must increase strictly, got {steps}")
        if steps[-1] != self.total_steps:
            raise ValueError(
                f"run {self.run_id!r}: last snapshot at step {steps[-1]}, expected {self.total_steps}"
            )

    @property
    def k(self) -> int:
        return len(self.snapshots)

    @property
    def steps(self) -> list[int]:
        return [step for step, _ in self.snapshots]

    @property
    def refs(self) -> list[TensorSource]:
        return [ref for _, ref in self.snapshots]

    @property
    def last(self) -> TensorSource:
        return self.snapshots[-1][1]

    def at(self, step: int) -> TensorSource:
        for s, ref in self.snapshots:
            if s == step:
                return ref
        raise KeyError(f"run {self.run_id!r} has no snapshot at step {step}")


@dataclass
class RunSet:
    runs: list[SnapshotSet]
    # the unfrozen run whose classifier the others were tied to, if any
    anchor: SnapshotSet | None = None

    def __post_init__(self) -> None:
        if not self.runs:
            raise ValueError("a RunSet needs at least one run")

    def __len__(self) -> int:
        return len(self.runs)

    def __iter__(self):
        return iter(self.runs)


def check_compatible(refs: Sequence[TensorSource]) -> None:
    """Raise IncompatibleCheckpointsError unless all refs share names, dtypes and shapes."""
    if not refs:
        raise ValueError("need at least one checkpoint")
    first = refs[0].specs
    for i, ref in enumerate(refs[1:], start=1):
        other = ref.specs
        if set(other) != set(first):
            name = sorted(set(other) ^ set(first))[0]
            raise IncompatibleCheckpointsError(
                f"checkpoint {i}: tensor name sets differ (e.g. {name!r})", name
            )
        for name, spec in first.items():
            if other[name].dtype != spec.dtype:
                raise IncompatibleCheckpointsError(
                    f"checkpoint {i}: dtype mismatch on {name!r}: "
                    f"{other[name].dtype.value} vs {spec.dtype.value}",
                    name,
                )
            if other[name].shape != spec.shape:
                raise IncompatibleCheckpointsError(
                    f"checkpoint {i}: shape mismatch on {name!r}: "
                    f"{list(other[name].shape)} vs {list(spec.shape)}",
                    name,
                )


def _sum_tensor(refs: Sequence[TensorSource], name: str, spec: TensorSpec) -> np.ndarray:
    acc = np.zeros(spec.numel, dtype=np.float64)
    for ref in refs:
        _, array = ref.read_tensor(name)
        kernels.accumulate(acc, np.ascontiguousarray(array).reshape(-1))
    return acc


def _mean_tensors(refs: Sequence[TensorSource]) -> Iterator[tuple[str, TensorSpec, np.ndarray]]:
    """Per tensor: float64 mean for floats, first input's copy for non-floats."""
    for name, spec in sorted(refs[0].specs.items()):
        if spec.dtype.is_floating:
            yield name, spec, _sum_tensor(refs, name, spec) / len(refs)
        else:
            yield name, spec, refs[0].read_tensor(name)[1].copy()


def _finalize(means: Iterable[tuple[str, TensorSpec, np.ndarray]]) -> Checkpoint:
    # consumed lazily: one float64 accumulator is alive at a time
    tensors = {
        name: values.astype(spec.dtype.numpy, copy=False).reshape(spec.shape)
        for name, spec, values in means
    }
    return Checkpoint(tensors)


def streaming_mean(refs: Sequence[TensorSource]) -> Checkpoint:
    """Uniform mean of K compatible checkpoints, one tensor at a time.

    Floating tensors are summed in float64 and divided by K once, then cast
    back to their stored dtype. Non-floating tensors are copied from the first
    checkpoint, so the result depends on which input comes first.
    """
    check_compatible(refs)
    return _finalize(_mean_tensors(refs))


def average_run_ca(run: SnapshotSet) -> Checkpoint:
    return streaming_mean(run.refs)


def average_runs(runs: RunSet | Sequence[SnapshotSet], variant: AveragingVariant) -> Checkpoint:
    """RA-LAST/SOUP-LAST: mean of final snapshots. RA-CA/SOUP-CA: mean of per-run CA means."""
    runs = list(runs)
    if variant is AveragingVariant.CA:
        raise ValueError("CA averages a single run; use average_run_ca")
    if variant.uses_last_only:
        return streaming_mean([run.last for run in runs])
    # per-run means stay in float64 so the result matches the flat mean over all k*R snapshots
    for run in runs:
        check_compatible(run.refs + [runs[0].last])

    def means():
        for name, spec in sorted(runs[0].last.specs.items()):
            if spec.dtype.is_floating:
                acc = np.zeros(spec.numel, dtype=np.float64)
                for run in runs:
                    kernels.accumulate(acc, _sum_tensor(run.refs, name, spec) / run.k)
                yield name, spec, acc / len(runs)
            else:
                yield name, spec, runs[0].refs[0].read_tensor(name)[1].copy()

    return _finalize(means())


def average(variant: AveragingVariant, runs: Sequence[SnapshotSet]) -> Checkpoint:
    """Dispatch on variant; CA expects exactly one run."""
    if variant is AveragingVariant.CA:
        if len(runs) != 1:
            raise ValueError(f"CA averages exactly one run, got {len(runs)}")
        return average_run_ca(runs[0])
    return average_runs(runs, variant)
