"""Zero-shot and few-shot transfer experiments on the synthetic task.

A plan names the selection strategies and averaging variants to compare;
:func:`run_experiment` trains every run it needs, evaluates each snapshot on
the dev splits, materializes every strategy's model and scores it on the
target test split, and reduces the scores to one (mean, std) row per
(strategy, shots) pair.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from xltavg.averaging import AveragingVariant, RunSet, SnapshotSet, average_runs
from xltavg.metrics import MetricReport, aggregate, aggregate_groups
from xltavg.policy import EvalRecord, SelectionStrategy, Split, select, selected_checkpoint
from xltavg.synth import (
    SHOT_SEEDS,
    DatasetSplit,
    LanguageSpec,
    Role,
    ShotSpec,
    generate_task,
    make_language,
    sample_shots,
)
from xltavg.trainer import (
    ModelParams,
    TrainConfig,
    accuracy_by_language,
    final_checkpoint,
    aligned_ensemble_curriculum,
    independent_runs,
    train_run,
)

log = logging.getLogger(__name__)

ZERO_SHOT, FEW_SHOT = "zero_shot", "few_shot"


@dataclass
class TaskSpec:
    """Parameters of the synthetic task; the first language is the source."""

    n_classes: int = 3
    feature_dim: int = 12
    languages: list[dict] = field(default_factory=lambda: [
        {"code": "en"},
        {"code": "de", "angle": 0.5, "offset": 0.5, "label_noise": 0.05},
        {"code": "sw", "angle": 1.0, "offset": 1.0, "label_noise": 0.1},
    ])
    sizes: dict[str, int] = field(default_factory=lambda: {
        "train": 400, "source_dev": 300, "target_dev": 300, "target_test": 1000,
    })
    seed: int = 7
    class_sep: float = 3.0
    # low-variance nuisance directions in the source become informative once a target rotates them in
    noise_scale: float | list[float] = field(default_factory=lambda: [1.0] * 3 + [0.1] * 9)

    def build(self) -> dict[Role, DatasetSplit]:
        langs: list[LanguageSpec] = []
        for i, entry in enumerate(self.languages):
            entry = dict(entry)
            code = entry.pop("code")
            if i == 0 and not entry:
                langs.append(LanguageSpec.identity(code, self.feature_dim))
            else:
                langs.append(make_language(code, self.feature_dim, seed=self.seed, **entry))
        return generate_task(self.n_classes, self.feature_dim, langs, self.sizes, self.seed,
                             class_sep=self.class_sep, noise_scale=self.noise_scale)


def _strategy_label(strategy: SelectionStrategy) -> str:
    return strategy.value.upper()


def _variant_label(variant: AveragingVariant) -> str:
    return variant.value.upper()


@dataclass
class ExperimentPlan:
    name: str = "experiment"
    mode: str = ZERO_SHOT
    seeds: list[int] = field(default_factory=lambda: [42, 43, 44, 45, 46])
    shots: list[int] = field(default_factory=lambda: [0])
    shot_seeds: list[int] = field(default_factory=lambda: list(SHOT_SEEDS))
    strategies: list[str] = field(default_factory=lambda: ["last", "src-dev", "trg-dev", "ca"])
    variants: list[str] = field(default_factory=list)
    ensemble_runs: int = 5
    # (peak_lr, scheduler on/off) per soup ingredient; divergent cells are left out by listing
    soup_grid: list[list] = field(default_factory=list)
    naive_ensembles: bool = False
    # seed of the source-language run that few-shot runs start from
    source_seed: int = 42
    grouping: str = "nested"
    train: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in (ZERO_SHOT, FEW_SHOT):
            raise ValueError(f"mode must be {ZERO_SHOT!r} or {FEW_SHOT!r}")
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        self.strategies = [SelectionStrategy(s).value for s in self.strategies]
        self.variants = [AveragingVariant(v).value for v in self.variants]
        if AveragingVariant.CA.value in self.variants:
            raise ValueError("'ca' is a selection strategy; list it under strategies")
        if self.mode == FEW_SHOT:
            if not self.shots or any(s < 1 for s in self.shots):
                raise ValueError("few-shot plans need shot counts >= 1")
            if any(v.startswith("soup") for v in self.variants):
                raise ValueError("soup variants are defined for zero-shot plans only")
        else:
            self.shots = [0]
        if self.ensemble_runs < 1:
            raise ValueError("ensemble_runs must be >= 1")
        if any(v.startswith("soup") for v in self.variants) and not self.soup_grid:
            raise ValueError("soup variants need a soup_grid")
        self.soup_grid = [[float(lr), bool(sched)] for lr, sched in self.soup_grid]
        if self.grouping not in ("nested", "pooled"):
            raise ValueError("grouping must be 'nested' or 'pooled'")
        TrainConfig.from_dict(self.train)

    def train_config(self, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, **changes})

    def task_spec(self) -> TaskSpec:
        return TaskSpec(**self.task)

    def resolved(self) -> dict:
        """The plan with every default filled in, including trainer and task settings."""
        out = dataclasses.asdict(self)
        out["train"] = self.train_config().to_dict()
        out["task"] = dataclasses.asdict(self.task_spec())
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ExperimentPlan":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**obj)


REFERENCE_PLANS = ("zs_lr_sweep", "zs_ensembles", "fs_reference")


def load_plans(path: str | os.PathLike) -> list[ExperimentPlan]:
    """A plan file holds one plan object or a list of them."""
    with open(path, encoding="utf-8") as fh:
        return parse_plans(json.load(fh))


def reference_plans(name: str) -> list[ExperimentPlan]:
    """Plans shipped with the package: zs_lr_sweep, zs_ensembles, fs_reference."""
    if name not in REFERENCE_PLANS:
        raise ValueError(f"unknown reference plan {name!r}; choose from {REFERENCE_PLANS}")
    text = resources.files("xltavg").joinpath("plans", f"{name}.json").read_text(encoding="utf-8")
    return parse_plans(json.loads(text))


def parse_plans(obj) -> list[ExperimentPlan]:
    items = obj if isinstance(obj, list) else [obj]
    plans = [ExperimentPlan.from_dict(item) for item in items]
    names = [p.name for p in plans]
    if len(set(names)) != len(names):
        raise ValueError("plan names within one file must be distinct")
    return plans


@dataclass(frozen=True)
class Row:
    strategy: str
    shots: int
    mean: float
    std: float


@dataclass
class ResultTable:
    rows: list[Row]
    plan: dict = field(default_factory=dict)
    reports: dict[tuple[str, int], MetricReport] = field(default_factory=dict)

    def __post_init__(self) -> None:
        keys = [(r.strategy, r.shots) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("one row per (strategy, shots) pair")
        self.rows = sorted(self.rows, key=lambda r: (r.strategy, r.shots))

    def row(self, strategy: str, shots: int = 0) -> Row:
        for r in self.rows:
            if r.strategy == strategy and r.shots == shots:
                return r
        raise KeyError((strategy, shots))

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "rows": [
                {"strategy": r.strategy, "shots": r.shots, "mean": _round(r.mean), "std": _round(r.std)}
                for r in self.rows
            ],
            "per_language": {
                f"{strategy}@{shots}": {
                    lang: [_round(v) for v in scores]
                    for lang, scores in sorted(report.per_language.items())
                }
                for (strategy, shots), report in sorted(self.reports.items())
            },
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ResultTable":
        rows = [Row(r["strategy"], int(r["shots"]), float(r["mean"]), float(r["std"])) for r in obj["rows"]]
        return cls(rows, plan=dict(obj.get("plan", {})))


def _round(x: float) -> float:
    return float(f"{x:.4f}")


CSV_COLUMNS = ("strategy", "shots", "mean", "std")


def table_to_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in table.rows:
        writer.writerow([r.strategy, r.shots, f"{r.mean:.4f}", f"{r.std:.4f}"])
    return buf.getvalue()


def table_to_json(table: ResultTable) -> str:
    return json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(table: ResultTable, destination: str | os.PathLike, format: str = "csv") -> None:
    """Write the table as CSV or JSON; rows sorted by (strategy, shots), 4 decimals."""
    if format == "csv":
        text = table_to_csv(table)
    elif format == "json":
        text = table_to_json(table)
    else:
        raise ValueError(f"unknown report format {format!r}")
    Path(destination).write_text(text, encoding="utf-8")


def _dev_records(run: SnapshotSet, source_dev: DatasetSplit, target_dev: DatasetSplit) -> list[EvalRecord]:
    records = []
    for step, ref in run.snapshots:
        params = ModelParams.from_checkpoint(ref)
        records.append(EvalRecord(step, Split.SOURCE_DEV, accuracy_by_language(params, source_dev)))
        records.append(EvalRecord(step, Split.TARGET_DEV, accuracy_by_language(params, target_dev)))
    return records


def _score_strategy(strategy: SelectionStrategy, run: SnapshotSet, records: list[EvalRecord],
                    test: DatasetSplit) -> dict[str, float]:
    selection = select(strategy, run, records)
    if strategy is SelectionStrategy.TRG_DEV:
        out = {}
        for lang in test.languages:
            model = ModelParams.from_checkpoint(selected_checkpoint(selection, lang))
            out.update(accuracy_by_language(model, test.for_language(lang)))
        return out
    return accuracy_by_language(selected_checkpoint(selection), test)


def _zero_shot(plan: ExperimentPlan, splits: dict[Role, DatasetSplit]) -> dict[str, MetricReport]:
    train, source_dev = splits[Role.TRAIN], splits[Role.SOURCE_DEV]
    target_dev, test = splits[Role.TARGET_DEV], splits[Role.TARGET_TEST]
    strategies = [SelectionStrategy(s) for s in plan.strategies]
    variants = [AveragingVariant(v) for v in plan.variants]
    want_ra = any(not v.value.startswith("soup") for v in variants)
    want_soup = any(v.value.startswith("soup") for v in variants)
    scores: dict[str, dict[int, dict[str, float]]] = {}

    for seed in plan.seeds:
        cfg = plan.train_config(seed=seed)
        single = train_run(cfg, train, run_id=f"seed{seed}")
        records = _dev_records(single, source_dev, target_dev)
        for strategy in strategies:
            scores.setdefault(_strategy_label(strategy), {})[seed] = _score_strategy(strategy, single, records, test)

        ensembles = soup = None
        if want_ra:
            if plan.naive_ensembles:
                ensembles = independent_runs(cfg, plan.ensemble_runs, train)
            else:
                ensembles = aligned_ensemble_curriculum(cfg, plan.ensemble_runs, train, anchor=single)
        if want_soup:
            head = None if plan.naive_ensembles else final_checkpoint(single)
            runs = []
            for j, (lr, scheduler) in enumerate(plan.soup_grid):
                soup_cfg = cfg.replace(seed=seed + 100 + j, peak_lr=lr, scheduler=scheduler,
                                       freeze_classifier_from=head)
                runs.append(train_run(soup_cfg, train, run_id=f"soup{j}-seed{seed}"))
            soup = RunSet(runs, anchor=single)
        for variant in variants:
            merged = average_runs(soup if variant.value.startswith("soup") else ensembles, variant)
            scores.setdefault(_variant_label(variant), {})[seed] = accuracy_by_language(merged, test)
    return {label: aggregate(per_seed) for label, per_seed in scores.items()}


def _few_shot(plan: ExperimentPlan, splits: dict[Role, DatasetSplit]) -> dict[tuple[str, int], MetricReport]:
    train, source_dev = splits[Role.TRAIN], splits[Role.SOURCE_DEV]
    target_pool, test = splits[Role.TARGET_DEV], splits[Role.TARGET_TEST]
    strategies = [SelectionStrategy(s) for s in plan.strategies]
    variants = [AveragingVariant(v) for v in plan.variants]

    source_run = train_run(plan.train_config(seed=plan.source_seed), train, run_id="source")
    source_checkpoint = final_checkpoint(source_run)

    reports = {}
    for shots in plan.shots:
        single: dict[str, dict[int, dict[int, dict[str, float]]]] = {}
        merged_scores: dict[str, dict[int, dict[str, float]]] = {}
        for shot_seed in plan.shot_seeds:
            shot_split, target_dev = sample_shots(target_pool, ShotSpec(shots, shot_seed))
            joint = DatasetSplit.concat([train, shot_split], Role.TRAIN)
            runs = []
            for seed in plan.seeds:
                cfg = plan.train_config(seed=seed, init_from=source_checkpoint)
                run = train_run(cfg, joint, run_id=f"s{shots}-set{shot_seed}-seed{seed}")
                runs.append(run)
                records = _dev_records(run, source_dev, target_dev)
                for strategy in strategies:
                    single.setdefault(_strategy_label(strategy), {}).setdefault(shot_seed, {})[seed] = (
                        _score_strategy(strategy, run, records, test)
                    )
            for variant in variants:
                merged = average_runs(RunSet(runs), variant)
                merged_scores.setdefault(_variant_label(variant), {})[shot_seed] = accuracy_by_language(merged, test)
        for label, per_group in single.items():
            reports[(label, shots)] = aggregate_groups(per_group, pooled=plan.grouping == "pooled")
        for label, per_group in merged_scores.items():
            # one merged model per shot set: spread is measured across shot sets
            reports[(label, shots)] = aggregate(per_group)
    return reports


def run_experiment(plan: ExperimentPlan) -> ResultTable:
    splits = plan.task_spec().build()
    if plan.mode == ZERO_SHOT:
        reports = {(label, 0): rep for label, rep in _zero_shot(plan, splits).items()}
    else:
        reports = _few_shot(plan, splits)
    rows = [Row(label, shots, rep.mean, rep.std) for (label, shots), rep in reports.items()]
    return ResultTable(rows, plan=plan.resolved(), reports=reports)


@dataclass(frozen=True)
class CurriculumTrial:
    seed: int
    frozen: float
    naive: float
    anchor: float


def compare_curriculum(plan: ExperimentPlan, repetitions: int = 20, seed_base: int = 1000,
                       seed_stride: int = 10) -> list[CurriculumTrial]:
    """RA-LAST from the classifier-freezing curriculum vs. from independent runs.

    Repetition i uses base seed ``seed_base + i * seed_stride``; both ensembles
    have ``plan.ensemble_runs`` members and are scored by mean target-test
    accuracy over languages.
    """
    splits = plan.task_spec().build()
    train, test = splits[Role.TRAIN], splits[Role.TARGET_TEST]

    def score(model) -> float:
        acc = accuracy_by_language(model, test)
        return sum(acc.values()) / len(acc)

    trials = []
    for i in range(repetitions):
        seed = seed_base + i * seed_stride
        cfg = plan.train_config(seed=seed)
        frozen = aligned_ensemble_curriculum(cfg, plan.ensemble_runs, train)
        naive = independent_runs(cfg, plan.ensemble_runs, train)
        trials.append(CurriculumTrial(
            seed,
            score(average_runs(frozen, AveragingVariant.RA_LAST)),
            score(average_runs(naive, AveragingVariant.RA_LAST)),
            score(frozen.anchor.last),
        ))
    return trials
