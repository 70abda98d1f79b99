"""Command-line interface.

Exit status: 0 on success, 1 on validation errors (bad input, malformed
checkpoint or plan), 2 on I/O errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from xltavg import kernels
from xltavg.averaging import AveragingVariant, SnapshotSet, average
from xltavg.harness import (
    REFERENCE_PLANS,
    ExperimentPlan,
    ResultTable,
    TaskSpec,
    emit_report,
    load_plans,
    reference_plans,
    run_experiment,
    table_to_csv,
    table_to_json,
)
from xltavg.policy import EvalRecord, SelectionStrategy, Snapshot, Split, read_records, select
from xltavg.synth import DatasetSplit, Role
from xltavg.tensorstore import Checkpoint, open_checkpoint, write_checkpoint
from xltavg.trainer import MANIFEST, ModelParams, TrainConfig, accuracy_by_language, load_run, train_run

log = logging.getLogger("xltavg")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _load_run_or_files(inputs: list[str]) -> SnapshotSet:
    """One run directory/manifest, or a list of checkpoint files taken as one run in the given order."""
    if len(inputs) == 1 and (Path(inputs[0]).is_dir() or inputs[0].endswith(".json")):
        return load_run(inputs[0])
    refs = [open_checkpoint(p) for p in inputs]
    return SnapshotSet("files", len(refs), list(zip(range(1, len(refs) + 1), refs)))


def cmd_generate(args) -> int:
    task = TaskSpec(**json.loads(Path(args.task).read_text())) if args.task else TaskSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for role, split in task.build().items():
        split.to_jsonl(out / f"{role.value}.jsonl")
    (out / "task.json").write_text(json.dumps(dataclasses.asdict(task), indent=2) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    data = DatasetSplit.from_jsonl(args.data, Role.TRAIN, n_classes=args.n_classes)
    run = train_run(config, data, out_dir=args.out, run_id=args.run_id)
    print(json.dumps({"run_id": run.run_id, "steps": run.steps, "manifest": str(Path(args.out) / MANIFEST)}))
    return EXIT_OK


def cmd_avg(args) -> int:
    variant = AveragingVariant(args.variant)
    if variant is AveragingVariant.CA:
        runs = [_load_run_or_files(args.inputs)]
    else:
        runs = [load_run(p) for p in args.inputs]
    write_checkpoint(average(variant, runs), args.output)
    return EXIT_OK


def _evaluate(model, data: DatasetSplit) -> dict[str, float]:
    return accuracy_by_language(ModelParams.from_checkpoint(model), data)


def cmd_eval(args) -> int:
    data = DatasetSplit.from_jsonl(args.data, args.split, n_classes=args.n_classes)
    split = Split(args.split)
    if args.run:
        run = load_run(args.run)
        records = [EvalRecord(step, split, _evaluate(ref, data)) for step, ref in run.snapshots]
    else:
        with open_checkpoint(args.checkpoint) as ref:
            records = [EvalRecord(args.step, split, _evaluate(ref, data))]
    text = "".join(rec.to_json() + "\n" for rec in records)
    if args.output:
        with open(args.output, "a", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_select(args) -> int:
    strategy = SelectionStrategy(args.strategy)
    run = load_run(args.run)
    records = read_records(args.records) if args.records else []
    result = select(strategy, run, records)
    if isinstance(result, Checkpoint):
        if not args.output:
            raise ValueError("--strategy ca needs -o/--output for the averaged checkpoint")
        write_checkpoint(result, args.output)
        summary = {"strategy": strategy.value, "output": args.output, "steps": run.steps}
    elif isinstance(result, Snapshot):
        summary = {"strategy": strategy.value, "step": result.step, "checkpoint": result.ref.source}
    else:
        summary = {
            "strategy": strategy.value,
            "per_language": {lang: {"step": snap.step, "checkpoint": snap.ref.source} for lang, snap in result.items()},
        }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _plans_from_arg(spec: str) -> list[ExperimentPlan]:
    if spec.startswith("reference:"):
        return reference_plans(spec.split(":", 1)[1])
    return load_plans(spec)


def cmd_experiment(args) -> int:
    plans = _plans_from_arg(args.plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for plan in plans:
        log.info("running plan %s", plan.name)
        tables.append((plan, run_experiment(plan)))
    # nothing is written until every plan succeeded
    for plan, table in tables:
        for fmt in args.format:
            emit_report(table, out / f"{plan.name}.{fmt}", fmt)
        sys.stdout.write(f"# {plan.name}\n{table_to_csv(table)}")
    return EXIT_OK


def cmd_report(args) -> int:
    table = ResultTable.from_dict(json.loads(Path(args.result).read_text()))
    text = table_to_csv(table) if args.format == "csv" else table_to_json(table)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xltavg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s 0.1.0 (kernels: {kernels.BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic task splits as JSONL")
    p.add_argument("--task", help="TaskSpec JSON (default: the reference task)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one run and write its snapshots")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", required=True, help="training examples, JSONL")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--run-id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("avg", help="average checkpoints within or across runs")
    p.add_argument("--variant", required=True, choices=[v.value for v in AveragingVariant])
    p.add_argument("inputs", nargs="+", help="run directories (or checkpoint files for ca)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_avg)

    p = sub.add_parser("eval", help="score checkpoints; emits eval records as JSONL")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--checkpoint")
    target.add_argument("--run", help="run directory: score every snapshot")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=[s.value for s in Split])
    p.add_argument("--step", type=int, default=0, help="step recorded for a single --checkpoint")
    p.add_argument("--n-classes", type=int)
    p.add_argument("-o", "--output", help="append records here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", help="apply a model-selection strategy to a run")
    p.add_argument("--strategy", required=True, choices=[s.value for s in SelectionStrategy])
    p.add_argument("--run", required=True)
    p.add_argument("--records", help="eval records JSONL (needed by src-dev and trg-dev)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("experiment", help="run an experiment plan and write its report")
    p.add_argument("--plan", required=True,
                   help=f"plan JSON, or reference:NAME with NAME in {', '.join(REFERENCE_PLANS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--format", nargs="+", choices=["csv", "json"], default=["csv", "json"])
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render a JSON result as CSV or JSON")
    p.add_argument("result")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"xltavg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"xltavg: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
