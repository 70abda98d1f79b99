"""Task metrics and aggregation of per-seed scores into mean/std reports."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence


def _check_lengths(pred: Sequence, gold: Sequence) -> None:
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(gold)} gold labels")


def accuracy(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> float:
    _check_lengths(pred, gold)
    if not gold:
        raise ValueError("cannot score empty sequences")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def token_f1(pred: Sequence[Hashable], gold: Sequence[Hashable], ignore_outside: bool = False,
             outside: Hashable = "O") -> float:
    """Micro-averaged token F1.

    With ``ignore_outside`` (NER), only tokens labelled something other than
    ``outside`` count as positives; a pair with no positives on either side
    scores 1.0. Without it (POS), every token is a positive and the score
    equals accuracy.
    """
    _check_lengths(pred, gold)
    if not gold:
        raise ValueError("cannot score empty sequences")
    if not ignore_outside:
        return accuracy(pred, gold)
    tp = sum(p == g and g != outside for p, g in zip(pred, gold))
    n_pred = sum(p != outside for p in pred)
    n_gold = sum(g != outside for g in gold)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if tp == 0:
        return 0.0
    return 2 * tp / (n_pred + n_gold)


def span_f1(pred: Sequence[str], gold: Sequence[str]) -> float:
    """Bag-of-tokens overlap F1 between a predicted and a gold answer span."""
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    return 2 * common / (len(pred) + len(gold))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std of a single value is 0."""
    if not values:
        raise ValueError("no values")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


@dataclass
class MetricReport:
    per_language: dict[str, list[float]]
    mean: float
    std: float
    # language mean of each seed (or of each group when aggregated over groups)
    run_means: list[float]

    def language_stats(self) -> dict[str, tuple[float, float]]:
        return {lang: mean_std(scores) for lang, scores in sorted(self.per_language.items())}

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "run_means": self.run_means,
            "per_language": {k: v for k, v in sorted(self.per_language.items())},
        }


def aggregate(per_seed: Mapping[Hashable, Mapping[str, float]]) -> MetricReport:
    """Average over languages within each seed, then mean and sample std across seeds."""
    if not per_seed:
        raise ValueError("no seeds to aggregate")
    seeds = sorted(per_seed, key=repr)
    languages = set(per_seed[seeds[0]])
    if not languages:
        raise ValueError("no languages scored")
    for seed in seeds:
        if set(per_seed[seed]) != languages:
            raise ValueError(f"seed {seed!r} covers {sorted(per_seed[seed])}, expected {sorted(languages)}")
    run_means = [math.fsum(per_seed[s].values()) / len(languages) for s in seeds]
    mean, std = mean_std(run_means)
    per_language = {lang: [float(per_seed[s][lang]) for s in seeds] for lang in sorted(languages)}
    return MetricReport(per_language, mean, std, run_means)


def aggregate_groups(per_group: Mapping[Hashable, Mapping[Hashable, Mapping[str, float]]],
                     pooled: bool = False) -> MetricReport:
    """Aggregate runs nested as group (e.g. shot set) -> seed -> language -> score.

    By default each group is aggregated over its seeds and the report carries
    the mean of group means and the mean of group stds. With ``pooled`` every
    (group, seed) pair counts as one run.
    """
    if not per_group:
        raise ValueError("no groups to aggregate")
    if pooled:
        flat = {(repr(g), repr(s)): scores for g, seeds in per_group.items() for s, scores in seeds.items()}
        return aggregate(flat)
    reports = [aggregate(per_group[g]) for g in sorted(per_group, key=repr)]
    languages = set(reports[0].per_language)
    if any(set(r.per_language) != languages for r in reports):
        raise ValueError("groups cover different languages")
    per_language = {lang: [v for r in reports for v in r.per_language[lang]] for lang in sorted(languages)}
    return MetricReport(
        per_language,
        math.fsum(r.mean for r in reports) / len(reports),
        math.fsum(r.std for r in reports) / len(reports),
        [r.mean for r in reports],
    )


REPORT_COLUMNS = ("strategy", "shots", "language", "mean", "std")


def report_rows(report: MetricReport, strategy: str, shots: int) -> list[tuple[str, int, str, float, float]]:
    """Per-language rows plus an ``avg`` row carrying the report's mean and std."""
    rows = [(strategy, shots, lang, m, s) for lang, (m, s) in report.language_stats().items()]
    rows.append((strategy, shots, "avg", report.mean, report.std))
    return rows


def reports_to_csv(rows: Sequence[tuple[str, int, str, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for strategy, shots, lang, m, s in sorted(rows, key=lambda r: (r[0], r[1], r[2])):
        writer.writerow([strategy, shots, lang, f"{m:.4f}", f"{s:.4f}"])
    return buf.getvalue()


def reports_to_json(rows: Sequence[tuple[str, int, str, float, float]]) -> str:
    out = [dict(zip(REPORT_COLUMNS, (st, sh, lg, round(m, 4), round(s, 4))))
           for st, sh, lg, m, s in sorted(rows, key=lambda r: (r[0], r[1], r[2]))]
    return json.dumps(out, indent=2) + "\n"
