import json
import math

import pytest
from hypothesis import given, strategies as st

from xltavg.metrics import (
    REPORT_COLUMNS,
    accuracy,
    aggregate,
    aggregate_groups,
    mean_std,
    report_rows,
    reports_to_csv,
    reports_to_json,
    span_f1,
    token_f1,
)


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 1, 1]) == 2 / 3
    assert accuracy([1, 2], [1, 2]) == 1.0
    assert accuracy([1, 2], [3, 4]) == 0.0
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_token_f1_examples():
    assert token_f1(["B", "O", "I"], ["B", "I", "I"], ignore_outside=True) == 0.8
    assert token_f1(["O", "O"], ["O", "O"], ignore_outside=True) == 1.0
    assert token_f1(["O", "O"], ["B", "O"], ignore_outside=True) == 0.0
    assert token_f1(["X", "-"], ["X", "X"], ignore_outside=True, outside="-") == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        token_f1(["O"], ["O", "O"])


labels = st.sampled_from(["O", "B-PER", "I-PER", "B-LOC"])


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=30))
def test_pos_mode_equals_accuracy(pairs):
    pred, gold = zip(*pairs)
    assert token_f1(pred, gold) == accuracy(pred, gold)


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=30))
def test_token_f1_range(pairs):
    pred, gold = zip(*pairs)
    assert 0.0 <= token_f1(pred, gold, ignore_outside=True) <= 1.0
    assert token_f1(gold, gold, ignore_outside=True) == 1.0


def test_span_f1_examples():
    assert span_f1(["a", "b", "c"], ["b", "c", "d"]) == 2 / 3
    assert span_f1(["x", "y"], ["x", "y"]) == 1.0
    assert span_f1([], ["x"]) == 0.0
    assert span_f1(["x"], []) == 0.0
    assert span_f1([], []) == 1.0
    assert span_f1(["a", "a", "b"], ["a", "b", "b"]) == 2 / 3


tokens = st.lists(st.sampled_from("abcde"), max_size=8)


@given(tokens, tokens)
def test_span_f1_symmetric_and_bounded(a, b):
    assert span_f1(a, b) == span_f1(b, a)
    assert 0.0 <= span_f1(a, b) <= 1.0
    assert (span_f1(a, b) == 1.0) == (sorted(a) == sorted(b))


def test_mean_std_conventions():
    assert mean_std([1, 2, 3]) == (2.0, 1.0)
    assert mean_std([0.7]) == (0.7, 0.0)
    with pytest.raises(ValueError):
        mean_std([])


def test_aggregate_examples():
    rep = aggregate({1: {"a": 1.0}, 2: {"a": 2.0}, 3: {"a": 3.0}})
    assert (rep.mean, rep.std) == (2.0, 1.0)
    single = aggregate({42: {"a": 0.4, "b": 0.6}})
    assert single.run_means == [0.5] and single.std == 0.0
    with pytest.raises(ValueError):
        aggregate({1: {"a": 1.0}, 2: {"b": 1.0}})
    with pytest.raises(ValueError):
        aggregate({})


@given(st.dictionaries(st.integers(0, 100), st.fixed_dictionaries({"a": st.floats(0, 1), "b": st.floats(0, 1)}),
                       min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_aggregate_invariant_under_relabeling(per_seed, rnd):
    keys = list(per_seed)
    new = keys[:]
    rnd.shuffle(new)
    relabeled = {n: per_seed[k] for k, n in zip(keys, new)}
    a, b = aggregate(per_seed), aggregate(relabeled)
    assert a.mean == pytest.approx(b.mean, abs=1e-12)
    assert a.std == pytest.approx(b.std, abs=1e-12)
    assert a.std >= 0


def test_aggregate_groups_nested_and_pooled():
    groups = {
        "s1": {1: {"a": 0.1}, 2: {"a": 0.3}},
        "s2": {1: {"a": 0.5}, 2: {"a": 0.9}},
    }
    nested = aggregate_groups(groups)
    assert nested.mean == pytest.approx((0.2 + 0.7) / 2)
    assert nested.std == pytest.approx((math.sqrt(0.02) + math.sqrt(0.08)) / 2)
    assert nested.run_means == pytest.approx([0.2, 0.7])
    pooled = aggregate_groups(groups, pooled=True)
    assert pooled.mean == pytest.approx(0.45)
    assert pooled.std == pytest.approx(mean_std([0.1, 0.3, 0.5, 0.9])[1])
    with pytest.raises(ValueError):
        aggregate_groups({})


def test_report_rows_and_outputs():
    rep = aggregate({1: {"de": 0.5, "sw": 0.7}, 2: {"de": 0.7, "sw": 0.9}})
    rows = report_rows(rep, "CA", 0)
    assert [r[2] for r in rows] == ["de", "sw", "avg"]
    text = reports_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert "CA,0,avg,0.7000,0.1414" in lines
    assert json.loads(reports_to_json(rows))[0] == {"strategy": "CA", "shots": 0, "language": "avg",
                                                   "mean": 0.7, "std": 0.1414}
    assert reports_to_csv([]) == ",".join(REPORT_COLUMNS) + "\n"
    assert rep.to_dict()["per_language"] == {"de": [0.5, 0.7], "sw": [0.7, 0.9]}
