import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import all_binary_matrices, brute_force_metrics
from maskct.metrics import (
    ConfusionCounts,
    MetricsReport,
    accumulate,
    aggregate,
    aggregate_exact,
    binarize,
    class_precision_recall,
    report_emit,
)

KEYS = ("CP", "CR", "CF1", "OP", "OR", "OF1")


def pairs(n, k):
    return st.integers(1, 6).flatmap(
        lambda rows: st.tuples(
            arrays(np.int64, (rows, k), elements=st.integers(0, 1)),
            arrays(np.int64, (rows, k), elements=st.integers(0, 1)),
        )
    )


def test_binarize_rules():
    assert binarize([0.5, 0.5]).tolist() == [1, 1]
    assert binarize([0.2, 0.9999], 0.99999).tolist() == [0, 0]
    probs = np.random.default_rng(0).random(50)
    assert binarize(probs, 0.3).tolist() == [int(p >= 0.3) for p in probs]
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            binarize(probs, bad)


def test_accumulate_cells():
    c = accumulate([1, 0], [1, 0])
    assert c.tp.tolist() == [1, 0] and c.tn.tolist() == [0, 1]
    c = accumulate([1, 1], [0, 0])
    assert c.fn.tolist() == [1, 1]
    with pytest.raises(ValueError):
        accumulate([1, 0], [1, 0, 1])


def test_accumulate_brute_force(rng):
    t = rng.integers(0, 2, (100, 4))
    p = rng.integers(0, 2, (100, 4))
    c = accumulate(t, p)
    for i in range(4):
        cells = list(zip(t[:, i], p[:, i]))
        assert c.tp[i] == cells.count((1, 1)) and c.fp[i] == cells.count((0, 1))
        assert c.fn[i] == cells.count((1, 0)) and c.tn[i] == cells.count((0, 0))
    assert (c.samples == 100).all()


def test_precision_recall_examples(rng):
    c = ConfusionCounts(np.array([2, 0]), np.array([1, 0]), np.array([1, 3]), np.array([0, 1]))
    prec, rec = class_precision_recall(c)
    assert prec == [Fraction(2, 3), 0] and rec == [Fraction(2, 3), 0]
    tp, fp, fn = (rng.integers(1, 50, 20) for _ in range(3))
    prec, rec = class_precision_recall(ConfusionCounts(tp, fp, fn, np.zeros(20, int)))
    assert prec == [Fraction(int(a), int(a + b)) for a, b in zip(tp, fp)]
    assert rec == [Fraction(int(a), int(a + b)) for a, b in zip(tp, fn)]


def test_worked_example():
    ex = aggregate_exact([[1, 0], [1, 1]], [[1, 0], [0, 1]])
    assert ex["OP"] == Fraction(3, 4)
    assert ex["OR"] == Fraction(1)
    assert ex == {**ex, **{k: v for k, v in brute_force_metrics([[1, 0], [1, 1]], [[1, 0], [0, 1]]).items() if k in KEYS}}


@pytest.mark.parametrize("n,k", [(2, 2), (3, 2)])
def test_exhaustive_oracle_equivalence(n, k):
    checked = 0
    for truth in all_binary_matrices(n, k):
        for pred in all_binary_matrices(n, k):
            ex = aggregate_exact(truth, pred)
            bf = brute_force_metrics(truth, pred)
            for key in KEYS:
                assert ex[key] == bf[key], (truth, pred, key)
            assert ex["per_class_precision"] == bf["precision"]
            assert ex["per_class_recall"] == bf["recall"]
            checked += 1
    assert checked == 4 ** (n * k)


def test_perfect_predictions():
    t = [[1, 0, 1], [0, 1, 1]]
    ex = aggregate_exact(t, t)
    for key in ("CP", "CR", "CF1", "OP", "micro_precision", "micro_recall"):
        assert ex[key] == 1
    # the match count includes true negatives, so OR reaches 1 only without negatives
    assert ex["OR"] == Fraction(6, 4)
    assert aggregate_exact([[1, 1]], [[1, 1]])["OR"] == 1


def test_harmonic_mean_of_equals():
    # four perfect classes plus one with a TP, an FP and an FN: CP = CR = 9/10
    t = [[1, 1, 1, 1, 1], [0, 0, 0, 0, 1], [0, 0, 0, 0, 0]]
    p = [[1, 1, 1, 1, 0], [0, 0, 0, 0, 1], [0, 0, 0, 0, 1]]
    ex = aggregate_exact(t, p)
    assert ex["CP"] == ex["CR"] == Fraction(9, 10)
    assert ex["CF1"] == Fraction(9, 10)


def test_undefined_or_is_null():
    rep = aggregate([[0, 0]], [[0, 1]])
    assert rep.OR is None and rep.OF1 is None
    assert '"OR": null' in report_emit(rep)


def test_zero_threshold_extreme_gives_zero_recall():
    t = [[1, 0, 1], [1, 1, 0]]
    rep = aggregate(t, binarize(np.full((2, 3), 0.6), 0.999), 0.999)
    assert rep.micro_recall == 0 and rep.CR == 0


@given(pairs(6, 3))
def test_bounds(tp):
    t, p = tp
    ex = aggregate_exact(t, p)
    for key in ("CP", "CR", "CF1", "OP", "micro_precision", "micro_recall"):
        assert 0 <= ex[key] <= 1
    lo, hi = sorted((ex["CP"], ex["CR"]))
    assert lo <= ex["CF1"] <= hi
    if ex["OR"] is not None:
        assert ex["OR"] == Fraction(int((t == p).sum()), int(t.sum()))


@given(pairs(6, 3), arrays(np.int64, 3, elements=st.integers(0, 1)))
def test_op_monotone_under_correct_sample(tp, extra):
    t, p = tp
    before = aggregate_exact(t, p)["OP"]
    after = aggregate_exact(np.vstack([t, extra]), np.vstack([p, extra]))["OP"]
    assert after >= before


@given(pairs(6, 3), pairs(6, 3))
def test_merge_associative_commutative(a, b):
    ca, cb = accumulate(*a), accumulate(*b)
    whole = accumulate(np.vstack([a[0], b[0]]), np.vstack([a[1], b[1]]))
    for x in (ca + cb, cb.merge(ca), accumulate(*b, counts=ca)):
        for f in ("tp", "fp", "fn", "tn"):
            assert getattr(x, f).tolist() == getattr(whole, f).tolist()


def test_per_entry_variant_is_literal_double_sum(rng):
    t = rng.integers(0, 2, (5, 3))
    p = rng.integers(0, 2, (5, 3))
    ex = aggregate_exact(t, p, class_average="per_entry")
    total = Fraction(0)
    for r in range(5):
        for i in range(3):
            tp = int(t[r, i] == 1 and p[r, i] == 1)
            fp = int(t[r, i] == 0 and p[r, i] == 1)
            total += Fraction(tp, tp + fp) if tp + fp else 0
    assert ex["CP"] == total / 15
    with pytest.raises(ValueError):
        aggregate_exact(t, p, class_average="weighted")


def test_report_emission_round_trip():
    rep = aggregate([[1, 0], [1, 1]], [[1, 0], [0, 1]], 0.5, ["a", "b"], dataset="toy")
    text = report_emit(rep)
    assert text == report_emit(rep) and text.endswith("\n")
    parsed = json.loads(text)
    assert list(parsed)[:4] == ["dataset", "config_hash", "samples", "classes"]
    assert MetricsReport.from_dict(parsed) == rep
    assert parsed["threshold"] == 0.5 and parsed["dataset"] == "toy"
    assert parsed["OP"] == 0.75 and parsed["OR"] == 1.0


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        aggregate_exact(np.zeros((0, 2)), np.zeros((0, 2)))
