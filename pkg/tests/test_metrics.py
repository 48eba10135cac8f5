import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deforest_cd.metrics import (
    ConfusionCounts,
    UndefinedMetric,
    accumulate,
    format_table,
    kappa,
    kappa_binary,
    metric_suite,
    report_json,
)
from deforest_cd.errors import ShapeError
from oracles import kappa_textbook_binary, metrics_closed_form

counts = st.builds(
    ConfusionCounts,
    st.integers(0, 10_000),
    st.integers(0, 10_000),
    st.integers(0, 10_000),
    st.integers(0, 10_000),
)


def test_fixture_3_1_94_2():
    m = metric_suite(ConfusionCounts(tp=3, fp=1, tn=94, fn=2))
    assert m["accuracy"] == pytest.approx(0.97)
    assert m["precision"] == pytest.approx(0.75)
    assert m["recall"] == pytest.approx(0.6)
    assert m["f1"] == pytest.approx(2 / 3)
    assert m["iou"] == pytest.approx(0.5)
    # P_o = 0.97, P_e = 0.04*0.05 + 0.96*0.95
    pe = 0.04 * 0.05 + 0.96 * 0.95
    assert m["kappa"] == pytest.approx((0.97 - pe) / (1 - pe))


def test_fixture_all_ones_and_chance():
    assert kappa(ConfusionCounts(1, 1, 1, 1)) == 0.0
    m = metric_suite(ConfusionCounts(2, 0, 2, 0))
    assert all(v == 1.0 for v in m.values())


def test_undefined_metrics_are_tagged_nan():
    m = metric_suite(ConfusionCounts(0, 0, 10, 0))
    assert isinstance(m["precision"], UndefinedMetric)
    assert math.isnan(m["f1"])
    assert m["f1"].metric == "f1"
    assert m["accuracy"] == 1.0
    assert isinstance(kappa(ConfusionCounts()), UndefinedMetric)


def test_counts_validation_and_sum():
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        ConfusionCounts(1.5, 0, 0, 0)
    total = sum([ConfusionCounts(1, 2, 3, 4), ConfusionCounts(1, 1, 1, 1)])
    assert total == ConfusionCounts(2, 3, 4, 5)


def test_accumulate_matches_manual_count():
    rng = np.random.default_rng(3)
    p = rng.random((20, 30)) > 0.5
    t = rng.random((20, 30)) > 0.7
    c = accumulate(p, t)
    assert (c.tp, c.fp, c.tn, c.fn) == (
        int((p & t).sum()),
        int((p & ~t).sum()),
        int((~p & ~t).sum()),
        int((~p & t).sum()),
    )
    with pytest.raises(ShapeError):
        accumulate(p, t[:-1])


@given(counts)
def test_metrics_match_closed_form(c):
    ours = metric_suite(c)
    ref = metrics_closed_form(c.tp, c.fp, c.tn, c.fn)
    for k, v in ref.items():
        if v is None:
            assert isinstance(ours[k], UndefinedMetric)
        else:
            assert ours[k] == pytest.approx(v, abs=1e-12)


@given(counts)
def test_kappa_forms_agree(c):
    a, b = kappa(c), kappa_binary(c)
    if isinstance(a, UndefinedMetric):
        assert isinstance(b, UndefinedMetric)
        assert kappa_textbook_binary(c.tp, c.fp, c.tn, c.fn) is None
    else:
        assert a == pytest.approx(b, abs=1e-12)
        assert a == pytest.approx(kappa_textbook_binary(c.tp, c.fp, c.tn, c.fn), abs=1e-12)


@given(counts, counts)
def test_pooled_counts_are_additive(a, b):
    s = a + b
    assert s.total == a.total + b.total
    assert (s.tp, s.fp, s.tn, s.fn) == (a.tp + b.tp, a.fp + b.fp, a.tn + b.tn, a.fn + b.fn)
    assert sum([a, b]) == s


def test_table_and_json_rendering():
    rows = {"m1": (0.45, metric_suite(ConfusionCounts(3, 1, 94, 2))), "ens": (None, metric_suite(ConfusionCounts(0, 0, 5, 0)))}
    table = format_table(rows)
    assert "F1-Score" in table and "66.67" in table and "n/a" in table
    doc = json.loads(report_json(rows, {"m1": ConfusionCounts(3, 1, 94, 2)}))
    assert doc["m1"]["counts"]["tp"] == 3
    assert doc["ens"]["f1"] is None and "f1_undefined" in doc["ens"]
