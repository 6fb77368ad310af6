import csv
import io

import numpy as np
import pytest

from dce.engine import DceConfig, run_dce
from dce.metrics import (
    EvalSnapshot,
    MetricsLedger,
    accuracy_matrix_csv,
    build_report,
    cpd,
    cpd_summary,
    cpd_values,
    dump_report,
    evaluate_snapshot,
    group_accuracy,
    ledger_from_report,
)
from dce.model import TrainConfig


def test_perfect_predictor(small_stream):
    lookup = {}
    for task in small_stream.tasks:
        for x, y in zip(task.test.features, task.test.labels):
            lookup[x.tobytes()] = y
    snap = evaluate_snapshot(lambda X: [lookup[x.tobytes()] for x in X], small_stream, 3)
    assert snap.A_b == 1.0
    assert set(snap.per_class.values()) == {1.0}


def test_constant_predictor_is_one_over_c(small_stream):
    snap = evaluate_snapshot(lambda X: np.zeros(len(X), int), small_stream, 3)
    assert snap.A_b == pytest.approx(1 / small_stream.num_classes, abs=1e-15)


def test_first_stage_covers_first_domain(small_stream):
    snap = evaluate_snapshot(lambda X: np.zeros(len(X), int), small_stream, 1)
    assert snap.domains() == [1]
    assert evaluate_snapshot(lambda X: np.zeros(len(X), int), small_stream, 2).domains() == [1, 2]


def snap(stage, accs, n=10):
    per_class = dict(accs)
    return EvalSnapshot(stage, per_class, {k: n for k in per_class}, float(np.mean(list(per_class.values()))))


def test_group_accuracy_examples():
    s = snap(1, {(1, 0): 0.5, (1, 1): 0.5, (1, 2): 0.5})
    groups = {(1, 0): "many", (1, 1): "medium", (1, 2): "few"}
    assert group_accuracy(s, groups) == {"many": 0.5, "medium": 0.5, "few": 0.5}
    s = snap(1, {(1, 0): 0.9, (1, 1): 0.3})
    out = group_accuracy(s, {(1, 0): "many", (1, 1): "few"})
    assert out["many"] == 0.9 and out["few"] == 0.3 and out["medium"] is None


def two_stage_ledger(a1, a2, groups):
    return MetricsLedger([snap(1, a1), snap(2, a2)], groups, (20, 100))


def test_cpd_sign_convention():
    groups = {(1, 0): "many", (1, 1): "few", (2, 0): "many", (2, 1): "few"}
    led = two_stage_ledger(
        {(1, 0): 0.8, (1, 1): 0.4},
        {(1, 0): 0.6, (1, 1): 0.7, (2, 0): 0.5, (2, 1): 0.5},
        groups,
    )
    assert cpd(led, 1, 0) == pytest.approx(0.2, abs=1e-15)  # degradation
    assert cpd(led, 1, 1) == pytest.approx(-0.3, abs=1e-15)  # improvement
    assert cpd(led, 2, 0) == 0.0 and cpd(led, 2, 1) == 0.0
    with pytest.raises(KeyError):
        cpd(led, 3, 0)


def test_cpd_unchanged_is_zero():
    led = two_stage_ledger({(1, 0): 0.7}, {(1, 0): 0.7, (2, 0): 0.1}, {(1, 0): "few", (2, 0): "few"})
    assert cpd(led, 1, 0) == 0.0
    summary = cpd_summary(led)
    assert summary["few"] == {"mean": 0.0, "var": 0.0, "count": 1}


def test_cpd_summary_mean_and_population_variance():
    groups = {(1, 0): "many", (1, 1): "many", (2, 0): "many", (2, 1): "many"}
    led = two_stage_ledger(
        {(1, 0): 0.9, (1, 1): 0.8},
        {(1, 0): 0.8, (1, 1): 0.5, (2, 0): 0.5, (2, 1): 0.5},
        groups,
    )
    s = cpd_summary(led)
    assert s["many"]["mean"] == pytest.approx(0.2, abs=1e-15)
    assert s["many"]["var"] == pytest.approx(0.01, abs=1e-15)
    assert s["few"] == {"mean": None, "var": None, "count": 0}


def test_cpd_overall_is_count_weighted_group_mean(small_stream, fast_cfg):
    led = run_dce(small_stream, fast_cfg).ledger
    s = cpd_summary(led)
    parts = [(v["mean"], v["count"]) for k, v in s.items() if k != "all" and v["count"]]
    weighted = sum(m * n for m, n in parts) / sum(n for _, n in parts)
    assert s["all"]["mean"] == pytest.approx(weighted, abs=1e-12)
    assert s["all"]["count"] == len(cpd_values(led))
    # pairs of the final domain never enter the aggregate
    assert all(dom < led.num_stages for dom, _ in cpd_values(led))


@pytest.fixture(scope="module")
def dce_report(small_stream):
    cfg = DceConfig(K=16, train=TrainConfig(epochs_stage1=3, epochs_stage2=2, batch_size=32, seed=1))
    return run_dce(small_stream, cfg)


def test_report_invariants(dce_report):
    rep = dce_report.report()
    assert rep["A_bar"] == pytest.approx(np.mean([s["A_b"] for s in rep["stages"]]), abs=1e-12)
    assert rep["A_B"] == rep["stages"][-1]["A_b"]
    assert len(rep["stages"]) == 3
    for st in rep["stages"]:
        assert {e["domain"] for e in st["per_class"]} == set(range(1, st["b"] + 1))
        assert all(0.0 <= e["acc"] <= 1.0 for e in st["per_class"])
    final = dce_report.ledger.snapshots[-1]
    assert all(cpd(dce_report.ledger, 3, c) == 0.0 for (d, c) in final.per_class if d == 3)


def test_group_accuracy_reconciles_with_pooled(dce_report):
    led = dce_report.ledger
    final = led.snapshots[-1]
    num = den = 0.0
    for key, acc in final.per_class.items():
        if led.groups.get(key) in ("many", "medium", "few"):
            num += acc * final.counts[key]
            den += final.counts[key]
    # every tested pair is grouped in the fixture, so the sample-weighted
    # group accuracy is the pooled accuracy
    assert den == sum(final.counts.values())
    assert num / den == pytest.approx(final.A_b, abs=1e-12)


def test_report_reemission_byte_identical(dce_report):
    rep = dce_report.report()
    text = dump_report(rep)
    assert dump_report(dce_report.report()) == text
    led = ledger_from_report(rep)
    again = build_report(rep["method"], rep["seed"], rep["config"], led)
    assert dump_report(again) == text


def test_accuracy_matrix_csv(dce_report):
    led = dce_report.ledger
    rows = list(csv.reader(io.StringIO(accuracy_matrix_csv(led))))
    assert rows[0] == ["domain", "class", "group", "a_1", "a_2", "a_3", "cpd"]
    body = rows[1:]
    assert len(body) == len(led.snapshots[-1].per_class)
    for row in body:
        dom, c = int(row[0]), int(row[1])
        accs = row[3:-1]
        # a pair is unevaluated before its domain arrives
        assert all(a == "" for a in accs[: dom - 1]) and all(a != "" for a in accs[dom - 1 :])
        assert float(row[-1]) == pytest.approx(cpd(led, dom, c), abs=1e-15)
