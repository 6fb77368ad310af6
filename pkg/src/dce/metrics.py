"""Stage accuracies, frequency-group accuracies and Class Performance Drift.

CPD of class ``c`` first learned in domain ``b`` is ``a_b - a_B``: its
accuracy right after training on ``b`` minus its accuracy after the final
domain.  Positive values mean the class degraded, negative that it improved.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import GROUPS, TaskStream

REPORT_GROUP_KEYS = {"many": "many", "medium": "med", "few": "few"}


@dataclass
class EvalSnapshot:
    stage: int
    per_class: dict[tuple[int, int], float]
    counts: dict[tuple[int, int], int]
    A_b: float

    def domains(self) -> list[int]:
        return sorted({dom for dom, _ in self.per_class})


@dataclass
class MetricsLedger:
    snapshots: list[EvalSnapshot] = field(default_factory=list)
    groups: dict[tuple[int, int], str] = field(default_factory=dict)
    thresholds: tuple[int, int] = (20, 100)

    @property
    def num_stages(self) -> int:
        return len(self.snapshots)


def evaluate_snapshot(predict, stream: TaskStream, b: int) -> EvalSnapshot:
    """Accuracy of ``predict`` on the balanced test sets of domains ``1..b``.

    ``predict`` maps an (n, d) feature array to n class indices.
    """
    per_class, counts = {}, {}
    correct = total = 0
    for task in stream.tasks[:b]:
        test = task.test
        if len(test) == 0:
            continue
        hits = np.asarray(predict(test.features)) == test.labels
        correct += int(hits.sum())
        total += hits.size
        for c in range(test.num_classes):
            mask = test.labels == c
            n = int(mask.sum())
            if n:
                per_class[(task.index, c)] = float(hits[mask].mean())
                counts[(task.index, c)] = n
    A_b = correct / total if total else float("nan")
    return EvalSnapshot(b, per_class, counts, A_b)


def group_accuracy(snapshot: EvalSnapshot, groups) -> dict[str, float | None]:
    """Mean per-(domain, class) accuracy within each frequency group; ``None`` if empty."""
    out = {}
    for g in GROUPS:
        accs = [a for key, a in sorted(snapshot.per_class.items()) if groups.get(key) == g]
        out[g] = float(np.mean(accs)) if accs else None
    return out


def cpd(ledger: MetricsLedger, b: int, c: int) -> float:
    if not 1 <= b <= ledger.num_stages:
        raise KeyError(f"no snapshot for stage {b}")
    return ledger.snapshots[b - 1].per_class[(b, c)] - ledger.snapshots[-1].per_class[(b, c)]


def cpd_values(ledger: MetricsLedger) -> dict[tuple[int, int], float]:
    """CPD of every grouped pair from domains before the last one."""
    B = ledger.num_stages
    first = {}
    for snap in ledger.snapshots[: B - 1]:
        for (dom, c) in snap.per_class:
            if dom == snap.stage:
                first[(dom, c)] = cpd(ledger, dom, c)
    return {k: v for k, v in sorted(first.items()) if ledger.groups.get(k) in GROUPS}


def _mean_var(values) -> dict:
    if not values:
        return {"mean": None, "var": None, "count": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "var": float(arr.var()), "count": int(arr.size)}


def cpd_summary(ledger: MetricsLedger) -> dict[str, dict]:
    """Mean and population variance of CPD per group and over all grouped pairs."""
    values = cpd_values(ledger)
    out = {}
    for g in GROUPS:
        out[REPORT_GROUP_KEYS[g]] = _mean_var([v for k, v in values.items() if ledger.groups[k] == g])
    out["all"] = _mean_var(list(values.values()))
    return out


def build_report(method: str, seed: int, config: dict, ledger: MetricsLedger) -> dict:
    final = ledger.snapshots[-1]
    groups = group_accuracy(final, ledger.groups)
    stages = []
    for snap in ledger.snapshots:
        stages.append(
            {
                "b": snap.stage,
                "A_b": snap.A_b,
                "per_class": [
                    {"domain": dom, "class": c, "acc": acc, "n": snap.counts[(dom, c)]}
                    for (dom, c), acc in sorted(snap.per_class.items())
                ],
            }
        )
    return {
        "method": method,
        "seed": seed,
        "config": config,
        "thresholds": list(ledger.thresholds),
        "groups": [
            {"domain": dom, "class": c, "group": g} for (dom, c), g in sorted(ledger.groups.items())
        ],
        "stages": stages,
        "A_bar": float(np.mean([s.A_b for s in ledger.snapshots])),
        "A_B": final.A_b,
        "A_many": groups["many"],
        "A_med": groups["medium"],
        "A_few": groups["few"],
        "cpd": cpd_summary(ledger),
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"


def ledger_from_report(report: dict) -> MetricsLedger:
    snaps = []
    for st in report["stages"]:
        per_class = {(e["domain"], e["class"]): e["acc"] for e in st["per_class"]}
        counts = {(e["domain"], e["class"]): e["n"] for e in st["per_class"]}
        snaps.append(EvalSnapshot(st["b"], per_class, counts, st["A_b"]))
    groups = {(e["domain"], e["class"]): e["group"] for e in report["groups"]}
    return MetricsLedger(snaps, groups, tuple(report["thresholds"]))


def accuracy_matrix_csv(ledger: MetricsLedger) -> str:
    """One row per (domain, class): group, accuracy after each stage, CPD."""
    B = ledger.num_stages
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["domain", "class", "group"] + [f"a_{b}" for b in range(1, B + 1)] + ["cpd"])
    keys = sorted(set().union(*(s.per_class for s in ledger.snapshots)))
    for dom, c in keys:
        accs = [s.per_class.get((dom, c)) for s in ledger.snapshots]
        drift = cpd(ledger, dom, c) if dom <= B else None
        writer.writerow(
            [dom, c, ledger.groups.get((dom, c), "absent")]
            + ["" if a is None else repr(a) for a in accs]
            + ["" if drift is None else repr(drift)]
        )
    return buf.getvalue()
