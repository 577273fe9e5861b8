"""
Attack metrics over previously-correct test patches: error rate, mean
post-attack confidence, epsilon sweeps and per-target sweeps.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import JsmaConfig, fgsm_attack_set, jsma_attack_batch
from .model import predict

EPSILON_GRID = tuple(round(0.001 * i, 3) for i in range(1, 11))
COLUMNS = ("parameter", "error_rate_pct", "confidence_pct")


class EmptyPopulationError(ValueError):
    """No patch is eligible, so attack metrics are undefined."""


@dataclass
class AttackReport:
    kind: str
    params: dict
    population: int
    error_rate: float
    mean_confidence: float
    per_class: dict = field(default_factory=dict)


@dataclass
class SweepTable:
    parameter: str
    rows: list = field(default_factory=list)  # (value, error_rate, mean_confidence)
    reports: list = field(default_factory=list)

    def add(self, value, report):
        self.rows.append((value, report.error_rate, report.mean_confidence))
        self.reports.append(report)


def filter_correct(model, patches, labels):
    """Indices, pixels and labels of the patches the model classifies correctly."""
    x = np.asarray(patches, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise EmptyPopulationError("no test patches supplied")
    pred, _ = predict(model, x)
    keep = np.flatnonzero(pred == y)
    if keep.size == 0:
        raise EmptyPopulationError("the model misclassifies every test patch")
    return keep, x[keep], y[keep]


def _flipped(o, true_label):
    if o.kind == "jsma":
        return o.success
    return o.label_after != (o.label_before if true_label is None else true_label)


def compute_report(outcomes, true_labels=None):
    """Error rate and mean post-attack top-class confidence.

    FGSM counts a patch as an error when its label moved away from the true
    label (the clean prediction if no labels are given, which is the same
    thing on a correct-only population). JSMA counts targeted successes.
    Per-class rows are keyed by the clean label.
    """
    if not outcomes:
        raise EmptyPopulationError("cannot report on an empty outcome list")
    if true_labels is None:
        true_labels = [None] * len(outcomes)
    if len(true_labels) != len(outcomes):
        raise ValueError("true_labels must match outcomes in length")
    flips = np.array([_flipped(o, t) for o, t in zip(outcomes, true_labels)], dtype=bool)
    conf = np.array([o.confidence_after for o in outcomes], dtype=np.float64)
    keys = np.array([o.label_before if t is None else t for o, t in zip(outcomes, true_labels)])
    per_class = {}
    for c in sorted(set(keys.tolist())):
        sel = keys == c
        per_class[int(c)] = {
            "population": int(sel.sum()),
            "error_rate": float(flips[sel].mean()),
            "mean_confidence": float(conf[sel].mean()),
        }
    return AttackReport(
        outcomes[0].kind, dict(outcomes[0].params), len(outcomes),
        float(flips.mean()), float(conf.mean()), per_class,
    )


def epsilon_sweep(model, patches, labels, grid=EPSILON_GRID):
    """One FGSM report per epsilon over the same fixed population."""
    grid = [float(e) for e in grid]
    if not grid:
        raise ValueError("epsilon grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("epsilon grid must be strictly increasing")
    table = SweepTable("epsilon")
    for eps in grid:
        outcomes = fgsm_attack_set(model, patches, eps)
        table.add(eps, compute_report(outcomes, list(labels)))
    return table


def target_sweep(model, patches, labels, theta=1.0, gamma=0.10, targets=None, on_row=None):
    """One JSMA report per target class; own-class patches are left out of each row."""
    x = np.asarray(patches, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if targets is None:
        targets = range(model.config.num_classes)
    table = SweepTable("target")
    for t in targets:
        sel = np.flatnonzero(y != t)
        if sel.size == 0:
            raise EmptyPopulationError(f"no patches outside class {t}")
        outcomes = jsma_attack_batch(model, x[sel], JsmaConfig(int(t), theta, gamma))
        report = compute_report(outcomes, y[sel].tolist())
        table.add(int(t), report)
        if on_row is not None:
            on_row(t, sel, outcomes)
    return table


def _fmt(v):
    return f"{100 * v:.1f}"


def _param(v):
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:g}"


def table_rows(table):
    return [(_param(p), _fmt(e), _fmt(c)) for p, e, c in table.rows]


def render_csv(table, provenance=None):
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {provenance}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    w.writerows(table_rows(table))
    return buf.getvalue()


def render_json(table, provenance=None):
    doc = {"parameter_name": table.parameter, "columns": list(COLUMNS), "rows": [list(r) for r in table_rows(table)]}
    if provenance:
        doc["provenance"] = provenance
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def export_report(table, path, fmt="csv", provenance=None):
    """Write a sweep table with percentages at one decimal."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    text = render_csv(table, provenance) if fmt == "csv" else render_json(table, provenance)
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return text


def read_csv_report(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if tuple(rows[0]) != COLUMNS:
        raise ValueError(f"unexpected header {rows[0]}")
    return [tuple(r) for r in rows[1:]]
