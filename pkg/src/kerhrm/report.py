"""Experiment reports: in-memory form, aggregation, and the on-disk layout.

A run directory holds

``report.json``
    everything, including per-iteration traces and the config echo;
``results.csv``
    one row per seed x test environment x method;
``trace.csv``
    one row per seed x method x iteration, for iteration curves.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

SCHEMA_VERSION = "1"
RESULT_COLUMNS = ("seed", "method", "k", "env", "metric", "value", "train_value")
TRACE_COLUMNS = ("seed", "method", "iteration", "theta_norm", "alignment", "clustering_objective",
                 "em_iterations", "kl", "purity", "train_metric", "test_metric", "test_std", "orthogonality")


def aggregate(entries: Sequence[dict]) -> Dict[str, dict]:
    """Per-method summaries over seeds, in first-appearance order."""
    out: Dict[str, dict] = {}
    for method in dict.fromkeys(e["method"] for e in entries):
        es = [e for e in entries if e["method"] == method]
        test = np.array([e["test"]["mean"] for e in es])
        agg = {"n_seeds": len(es), "metric": es[0]["test"]["metric"],
               "train_mean": float(np.mean([e["train"]["mean"] for e in es])),
               "test_mean": float(np.mean(test)),
               "test_sd_over_seeds": float(np.std(test, ddof=1)) if len(es) > 1 else None}
        stds = [e["test"]["std"] for e in es if e["test"]["std"] is not None]
        agg["test_std_mean"] = float(np.mean(stds)) if stds else None
        out[method] = agg
    return out


@dataclass
class Report:
    """Per-seed entries plus their aggregates.

    Each entry is a plain dict with keys ``seed``, ``method``, ``k``,
    ``train``, ``test`` (metric records), ``trace`` (one dict per iteration),
    ``diagnostics``, ``warnings`` and ``timing``.  Wall-clock fields are the
    only non-deterministic content.
    """

    config: dict
    entries: List[dict]
    aggregates: Dict[str, dict] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    timing: Dict[str, float] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION
    label_encoding: str = "+1/-1 (digits 0-4 and Y=0 map to -1)"

    def __post_init__(self):
        if not self.aggregates and self.entries:
            self.aggregates = aggregate(self.entries)
        if not self.warnings:
            self.warnings = [f"seed {e['seed']} {e['method']}: {w}" for e in self.entries for w in e["warnings"]]

    def entry(self, method, seed=None) -> dict:
        for e in self.entries:
            if e["method"] == method and (seed is None or e["seed"] == seed):
                return e
        raise KeyError((method, seed))

    def to_dict(self, timing=True) -> dict:
        out = {"schema_version": self.schema_version, "label_encoding": self.label_encoding,
               "config": self.config, "aggregates": self.aggregates, "entries": self.entries,
               "warnings": self.warnings, "timing": self.timing}
        if not timing:
            out = json.loads(_dumps(out))
            out.pop("timing")
            for e in out["entries"]:
                e.pop("timing", None)
        return out

    def to_json(self, timing=True) -> str:
        return _dumps(self.to_dict(timing))

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(config=d["config"], entries=d["entries"], aggregates=d.get("aggregates", {}),
                   warnings=d.get("warnings", []), timing=d.get("timing", {}),
                   schema_version=d.get("schema_version", SCHEMA_VERSION),
                   label_encoding=d.get("label_encoding", ""))


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, default=_default, indent=1, sort_keys=False)


def result_rows(report: Report) -> List[dict]:
    rows = []
    for e in report.entries:
        for i, v in enumerate(e["test"]["per_env"]):
            rows.append({"seed": e["seed"], "method": e["method"], "k": "" if e["k"] is None else e["k"],
                         "env": i, "metric": e["test"]["metric"], "value": v, "train_value": e["train"]["mean"]})
    return rows


def trace_rows(report: Report) -> List[dict]:
    rows = []
    for e in report.entries:
        for t in e["trace"]:
            row = {c: t.get(c, "") for c in TRACE_COLUMNS}
            row.update(seed=e["seed"], method=e["method"])
            rows.append({c: ("" if v is None else v) for c, v in row.items()})
    return rows


def _write_csv(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        w.writerows(rows)


def emit_report(report: Report, out_dir) -> Dict[str, Path]:
    """Write ``report.json``, ``results.csv`` and ``trace.csv`` under ``out_dir``."""
    out = Path(out_dir)
    paths = {"json": out / "report.json", "results": out / "results.csv", "trace": out / "trace.csv"}
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths["json"].write_text(report.to_json())
        _write_csv(paths["results"], RESULT_COLUMNS, result_rows(report))
        _write_csv(paths["trace"], TRACE_COLUMNS, trace_rows(report))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report under {out}: {exc.strerror}", exc.filename) from exc
    return paths


def load_report(path) -> Report:
    """Read ``report.json`` (or a directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return Report.from_dict(json.loads(path.read_text()))
