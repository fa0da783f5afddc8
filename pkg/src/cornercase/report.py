"""Comparison of an evaluation result against published baseline tables."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .evaluation import EvalResult

CODA_METRICS = ("ar_agnostic_corner", "ar_agnostic", "ap_agnostic", "ap_common")
BDD_METRICS = ("recall", "map50")
KNOWN_METRICS = frozenset(CODA_METRICS + BDD_METRICS)


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineTable:
    metrics: tuple[str, ...]
    rows: dict[str, dict[str, float]]
    description: str = ""

    def __post_init__(self) -> None:
        unknown = sorted(set(self.metrics) - KNOWN_METRICS)
        if unknown:
            raise ReportError(f"unknown metric key(s): {unknown}")
        for name, row in self.rows.items():
            missing = [m for m in self.metrics if m not in row]
            if missing:
                raise ReportError(f"baseline {name!r} lacks metric(s) {missing}")
            extra = sorted(set(row) - set(self.metrics))
            if extra:
                raise ReportError(f"baseline {name!r} has unknown metric key(s) {extra}")
            bad = [m for m in self.metrics if not 0.0 <= row[m] <= 1.0]
            if bad:
                raise ReportError(f"baseline {name!r}: values outside [0, 1] for {bad}")


def parse_baselines(doc: Mapping[str, Any]) -> BaselineTable:
    rows = {str(k): {m: float(v) for m, v in row.items()} for k, row in doc["rows"].items()}
    return BaselineTable(tuple(doc["metrics"]), rows, str(doc.get("description", "")))


def load_baselines(path: str | Path) -> BaselineTable:
    return parse_baselines(json.loads(Path(path).read_text(encoding="utf-8")))


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture file (``table1.json``, ``synth_default.json``, ...)."""
    return Path(str(resources.files("cornercase") / "fixtures" / name))


def report(result: EvalResult | Mapping[str, Any], baselines: BaselineTable) -> dict[str, Any]:
    """Metric values plus ``result - baseline`` for every baseline row."""
    values = result.to_doc() if isinstance(result, EvalResult) else dict(result)
    mine: dict[str, float] = {}
    for m in baselines.metrics:
        if m not in values or values[m] is None:
            raise ReportError(f"result has no value for metric {m!r}")
        mine[m] = float(values[m])
    unknown = sorted(k for k in values if k != "per_class" and k not in KNOWN_METRICS)
    if unknown:
        raise ReportError(f"unknown metric key(s) in result: {unknown}")
    return {
        "metrics": list(baselines.metrics),
        "result": mine,
        "baselines": {name: dict(row) for name, row in baselines.rows.items()},
        "deltas": {
            name: {m: mine[m] - row[m] for m in baselines.metrics} for name, row in baselines.rows.items()
        },
    }


def render_table(doc: Mapping[str, Any]) -> str:
    """Pipe-delimited text table: one row per baseline with its value and delta per metric."""
    metrics = doc["metrics"]
    head = ["method"] + [f"{m} | d_{m}" for m in metrics]
    lines = [" | ".join(head)]
    lines.append(" | ".join(["result"] + [f"{doc['result'][m]:.3f} | -" for m in metrics]))
    for name, row in doc["baselines"].items():
        cells = [f"{row[m]:.3f} | {doc['deltas'][name][m]:+.3f}" for m in metrics]
        lines.append(" | ".join([name] + cells))
    return "\n".join(lines) + "\n"
