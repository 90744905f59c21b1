"""Video-level evaluation metrics and their on-disk report formats."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS = ("MAE", "RMSE", "PCC", "CCC")


def pcc(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; NaN when either input is constant."""
    a = np.asarray(y_hat, dtype=float) - np.mean(y_hat)
    b = np.asarray(y, dtype=float) - np.mean(y)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return math.nan
    return float(a @ b) / denom


def ccc(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Concordance correlation (population moments); NaN when 0/0."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    mx, my = y_hat.mean(), y.mean()
    cov = np.mean((y_hat - mx) * (y - my))
    denom = y_hat.var() + y.var() + (mx - my) ** 2
    if denom == 0.0:
        return math.nan
    return float(2.0 * cov / denom)


@dataclass
class MetricsReport:
    labels: list[str]
    per_label: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    undefined: list[str] = field(default_factory=list)
    n: int = 0

    def rows(self) -> list[dict[str, float | str]]:
        out = [{"label": name, **self.per_label[name]} for name in self.labels]
        out.append({"label": "mean", **self.aggregate})
        return out

    def flat(self, prefix: str = "") -> dict[str, float]:
        d = {}
        for name in self.labels:
            for m in METRICS:
                d[f"{prefix}{name}.{m}"] = self.per_label[name][m]
        for m in METRICS:
            d[f"{prefix}mean.{m}"] = self.aggregate[m]
        return d


def metrics_report(y_hat, y, labels: list[str] | None = None) -> MetricsReport:
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    n, c = y.shape
    if n < 2:
        raise ValueError(f"metrics need N >= 2 videos, got {n}")
    labels = list(labels) if labels is not None else [f"label{i}" for i in range(c)]
    per_label, undefined = {}, []
    for j, name in enumerate(labels):
        err = y_hat[:, j] - y[:, j]
        row = {
            "MAE": float(np.mean(np.abs(err))),
            "RMSE": float(np.sqrt(np.mean(err * err))),
            "PCC": pcc(y_hat[:, j], y[:, j]),
            "CCC": ccc(y_hat[:, j], y[:, j]),
        }
        for m in ("PCC", "CCC"):
            if math.isnan(row[m]):
                undefined.append(f"{name}.{m}")
        per_label[name] = row
    aggregate = {m: float(np.mean([per_label[k][m] for k in labels])) for m in METRICS}
    return MetricsReport(labels, per_label, aggregate, undefined, n)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(report: MetricsReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *METRICS])
        for row in report.rows():
            w.writerow([row["label"], *(_fmt(row[m]) for m in METRICS)])


def write_metrics_kv(values: dict[str, float | str], path: Path) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={_fmt(v) if isinstance(v, float) else v}\n")


def read_metrics_csv(path: Path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {r["label"]: {m: float(r[m]) for m in METRICS} for r in csv.DictReader(fh)}
