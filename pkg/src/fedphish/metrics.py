"""Confusion-matrix metrics and per-round CSV convergence logs.

Positive class is phishing (label 1) throughout, so FPR counts benign pages
misflagged as phishing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Confusion",
    "Metrics",
    "RoundEntry",
    "RoundLog",
    "confusion",
    "compute_metrics",
    "write_round_csv",
    "read_round_csv",
]

CSV_HEADER = ["round", "client_id", "head", "loss", "accuracy", "precision", "recall", "fpr"]


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    fpr: float
    degenerate: frozenset[str] = field(default_factory=frozenset)


def confusion(predictions, labels) -> Confusion:
    """Standard counts; inputs are equal-length 0/1 sequences."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels"
        )
    bad = set(np.unique(predictions)) | set(np.unique(labels))
    if not bad <= {0, 1}:
        raise ValueError(f"values outside {{0,1}}: {sorted(bad - {0, 1})}")
    return Confusion(
        tp=int(np.sum((predictions == 1) & (labels == 1))),
        fp=int(np.sum((predictions == 1) & (labels == 0))),
        tn=int(np.sum((predictions == 0) & (labels == 0))),
        fn=int(np.sum((predictions == 0) & (labels == 1))),
    )


def _ratio(num: int, den: int, name: str, degenerate: set[str]) -> float:
    if den == 0:
        degenerate.add(name)
        return 0.0
    return num / den


def compute_metrics(c: Confusion) -> Metrics:
    """Accuracy, precision, recall and FPR; zero denominators report 0 and
    set the degenerate flag rather than raising."""
    degenerate: set[str] = set()
    return Metrics(
        accuracy=_ratio(c.tp + c.tn, c.total, "accuracy", degenerate),
        precision=_ratio(c.tp, c.tp + c.fp, "precision", degenerate),
        recall=_ratio(c.tp, c.tp + c.fn, "recall", degenerate),
        fpr=_ratio(c.fp, c.fp + c.tn, "fpr", degenerate),
        degenerate=frozenset(degenerate),
    )


@dataclass(frozen=True)
class RoundEntry:
    client_id: str
    head: str
    loss: float
    metrics: Metrics


@dataclass
class RoundLog:
    round_index: int
    entries: list[RoundEntry] = field(default_factory=list)
    role_counts: dict[str, int] = field(default_factory=dict)


def write_round_csv(logs: list[RoundLog], path) -> None:
    """One row per evaluated (round, client, head), sorted, floats at six
    decimals; rewriting the same logs yields a byte-identical file."""
    path = Path(path)
    rows = []
    for log in logs:
        for e in log.entries:
            rows.append(
                (
                    log.round_index,
                    e.client_id,
                    e.head,
                    f"{e.loss:.6f}",
                    f"{e.metrics.accuracy:.6f}",
                    f"{e.metrics.precision:.6f}",
                    f"{e.metrics.recall:.6f}",
                    f"{e.metrics.fpr:.6f}",
                )
            )
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write round log to {path}: {exc}") from exc


def read_round_csv(path) -> list[dict]:
    """Parse a round CSV back into dicts (numeric fields converted)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            out.append(
                {
                    "round": int(row["round"]),
                    "client_id": row["client_id"],
                    "head": row["head"],
                    "loss": float(row["loss"]),
                    "accuracy": float(row["accuracy"]),
                    "precision": float(row["precision"]),
                    "recall": float(row["recall"]),
                    "fpr": float(row["fpr"]),
                }
            )
        return out
