"""Global-model evaluation, forgetting measure and metric files.

Per-class accuracy for a class with no test samples is ``nan`` in memory,
an empty cell in CSV and ``null`` in JSON.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn.functional import softmax
from .nn.model import ModelParams, forward


class MetricError(ValueError):
    pass


@dataclass
class EvalResult:
    top1: float
    per_class: np.ndarray
    mean_softmax: np.ndarray


@dataclass
class RoundRecord:
    round: int
    top1: float
    per_class: np.ndarray
    mean_softmax: np.ndarray
    F_running: float = math.nan


@dataclass
class RoundHistory:
    num_classes: int
    records: list[RoundRecord] = field(default_factory=list)

    def append(self, round_index: int, result: EvalResult) -> RoundRecord:
        if self.records and round_index <= self.records[-1].round:
            raise MetricError(f"round {round_index} does not follow round {self.records[-1].round}")
        if len(result.per_class) != self.num_classes:
            raise MetricError(f"expected {self.num_classes} per-class values, got {len(result.per_class)}")
        rec = RoundRecord(round_index, result.top1, np.asarray(result.per_class, float), np.asarray(result.mean_softmax, float))
        self.records.append(rec)
        if len(self.records) >= 2:
            rec.F_running = forgetting(self)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def accuracy_matrix(self) -> np.ndarray:
        """(rounds, classes) matrix of per-class accuracies."""
        if not self.records:
            return np.zeros((0, self.num_classes))
        return np.stack([r.per_class for r in self.records])

    @property
    def top1(self) -> np.ndarray:
        return np.array([r.top1 for r in self.records])


def predict_logits(model: ModelParams, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = [forward(model, inputs[i : i + batch_size])[1] for i in range(0, inputs.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model: ModelParams, test_set: Dataset, batch_size: int = 1024) -> EvalResult:
    if len(test_set) == 0:
        raise MetricError("empty test set")
    x = test_set.inputs(shape=model.input_shape)
    logits = predict_logits(model, x, batch_size)
    probs = softmax(logits)
    correct = logits.argmax(axis=1) == test_set.labels
    counts = np.bincount(test_set.labels, minlength=test_set.num_classes)
    hits = np.bincount(test_set.labels, weights=correct, minlength=test_set.num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return EvalResult(float(correct.mean()), per_class, probs.mean(axis=0))


def forgetting(history: RoundHistory) -> float:
    """Mean over classes of (best accuracy in rounds 1..T-1) minus final accuracy.

    Classes whose final accuracy is absent are left out of the mean.
    """
    acc = history.accuracy_matrix()
    if acc.shape[0] < 2:
        raise MetricError("forgetting needs at least 2 rounds")
    final = acc[-1]
    present = ~np.isnan(final)
    if not present.any():
        raise MetricError("no class present in the test set")
    best = np.nanmax(acc[:-1, present], axis=0)
    return float(np.mean(best - final[present]))


def rounds_to_reach(history: RoundHistory, target: float) -> int | None:
    """First round whose top-1 is >= target, or None (reported as N/A)."""
    if not history.records:
        raise MetricError("empty history")
    for rec in history.records:
        if rec.top1 >= target:
            return rec.round
    return None


# -- serialization -------------------------------------------------------------


def csv_header(num_classes: int) -> list[str]:
    return (
        ["round", "top1", "F_running"]
        + [f"acc_class_{c}" for c in range(num_classes)]
        + [f"softmax_class_{c}" for c in range(num_classes)]
    )


def _cell(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def _num(s: str) -> float:
    return math.nan if s == "" else float(s)


def _json_num(x: float):
    return None if math.isnan(x) else float(x)


def history_to_dict(history: RoundHistory) -> dict:
    return {
        "num_classes": history.num_classes,
        "columns": csv_header(history.num_classes),
        "rounds": [
            {
                "round": r.round,
                "top1": r.top1,
                "F_running": _json_num(r.F_running),
                "acc_class": [_json_num(v) for v in r.per_class],
                "softmax_class": [float(v) for v in r.mean_softmax],
            }
            for r in history.records
        ],
    }


def emit(history: RoundHistory, path, fmt: str = "csv") -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(csv_header(history.num_classes))
                for r in history.records:
                    w.writerow(
                        [r.round, _cell(r.top1), _cell(r.F_running)]
                        + [_cell(v) for v in r.per_class]
                        + [_cell(v) for v in r.mean_softmax]
                    )
        elif fmt == "json":
            path.write_text(json.dumps(history_to_dict(history), indent=1))
        else:
            raise ValueError(f"unknown metrics format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics(path) -> RoundHistory:
    """Inverse of :func:`emit` for either format (chosen by file suffix)."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        h = RoundHistory(doc["num_classes"])
        for r in doc["rounds"]:
            nanify = lambda v: math.nan if v is None else v  # noqa: E731
            h.records.append(
                RoundRecord(
                    r["round"],
                    r["top1"],
                    np.array([nanify(v) for v in r["acc_class"]], float),
                    np.array(r["softmax_class"], float),
                    nanify(r["F_running"]),
                )
            )
        return h
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    c = sum(1 for name in rows[0] if name.startswith("acc_class_"))
    h = RoundHistory(c)
    for row in rows[1:]:
        vals = [_num(s) for s in row[1:]]
        h.records.append(
            RoundRecord(int(row[0]), vals[0], np.array(vals[2 : 2 + c]), np.array(vals[2 + c : 2 + 2 * c]), vals[1])
        )
    return h
