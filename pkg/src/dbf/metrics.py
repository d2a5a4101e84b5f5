"""Sentiment-regression metrics: MAE, Pearson, 7-class and two binary conventions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from dbf.errors import SchemaError, UndefinedStatisticError

LABEL_MIN, LABEL_MAX = -3.0, 3.0


@dataclass
class MetricsReport:
    mae: float
    corr: float
    acc7: float
    acc2_neg_nonneg: float
    acc2_neg_pos: float
    f1_neg_nonneg: float
    f1_neg_pos: float
    n: int
    corr_degenerate: bool = False

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MetricsReport:
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            key, sep, raw = line.partition("=")
            if not sep or key not in types:
                raise SchemaError(f"unexpected metrics entry {line!r}", lineno)
            if key == "n":
                values[key] = int(raw)
            elif key == "corr_degenerate":
                values[key] = raw == "true"
            else:
                values[key] = float(raw)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pearson(preds, labels) -> tuple[float, bool]:
    """Pearson correlation and a flag set when either side has zero variance (then 0.0)."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size < 2:
        raise UndefinedStatisticError("correlation needs at least 2 samples")
    pc = p - p.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(pc @ pc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0, True
    return float(np.clip((pc @ yc) / denom, -1.0, 1.0)), False


def weighted_f1(truth, pred) -> float:
    """Support-weighted F1 over the classes present in either vector."""
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    total = 0.0
    for cls in (False, True):
        support = int(np.sum(truth == cls))
        if support == 0:
            continue
        tp = int(np.sum((pred == cls) & (truth == cls)))
        fp = int(np.sum((pred == cls) & (truth != cls)))
        fn = support - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += support * f1
    return total / truth.size


def compute_metrics(preds, labels) -> MetricsReport:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if y.size and (y.min() < LABEL_MIN or y.max() > LABEL_MAX):
        raise ValueError("labels must lie in [-3, 3]")
    corr, degenerate = pearson(p, y)

    p7 = round_half_away(np.clip(p, LABEL_MIN, LABEL_MAX))
    y7 = round_half_away(np.clip(y, LABEL_MIN, LABEL_MAX))

    truth_nn, pred_nn = y >= 0, p >= 0
    nonzero = y != 0
    if not nonzero.any():
        raise UndefinedStatisticError("negative/positive accuracy needs a nonzero label")
    truth_np, pred_np = y[nonzero] > 0, p[nonzero] > 0

    return MetricsReport(
        mae=float(np.mean(np.abs(p - y))),
        corr=corr,
        acc7=float(np.mean(p7 == y7)),
        acc2_neg_nonneg=float(np.mean(truth_nn == pred_nn)),
        acc2_neg_pos=float(np.mean(truth_np == pred_np)),
        f1_neg_nonneg=weighted_f1(truth_nn, pred_nn),
        f1_neg_pos=weighted_f1(truth_np, pred_np),
        n=int(p.size),
        corr_degenerate=degenerate,
    )
