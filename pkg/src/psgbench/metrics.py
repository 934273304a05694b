"""Evaluation metrics (AUROC, MAE, Harrell's C-index), percentile bootstrap
confidence intervals, and the result-report schema."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .records import STAGES


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal), via the rank-sum identity."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = rankdata(scores, method="average")
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_multiclass(
    scores: np.ndarray, labels: np.ndarray, n_classes: int = len(STAGES)
) -> tuple[float, dict[int, float | None]]:
    """One-vs-rest AUROC per class, macro-averaged over classes present.

    scores: [n, n_classes]; absent classes get None in the per-class map.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] != n_classes:
        raise ValueError(f"scores must be [n, {n_classes}]")
    present = [k for k in range(n_classes) if np.any(labels == k)]
    if len(present) < 2:
        raise ValueError("need at least two classes present")
    per_class: dict[int, float | None] = {k: None for k in range(n_classes)}
    for k in present:
        per_class[k] = auroc(scores[:, k], (labels == k).astype(np.int64))
    macro = float(np.mean([per_class[k] for k in present]))
    return macro, per_class


def mae_years(pred_years: np.ndarray, age_years: np.ndarray) -> float:
    pred_years = np.asarray(pred_years, dtype=np.float64)
    age_years = np.asarray(age_years, dtype=np.float64)
    return float(np.mean(np.abs(pred_years - age_years)))


def c_index(hazards: np.ndarray, events: np.ndarray, times: np.ndarray) -> float:
    """Harrell's concordance over pairs (i, j) with t_i < t_j and event i.

    Concordant when h_i > h_j; ties in hazard earn half credit.
    """
    hazards = np.asarray(hazards, dtype=np.float64)
    events = np.asarray(events)
    times = np.asarray(times, dtype=np.float64)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise ValueError("no comparable pairs (need an event before another time)")
    concordant = comparable & (hazards[:, None] > hazards[None, :])
    tied = comparable & (hazards[:, None] == hazards[None, :])
    return float((concordant.sum() + 0.5 * tied.sum()) / n_comparable)


def bootstrap_ci(
    metric_fn: Callable[..., float],
    data: Sequence[np.ndarray],
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    max_retries: int = 10,
) -> tuple[float, float]:
    """Percentile bootstrap over record-level resampling.

    ``data`` is a tuple of aligned arrays (first axis = records); the metric
    is called on resampled views. A resample on which the metric is undefined
    is redrawn up to ``max_retries`` times.
    """
    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    arrays = [np.asarray(a) for a in data]
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("all data arrays must share the first (record) axis")
    rng = np.random.default_rng(seed)
    values = np.empty(n_boot)
    for b in range(n_boot):
        for attempt in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            try:
                values[b] = metric_fn(*(a[idx] for a in arrays))
                break
            except ValueError:
                if attempt == max_retries:
                    raise ValueError(
                        f"metric undefined on {max_retries + 1} consecutive resamples"
                    )
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


@dataclass
class MetricReport:
    """One evaluated number plus the protocol coordinates that produced it."""

    task: str
    method: str
    metric: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None
    subset_size: int | None = None
    replicate: int | None = None
    pretrain_epochs: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.ci_low is not None and self.ci_high is not None:
            if not (self.ci_low <= self.value <= self.ci_high):
                raise ValueError(
                    f"CI [{self.ci_low}, {self.ci_high}] does not bracket {self.value}"
                )


REPORT_FIELDS = (
    "task", "method", "metric", "value", "ci_low", "ci_high",
    "subset_size", "replicate", "pretrain_epochs", "seed",
)


def write_reports_csv(reports: list[MetricReport], path: Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            d = asdict(r)
            writer.writerow(
                ["" if d[f] is None else (repr(d[f]) if isinstance(d[f], float) else d[f]) for f in REPORT_FIELDS]
            )
    return path


def write_reports_json(reports: list[MetricReport], path: Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump([asdict(r) for r in reports], fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path
