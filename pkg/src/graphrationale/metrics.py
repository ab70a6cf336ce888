"""Classification accuracy, rank-based ROC-AUC, and node-mask explanation AUC."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import InputError, UndefinedMetricError


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches between two equal-length label sequences."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise InputError(f"prediction/label shapes disagree: {preds.shape} vs {labs.shape}")
    if preds.size == 0:
        raise InputError("accuracy of an empty sequence")
    return float(np.mean(preds == labs))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average of their rank block."""
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties counting one half.

    Computed from tie-averaged ranks (the Mann-Whitney U statistic), which is
    exact for any score distribution.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError(f"score/label shapes disagree: {s.shape} vs {y.shape}")
    pos = int(np.sum(y == 1))
    neg = int(np.sum(y == 0))
    if pos + neg != y.size:
        raise InputError("labels must be 0/1")
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def explanation_auc(mask, truth_mask: Sequence[int]) -> float:
    """ROC-AUC of soft mask values against binary ground-truth node membership."""
    values = np.asarray(getattr(mask, "data", mask), dtype=np.float64).reshape(-1)
    return roc_auc(values, np.asarray(truth_mask).reshape(-1))


def episode_explanation_auc(masks: Sequence, truth_masks: Sequence) -> float:
    """Mean per-graph explanation AUC; degenerate truth masks are skipped."""
    values = []
    for i, (mask, truth) in enumerate(zip(masks, truth_masks)):
        truth_arr = np.asarray(truth).reshape(-1)
        if truth_arr.min() == truth_arr.max():
            warnings.warn(f"graph {i}: degenerate truth mask skipped", stacklevel=2)
            continue
        values.append(explanation_auc(mask, truth_arr))
    if not values:
        raise UndefinedMetricError("every graph in the episode had a degenerate truth mask")
    return float(np.mean(values))


@dataclass
class MetricReport:
    metric: str
    per_episode: list[float]
    mean: float
    std: float
    n_episodes: int
    config_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "n_episodes": self.n_episodes,
            "per_episode": self.per_episode,
            "config_fingerprint": self.config_fingerprint,
        }


def aggregate(per_episode_values: Sequence[float], metric: str = "", config_fingerprint: str = "") -> MetricReport:
    """Mean and sample standard deviation over per-episode metric values."""
    values = [float(v) for v in per_episode_values]
    if not values:
        raise InputError("aggregate of an empty sequence")
    arr = np.asarray(values)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return MetricReport(
        metric=metric,
        per_episode=values,
        mean=float(arr.mean()),
        std=std,
        n_episodes=arr.size,
        config_fingerprint=config_fingerprint,
    )


def write_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> MetricReport:
    raw = json.loads(Path(path).read_text())
    return MetricReport(
        metric=raw["metric"],
        per_episode=[float(v) for v in raw["per_episode"]],
        mean=float(raw["mean"]),
        std=float(raw["std"]),
        n_episodes=int(raw["n_episodes"]),
        config_fingerprint=raw.get("config_fingerprint", ""),
    )
