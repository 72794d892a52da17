"""Ranking metrics and split-wise evaluation.

auc_roc follows the rank-statistic definition (probability a random
positive outranks a random negative, ties credited 0.5), computed with
average ranks. auc_pr is the area under the precision-recall step curve
with tied scores collapsed into a single threshold group. The positive
class throughout is DSAT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mod
from .data import DSAT, DatasetSplits, window


class MetricError(ValueError):
    """Metric undefined for this input (e.g. a single-class split)."""


@dataclass
class EvalRecord:
    method: str
    n_labeled: int
    seed: int
    split: str
    auc_roc: float
    auc_pr: float


@dataclass
class AggregateRecord:
    method: str
    n_labeled: int
    split: str
    mean_auc_roc: float
    std_auc_roc: float
    mean_auc_pr: float
    std_auc_pr: float
    n_seeds: int


def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    return n_pos, n_neg


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks; tied scores share the mean of their rank range."""
    n = len(scores)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(n)
    srt = scores[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and srt[j + 1] == srt[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 0.5)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos, n_neg = _check_binary(labels)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"auc_roc needs both classes, got {n_pos} pos / {n_neg} neg")
    ranks = _average_ranks(scores)
    u = float(np.sum(ranks[labels == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall step curve, descending-score sweep."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise MetricError("auc_pr needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    area = 0.0
    prev_recall = 0.0
    tp = fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int(np.sum(y[i:j + 1] == 1))
        fp += (j - i + 1) - int(np.sum(y[i:j + 1] == 1))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def score_sessions(params: mod.ParamSet, sessions, head: str = "satisfaction"):
    """Sigmoid probabilities of the positive (DSAT) class per session."""
    T = params.config.context_T
    cache: dict = {}
    logits = np.array([
        float(mod.forward_logit(params, window(s, T), head, cache).data)
        for s in sessions
    ])
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-logits))


def evaluate(params: mod.ParamSet, splits: DatasetSplits, head: str = "satisfaction",
             method: str = "", n_labeled: int = 0, seed: int = 0) -> list[EvalRecord]:
    """One record per held-out test split."""
    records = []
    for split_name, sessions in (("in_domain", splits.test_in_domain),
                                 ("out_of_domain", splits.test_out_of_domain)):
        scores = score_sessions(params, sessions, head)
        labels = np.array([1 if s.label == DSAT else 0 for s in sessions])
        records.append(EvalRecord(
            method=method, n_labeled=n_labeled, seed=seed, split=split_name,
            auc_roc=auc_roc(scores, labels), auc_pr=auc_pr(scores, labels),
        ))
    return records


def aggregate(records: list[EvalRecord]) -> list[AggregateRecord]:
    """Group by (method, n_labeled, split); mean and population std over seeds."""
    groups: dict[tuple, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.n_labeled, r.split), []).append(r)
    out = []
    for (method, n_labeled, split) in sorted(groups):
        rs = groups[(method, n_labeled, split)]
        rocs = np.array([r.auc_roc for r in rs])
        prs = np.array([r.auc_pr for r in rs])
        out.append(AggregateRecord(
            method=method, n_labeled=n_labeled, split=split,
            mean_auc_roc=float(rocs.mean()), std_auc_roc=float(rocs.std()),
            mean_auc_pr=float(prs.mean()), std_auc_pr=float(prs.std()),
            n_seeds=len(rs),
        ))
    return out
