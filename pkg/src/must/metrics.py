"""Accuracy, Mann-Whitney AUC and DeLong confidence intervals."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ContractError

PAIRWISE_LIMIT = 10_000


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return s, y.astype(int)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of admissions where ``score >= threshold`` matches the label."""
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise ContractError("accuracy needs at least one sample")
    return float(np.mean((s >= threshold).astype(int) == y))


def _split(scores, labels, need: int = 1):
    s, y = _as_arrays(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    for name, arr in (("positive", pos), ("negative", neg)):
        if len(arr) < need:
            raise ContractError(f"need at least {need} {name} sample(s), got {len(arr)}")
    return pos, neg


def auc(scores, labels, method: str = "auto") -> float:
    """P(score_pos > score_neg) + 0.5 P(tie).

    ``method`` is ``"pairwise"`` (explicit comparison of every pair),
    ``"rank"`` (midrank sum) or ``"auto"`` (pairwise up to 10^4 samples).
    """
    pos, neg = _split(scores, labels)
    n = len(pos) + len(neg)
    if method == "auto":
        method = "pairwise" if n <= PAIRWISE_LIMIT else "rank"
    if method == "pairwise":
        diff = pos[:, None] - neg[None, :]
        wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    elif method == "rank":
        ranks = rankdata(np.concatenate([pos, neg]))
        wins = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    else:
        raise ValueError(f"unknown AUC method {method!r}")
    return float(wins / (len(pos) * len(neg)))


def placements(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """DeLong structural components.

    For each positive, the fraction of negatives it outranks (ties count
    half); for each negative, the fraction of positives that outrank it.
    Computed from midranks.
    """
    pos, neg = _split(scores, labels)
    m, n = len(pos), len(neg)
    both = np.concatenate([pos, neg])
    r_all = rankdata(both)
    r_pos, r_neg = rankdata(pos), rankdata(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return v10, v01


def delong_variance(scores, labels) -> tuple[float, float]:
    """AUC and its DeLong variance estimate."""
    v10, v01 = placements(scores, labels)
    if len(v10) < 2 or len(v01) < 2:
        raise ContractError("DeLong variance needs at least 2 positives and 2 negatives")
    var = np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01)
    return float(v10.mean()), float(var)


def delong_ci(scores, labels, level: float = 0.95) -> tuple[float, float, float]:
    """Normal-approximation CI around the AUC, clipped to [0, 1].

    Returns ``(auc, low, high)``.
    """
    pos, neg = _split(scores, labels)
    for name, arr in (("positive", pos), ("negative", neg)):
        if len(arr) < 2:
            raise ContractError(f"DeLong CI needs at least 2 {name} samples, got {len(arr)}")
    a = auc(scores, labels)
    _, var = delong_variance(scores, labels)
    if var <= 0:
        return a, a, a
    half = norm.ppf(0.5 + level / 2.0) * np.sqrt(var)
    return a, float(max(0.0, a - half)), float(min(1.0, a + half))


@dataclass
class MetricsReport:
    auc: float
    ci_low: float
    ci_high: float
    acc: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {"auc": self.auc, "ci": [self.ci_low, self.ci_high], "acc": self.acc,
                "n_pos": self.n_pos, "n_neg": self.n_neg, "threshold": self.threshold}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(scores, labels, threshold: float = 0.5, level: float = 0.95) -> MetricsReport:
    s, y = _as_arrays(scores, labels)
    a, lo, hi = delong_ci(s, y, level)
    return MetricsReport(auc=a, ci_low=lo, ci_high=hi, acc=accuracy(s, y, threshold),
                         n_pos=int(y.sum()), n_neg=int((1 - y).sum()), threshold=threshold)
