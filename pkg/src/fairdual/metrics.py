"""Ranking accuracy and group fairness metrics.

``rankings`` is a sequence with one ranked item list per user;
``ground_truth`` the matching sequence of positive-item sets. Users without
positives are skipped by the accuracy metrics. Aggregates over no users
return ``None`` (the not-available marker, written as ``NA`` in CSV).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .groups import GroupCatalog, NormalizedAdjacency, build_adjacency

NA = None
NA_TEXT = "NA"
MMF_BOTTOM_FRACTION = (1, 5)  # 20% worst-off groups


def _check_k(K: int) -> None:
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")


def _evaluable(rankings, ground_truth):
    if len(rankings) != len(ground_truth):
        raise ValueError("rankings and ground_truth differ in length")
    for ranked, truth in zip(rankings, ground_truth):
        if truth:
            yield list(ranked), truth


def ndcg_at_k(rankings, ground_truth, K: int) -> Optional[float]:
    """Binary-relevance NDCG@K averaged over users with at least one positive."""
    _check_k(K)
    total, n = 0.0, 0
    for ranked, truth in _evaluable(rankings, ground_truth):
        dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:K]) if i in truth)
        idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(truth), K)))
        total += dcg / idcg
        n += 1
    return total / n if n else NA


def mrr_at_k(rankings, ground_truth, K: int) -> Optional[float]:
    _check_k(K)
    total, n = 0.0, 0
    for ranked, truth in _evaluable(rankings, ground_truth):
        for p, i in enumerate(ranked[:K]):
            if i in truth:
                total += 1.0 / (p + 1)
                break
        n += 1
    return total / n if n else NA


def _adjacency(groups) -> NormalizedAdjacency:
    if isinstance(groups, NormalizedAdjacency):
        return groups
    return build_adjacency(groups)


def group_utilities(rankings, groups, K: int, m=None) -> np.ndarray:
    """Per-group exposure ``sum_u sum_{i in top-K(u)} 1/n_i``, divided by ``m_g``."""
    _check_k(K)
    adj = _adjacency(groups)
    if m is None:
        if not isinstance(groups, GroupCatalog):
            raise ValueError("pass m explicitly when giving an adjacency")
        m = groups.m
    counts = np.zeros(adj.shape[0])
    for ranked in rankings:
        top = np.asarray(list(ranked)[:K], dtype=np.int64)
        np.add.at(counts, top, 1.0)
    return adj.tdot(counts) / np.asarray(m, dtype=float)


def mmf_from_utilities(util) -> Optional[float]:
    util = np.asarray(util, dtype=float)
    total = util.sum()
    if total <= 0:
        return NA
    num, den = MMF_BOTTOM_FRACTION
    k = max(1, -(-len(util) * num // den))
    return float(np.sort(util)[:k].sum() / total)


def mmf_at_k(rankings, groups, K: int, m=None) -> Optional[float]:
    """Share of normalized exposure held by the ceil(20%) worst-off groups."""
    return mmf_from_utilities(group_utilities(rankings, groups, K, m))


def gini(values) -> float:
    """Gini coefficient via the mean absolute difference; 0 for all-zero input."""
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    total = x.sum()
    if n == 0 or total == 0:
        return 0.0
    # sum_{i,j} |x_i - x_j| = 2 sum_k (2k - n + 1) x_(k) for sorted x
    weighted = np.dot(2 * np.arange(n) - n + 1, x)
    # rounding can push equal inputs just below 0
    return float(np.clip(weighted / (n * total), 0.0, 1.0))


def gini_at_k(rankings, groups, K: int, m=None) -> float:
    util = group_utilities(rankings, groups, K, m)
    if len(util) < 2:
        raise ValueError("Gini needs at least two groups")
    return gini(util)


def jensen_gap(full_loss: float, minibatch_loss: float) -> float:
    if not (math.isfinite(full_loss) and math.isfinite(minibatch_loss)):
        raise ValueError("losses must be finite")
    return abs(minibatch_loss - full_loss)


@dataclass
class MetricsReport:
    ndcg: dict = field(default_factory=dict)
    mrr: dict = field(default_factory=dict)
    mmf: dict = field(default_factory=dict)
    gini: dict = field(default_factory=dict)
    jensen_gap: Optional[float] = None

    FAMILIES = ("ndcg", "mrr", "mmf", "gini")

    @property
    def ks(self) -> list[int]:
        return sorted(self.ndcg)

    def to_dict(self) -> dict:
        out = {f: {str(k): v for k, v in getattr(self, f).items()} for f in self.FAMILIES}
        out["jensen_gap"] = self.jensen_gap
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        fam = {f: {int(k): v for k, v in d.get(f, {}).items()} for f in cls.FAMILIES}
        return cls(**fam, jensen_gap=d.get("jensen_gap"))

    def rows(self, **prefix) -> list[dict]:
        """Flat CSV rows, one per K; ``prefix`` columns (run id, epoch...) lead."""
        rows = []
        for k in self.ks:
            row = dict(prefix)
            row["K"] = k
            for f in self.FAMILIES:
                row[f] = _fmt(getattr(self, f).get(k))
            row["jensen_gap"] = _fmt(self.jensen_gap)
            rows.append(row)
        return rows


def _fmt(v) -> str:
    return NA_TEXT if v is None else repr(float(v))


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def evaluate_rankings(rankings, ground_truth, catalog: GroupCatalog,
                      ks=(5, 10, 20)) -> MetricsReport:
    """All four metric families for each K; fairness is ``NA`` with no rankings."""
    rankings = list(rankings)
    report = MetricsReport()
    adj = build_adjacency(catalog)
    for k in ks:
        report.ndcg[k] = ndcg_at_k(rankings, ground_truth, k)
        report.mrr[k] = mrr_at_k(rankings, ground_truth, k)
        if rankings:
            util = group_utilities(rankings, adj, k, catalog.m)
            report.mmf[k] = mmf_from_utilities(util)
            report.gini[k] = gini(util) if len(util) >= 2 else NA
        else:
            report.mmf[k] = NA
            report.gini[k] = NA
    return report
