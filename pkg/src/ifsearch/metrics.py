"""Evaluation metrics: RMSE and per-user top-K ranking quality.

Ranking is over each user's own test items. A rating equal to the positive
threshold (5 by default) counts as relevant; users without a single positive
test item are excluded from the Hit/NDCG averages.
"""

from dataclasses import dataclass

import numpy as np


def rmse(predictions, targets):
    """Root mean squared error between two equal-length vectors."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs "
                         f"{targets.shape}")
    if predictions.size == 0:
        raise ValueError("rmse needs at least one prediction")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


@dataclass
class EvalReport:
    """Aggregated evaluation of one split."""

    split: str
    rmse: float
    hit: dict
    ndcg: dict
    n_users: int
    n_records: int

    def to_dict(self):
        out = {"split": self.split, "rmse": self.rmse,
               "n_users": self.n_users, "n_records": self.n_records}
        for k in sorted(self.hit):
            out[f"hit@{k}"] = self.hit[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out


def _dcg(flags, limit):
    ranks = np.arange(1, min(limit, flags.size) + 1)
    return float(np.sum(flags[:ranks.size] / np.log2(ranks + 1)))


def ranking_metrics(scores, rows, cols, values, ks=(5, 10), positive=5.0):
    """Per-user Hit@K and NDCG@K averaged over users with >= 1 positive.

    scores/rows/cols/values are aligned per-record arrays of one split;
    each user's records are ranked by score descending with ties broken by
    item index. Returns (hit, ndcg, n_users) with hit/ndcg keyed by K.
    """
    scores = np.asarray(scores, dtype=float)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    values = np.asarray(values, dtype=float)
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks):
        raise ValueError(f"K values must be >= 1, got {ks}")
    hit = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    n_users = 0
    order = np.argsort(rows, kind="stable")
    boundaries = np.flatnonzero(np.diff(rows[order])) + 1
    for chunk in np.split(order, boundaries):
        pos = values[chunk] >= positive
        if not pos.any():
            continue
        n_users += 1
        # last lexsort key is primary: score descending, then item index
        ranked = chunk[np.lexsort((cols[chunk], -scores[chunk]))]
        flags = (values[ranked] >= positive).astype(float)
        n_pos = int(pos.sum())
        for k in ks:
            hit[k] += 1.0 if flags[:k].any() else 0.0
            ideal = _dcg(np.ones(n_pos), k)
            ndcg[k] += _dcg(flags, k) / ideal
    if n_users == 0:
        raise ValueError(f"no user has a rating >= {positive} in this split")
    for k in ks:
        hit[k] /= n_users
        ndcg[k] /= n_users
    return hit, ndcg, n_users
