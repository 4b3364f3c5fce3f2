"""Full-ranking Top-N evaluation: Recall@N, Precision@N, NDCG@N."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import InteractionSet


@dataclass
class MetricsResult:
    """Mean metrics per cutoff over users with at least one truth item."""

    per_n: dict[int, dict[str, float]]
    users_evaluated: int

    def as_records(self, split: str, config_hash: str, seed: int) -> list[dict]:
        return [{"split": split, "N": n, "recall": vals["recall"],
                 "precision": vals["precision"], "ndcg": vals["ndcg"],
                 "users_evaluated": self.users_evaluated,
                 "config_hash": config_hash, "seed": seed}
                for n, vals in sorted(self.per_n.items())]


def rank_items(user_scores: np.ndarray, masked_items) -> np.ndarray:
    """All unmasked items sorted by score descending, ties to the lower id."""
    num_items = user_scores.shape[0]
    keep = np.ones(num_items, dtype=bool)
    masked = np.asarray(list(masked_items), dtype=np.int64)
    if masked.size:
        keep[masked] = False
    candidates = np.nonzero(keep)[0]
    # stable sort on descending score keeps ascending-id order among ties
    order = np.argsort(-user_scores[candidates], kind="stable")
    return candidates[order]


def metrics_at(ranked: np.ndarray, truth, n: int) -> tuple[float, float, float]:
    """(recall, precision, ndcg) at cutoff n for one user."""
    if n < 1:
        raise ValueError("metric cutoff must be >= 1")
    truth_set = set(int(t) for t in truth)
    if not truth_set:
        raise ValueError("metrics_at: empty truth set")
    top = ranked[:n]
    hits = 0
    dcg = 0.0
    for rank, item in enumerate(top, start=1):
        if int(item) in truth_set:
            hits += 1
            dcg += 1.0 / math.log2(rank + 1)
    idcg = sum(1.0 / math.log2(r + 1)
               for r in range(1, min(len(truth_set), n) + 1))
    return hits / len(truth_set), hits / n, dcg / idcg


def evaluate_scores(score_fn, interactions: InteractionSet, split: str,
                    cutoffs) -> MetricsResult:
    """Mean metrics over eligible users.

    ``score_fn(user) -> np.ndarray`` returns that user's scores over all
    items. Test-split candidates mask train and val positives; val-split
    candidates mask train positives only.
    """
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    cutoffs = sorted(int(n) for n in cutoffs)
    sums = {n: np.zeros(3) for n in cutoffs}
    evaluated = 0
    for user in range(interactions.num_users):
        truth = interactions.test[user] if split == "test" else interactions.val[user]
        if truth.size == 0:
            continue
        masked = list(interactions.train[user])
        if split == "test":
            masked += list(interactions.val[user])
        ranked = rank_items(score_fn(user), masked)
        evaluated += 1
        for n in cutoffs:
            sums[n] += metrics_at(ranked, truth, n)
    per_n = {}
    for n in cutoffs:
        vals = sums[n] / evaluated if evaluated else np.zeros(3)
        per_n[n] = {"recall": float(vals[0]), "precision": float(vals[1]),
                    "ndcg": float(vals[2])}
    return MetricsResult(per_n, evaluated)


def evaluate_representations(user_repr: np.ndarray, item_repr: np.ndarray,
                             interactions: InteractionSet, split: str,
                             cutoffs, block: int = 1024) -> MetricsResult:
    """Inner-product scoring of precomputed representations, blocked over
    users to bound memory at full scale."""
    cache: dict[int, np.ndarray] = {}

    def score_fn(user: int) -> np.ndarray:
        start = (user // block) * block
        if start not in cache:
            cache.clear()
            cache[start] = user_repr[start:start + block] @ item_repr.T
        return cache[start][user - start]

    return evaluate_scores(score_fn, interactions, split, cutoffs)
