"""Leave-one-out ranking evaluation with HR@K and NDCG@K.

Ties are pessimistic: the held-out positive loses every tie.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SplitDataset
from .model import MpmConfig, Params, predict


class EvaluationError(ValueError):
    pass


@dataclass
class RankedResult:
    user: int
    rank: int
    scores: np.ndarray | None = None


@dataclass
class MetricSummary:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    results: list[RankedResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_users": self.n_users,
        }


def rank_positive(scores, positive_index: int = 0) -> int:
    """1-based rank of the positive among all candidates."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise EvaluationError("non-finite candidate score")
    pos = s[positive_index]
    others = np.delete(s, positive_index)
    return 1 + int(np.count_nonzero(others >= pos))


def _ranks(results) -> np.ndarray:
    ranks = np.array([r.rank if isinstance(r, RankedResult) else int(r) for r in results], dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("no results to aggregate")
    return ranks


def hit_rate(results: Sequence[RankedResult | int], k: int) -> float:
    return float(np.mean(_ranks(results) <= k))


def ndcg(results: Sequence[RankedResult | int], k: int) -> float:
    # a single relevant item makes the ideal DCG 1
    ranks = _ranks(results)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.sum() / len(ranks))


def ndcg_at_rank(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def summarize(results: list[RankedResult], ks: Sequence[int] = (10,)) -> MetricSummary:
    return MetricSummary(
        hr={k: hit_rate(results, k) for k in ks},
        ndcg={k: ndcg(results, k) for k in ks},
        n_users=len(results),
        results=results,
    )


Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def model_scorer(kind: str, params: Params, config: MpmConfig) -> Scorer:
    def score(users, histories, targets):
        return predict(kind, params, config, users, histories, targets, training=False).data

    return score


def evaluate(
    kind: str | None,
    params: Params | None,
    split: SplitDataset,
    side: str,
    config: MpmConfig,
    ks: Sequence[int] = (10,),
    scorer: Scorer | None = None,
    users_per_batch: int = 64,
    keep_scores: bool = False,
) -> MetricSummary:
    """Rank each user's held-out positive against its sampled negatives.

    The history is the K items just before the held-out position in the
    user's full list. Users with too short a prefix are skipped. ``scorer``
    overrides the model (used for test doubles).
    """
    if scorer is None:
        scorer = model_scorer(kind, params, config)
    holdout = split.holdout(side)
    k = config.history_size
    users = [u for u in range(split.num_users) if holdout.positions[u] >= k]
    results: list[RankedResult] = []
    n_cand = 1 + holdout.negatives.shape[1]
    for start in range(0, len(users), users_per_batch):
        chunk = users[start:start + users_per_batch]
        cand = np.stack([holdout.candidates(u) for u in chunk])  # [U, C]
        hist = np.stack([split.history_before(u, holdout.positions[u], k) for u in chunk])
        flat_users = np.repeat(chunk, n_cand)
        flat_hist = np.repeat(hist, n_cand, axis=0)
        scores = np.asarray(scorer(flat_users, flat_hist, cand.reshape(-1))).reshape(len(chunk), n_cand)
        for u, row in zip(chunk, scores):
            results.append(RankedResult(u, rank_positive(row, 0), row.copy() if keep_scores else None))
    return summarize(results, ks)
