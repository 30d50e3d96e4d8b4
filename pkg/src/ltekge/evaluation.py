"""Filtered link-prediction ranking and MR / MRR / Hits@N aggregation."""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .exceptions import ContractError
from .kg import FilterIndex, TripleSet

HITS_AT = (1, 3, 10)


@dataclass(frozen=True)
class RankResult:
    query: tuple
    direction: str
    filtered_rank: float


@dataclass
class MetricsReport:
    mr: float
    mrr: float
    hits: dict
    query_count: int
    wall_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mrr <= 1.0 or self.mr < 1.0:
            raise ContractError(f"inconsistent metrics: mr={self.mr}, mrr={self.mrr}")

    def to_dict(self, split=None, config_echo=None, graph_seed=None) -> dict:
        return {
            "split": split,
            "mr": self.mr,
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "query_count": self.query_count,
            "wall_time_s": self.wall_time,
            "config_echo": config_echo or {},
            "graph_seed": graph_seed,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(**kwargs), indent=2, sort_keys=True)

    def same_metrics(self, other: "MetricsReport") -> bool:
        return (self.mr == other.mr and self.mrr == other.mrr and self.hits == other.hits
                and self.query_count == other.query_count)


def filtered_rank(scores, gold: int, known=(), query=None, direction="tail") -> RankResult:
    """Rank of ``gold`` among candidates after removing the other known answers.

    ``rank = 1 + #{c : s_c > s_gold} + #{c != gold : s_c == s_gold} / 2`` over the
    unfiltered candidates.  Higher scores rank first.
    """
    scores = np.asarray(scores)
    known = set(int(k) for k in known)
    if known and gold not in known:
        raise ContractError(f"gold entity {gold} is missing from the filter entry of query {query}")
    keep = np.ones(scores.shape[0], dtype=bool)
    if known:
        keep[list(known)] = False
    keep[gold] = False
    target = scores[gold]
    higher = int(np.count_nonzero(keep & (scores > target)))
    ties = int(np.count_nonzero(keep & (scores == target)))
    return RankResult(query, direction, 1.0 + higher + ties / 2.0)


def aggregate_metrics(ranks, wall_time: float = 0.0) -> MetricsReport:
    values = [r.filtered_rank if isinstance(r, RankResult) else float(r) for r in ranks]
    if not values:
        raise ContractError("cannot aggregate an empty rank list")
    n = len(values)
    # exact rational sums, rounded once: ranks are half-integers with few distinct values
    counts = Counter(values)
    mr = sum((Fraction(v) * c for v, c in counts.items()), Fraction(0)) / n
    mrr = sum((c / Fraction(v) for v, c in counts.items()), Fraction(0)) / n
    return MetricsReport(
        mr=float(mr),
        mrr=float(mrr),
        hits={k: sum(1 for v in values if v <= k) / n for k in HITS_AT},
        query_count=n,
        wall_time=wall_time,
    )


def rank_queries(score_rows, golds, filters) -> np.ndarray:
    """Vectorized :func:`filtered_rank` over a batch of score rows."""
    score_rows = np.asarray(score_rows)
    b, n = score_rows.shape
    golds = np.asarray(golds, dtype=np.int64)
    keep = np.ones((b, n), dtype=bool)
    for i, known in enumerate(filters):
        if known:
            if golds[i] not in known:
                raise ContractError(f"gold entity {golds[i]} is missing from its filter entry")
            keep[i, list(known)] = False
    keep[np.arange(b), golds] = False
    target = score_rows[np.arange(b), golds][:, None]
    higher = np.count_nonzero(keep & (score_rows > target), axis=1)
    ties = np.count_nonzero(keep & (score_rows == target), axis=1)
    return 1.0 + higher + ties / 2.0


def tail_and_head_queries(split: TripleSet, num_relations: int, filter_index: FilterIndex):
    """Both query directions per triple; head queries use inverse relations."""
    t = split.triples
    heads = np.concatenate([t[:, 0], t[:, 2]])
    rels = np.concatenate([t[:, 1], t[:, 1] + num_relations])
    golds = np.concatenate([t[:, 2], t[:, 0]])
    filters = [filter_index.tails(int(h), int(r)) for h, r, _ in t] + \
              [filter_index.heads(int(tl), int(r)) for _, r, tl in t]
    directions = ["tail"] * len(t) + ["head"] * len(t)
    return heads, rels, golds, filters, directions


def evaluate_split(model, split: TripleSet, filter_index: FilterIndex,
                   batch_size: int = 256, return_ranks: bool = False):
    """Filtered MR/MRR/Hits over head and tail queries of every triple.

    ``model`` needs ``score_queries(heads, rels)`` returning eval-mode scores
    and a ``num_relations`` attribute (dataset relations, without inverses).
    """
    start = time.perf_counter()
    if not len(split):
        raise ContractError(f"cannot evaluate an empty {split.split_tag} split")
    heads, rels, golds, filters, directions = tail_and_head_queries(
        split, model.num_relations, filter_index)
    ranks = np.empty(len(heads))
    for s in range(0, len(heads), batch_size):
        sl = slice(s, s + batch_size)
        scores = model.score_queries(heads[sl], rels[sl], batch_size=batch_size)
        ranks[sl] = rank_queries(scores, golds[sl], filters[sl])
    report = aggregate_metrics(ranks.tolist(), wall_time=time.perf_counter() - start)
    if return_ranks:
        results = []
        n = len(split)
        for i in range(len(heads)):
            h, r, t = split.triples[i % n]
            results.append(RankResult((int(h), int(r), int(t)), directions[i], float(ranks[i])))
        return report, results
    return report
