from fractions import Fraction

import numpy as np
import pytest

from ltekge.decoders import DecoderSpec
from ltekge.encoders import EncoderSpec
from ltekge.evaluation import (MetricsReport, aggregate_metrics, evaluate_split, filtered_rank,
                               rank_queries)
from ltekge.exceptions import ContractError
from ltekge.kg import TripleSet, build_filter_index
from ltekge.model import KGCModel
from ltekge.synthetic import random_kg


def brute_rank(scores, gold, known):
    """Exact rank by pairwise comparison, as a Fraction."""
    higher = ties = 0
    for c, s in enumerate(scores):
        if c == gold or c in known:
            continue
        if s > scores[gold]:
            higher += 1
        elif s == scores[gold]:
            ties += 1
    return 1 + higher + Fraction(ties, 2)


def brute_metrics(ranks):
    n = len(ranks)
    return {"mr": sum(ranks, Fraction(0)) / n,
            "mrr": sum((1 / Fraction(r) for r in ranks), Fraction(0)) / n,
            "hits": {k: Fraction(sum(1 for r in ranks if r <= k), n) for k in (1, 3, 10)}}


def test_rank_examples():
    assert filtered_rank([0.1, 0.9, 0.3], 1).filtered_rank == 1
    assert filtered_rank(np.ones(5), 2).filtered_rank == 3
    with pytest.raises(ContractError):
        filtered_rank([1.0, 2.0], 0, known={1})


def test_random_instance_with_filtered_answers():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 6, 20).astype(float)
    known = {0, 4, 7, 11}
    gold = 4
    res = filtered_rank(scores, gold, known)
    assert res.filtered_rank == brute_rank(scores, gold, known - {gold})
    raw = filtered_rank(scores, gold).filtered_rank
    assert res.filtered_rank <= raw


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = rng.integers(0, 4, 15).astype(float)
        gold = int(rng.integers(15))
        known = {gold, int(rng.integers(15))}
        base = filtered_rank(scores, gold, known).filtered_rank
        perm = rng.permutation(15)
        inv = np.argsort(perm)
        assert filtered_rank(scores[perm], int(inv[gold]), {int(inv[k]) for k in known}).filtered_rank == base


def test_aggregate_examples():
    m = aggregate_metrics([1, 2, 4])
    assert m.mrr == pytest.approx(0.583333, abs=1e-6)
    assert m.mr == pytest.approx(2.333, abs=1e-3)
    assert m.hits[3] == pytest.approx(2 / 3) and m.hits[1] == pytest.approx(1 / 3)
    ones = aggregate_metrics([1, 1, 1])
    assert ones.mrr == ones.mr == ones.hits[1] == ones.hits[10] == 1
    with pytest.raises(ContractError):
        aggregate_metrics([])


def test_aggregate_scalar_loop_oracle():
    ranks = np.random.default_rng(2).integers(1, 500, 1000).astype(float)
    m = aggregate_metrics(ranks.tolist())
    mr = mrr = 0.0
    for r in ranks:
        mr += r
        mrr += 1.0 / r
    assert abs(m.mr - mr / 1000) < 1e-12 * m.mr and abs(m.mrr - mrr / 1000) < 1e-12
    assert m.hits[1] <= m.hits[3] <= m.hits[10]


def test_metrics_json_schema():
    payload = aggregate_metrics([1, 3]).to_dict("test", {"encoder": "lte"}, 7)
    assert set(payload) == {"split", "mr", "mrr", "hits", "query_count", "wall_time_s",
                            "config_echo", "graph_seed"}
    assert set(payload["hits"]) == {"1", "3", "10"}


class TableModel:
    """Scores every query from a fixed ``(|E|, 2|R|, |E|)`` table."""

    def __init__(self, table, num_relations):
        self.table = table
        self.num_relations = num_relations

    def score_queries(self, heads, rels, batch_size=None):
        return self.table[heads, rels]


def check_against_oracle(n, r, seed):
    rng = np.random.default_rng(seed)
    raw = random_kg(n, r, int(rng.integers(3, 4 * n)), seed)
    parts = np.array_split(raw[rng.permutation(len(raw))], 3)
    splits = [TripleSet(p, t) for p, t in zip(parts, ("train", "valid", "test"))]
    if not len(splits[2]):
        return 0
    index = build_filter_index(splits)
    # coarse integer scores make ties common
    table = rng.integers(0, 4, size=(n, 2 * r, n)).astype(float)
    report, results = evaluate_split(TableModel(table, r), splits[2], index, batch_size=3,
                                     return_ranks=True)
    ranks = []
    for h, rel, t in splits[2]:
        ranks.append(brute_rank(table[h, rel], t, index.tails(h, rel) - {t}))
    for h, rel, t in splits[2]:
        ranks.append(brute_rank(table[t, rel + r], h, index.heads(t, rel) - {h}))
    assert [res.filtered_rank for res in results] == [float(x) for x in ranks]
    oracle = brute_metrics(ranks)
    assert report.mr == float(oracle["mr"])
    assert report.mrr == float(oracle["mrr"])
    assert report.hits == {k: float(v) for k, v in oracle["hits"].items()}
    assert report.query_count == 2 * len(splits[2])
    return 1


def test_evaluation_matches_brute_force_small_sample():
    assert sum(check_against_oracle(12, 2, s) for s in range(10)) > 5


def test_single_triple_three_entities():
    split = TripleSet(np.array([[0, 0, 2]]), "test")
    index = build_filter_index([split])
    table = np.zeros((3, 2, 3))
    table[0, 0] = [1.0, 5.0, 3.0]   # tail query: entity 1 beats gold 2
    table[2, 1] = [2.0, 2.0, 0.0]   # head query: tie with entity 1
    report = evaluate_split(TableModel(table, 1), split, index)
    assert report.query_count == 2
    assert report.mr == (2 + 1.5) / 2
    assert report.mrr == float(Fraction(7, 12))


def test_perfect_model_and_rerun():
    split = TripleSet(np.array([[0, 0, 1], [1, 0, 2]]), "test")
    index = build_filter_index([split])
    table = np.zeros((3, 2, 3))
    for h, r, t in split:
        table[h, r, t] = 1
        table[t, r + 1, h] = 1
    a = evaluate_split(TableModel(table, 1), split, index)
    assert a.mrr == 1.0 and a.hits[1] == 1.0
    assert a.same_metrics(evaluate_split(TableModel(table, 1), split, index))


def test_model_evaluation_deterministic():
    raw = random_kg(15, 2, 40, 0)
    splits = [TripleSet(raw[:30], "train"), TripleSet(raw[30:35], "valid"), TripleSet(raw[35:], "test")]
    model = KGCModel(15, 2, EncoderSpec("lte", g_chain=("batchnorm", "dropout")),
                     DecoderSpec("distmult", embedding_dim=8))
    index = build_filter_index(splits)
    a = evaluate_split(model, splits[2], index)
    b = evaluate_split(model, splits[2], index)
    assert a.same_metrics(b)


def test_rank_queries_matches_scalar():
    rng = np.random.default_rng(4)
    scores = rng.integers(0, 3, size=(6, 9)).astype(float)
    golds = rng.integers(0, 9, 6)
    filters = [frozenset({int(g), int(rng.integers(9))}) for g in golds]
    vec = rank_queries(scores, golds, filters)
    for i in range(6):
        assert vec[i] == filtered_rank(scores[i], int(golds[i]), filters[i]).filtered_rank


def test_metrics_report_validation():
    with pytest.raises(ContractError):
        MetricsReport(mr=0.5, mrr=0.5, hits={}, query_count=1)
