import numpy as np
import pytest

from spqi.catalog import Question
from spqi.graph import GraphError, adjacency_from_products, build_edges, epoch_batches, sample_batch
from spqi.synth import SynthConfig, generate_dataset


def brute_force(pids):
    n = len(pids)
    adj = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(n):
            adj[a, b] = a == b or pids[a] == pids[b]
    return adj


def questions_for(pids):
    return [Question(i, 0, int(p), 0, ("x",)) for i, p in enumerate(pids)]


def test_distinct_products_give_identity():
    assert np.array_equal(build_edges(questions_for([1, 2, 3, 4])).adjacency, np.eye(4, dtype=bool))


def test_same_product_pair_fully_connected():
    assert build_edges(questions_for([5, 5])).adjacency.all()


def test_mixed_buckets_match_brute_force():
    pids = [3, 1, 3, 2, 1, 3, 9]
    g = build_edges(questions_for(pids))
    assert np.array_equal(g.adjacency, brute_force(pids))
    assert g.degree().tolist() == [2, 1, 2, 0, 1, 2, 0]


def test_random_batches_match_brute_force(rng):
    for _ in range(40):
        n = int(rng.integers(1, 200))
        pids = rng.integers(0, max(1, n // 3), size=n)
        adj = adjacency_from_products(pids)
        assert np.array_equal(adj, brute_force(list(pids)))
        assert np.array_equal(adj, adj.T) and adj.diagonal().all()


def test_permutation_invariance(rng):
    pids = rng.integers(0, 20, size=60)
    adj = adjacency_from_products(pids)
    perm = rng.permutation(60)
    assert np.array_equal(adjacency_from_products(pids[perm]), adj[np.ix_(perm, perm)])


def test_empty_batch():
    with pytest.raises(GraphError):
        build_edges([])


def test_uniform_sample_is_deterministic_and_without_replacement():
    pids = np.arange(50) % 7
    a = sample_batch(pids, 20, "uniform", np.random.default_rng(3))
    b = sample_batch(pids, 20, "uniform", np.random.default_rng(3))
    assert np.array_equal(a.nodes, b.nodes)
    assert len(set(a.nodes.tolist())) == 20
    assert np.array_equal(a.product_ids, pids[a.nodes])


def test_whole_split_batch():
    pids = np.arange(30) % 4
    for strategy in ("uniform", "product_bucketed"):
        g = sample_batch(pids, 30, strategy, np.random.default_rng(0))
        assert sorted(g.nodes.tolist()) == list(range(30))


def test_batch_larger_than_split():
    with pytest.raises(GraphError):
        sample_batch(np.arange(5), 6, "uniform", np.random.default_rng(0))
    with pytest.raises(GraphError):
        sample_batch(np.arange(5), 2, "nearest", np.random.default_rng(0))


def test_bucketed_batches_have_neighbors():
    ds = generate_dataset(SynthConfig(n_users=2000, n_products=300, n_questions=6000, seed=2))
    pids = np.array([q.product_id for q in ds.split("train")])
    rng = np.random.default_rng(0)
    frac = []
    for _ in range(100):
        g = sample_batch(pids, 16, "product_bucketed", rng, bucket_size=4)
        frac.append((g.degree() > 0).mean())
    assert np.mean(frac) >= 0.75


def test_epoch_batches_cover_split_once(rng):
    pids = rng.integers(0, 10, size=103)
    labels = rng.random(103)
    for strategy, r in (("uniform", None), ("uniform", np.random.default_rng(1)), ("product_bucketed", np.random.default_rng(1))):
        batches = list(epoch_batches(pids, 16, strategy, r, labels))
        nodes = np.concatenate([b.nodes for b in batches])
        assert sorted(nodes.tolist()) == list(range(103))
        for b in batches:
            assert np.array_equal(b.labels, labels[b.nodes])
    ordered = list(epoch_batches(pids, 16, "uniform"))
    assert np.concatenate([b.nodes for b in ordered]).tolist() == list(range(103))
    with pytest.raises(GraphError):
        list(epoch_batches(pids, 16, "product_bucketed"))
