"""Question graphs over sampled batches.

Nodes are questions; two questions are joined when they ask about the same
product, and every node carries a self-loop. Batches are induced
subgraphs, so no message crosses a batch boundary.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .catalog import Question


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class BatchGraph:
    nodes: np.ndarray  # positions into the sampled split
    product_ids: np.ndarray
    adjacency: np.ndarray  # bool (n, n), symmetric, diagonal True
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1) - 1


def adjacency_from_products(product_ids: Sequence[int]) -> np.ndarray:
    """Same-product adjacency with self-loops, built through product buckets."""
    pids = np.asarray(product_ids)
    n = len(pids)
    if n == 0:
        raise GraphError("empty batch")
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(pids.tolist()):
        buckets[p].append(i)
    adj = np.zeros((n, n), dtype=bool)
    for members in buckets.values():
        idx = np.asarray(members)
        adj[np.ix_(idx, idx)] = True
    return adj


def build_edges(questions: Sequence[Question], labels: np.ndarray | None = None) -> BatchGraph:
    if not questions:
        raise GraphError("empty batch")
    pids = np.array([q.product_id for q in questions], dtype=np.int64)
    return BatchGraph(np.arange(len(questions)), pids, adjacency_from_products(pids), labels)


def _graph(nodes: np.ndarray, product_ids: np.ndarray, labels: np.ndarray | None) -> BatchGraph:
    nodes = np.asarray(nodes, dtype=np.int64)
    pids = np.asarray(product_ids)[nodes]
    return BatchGraph(nodes, pids, adjacency_from_products(pids), None if labels is None else labels[nodes])


def sample_batch(
    product_ids: Sequence[int],
    batch_size: int,
    strategy: str,
    rng: np.random.Generator,
    labels: np.ndarray | None = None,
    bucket_size: int = 4,
) -> BatchGraph:
    """One batch drawn from a split described by its per-question product ids.

    ``uniform`` draws questions without replacement. ``product_bucketed``
    draws products (weighted by how many questions they have) and then up
    to ``bucket_size`` of their questions, until the batch is full.
    """
    pids = np.asarray(product_ids)
    n = len(pids)
    if batch_size > n:
        raise GraphError(f"batch_size {batch_size} larger than split ({n})")
    if batch_size < 1:
        raise GraphError("batch_size must be positive")
    if strategy == "uniform":
        return _graph(np.sort(rng.choice(n, size=batch_size, replace=False)), pids, labels)
    if strategy != "product_bucketed":
        raise GraphError(f"unknown sampling strategy {strategy!r}")
    by_product: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(pids.tolist()):
        by_product[p].append(i)
    keys = sorted(by_product)
    remaining = {k: list(rng.permutation(by_product[k])) for k in keys}
    chosen: list[int] = []
    while len(chosen) < batch_size:
        live = [k for k in keys if remaining[k]]
        weights = np.array([len(remaining[k]) for k in live], dtype=np.float64)
        k = live[rng.choice(len(live), p=weights / weights.sum())]
        take = min(bucket_size, batch_size - len(chosen), len(remaining[k]))
        chosen += [int(x) for x in remaining[k][:take]]
        remaining[k] = remaining[k][take:]
    return _graph(np.array(chosen), pids, labels)


def epoch_batches(
    product_ids: Sequence[int],
    batch_size: int,
    strategy: str,
    rng: np.random.Generator | None = None,
    labels: np.ndarray | None = None,
    bucket_size: int = 4,
) -> Iterator[BatchGraph]:
    """Partition a split into batches, each question exactly once.

    ``uniform`` with ``rng=None`` keeps split order (the deterministic
    evaluation pass). ``product_bucketed`` shuffles same-product chunks of
    ``bucket_size`` questions and packs them into batches.
    """
    pids = np.asarray(product_ids)
    n = len(pids)
    if n == 0:
        raise GraphError("empty split")
    if strategy == "uniform":
        order = np.arange(n) if rng is None else rng.permutation(n)
    elif strategy == "product_bucketed":
        if rng is None:
            raise GraphError("product_bucketed batching needs an rng")
        by_product: dict[int, list[int]] = defaultdict(list)
        for i, p in enumerate(pids.tolist()):
            by_product[p].append(i)
        chunks = []
        for k in sorted(by_product):
            members = rng.permutation(by_product[k])
            chunks += [members[s:s + bucket_size] for s in range(0, len(members), bucket_size)]
        order = np.concatenate([chunks[c] for c in rng.permutation(len(chunks))])
    else:
        raise GraphError(f"unknown sampling strategy {strategy!r}")
    for s in range(0, n, batch_size):
        yield _graph(order[s:s + batch_size], pids, labels)
