"""Question features: behavioral similarities, categorical ids, text vectors.

The six expert inputs, in their fixed order, are question text, answer
text, product, category, parent category and the 6-d behavioral vector
``[avg_dot, max_dot, sum_dot, avg_cos, max_cos, sum_cos]`` comparing the
queried product's purchase embedding with each product the user bought
in the preceding 28 days.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .catalog import Dataset, PurchaseEvent, Question
from .numerics import Tensor, gather_rows, l2_norm, masked_max, reshape, stack, tsum
from .synth import philox

FEATURE_TYPES = ("text_q", "text_a", "product", "category", "parent_category", "behavior")
BEHAVIOR_COMPONENTS = ("avg_dot", "max_dot", "sum_dot", "avg_cos", "max_cos", "sum_cos")


class EmbeddingError(ValueError):
    pass


class IdIndex:
    """Maps catalog ids to table rows; every unseen id shares the last row."""

    def __init__(self, ids: Sequence[int]):
        self.ids = [int(i) for i in ids]
        self._row = {i: r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise EmbeddingError("duplicate ids")

    @property
    def unknown(self) -> int:
        return len(self.ids)

    @property
    def n_rows(self) -> int:
        return len(self.ids) + 1

    def row(self, id_: int) -> int:
        return self._row.get(int(id_), self.unknown)

    def rows(self, ids) -> np.ndarray:
        return np.array([self._row.get(int(i), self.unknown) for i in ids], dtype=np.int64)


@dataclass
class BehavioralEmbeddings:
    users: IdIndex
    products: IdIndex
    user_vectors: np.ndarray
    product_vectors: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.product_vectors.shape[1]

    def product_vector(self, product_id: int) -> np.ndarray:
        return self.product_vectors[self.products.row(product_id)]

    def user_vector(self, user_id: int) -> np.ndarray:
        return self.user_vectors[self.users.row(user_id)]


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_skipgram(
    purchases: Sequence[PurchaseEvent],
    d: int = 50,
    negatives_per_positive: int = 5,
    epochs: int = 5,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 256,
    product_ids: Sequence[int] | None = None,
) -> BehavioralEmbeddings:
    """Skip-gram with negative sampling on ``<user, product>`` purchase pairs.

    Maximizes ``log sigmoid(u.p)`` for observed pairs and
    ``log sigmoid(-u.p')`` for negatives drawn from the product unigram
    distribution raised to 3/4. Plain minibatch SGD with a linearly
    decaying rate. ``product_ids`` fixes the product vocabulary (default:
    products seen in the log); products never purchased keep their
    initial vectors.
    """
    if not purchases:
        raise EmbeddingError("train_skipgram: empty purchase log")
    users = IdIndex(sorted({e.user_id for e in purchases}))
    products = IdIndex(sorted(product_ids) if product_ids is not None else sorted({e.product_id for e in purchases}))
    rng = philox(seed, 101)
    scale = 0.5 / d
    U = rng.uniform(-scale, scale, size=(users.n_rows, d))
    P = rng.uniform(-scale, scale, size=(products.n_rows, d))

    ev = sorted(purchases, key=lambda e: (e.user_id, e.timestamp, e.product_id))
    pu = users.rows([e.user_id for e in ev])
    pp = products.rows([e.product_id for e in ev])
    counts = np.bincount(pp, minlength=products.n_rows).astype(np.float64)
    counts[products.unknown] = 0.0
    noise = counts**0.75
    noise /= noise.sum()
    cdf = np.cumsum(noise)
    cdf[-1] = 1.0

    emb = BehavioralEmbeddings(users, products, U, P)
    n = len(ev)
    total_steps = max(1, epochs * ((n + batch_size - 1) // batch_size))
    step = 0
    K = negatives_per_positive
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            rate = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            ui, pi = pu[b], pp[b]
            ni = np.searchsorted(cdf, rng.random((b.size, K)), side="right")
            u = U[ui]
            pos = P[pi]
            neg = P[ni]
            s_pos = (u * pos).sum(-1)
            s_neg = np.einsum("bd,bkd->bk", u, neg)
            epoch_loss -= _log_sigmoid(s_pos).sum() + _log_sigmoid(-s_neg).sum()
            # d(-loss)/d score
            g_pos = 1.0 - _sigmoid(s_pos)
            g_neg = -_sigmoid(s_neg)
            grad_u = g_pos[:, None] * pos + np.einsum("bk,bkd->bd", g_neg, neg)
            np.add.at(P, pi, rate * g_pos[:, None] * u)
            np.add.at(P, ni.reshape(-1), rate * (g_neg[:, :, None] * u[:, None, :]).reshape(-1, d))
            np.add.at(U, ui, rate * grad_u)
        emb.loss_history.append(epoch_loss / n)
    return emb


def behavioral_features(queried: int, history: Sequence[int], emb: BehavioralEmbeddings) -> np.ndarray:
    """Similarity summary of one question; zeros for an empty history."""
    q_idx = np.array([emb.products.row(queried)])
    h_idx = emb.products.rows(history).reshape(1, -1) if history else np.zeros((1, 1), np.int64)
    mask = np.ones_like(h_idx, dtype=bool) if history else np.zeros((1, 1), bool)
    return behavior_tensor(Tensor(emb.product_vectors), q_idx, h_idx, mask).data[0].copy()


def behavior_tensor(table, q_idx: np.ndarray, hist_idx: np.ndarray, hist_mask: np.ndarray) -> Tensor:
    """Batched behavioral features on the tape; ``table`` rows are product vectors.

    ``hist_idx`` is ``(N, H)`` padded with any valid row and ``hist_mask``
    marks real entries. Returns ``(N, 6)``.
    """
    N, H = hist_idx.shape
    m = hist_mask.astype(np.float64)
    count = m.sum(axis=1)
    q = gather_rows(table, q_idx)
    h = gather_rows(table, hist_idx)
    d = q.shape[1]
    dots = tsum(h * reshape(q, (N, 1, d)), axis=-1)
    denom = reshape(l2_norm(q), (N, 1)) * l2_norm(h)
    cos = dots / denom
    inv = (1.0 / np.maximum(count, 1.0))
    cols = []
    for s in (dots, cos):
        total = tsum(s * m, axis=1)
        cols += [total * inv, masked_max(s, hist_mask, axis=1), total]
    return stack(cols, axis=1)


class TextEncoder(Protocol):
    dim: int

    def encode(self, tokens: Sequence[str]) -> np.ndarray: ...


def _token_key(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=65536)
def _token_vector(token: str, t: int, seed: int) -> np.ndarray:
    key = np.array([_token_key(token), seed % 2**64], dtype=np.uint64)
    v = np.random.Generator(np.random.Philox(key=key)).standard_normal(t)
    v.setflags(write=False)
    return v


def encode_text(tokens: Sequence[str], t: int = 32, seed: int = 0) -> np.ndarray:
    """Hashed bag-of-tokens vector: mean of per-token Gaussian vectors over sqrt(t)."""
    if t < 8:
        raise EmbeddingError(f"text dimension must be >= 8, got {t}")
    if not tokens:
        return np.zeros(t)
    # sorted so the float sum does not depend on token order
    vecs = np.stack([_token_vector(tok, t, seed) for tok in sorted(tokens)])
    return vecs.mean(axis=0) / np.sqrt(t)


@dataclass(frozen=True)
class HashedBagEncoder:
    """Deterministic stand-in for a frozen sentence encoder."""

    dim: int = 32
    seed: int = 0

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return encode_text(tokens, self.dim, self.seed)


@dataclass
class CategoricalTables:
    products: IdIndex
    categories: IdIndex
    parents: IdIndex
    product_table: np.ndarray
    category_table: np.ndarray
    parent_category_table: np.ndarray

    @classmethod
    def for_catalog(cls, catalog, k: int = 16, seed: int = 0) -> "CategoricalTables":
        rng = philox(seed, 102)
        products = IdIndex(sorted(catalog.products))
        cats = IdIndex(sorted(catalog.categories))
        parents = IdIndex(sorted({catalog.parent_of(c) for c in catalog.categories}))

        def init(ix):
            return rng.uniform(-0.05, 0.05, size=(ix.n_rows, k))

        return cls(products, cats, parents, init(products), init(cats), init(parents))


def lookup_categorical(id_: int, index: IdIndex, table: np.ndarray) -> np.ndarray:
    return table[index.row(id_)]


@dataclass
class FeatureBundle:
    """The six expert inputs, each with a leading node axis."""

    question_text_vec: object
    answer_text_vec: object
    product_vec: object
    category_vec: object
    parent_category_vec: object
    behavior_vec: object

    def as_list(self) -> list:
        return [
            self.question_text_vec,
            self.answer_text_vec,
            self.product_vec,
            self.category_vec,
            self.parent_category_vec,
            self.behavior_vec,
        ]


@dataclass
class NodeInputs:
    """Per-question model inputs as row indices and frozen text vectors."""

    text_q: np.ndarray
    text_a: np.ndarray
    product_row: np.ndarray
    category_row: np.ndarray
    parent_row: np.ndarray
    skipgram_row: np.ndarray
    hist_rows: list[np.ndarray]
    product_id: np.ndarray
    category_id: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.product_row)

    def take(self, idx) -> "NodeInputs":
        idx = np.asarray(idx, dtype=np.int64)
        return NodeInputs(
            self.text_q[idx],
            self.text_a[idx],
            self.product_row[idx],
            self.category_row[idx],
            self.parent_row[idx],
            self.skipgram_row[idx],
            [self.hist_rows[i] for i in idx],
            self.product_id[idx],
            self.category_id[idx],
            self.labels[idx],
        )

    def padded_history(self, pad_row: int) -> tuple[np.ndarray, np.ndarray]:
        H = max(1, max((len(h) for h in self.hist_rows), default=0))
        idx = np.full((len(self), H), pad_row, dtype=np.int64)
        mask = np.zeros((len(self), H), dtype=bool)
        for i, h in enumerate(self.hist_rows):
            idx[i, : len(h)] = h
            mask[i, : len(h)] = True
        return idx, mask


@dataclass
class Vocab:
    """Id-to-row maps a trained model depends on."""

    products: IdIndex
    categories: IdIndex
    parents: IdIndex
    skipgram_products: IdIndex
    text_dim: int
    text_seed: int

    def to_dict(self) -> dict:
        return {
            "products": self.products.ids,
            "categories": self.categories.ids,
            "parents": self.parents.ids,
            "skipgram_products": self.skipgram_products.ids,
            "text_dim": self.text_dim,
            "text_seed": self.text_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(
            IdIndex(d["products"]),
            IdIndex(d["categories"]),
            IdIndex(d["parents"]),
            IdIndex(d["skipgram_products"]),
            int(d["text_dim"]),
            int(d["text_seed"]),
        )


def featurize(ds: Dataset, questions: Sequence[Question], vocab: Vocab, window_days: int = 28) -> NodeInputs:
    enc = HashedBagEncoder(vocab.text_dim, vocab.text_seed)
    cat = ds.catalog
    n = len(questions)
    text_q = np.zeros((n, vocab.text_dim))
    text_a = np.zeros((n, vocab.text_dim))
    hist = []
    for i, q in enumerate(questions):
        text_q[i] = enc.encode(q.question_tokens)
        text_a[i] = enc.encode(q.answer_tokens)
        hist.append(vocab.skipgram_products.rows(ds.history_window(q.user_id, q.timestamp, window_days)))
    pids = np.array([q.product_id for q in questions], dtype=np.int64)
    cids = np.array([cat.category_of(p) for p in pids], dtype=np.int64)
    return NodeInputs(
        text_q=text_q,
        text_a=text_a,
        product_row=vocab.products.rows(pids),
        category_row=vocab.categories.rows(cids),
        parent_row=vocab.parents.rows([cat.parent_of(c) for c in cids]),
        skipgram_row=vocab.skipgram_products.rows(pids),
        hist_rows=hist,
        product_id=pids,
        category_id=cids,
        labels=np.array([1.0 if q.label == "SPQ" else 0.0 for q in questions]),
    )
