"""Users, products, the category taxonomy, purchase logs and questions.

Also hosts the shopping-question labeling rule and the purchase-window
correlation analyses.

On-disk layout of a dataset directory (UTF-8, one JSON object per line,
keys written in the order listed, timestamps in integer seconds):

``catalog.jsonl``
    ``{"kind": "category", "id", "name", "parent_id"}`` records first
    (``parent_id`` is ``null`` for roots), then
    ``{"kind": "product", "id", "name", "category_id"}`` records.
``purchases.jsonl``
    ``{"user_id", "product_id", "timestamp"}`` sorted by
    ``(user_id, timestamp, product_id)``.
``questions.jsonl``
    ``{"question_id", "user_id", "product_id", "timestamp",
    "question_tokens", "answer_tokens", "label", "split"}``; ``label`` is
    ``"SPQ"``, ``"NSPQ"`` or ``null``; ``split`` is ``"train"``,
    ``"validation"``, ``"test"`` or ``null``.
"""

from __future__ import annotations

import bisect
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPQ = "SPQ"
NSPQ = "NSPQ"
SPLITS = ("train", "validation", "test")
DAY = 86400
WINDOW_DAYS = 28


class CatalogError(KeyError):
    """Unknown product/category id or a malformed taxonomy."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested for a constant series."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    parent_id: int | None = None


@dataclass(frozen=True)
class Product:
    id: int
    name: str
    category_id: int


@dataclass(frozen=True, slots=True)
class PurchaseEvent:
    user_id: int
    product_id: int
    timestamp: int


@dataclass(frozen=True)
class Question:
    question_id: int
    user_id: int
    product_id: int
    timestamp: int
    question_tokens: tuple[str, ...]
    answer_tokens: tuple[str, ...] = ()
    label: str | None = None

    def __post_init__(self):
        for tok in (*self.question_tokens, *self.answer_tokens):
            if not tok or tok != tok.lower():
                raise DatasetError(f"question {self.question_id}: token {tok!r} must be lowercase, non-empty")
        if self.label not in (None, SPQ, NSPQ):
            raise DatasetError(f"question {self.question_id}: bad label {self.label!r}")


class ProductCatalog:
    """Products and a category forest."""

    def __init__(self, categories: Iterable[Category], products: Iterable[Product]):
        self.categories: dict[int, Category] = {c.id: c for c in categories}
        self.products: dict[int, Product] = {p.id: p for p in products}
        for c in self.categories.values():
            if c.parent_id is not None and c.parent_id not in self.categories:
                raise CatalogError(f"category {c.id} has unknown parent {c.parent_id}")
        for c in self.categories.values():
            seen = {c.id}
            cur = c
            while cur.parent_id is not None:
                if cur.parent_id in seen:
                    raise CatalogError(f"category cycle through {cur.parent_id}")
                seen.add(cur.parent_id)
                cur = self.categories[cur.parent_id]
        for p in self.products.values():
            if p.category_id not in self.categories:
                raise CatalogError(f"product {p.id} has unknown category {p.category_id}")

    def product(self, product_id: int) -> Product:
        try:
            return self.products[product_id]
        except KeyError:
            raise CatalogError(f"unknown product {product_id}") from None

    def category_of(self, product_id: int) -> int:
        return self.product(product_id).category_id

    def parent_of(self, category_id: int) -> int:
        """Immediate parent; a root is its own parent."""
        try:
            cat = self.categories[category_id]
        except KeyError:
            raise CatalogError(f"unknown category {category_id}") from None
        return cat.id if cat.parent_id is None else cat.parent_id


@dataclass
class Dataset:
    catalog: ProductCatalog
    purchases: list[PurchaseEvent]
    questions: list[Question]
    splits: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for e in self.purchases:
            if e.product_id not in self.catalog.products:
                raise CatalogError(f"purchase of unknown product {e.product_id}")
            if e.timestamp < 0:
                raise DatasetError(f"negative purchase timestamp {e.timestamp}")
        for q in self.questions:
            if q.product_id not in self.catalog.products:
                raise CatalogError(f"question {q.question_id} about unknown product {q.product_id}")
        for qid, tag in self.splits.items():
            if tag not in SPLITS:
                raise DatasetError(f"question {qid}: unknown split {tag!r}")
        by_user: dict[int, list[PurchaseEvent]] = defaultdict(list)
        for e in self.purchases:
            by_user[e.user_id].append(e)
        self._by_user = {
            u: sorted(evs, key=lambda e: (e.timestamp, e.product_id)) for u, evs in by_user.items()
        }
        self._times = {u: [e.timestamp for e in evs] for u, evs in self._by_user.items()}

    def user_purchases(self, user_id: int) -> list[PurchaseEvent]:
        """The user's log, ascending by time."""
        return self._by_user.get(user_id, [])

    def history_window(self, user_id: int, t: int, window_days: int = WINDOW_DAYS) -> list[int]:
        evs = self._by_user.get(user_id)
        if not evs:
            return []
        times = self._times[user_id]
        lo = bisect.bisect_left(times, t - window_days * DAY)
        hi = bisect.bisect_left(times, t)
        return [e.product_id for e in evs[lo:hi]]

    def label(self, q: Question, window_days: int = WINDOW_DAYS) -> str:
        return label_question(q, self.user_purchases(q.user_id), self.catalog, window_days)

    def split(self, tag: str) -> list[Question]:
        if tag not in SPLITS:
            raise DatasetError(f"unknown split {tag!r}")
        return [q for q in self.questions if self.splits.get(q.question_id) == tag]


def label_question(
    q: Question,
    purchases: Sequence[PurchaseEvent],
    catalog: ProductCatalog,
    window_days: int = WINDOW_DAYS,
) -> str:
    """SPQ iff the user bought the product or a same-category one within the window after asking.

    ``purchases`` is the asking user's log sorted by time; the window is
    ``(q.timestamp, q.timestamp + window_days days]``.
    """
    target = catalog.category_of(q.product_id)
    times = [e.timestamp for e in purchases]
    lo = bisect.bisect_right(times, q.timestamp)
    hi = bisect.bisect_right(times, q.timestamp + window_days * DAY)
    for e in purchases[lo:hi]:
        if e.user_id != q.user_id:
            continue
        if e.product_id == q.product_id or catalog.category_of(e.product_id) == target:
            return SPQ
    return NSPQ


def history_window(
    purchases: Sequence[PurchaseEvent], t: int, window_days: int = WINDOW_DAYS
) -> list[int]:
    """Products bought in ``[t - window_days days, t)``, order kept, repeats kept."""
    start = t - window_days * DAY
    return [e.product_id for e in purchases if start <= e.timestamp < t]


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson: series shapes differ ({x.shape} vs {y.shape})")
    if x.size < 2:
        raise ValueError("pearson: need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("pearson: zero variance series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class WindowCorrelations:
    r_T0_Tm1: float
    r_T0_Tm2: float
    r_T0_Tm3: float
    r_prior_purchase_vs_spq: float
    n_questions: int

    def as_dict(self) -> dict:
        return {
            "r_T0_Tm1": self.r_T0_Tm1,
            "r_T0_Tm2": self.r_T0_Tm2,
            "r_T0_Tm3": self.r_T0_Tm3,
            "r_prior_purchase_vs_spq": self.r_prior_purchase_vs_spq,
            "n_questions": self.n_questions,
        }


def window_indicators(ds: Dataset, questions: Sequence[Question] | None = None, window_days: int = WINDOW_DAYS):
    """Same-category purchase indicators per question for T0, T-1, T-2, T-3.

    T0 is ``(t, t+w]``; T-k is ``[t-k*w, t-(k-1)*w)``. Returns an int array
    of shape ``(n_questions, 4)``.
    """
    qs = ds.questions if questions is None else questions
    w = window_days * DAY
    cat_times: dict[tuple[int, int], list[int]] = defaultdict(list)
    for e in ds.purchases:
        cat_times[(e.user_id, ds.catalog.category_of(e.product_id))].append(e.timestamp)
    for v in cat_times.values():
        v.sort()
    out = np.zeros((len(qs), 4), dtype=np.int64)
    for i, q in enumerate(qs):
        times = cat_times.get((q.user_id, ds.catalog.category_of(q.product_id)))
        if not times:
            continue
        t = q.timestamp
        out[i, 0] = bisect.bisect_right(times, t + w) > bisect.bisect_right(times, t)
        for k in (1, 2, 3):
            out[i, k] = bisect.bisect_left(times, t - (k - 1) * w) > bisect.bisect_left(times, t - k * w)
    return out


def purchase_window_correlations(ds: Dataset, window_days: int = WINDOW_DAYS) -> WindowCorrelations:
    labeled = [q for q in ds.questions if q.label is not None]
    if not labeled:
        raise DatasetError("purchase_window_correlations: no labeled questions")
    ind = window_indicators(ds, labeled, window_days)
    spq = np.array([q.label == SPQ for q in labeled], dtype=np.float64)
    return WindowCorrelations(
        r_T0_Tm1=pearson(ind[:, 0], ind[:, 1]),
        r_T0_Tm2=pearson(ind[:, 0], ind[:, 2]),
        r_T0_Tm3=pearson(ind[:, 0], ind[:, 3]),
        r_prior_purchase_vs_spq=pearson(ind[:, 1], spq),
        n_questions=len(labeled),
    )


# serialization


def _dump(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"))


def write_dataset(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "catalog.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for c in sorted(ds.catalog.categories.values(), key=lambda c: c.id):
            fh.write(_dump({"kind": "category", "id": c.id, "name": c.name, "parent_id": c.parent_id}) + "\n")
        for p in sorted(ds.catalog.products.values(), key=lambda p: p.id):
            fh.write(_dump({"kind": "product", "id": p.id, "name": p.name, "category_id": p.category_id}) + "\n")
    with open(d / "purchases.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for e in sorted(ds.purchases, key=lambda e: (e.user_id, e.timestamp, e.product_id)):
            fh.write(_dump({"user_id": e.user_id, "product_id": e.product_id, "timestamp": e.timestamp}) + "\n")
    with open(d / "questions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for q in ds.questions:
            rec = {
                "question_id": q.question_id,
                "user_id": q.user_id,
                "product_id": q.product_id,
                "timestamp": q.timestamp,
                "question_tokens": list(q.question_tokens),
                "answer_tokens": list(q.answer_tokens),
                "label": q.label,
                "split": ds.splits.get(q.question_id),
            }
            fh.write(_dump(rec) + "\n")


def _records(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path.name}:{lineno}: {exc}") from exc


def read_questions(path: str | Path) -> tuple[list[Question], dict[int, str]]:
    questions, splits = [], {}
    for r in _records(Path(path)):
        try:
            q = Question(
                question_id=int(r["question_id"]),
                user_id=int(r["user_id"]),
                product_id=int(r["product_id"]),
                timestamp=int(r["timestamp"]),
                question_tokens=tuple(r["question_tokens"]),
                answer_tokens=tuple(r.get("answer_tokens", ())),
                label=r.get("label"),
            )
        except KeyError as exc:
            raise DatasetError(f"{Path(path).name}: missing field {exc}") from None
        questions.append(q)
        if r.get("split") is not None:
            splits[q.question_id] = r["split"]
    return questions, splits


def read_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    for name in ("catalog.jsonl", "purchases.jsonl", "questions.jsonl"):
        if not (d / name).is_file():
            raise DatasetError(f"missing {name} in {d}")
    cats, prods = [], []
    try:
        for r in _records(d / "catalog.jsonl"):
            if r["kind"] == "category":
                cats.append(Category(int(r["id"]), r["name"], r["parent_id"]))
            elif r["kind"] == "product":
                prods.append(Product(int(r["id"]), r["name"], int(r["category_id"])))
            else:
                raise DatasetError(f"catalog.jsonl: unknown record kind {r['kind']!r}")
        purchases = [
            PurchaseEvent(int(r["user_id"]), int(r["product_id"]), int(r["timestamp"]))
            for r in _records(d / "purchases.jsonl")
        ]
    except KeyError as exc:
        raise DatasetError(f"{d}: missing field {exc}") from None
    questions, splits = read_questions(d / "questions.jsonl")
    return Dataset(ProductCatalog(cats, prods), purchases, questions, splits)
