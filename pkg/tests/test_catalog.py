import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from spqi.catalog import (
    DAY,
    NSPQ,
    SPQ,
    CatalogError,
    Category,
    Dataset,
    DatasetError,
    Product,
    ProductCatalog,
    PurchaseEvent,
    Question,
    UndefinedCorrelationError,
    history_window,
    label_question,
    pearson,
    purchase_window_correlations,
    read_dataset,
    window_indicators,
    write_dataset,
)

from conftest import random_dataset, small_catalog

T = 1_000 * DAY


def scan_label(q, all_events, catalog, window_days=28):
    """Exhaustive oracle: look at every event in the whole log."""
    target = catalog.products[q.product_id].category_id
    for e in all_events:
        if e.user_id != q.user_id:
            continue
        if not (q.timestamp < e.timestamp <= q.timestamp + window_days * 86400):
            continue
        if e.product_id == q.product_id or catalog.products[e.product_id].category_id == target:
            return SPQ
    return NSPQ


def scan_history(events, user, t, window_days=28):
    return [e.product_id for e in events if e.user_id == user and t - window_days * 86400 <= e.timestamp < t]


def question(pid, t=T, user=0):
    return Question(0, user, pid, t, ("how", "much"))


# catalog structure


def test_root_is_its_own_parent():
    cat = small_catalog()
    assert cat.parent_of(0) == 0
    assert cat.parent_of(1) == 0


def test_category_cycle_rejected():
    with pytest.raises(CatalogError):
        ProductCatalog([Category(0, "a", 1), Category(1, "b", 0)], [])


def test_unknown_parent_and_product_category_rejected():
    with pytest.raises(CatalogError):
        ProductCatalog([Category(0, "a", 9)], [])
    with pytest.raises(CatalogError):
        ProductCatalog([Category(0, "a")], [Product(0, "p", 5)])


def test_unknown_product_is_catalog_error():
    cat = small_catalog()
    with pytest.raises(CatalogError):
        label_question(question(999), [], cat)
    with pytest.raises(KeyError):
        cat.category_of(999)


def test_question_tokens_validated():
    with pytest.raises(DatasetError):
        Question(0, 0, 0, 0, ("How",))
    with pytest.raises(DatasetError):
        Question(0, 0, 0, 0, ("",))


def test_dataset_rejects_bad_records():
    cat = small_catalog()
    with pytest.raises(CatalogError):
        Dataset(cat, [PurchaseEvent(0, 999, 0)], [])
    with pytest.raises(DatasetError):
        Dataset(cat, [PurchaseEvent(0, 0, -1)], [])
    with pytest.raises(DatasetError):
        Dataset(cat, [], [question(0)], {0: "dev"})


# labeling


def test_label_examples():
    cat = small_catalog()
    # products 0..3 are in leaf 1, products 4..7 in leaf 2, both under root 0
    assert label_question(question(0), [PurchaseEvent(0, 0, T + 5 * DAY)], cat) == SPQ
    assert label_question(question(0), [PurchaseEvent(0, 0, T + 29 * DAY)], cat) == NSPQ
    assert label_question(question(0), [PurchaseEvent(0, 2, T + 10 * DAY)], cat) == SPQ


def test_label_parent_category_does_not_count():
    cat = small_catalog()
    assert label_question(question(0), [PurchaseEvent(0, 5, T + DAY)], cat) == NSPQ


def test_label_boundaries():
    cat = small_catalog()
    W = 28 * DAY
    assert label_question(question(0), [PurchaseEvent(0, 0, T + W)], cat) == SPQ
    assert label_question(question(0), [PurchaseEvent(0, 0, T + W + 1)], cat) == NSPQ
    assert label_question(question(0), [PurchaseEvent(0, 0, T)], cat) == NSPQ
    assert label_question(question(0), [PurchaseEvent(0, 0, T + 1)], cat) == SPQ
    assert label_question(question(0), [PurchaseEvent(0, 0, T - 1)], cat) == NSPQ


def test_label_ignores_other_users():
    cat = small_catalog()
    assert label_question(question(0, user=1), [PurchaseEvent(0, 0, T + DAY)], cat) == NSPQ


def test_label_matches_exhaustive_scan(rng):
    for _ in range(5):
        ds = random_dataset(rng)
        for q in ds.questions:
            assert ds.label(q) == scan_label(q, ds.purchases, ds.catalog)


def test_label_window_monotone(rng):
    ds = random_dataset(rng)
    for q in ds.questions:
        labels = [ds.label(q, w) for w in (1, 7, 14, 28, 56)]
        first = labels.index(SPQ) if SPQ in labels else len(labels)
        assert all(l == SPQ for l in labels[first:])


# history window


def test_history_examples():
    cat = small_catalog()
    ds = Dataset(
        cat,
        [PurchaseEvent(0, 1, T - DAY), PurchaseEvent(0, 2, T - 27 * DAY), PurchaseEvent(0, 3, T - 29 * DAY)],
        [],
    )
    assert sorted(ds.history_window(0, T)) == [1, 2]
    assert ds.history_window(7, T) == []
    assert Dataset(cat, [PurchaseEvent(0, 1, T)], []).history_window(0, T) == []


def test_history_boundaries_and_duplicates():
    cat = small_catalog()
    evs = [PurchaseEvent(0, 1, T - 28 * DAY), PurchaseEvent(0, 2, T - DAY), PurchaseEvent(0, 2, T - DAY // 2)]
    ds = Dataset(cat, evs, [])
    assert ds.history_window(0, T) == [1, 2, 2]
    assert history_window(evs, T) == [1, 2, 2]


def test_history_matches_linear_scan(rng):
    ds = random_dataset(rng)
    for q in ds.questions:
        got = ds.history_window(q.user_id, q.timestamp)
        assert sorted(got) == sorted(scan_history(ds.purchases, q.user_id, q.timestamp))


# pearson


def test_pearson_examples():
    assert pearson([1, 2, 3, 4], [3, 5, 7, 9]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0, abs=1e-15)
    # hand-computed: cov sum 5.5, sxx 5, syy 8.75
    assert pearson([1, 2, 3, 4], [1, 3, 2, 5]) == pytest.approx(5.5 / math.sqrt(43.75), rel=1e-14)


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_properties(pairs, a, b):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
    r = pearson(x, y)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-9)
    assert pearson(y, x) == pytest.approx(r, abs=1e-12)
    assert pearson(a * x + b, y) == pytest.approx(r, abs=1e-9)
    assert pearson(-x, y) == pytest.approx(-r, abs=1e-12)


# window correlations


def test_window_indicators_match_scan(rng):
    ds = random_dataset(rng)
    ind = window_indicators(ds)
    W = 28 * DAY
    for q, row in zip(ds.questions, ind):
        c = ds.catalog.category_of(q.product_id)
        same = [e.timestamp for e in ds.purchases if e.user_id == q.user_id and ds.catalog.category_of(e.product_id) == c]
        t = q.timestamp
        expect = [
            any(t < s <= t + W for s in same),
            any(t - W <= s < t for s in same),
            any(t - 2 * W <= s < t - W for s in same),
            any(t - 3 * W <= s < t - 2 * W for s in same),
        ]
        assert list(row) == [int(v) for v in expect]


def test_t0_indicator_is_the_label(rng):
    ds = random_dataset(rng)
    ind = window_indicators(ds)
    assert [bool(v) for v in ind[:, 0]] == [ds.label(q) == SPQ for q in ds.questions]


def test_correlation_is_one_when_label_equals_prior_indicator(rng):
    ds = random_dataset(rng)
    prior = window_indicators(ds)[:, 1]
    relabeled = [
        Question(q.question_id, q.user_id, q.product_id, q.timestamp, q.question_tokens, (), SPQ if p else NSPQ)
        for q, p in zip(ds.questions, prior)
    ]
    corr = purchase_window_correlations(Dataset(ds.catalog, ds.purchases, relabeled))
    assert corr.r_prior_purchase_vs_spq == pytest.approx(1.0, abs=1e-12)


def test_correlation_degenerate_and_unlabeled():
    cat = small_catalog()
    qs = [Question(i, 0, 0, T + i, ("x",), (), NSPQ) for i in range(3)]
    with pytest.raises(UndefinedCorrelationError):
        purchase_window_correlations(Dataset(cat, [], qs))
    with pytest.raises(DatasetError):
        purchase_window_correlations(Dataset(cat, [], [question(0)]))


# serialization


def test_dataset_round_trip(tmp_path, rng):
    ds = random_dataset(rng)
    ds.splits.update({q.question_id: "train" for q in ds.questions[:50]})
    write_dataset(ds, tmp_path / "a")
    back = read_dataset(tmp_path / "a")
    write_dataset(back, tmp_path / "b")
    for name in ("catalog.jsonl", "purchases.jsonl", "questions.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert back.questions == ds.questions
    assert back.splits == ds.splits


def test_read_dataset_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
