import sys

import numpy as np
import pytest

from spqi.catalog import DAY, Category, Dataset, Product, ProductCatalog, PurchaseEvent, Question


def small_catalog(n_roots=2, leaves_per_root=3, products_per_leaf=4):
    cats, prods = [], []
    cid = 0
    pid = 0
    for r in range(n_roots):
        root = cid
        cats.append(Category(root, f"dept{r}", None))
        cid += 1
        for _ in range(leaves_per_root):
            cats.append(Category(cid, f"cat{cid}", root))
            for _ in range(products_per_leaf):
                prods.append(Product(pid, f"item{pid}", cid))
                pid += 1
            cid += 1
    return ProductCatalog(cats, prods)


def random_dataset(rng: np.random.Generator, n_users=20, n_events=300, n_questions=200, span_days=200):
    """Dense random log so many questions sit near window boundaries."""
    cat = small_catalog()
    pids = sorted(cat.products)
    span = span_days * DAY
    events = []
    for _ in range(n_events):
        events.append(PurchaseEvent(int(rng.integers(n_users)), int(rng.choice(pids)), int(rng.integers(span))))
    questions = []
    for i in range(n_questions):
        u = int(rng.integers(n_users))
        mode = rng.integers(3)
        if mode == 0:
            t = int(rng.integers(span))
        else:
            # anchor on a purchase of this user, exactly on or next to a window edge
            own = [e for e in events if e.user_id == u] or events
            e = own[int(rng.integers(len(own)))]
            offset = int(rng.choice([0, 28 * DAY, 28 * DAY + 1, 28 * DAY - 1, -28 * DAY, 1, -1]))
            t = max(0, e.timestamp - offset)
        questions.append(Question(i, u, int(rng.choice(pids)), t, ("how", "much")))
    return Dataset(cat, events, questions)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
