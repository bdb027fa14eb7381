"""Deterministic synthetic e-commerce world with planted shopping intent.

A question's latent intent is Bernoulli with probability
``sigmoid(w_p * (2*prior - 1) + w_c * bias[category] + w_t * phrasing + noise * eps + offset)``
where ``prior`` says whether the user bought from the question's leaf
category in the 28 days before asking, ``bias`` is a per-category level,
``phrasing`` is the +/-1 template the question text was drawn from and
``offset`` is solved so the SPQ fraction hits ``target_spq_rate``.
Intent is realized in the purchase log (a purchase of the queried
product inside the label window, or the removal of same-category
purchases from it) so :func:`spqi.catalog.label_question` returns the
planted label.

All randomness comes from Philox streams keyed by ``(seed, stream)``, so a
config and seed reproduce the same files on every platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .catalog import (
    DAY,
    NSPQ,
    SPQ,
    WINDOW_DAYS,
    Category,
    Dataset,
    Product,
    ProductCatalog,
    PurchaseEvent,
    Question,
    purchase_window_correlations,
    write_dataset,
)

__all__ = [
    "SignalStrengths",
    "SynthConfig",
    "SynthesisError",
    "CalibrationError",
    "generate_dataset",
    "calibrate_signal",
    "write_generated",
    "philox",
]


class SynthesisError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


BUY_PHRASES = ("how", "much", "price", "cost", "order", "buy", "deliver", "deal", "stock", "get")
INFO_PHRASES = ("what", "who", "made", "ingredients", "tell", "about", "history", "is", "does", "mean")
ANSWER_ACK = ("sure", "here", "found", "this", "it", "costs", "rated", "stars")
ANSWER_MISS = ("sorry", "not", "sure", "understand", "that")


@dataclass(frozen=True)
class SignalStrengths:
    prior_purchase_weight: float = 5.0
    category_weight: float = 10.0
    text_weight: float = 0.5
    noise: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"signal_strengths.{k} must be >= 0, got {v}")


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 8000
    n_products: int = 800
    n_categories: int = 40
    taxonomy_branching: int = 4
    n_questions: int = 24000
    target_spq_rate: float = 0.5
    signal_strengths: SignalStrengths = field(default_factory=SignalStrengths)
    category_spq_rate_spread: float = 0.4
    seed: int = 0
    split_fractions: tuple[float, float, float] = (20 / 24, 2 / 24, 2 / 24)
    favored_categories: int = 3
    favored_question_prob: float = 1.0
    favored_daily_rate: float = 0.025
    background_daily_rate: float = 0.01
    propensity_shape: float = 6.0
    horizon_days: int = 300

    def __post_init__(self):
        if not 0.0 < self.target_spq_rate < 1.0:
            raise ValueError(f"target_spq_rate must be in (0, 1), got {self.target_spq_rate}")
        if self.n_products < self.n_categories:
            raise ValueError("n_products must be >= n_categories")
        if min(self.n_users, self.n_products, self.n_categories, self.n_questions, self.taxonomy_branching) < 1:
            raise ValueError("sizes must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.favored_categories > self.n_categories:
            raise ValueError("favored_categories exceeds n_categories")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be non-negative and sum to 1")
        if self.horizon_days < 4 * WINDOW_DAYS + 2 * WINDOW_DAYS:
            raise ValueError("horizon_days too short for the analysis windows")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "signal_strengths" in d and isinstance(d["signal_strengths"], dict):
            d["signal_strengths"] = SignalStrengths(**d["signal_strengths"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)

    def with_weights(self, **kw) -> "SynthConfig":
        return replace(self, signal_strengths=replace(self.signal_strengths, **kw))


def philox(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one named stream of a seed."""
    key = np.array([seed % 2**64, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# stream ids; never renumber, generated files depend on them
_S_TAXONOMY, _S_USERS, _S_PURCHASES, _S_QUESTIONS, _S_LATENT, _S_REALIZE, _S_TEXT, _S_SPLIT = range(1, 9)

# spacing between one user's questions on the same category keeps each
# question's analysis windows [t-84d, t+28d] clear of the others' edits
_SPACING = 4 * WINDOW_DAYS * DAY + DAY


@dataclass
class _World:
    """Everything that does not depend on the signal weights."""

    catalog: ProductCatalog
    leaves: np.ndarray
    leaf_of_product: np.ndarray
    products_by_leaf: list[np.ndarray]
    popularity_by_leaf: list[np.ndarray]
    bias: np.ndarray  # per leaf index
    purchases: dict[int, list[tuple[int, int, int]]]  # user -> [(time, product, leaf_idx)]
    q_user: np.ndarray
    q_time: np.ndarray
    q_leaf: np.ndarray
    q_product: np.ndarray
    prior: np.ndarray
    phrasing: np.ndarray
    eps: np.ndarray
    uniform: np.ndarray
    buy_offset: np.ndarray


def _build_world(cfg: SynthConfig) -> _World:
    seed = cfg.seed
    L = cfg.n_categories
    n_parents = math.ceil(L / cfg.taxonomy_branching)
    cats = [Category(i, f"dept{i}", None) for i in range(n_parents)]
    leaves = np.arange(n_parents, n_parents + L)
    cats += [Category(int(c), f"cat{k}", k // cfg.taxonomy_branching) for k, c in enumerate(leaves)]

    rng = philox(seed, _S_TAXONOMY)
    leaf_of_product = np.arange(cfg.n_products) % L
    rng.shuffle(leaf_of_product)
    products = [Product(j, f"item{j}", int(leaves[leaf_of_product[j]])) for j in range(cfg.n_products)]
    products_by_leaf = [np.flatnonzero(leaf_of_product == k) for k in range(L)]
    popularity_by_leaf = []
    for idx in products_by_leaf:
        w = rng.gamma(1.0, size=idx.size) + 0.05
        popularity_by_leaf.append(w / w.sum())
    bias = np.linspace(-1.0, 1.0, L) if L > 1 else np.zeros(1)
    bias = bias[rng.permutation(L)]
    catalog = ProductCatalog(cats, products)

    # user propensities and background purchase log
    urng = philox(seed, _S_USERS)
    favored = np.stack([urng.choice(L, size=cfg.favored_categories, replace=False) for _ in range(cfg.n_users)])
    fav_rates = cfg.favored_daily_rate * urng.gamma(
        cfg.propensity_shape, 1.0 / cfg.propensity_shape, size=favored.shape
    )

    prng = philox(seed, _S_PURCHASES)
    H = cfg.horizon_days * DAY
    purchases: dict[int, list[tuple[int, int, int]]] = {}
    for u in range(cfg.n_users):
        evs = []
        counts = prng.poisson(fav_rates[u] * cfg.horizon_days)
        n_bg = prng.poisson(cfg.background_daily_rate * cfg.horizon_days)
        leaf_list = np.concatenate([np.repeat(favored[u], counts), prng.integers(0, L, n_bg)])
        times = prng.integers(0, H, size=leaf_list.size)
        for k, t in zip(leaf_list, times):
            p = prng.choice(products_by_leaf[k], p=popularity_by_leaf[k])
            evs.append((int(t), int(p), int(k)))
        evs.sort()
        purchases[u] = evs

    # questions
    qrng = philox(seed, _S_QUESTIONS)
    lo_t = 3 * WINDOW_DAYS * DAY + 6 * DAY
    hi_t = H - WINDOW_DAYS * DAY - DAY
    q_user = qrng.integers(0, cfg.n_users, size=cfg.n_questions)
    q_time = qrng.integers(lo_t, hi_t, size=cfg.n_questions)
    order = np.lexsort((q_time, q_user))
    q_user, q_time = q_user[order], q_time[order]
    q_leaf = np.empty(cfg.n_questions, dtype=np.int64)
    last_seen: dict[tuple[int, int], int] = {}
    for i in range(cfg.n_questions):
        u, t = int(q_user[i]), int(q_time[i])
        choice = None
        for _ in range(20):
            if qrng.random() < cfg.favored_question_prob:
                k = int(favored[u][qrng.integers(cfg.favored_categories)])
            else:
                k = int(qrng.integers(L))
            if t - last_seen.get((u, k), -(10**18)) >= _SPACING:
                choice = k
                break
        if choice is None:
            free = [k for k in range(L) if t - last_seen.get((u, k), -(10**18)) >= _SPACING]
            if not free:
                raise SynthesisError(f"user {u} asks too often to keep question windows disjoint")
            choice = free[int(qrng.integers(len(free)))]
        q_leaf[i] = choice
        last_seen[(u, choice)] = t
    q_product = np.array(
        [qrng.choice(products_by_leaf[k], p=popularity_by_leaf[k]) for k in q_leaf], dtype=np.int64
    )
    # global question order is by time; ties broken by user
    order = np.lexsort((q_user, q_time))
    q_user, q_time, q_leaf, q_product = q_user[order], q_time[order], q_leaf[order], q_product[order]

    W = WINDOW_DAYS * DAY
    prior = np.zeros(cfg.n_questions, dtype=np.int64)
    for i in range(cfg.n_questions):
        t = q_time[i]
        prior[i] = any(
            k == q_leaf[i] and t - W <= tt < t for tt, _, k in purchases[int(q_user[i])]
        )

    lrng = philox(seed, _S_LATENT)
    phrasing = lrng.choice(np.array([-1.0, 1.0]), size=cfg.n_questions)
    eps = lrng.normal(size=cfg.n_questions)
    uniform = lrng.random(cfg.n_questions)
    buy_offset = philox(seed, _S_REALIZE).integers(3600, W - 3600, size=cfg.n_questions)
    return _World(
        catalog, leaves, leaf_of_product, products_by_leaf, popularity_by_leaf, bias, purchases,
        q_user, q_time, q_leaf, q_product, prior, phrasing, eps, uniform, buy_offset,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _intents(world: _World, cfg: SynthConfig) -> np.ndarray:
    s = cfg.signal_strengths
    z = (
        s.prior_purchase_weight * (2.0 * world.prior - 1.0)
        + s.category_weight * world.bias[world.q_leaf]
        + s.text_weight * world.phrasing
        + s.noise * world.eps
    )
    lo, hi = -60.0, 60.0
    target = cfg.target_spq_rate
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(world.uniform < _sigmoid(z + mid)))
        if rate < target:
            lo = mid
        else:
            hi = mid
    intent = world.uniform < _sigmoid(z + hi)
    if abs(intent.mean() - target) > 0.02:
        raise SynthesisError(
            f"cannot reach target_spq_rate {target:.3f} (closest {intent.mean():.3f})"
        )
    return intent


def _tokens(world: _World, cfg: SynthConfig) -> tuple[list[tuple[str, ...]], list[tuple[str, ...]]]:
    rng = philox(cfg.seed, _S_TEXT)
    qs, ans = [], []
    for i in range(cfg.n_questions):
        pool = BUY_PHRASES if world.phrasing[i] > 0 else INFO_PHRASES
        words = [str(w) for w in rng.choice(pool, size=3, replace=False)]
        k = int(world.q_leaf[i])
        toks = words + [f"cat{k}", f"item{int(world.q_product[i])}"]
        if rng.random() < 0.5:
            toks.append("alexa")
        qs.append(tuple(toks))
        if rng.random() < 0.8:
            a = [str(w) for w in rng.choice(ANSWER_ACK, size=3, replace=False)] + [f"cat{k}"]
        else:
            a = list(ANSWER_MISS)
        ans.append(tuple(a))
    return qs, ans


def _realize(world: _World, cfg: SynthConfig) -> tuple[Dataset, np.ndarray]:
    intent = _intents(world, cfg)
    W = WINDOW_DAYS * DAY
    removal: dict[int, list[tuple[int, int]]] = {}
    additions: dict[int, list[tuple[int, int, int]]] = {}
    for i in np.flatnonzero(~intent):
        removal.setdefault(int(world.q_user[i]), []).append((int(world.q_time[i]), int(world.q_leaf[i])))
    for i in np.flatnonzero(intent):
        u = int(world.q_user[i])
        t = int(world.q_time[i]) + int(world.buy_offset[i])
        additions.setdefault(u, []).append((t, int(world.q_product[i]), int(world.q_leaf[i])))

    events: list[PurchaseEvent] = []
    for u, evs in world.purchases.items():
        drops = removal.get(u, ())
        for t, p, k in evs:
            if any(k == kk and tq < t <= tq + W for tq, kk in drops):
                continue
            events.append(PurchaseEvent(u, p, t))
        for t, p, _ in additions.get(u, ()):
            events.append(PurchaseEvent(u, p, t))
    events.sort(key=lambda e: (e.user_id, e.timestamp, e.product_id))

    q_text, a_text = _tokens(world, cfg)
    srng = philox(cfg.seed, _S_SPLIT)
    n = cfg.n_questions
    perm = srng.permutation(n)
    n_train = int(round(cfg.split_fractions[0] * n))
    n_val = int(round(cfg.split_fractions[1] * n))
    tags = np.empty(n, dtype=object)
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_val]] = "validation"
    tags[perm[n_train + n_val:]] = "test"

    questions = [
        Question(
            question_id=i,
            user_id=int(world.q_user[i]),
            product_id=int(world.q_product[i]),
            timestamp=int(world.q_time[i]),
            question_tokens=q_text[i],
            answer_tokens=a_text[i],
            label=SPQ if intent[i] else NSPQ,
        )
        for i in range(n)
    ]
    ds = Dataset(world.catalog, events, questions, {i: str(tags[i]) for i in range(n)})
    mismatches = sum(ds.label(q) != q.label for q in questions)
    if mismatches:
        raise SynthesisError(f"{mismatches} planted labels not recoverable from the purchase log")
    return ds, intent


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """Build a labeled dataset; a pure function of ``cfg`` (seed included)."""
    ds, _ = _realize(_build_world(cfg), cfg)
    return ds


def calibrate_signal(
    cfg: SynthConfig,
    target_r: float,
    probe_questions: int = 20000,
    tol: float = 0.05,
    max_weight: float = 40.0,
    max_iter: int = 40,
) -> SynthConfig:
    """Bisect ``prior_purchase_weight`` so r(prior purchase, SPQ) lands on ``target_r``.

    The probe world is ``cfg`` itself when it has at least
    ``probe_questions`` questions, otherwise ``cfg`` resized to that many.
    Planted labels equal the realized SPQ labels and the planted prior
    indicator equals the T-1 window indicator, so the bisection works on
    the latent arrays; the accepted weight is re-measured on the realized
    dataset with :func:`purchase_window_correlations`.
    """
    if not 0.0 <= target_r < 0.95:
        raise CalibrationError(f"target_r must be in [0, 0.95), got {target_r}")
    probe_cfg = cfg if cfg.n_questions >= probe_questions else replace(cfg, n_questions=probe_questions)
    world = _build_world(probe_cfg)
    prior = world.prior.astype(np.float64)

    def measure(w: float) -> float:
        intent = _intents(world, probe_cfg.with_weights(prior_purchase_weight=w))
        return float(np.corrcoef(prior, intent.astype(np.float64))[0, 1])

    def accept(w: float) -> SynthConfig:
        ds, _ = _realize(world, probe_cfg.with_weights(prior_purchase_weight=w))
        r = purchase_window_correlations(ds).r_prior_purchase_vs_spq
        if abs(r - target_r) > tol:
            raise CalibrationError(f"weight {w:.4f} gives r={r:.3f}, outside {target_r}+/-{tol}")
        return cfg.with_weights(prior_purchase_weight=w)

    lo, hi = 0.0, max_weight
    r_lo = measure(lo)
    if abs(r_lo - target_r) <= tol:
        return accept(lo)
    r_hi = measure(hi)
    if not r_lo < target_r < r_hi:
        raise CalibrationError(
            f"target r={target_r} not bracketed: r({lo})={r_lo:.3f}, r({hi})={r_hi:.3f}"
        )
    # aim well inside the band; the measured r is a step function of the weight
    aim = min(tol / 5, 0.01)
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = measure(mid)
        if best is None or abs(r - target_r) < abs(best[1] - target_r):
            best = (mid, r)
        if abs(r - target_r) <= aim:
            return accept(mid)
        if r < target_r:
            lo = mid
        else:
            hi = mid
    if best is not None and abs(best[1] - target_r) <= tol:
        return accept(best[0])
    raise CalibrationError(f"no weight within {tol} of r={target_r} after {max_iter} iterations")


def write_generated(ds: Dataset, cfg: SynthConfig, out_dir: str | Path, extra: dict | None = None) -> dict:
    """Write dataset files plus ``manifest.json`` (config, seed, measured statistics)."""
    out = Path(out_dir)
    write_dataset(ds, out)
    corr = purchase_window_correlations(ds)
    labels = np.array([q.label == SPQ for q in ds.questions])
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "spq_rate": float(labels.mean()),
        "split_sizes": {tag: sum(1 for v in ds.splits.values() if v == tag) for tag in ("train", "validation", "test")},
        "correlations": corr.as_dict(),
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
