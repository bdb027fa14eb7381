"""Two-stage training, evaluation metrics, the ablation grid and paired t-tests.

Stage 1 trains only randomly initialized parameters for ``stage1_epochs`` at
``stage1_lr`` while the pretrained skip-gram table stays frozen. Stage 2
updates everything at ``stage2_lr`` and stops once validation loss has
failed to improve for ``early_stop_patience`` consecutive epochs. The
parameters from the epoch with the lowest validation loss are returned.
Epochs are numbered across both stages, starting at 1.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .catalog import Dataset
from .embeddings import (
    FEATURE_TYPES,
    BehavioralEmbeddings,
    IdIndex,
    NodeInputs,
    Vocab,
    featurize,
    train_skipgram,
)
from .gat import ModelConfig, ModelParams, forward, init_params, mask_from_features
from .graph import epoch_batches
from .numerics import GradTape, bce_loss
from .synth import philox

FEATURE_SUBSETS = {
    "behavior": ("behavior",),
    "product": ("product", "category", "parent_category"),
    "text+product": ("text_q", "text_a", "product", "category", "parent_category"),
    "text+behavior": ("text_q", "text_a", "behavior"),
    "product+behavior": ("product", "category", "parent_category", "behavior"),
    "full": FEATURE_TYPES,
}
GRID_VARIANTS = ("mlp-concat", "mlp-moe", "spqi-concat", "spqi-moe")
TEXT_BASELINES = {"question": ("text_q",), "text": ("text_q", "text_a")}

# Philox streams used by training; synth and embeddings use their own.
_INIT_STREAM = 201
_BATCH_STREAM = 202


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


def parse_features(spec: str | Sequence[str]) -> tuple[str, ...]:
    """``full``, a subset name, or comma-separated families/types.

    ``text`` expands to question and answer text, ``product`` to product,
    category and parent category.
    """
    if isinstance(spec, str):
        if spec in FEATURE_SUBSETS:
            return FEATURE_SUBSETS[spec]
        parts = [p.strip() for p in spec.split(",") if p.strip()]
    else:
        parts = list(spec)
    families = {"text": ("text_q", "text_a"), "product": FEATURE_SUBSETS["product"], "behavior": ("behavior",)}
    out: list[str] = []
    for p in parts:
        for name in families.get(p, (p,)):
            if name not in FEATURE_TYPES:
                raise ValueError(f"unknown feature {p!r}")
            if name not in out:
                out.append(name)
    if not out:
        raise ValueError("empty feature set")
    return tuple(f for f in FEATURE_TYPES if f in out)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "spqi-moe"
    features: tuple[str, ...] = FEATURE_TYPES
    stage1_lr: float = 1e-3
    stage2_lr: float = 3e-5
    stage1_epochs: int = 1
    early_stop_patience: int = 3
    max_stage2_epochs: int = 30
    batch_size: int = 32
    eval_batch_size: int | None = None  # None: same as batch_size
    sampling: str = "uniform"
    bucket_size: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    min_category_size: int = 50
    skipgram_dim: int = 50
    skipgram_epochs: int = 5
    skipgram_lr: float = 0.1
    skipgram_negatives: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.stage1_epochs < 0 or self.max_stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or (self.eval_batch_size is not None and self.eval_batch_size < 1):
            raise ValueError("batch sizes must be positive")
        if self.sampling not in ("uniform", "product_bucketed"):
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")
        object.__setattr__(self, "features", parse_features(self.features))
        mask_from_features(self.features)

    @property
    def eval_batch(self) -> int:
        return self.eval_batch_size or self.batch_size

    @property
    def mask(self) -> np.ndarray:
        return mask_from_features(self.features)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        if "features" in d:
            d["features"] = parse_features(d["features"])
        return cls(**d)


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    per_category_f1: dict[int, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category_f1"] = {str(k): v for k, v in sorted(self.per_category_f1.items())}
        return d


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def metrics_from_predictions(
    labels: np.ndarray, predicted: np.ndarray, categories: np.ndarray | None = None, min_category_size: int = 50
) -> Metrics:
    y = np.asarray(labels) > 0.5
    yhat = np.asarray(predicted, dtype=bool)
    if y.size == 0:
        raise ValueError("empty split")
    tp = int(np.sum(y & yhat))
    fp = int(np.sum(~y & yhat))
    fn = int(np.sum(y & ~yhat))
    tn = int(np.sum(~y & ~yhat))
    per_cat: dict[int, float] = {}
    if categories is not None:
        cats = np.asarray(categories)
        for c in np.unique(cats):
            sel = cats == c
            if sel.sum() >= min_category_size:
                ys, ps = y[sel], yhat[sel]
                per_cat[int(c)] = prf(int(np.sum(ys & ps)), int(np.sum(~ys & ps)), int(np.sum(ys & ~ps)))[2]
    return Metrics(*prf(tp, fp, fn), tp, fp, fn, tn, per_cat)


class EarlyStopping:
    """Tracks the best loss; signals a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, loss: float, epoch: int) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            arrays[k] = arrays[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    val_loss: float
    val_metrics: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [e.to_dict() for e in self.epochs],
        }


def run_stages(
    params: ModelParams,
    train_epoch: Callable[[ModelParams, Sequence[str], Adam, int], float],
    validate: Callable[[ModelParams], tuple[float, dict]],
    cfg: TrainConfig,
) -> tuple[ModelParams, History]:
    """The stage schedule and stopping rule, independent of the model.

    ``train_epoch(params, trainable_names, optimizer, epoch)`` updates
    ``params.arrays`` in place and returns the mean training loss;
    ``validate(params)`` returns ``(loss, metrics_dict)``.
    """
    history = History()
    stopper = EarlyStopping(cfg.early_stop_patience)
    best = params.copy()
    epoch = 0
    schedule = [(1, cfg.stage1_lr, params.randomly_initialized(), cfg.stage1_epochs)]
    schedule.append((2, cfg.stage2_lr, params.names(), cfg.max_stage2_epochs))
    for stage, lr, names, n_epochs in schedule:
        opt = Adam(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for _ in range(n_epochs):
            epoch += 1
            train_loss = train_epoch(params, names, opt, epoch)
            if not np.isfinite(train_loss):
                raise TrainingError(epoch, f"training loss is {train_loss}")
            val_loss, val_metrics = validate(params)
            if not np.isfinite(val_loss):
                raise TrainingError(epoch, f"validation loss is {val_loss}")
            history.epochs.append(EpochRecord(epoch, stage, float(train_loss), float(val_loss), val_metrics))
            stop = stopper.update(val_loss, epoch)
            if stopper.best_epoch == epoch:
                best = params.copy()
            if stop and stage == 2:
                history.stopped_early = True
                break
    history.best_epoch = stopper.best_epoch
    return best, history


def build_vocab(ds: Dataset, emb: BehavioralEmbeddings, text_dim: int, text_seed: int) -> Vocab:
    cat = ds.catalog
    cats = sorted(cat.categories)
    parents = sorted({cat.parent_of(c) for c in cats})
    return Vocab(
        IdIndex(sorted(cat.products)),
        IdIndex(cats),
        IdIndex(parents),
        IdIndex(emb.products.ids),
        text_dim,
        text_seed,
    )


def pretrain_behavior(ds: Dataset, cfg: TrainConfig) -> BehavioralEmbeddings:
    """Skip-gram over the whole purchase log, with the catalog as product vocabulary."""
    return train_skipgram(
        ds.purchases,
        d=cfg.skipgram_dim,
        negatives_per_positive=cfg.skipgram_negatives,
        epochs=cfg.skipgram_epochs,
        lr=cfg.skipgram_lr,
        seed=cfg.seed,
        product_ids=sorted(ds.catalog.products),
    )


def _n_rows(vocab: Vocab) -> dict[str, int]:
    return {"product": vocab.products.n_rows, "category": vocab.categories.n_rows, "parent": vocab.parents.n_rows}


def predict(params: ModelParams, cfg: TrainConfig, inputs: NodeInputs) -> np.ndarray:
    """Deterministic probabilities: split order, consecutive batches of ``eval_batch``.

    Evaluation graphs are built like training graphs (same batch size by
    default), so a node sees as many same-product neighbors at test time as
    it did while training.
    """
    tensors = params.tensors()
    out = np.empty(len(inputs))
    for batch in epoch_batches(inputs.product_id, cfg.eval_batch, "uniform"):
        sub = inputs.take(batch.nodes)
        out[batch.nodes] = forward(cfg.variant, tensors, sub, batch.adjacency, cfg.mask, cfg.model).data
    return out


def evaluate_inputs(params: ModelParams, cfg: TrainConfig, inputs: NodeInputs) -> tuple[Metrics, float]:
    if len(inputs) == 0:
        raise ValueError("empty split")
    p = predict(params, cfg, inputs)
    loss = float(bce_loss(p, inputs.labels).data)
    return metrics_from_predictions(inputs.labels, p >= 0.5, inputs.category_id, cfg.min_category_size), loss


def evaluate(
    params: ModelParams, cfg: TrainConfig, ds: Dataset, split: str, vocab: Vocab
) -> Metrics:
    questions = ds.split(split)
    if not questions:
        raise ValueError(f"split {split!r} is empty")
    return evaluate_inputs(params, cfg, featurize(ds, questions, vocab))[0]


@dataclass
class TrainedModel:
    params: ModelParams
    history: History
    vocab: Vocab
    cfg: TrainConfig
    embeddings: BehavioralEmbeddings | None


def train_multistage(
    ds: Dataset,
    cfg: TrainConfig,
    embeddings: BehavioralEmbeddings | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainedModel:
    train_q, val_q = ds.split("train"), ds.split("validation")
    if not train_q or not val_q:
        raise ValueError("train and validation splits must be non-empty")
    if embeddings is None:
        embeddings = pretrain_behavior(ds, cfg)
    vocab = build_vocab(ds, embeddings, cfg.model.text_dim, cfg.seed)
    train_in = featurize(ds, train_q, vocab)
    val_in = featurize(ds, val_q, vocab)
    params = init_params(
        cfg.variant, cfg.model, cfg.mask, _n_rows(vocab), embeddings.product_vectors, philox(cfg.seed, _INIT_STREAM)
    )
    batch_rng = philox(cfg.seed, _BATCH_STREAM)

    def train_epoch(p: ModelParams, names: Sequence[str], opt: Adam, epoch: int) -> float:
        names = [k for k in names if k in p.arrays]
        losses = []
        for batch in epoch_batches(train_in.product_id, cfg.batch_size, cfg.sampling, batch_rng, bucket_size=cfg.bucket_size):
            sub = train_in.take(batch.nodes)
            tensors = p.tensors(names)
            with GradTape() as tape:
                probs = forward(cfg.variant, tensors, sub, batch.adjacency, cfg.mask, cfg.model)
                loss = bce_loss(probs, sub.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(epoch, "loss is NaN")
            grads = tape.gradient(loss, [tensors[k] for k in names])
            opt.step(p.arrays, dict(zip(names, grads)))
            losses.append(value * len(sub))
        mean_loss = sum(losses) / len(train_in)
        if log:
            log(f"epoch {epoch}: train loss {mean_loss:.5f}")
        return mean_loss

    def validate(p: ModelParams) -> tuple[float, dict]:
        m, loss = evaluate_inputs(p, cfg, val_in)
        if log:
            log(f"  val loss {loss:.5f} f1 {m.f1:.4f}")
        return loss, m.to_dict()

    best, history = run_stages(params, train_epoch, validate, cfg)
    return TrainedModel(best, history, vocab, cfg, embeddings)


class GridCell(NamedTuple):
    variant: str
    subset: str
    features: tuple[str, ...]


def grid_cells() -> list[GridCell]:
    cells = [GridCell(v, s, FEATURE_SUBSETS[s]) for v in GRID_VARIANTS for s in FEATURE_SUBSETS]
    cells += [GridCell("text-only", name, feats) for name, feats in TEXT_BASELINES.items()]
    return cells


def run_ablation_grid(
    ds: Dataset,
    base_cfg: TrainConfig,
    seeds: Iterable[int] = (0,),
    out_path: str | Path | None = None,
    cells: Sequence[GridCell] | None = None,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Train and test every cell; one record per (cell, seed), appended to ``out_path`` as JSONL.

    Skip-gram vectors are pretrained once per seed and shared by all cells.
    """
    records = []
    cells = grid_cells() if cells is None else cells
    for seed in seeds:
        emb = pretrain_behavior(ds, replace(base_cfg, seed=seed))
        for cell in cells:
            cfg = replace(base_cfg, variant=cell.variant, features=cell.features, seed=seed)
            t0 = time.perf_counter()
            model = train_multistage(ds, cfg, emb)
            m = evaluate(model.params, cfg, ds, "test", model.vocab)
            rec = {
                "variant": cell.variant,
                "subset": cell.subset,
                "features": list(cell.features),
                "seed": seed,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "confusion": {"tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn},
                "per_category_f1": m.to_dict()["per_category_f1"],
                "best_epoch": model.history.best_epoch,
                "config": cfg.to_dict(),
            }
            if log:
                log(f"{cell.variant:12s} {cell.subset:17s} seed {seed}: F1 {m.f1:.4f} ({time.perf_counter() - t0:.0f}s)")
            records.append(rec)
            if out_path is not None:
                with open(out_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


class Significance(NamedTuple):
    p_value: float
    t_statistic: float
    degenerate: bool


def paired_significance(runs_a: Sequence[float], runs_b: Sequence[float]) -> Significance:
    """Two-sided paired t-test on per-seed scores.

    Zero variance of the differences gives ``p_value=1.0`` with
    ``degenerate=True`` instead of an error.
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("runs must be equal-length 1-D sequences")
    n = a.size
    if n < 2:
        raise ValueError("paired test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0 or sd < 1e-15 * max(1.0, float(np.abs(d).max())):
        return Significance(1.0, 0.0, True)
    t = d.mean() / (sd / np.sqrt(n))
    return Significance(float(2.0 * stats.t.sf(abs(t), n - 1)), float(t), False)
