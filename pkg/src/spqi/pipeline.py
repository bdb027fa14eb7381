"""File-level steps behind the command line: generate, train, evaluate, grid, analyze, score."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .catalog import DatasetError, Question, purchase_window_correlations, read_dataset, read_questions
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .embeddings import BehavioralEmbeddings, IdIndex, Vocab, featurize
from .gat import ModelParams, forward
from .graph import build_edges
from .synth import calibrate_signal, generate_dataset, write_generated
from .training import (
    TrainConfig,
    TrainedModel,
    evaluate_inputs,
    pretrain_behavior,
    run_ablation_grid,
    train_multistage,
)

MODEL_KIND = "spqi-model"
EMBEDDING_KIND = "spqi-skipgram"


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def gen_data(cfg: RunConfig, out: str | Path) -> dict:
    synth = cfg.synth
    extra = {"target_r": cfg.target_r}
    if cfg.target_r is not None:
        synth = calibrate_signal(synth, cfg.target_r)
        extra["calibrated_prior_purchase_weight"] = synth.signal_strengths.prior_purchase_weight
    ds = generate_dataset(synth)
    out = Path(out)
    manifest = write_generated(ds, synth, out, extra)
    dump_config(replace(cfg, synth=synth), out / "config.json")
    return manifest


def save_embeddings(path: str | Path, emb: BehavioralEmbeddings, seed: int) -> None:
    meta = {
        "kind": EMBEDDING_KIND,
        "seed": seed,
        "users": emb.users.ids,
        "products": emb.products.ids,
        "loss_history": emb.loss_history,
    }
    save_checkpoint(path, {"user_vectors": emb.user_vectors, "product_vectors": emb.product_vectors}, meta)


def load_embeddings(path: str | Path) -> BehavioralEmbeddings:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != EMBEDDING_KIND:
        raise CheckpointError(f"{path}: not a skip-gram checkpoint (kind {meta.get('kind')!r})")
    return BehavioralEmbeddings(
        IdIndex(meta["users"]),
        IdIndex(meta["products"]),
        arrays["user_vectors"],
        arrays["product_vectors"],
        list(meta["loss_history"]),
    )


def save_model(path: str | Path, model: TrainedModel) -> None:
    cfg = model.cfg
    meta = {
        "kind": MODEL_KIND,
        "variant": cfg.variant,
        "features": list(cfg.features),
        "seed": cfg.seed,
        "dims": {"node": cfg.model.node_dim, "gate": cfg.model.gate_width, "text": cfg.model.text_dim, "categorical": cfg.model.cat_dim},
        "train_config": cfg.to_dict(),
        "vocab": model.vocab.to_dict(),
        "best_epoch": model.history.best_epoch,
        "pretrained": sorted(model.params.pretrained),
    }
    save_checkpoint(path, model.params.arrays, meta)


def load_model(path: str | Path) -> tuple[ModelParams, TrainConfig, Vocab, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != MODEL_KIND:
        raise CheckpointError(f"{path}: not a model checkpoint (kind {meta.get('kind')!r})")
    cfg = TrainConfig.from_dict(meta["train_config"])
    return ModelParams(arrays, frozenset(meta["pretrained"])), cfg, Vocab.from_dict(meta["vocab"]), meta


def train(
    data: str | Path,
    cfg: RunConfig,
    out: str | Path,
    embeddings: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainedModel:
    """Writes ``model.spq``, ``history.json`` and ``config.json`` into ``out``.

    With ``embeddings`` given, skip-gram vectors are loaded from that file
    if it exists and written there after pretraining otherwise.
    """
    ds = read_dataset(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    emb = None
    if embeddings is not None and Path(embeddings).exists():
        emb = load_embeddings(embeddings)
    if emb is None:
        emb = pretrain_behavior(ds, cfg.train)
        if embeddings is not None:
            save_embeddings(embeddings, emb, cfg.train.seed)
    model = train_multistage(ds, cfg.train, emb, log=log)
    save_model(out / "model.spq", model)
    _write_json(model.history.to_dict(), out / "history.json")
    dump_config(cfg, out / "config.json")
    return model


def evaluate_checkpoint(checkpoint: str | Path, data: str | Path, split: str) -> dict:
    params, cfg, vocab, meta = load_model(checkpoint)
    ds = read_dataset(data)
    questions = ds.split(split)
    if not questions:
        raise DatasetError(f"split {split!r} is empty")
    metrics, loss = evaluate_inputs(params, cfg, featurize(ds, questions, vocab))
    return {
        "split": split,
        "variant": cfg.variant,
        "features": list(cfg.features),
        "seed": cfg.seed,
        "n": metrics.n,
        "loss": loss,
        "metrics": metrics.to_dict(),
    }


def grid(data: str | Path, cfg: RunConfig, out: str | Path, log: Callable[[str], None] | None = None) -> list[dict]:
    ds = read_dataset(data)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("", encoding="utf-8")
    return run_ablation_grid(ds, cfg.train, cfg.grid_seeds, out, log=log)


def analyze(data: str | Path) -> dict:
    ds = read_dataset(data)
    labels = [q.label for q in ds.questions if q.label is not None]
    return {
        "n_questions": len(ds.questions),
        "n_purchases": len(ds.purchases),
        "spq_rate": sum(l == "SPQ" for l in labels) / len(labels) if labels else None,
        "correlations": purchase_window_correlations(ds).as_dict(),
    }


def score(checkpoint: str | Path, data: str | Path, question_file: str | Path) -> list[dict]:
    """Probabilities for new questions, scored together as one question graph."""
    params, cfg, vocab, _ = load_model(checkpoint)
    ds = read_dataset(data)
    questions, _ = read_questions(question_file)
    if not questions:
        raise DatasetError(f"{question_file}: no questions")
    return score_questions(params, cfg, vocab, ds, questions)


def score_questions(params: ModelParams, cfg: TrainConfig, vocab: Vocab, ds, questions: list[Question]) -> list[dict]:
    inputs = featurize(ds, questions, vocab)
    graph = build_edges(questions)
    probs = forward(cfg.variant, params.tensors(), inputs, graph.adjacency, cfg.mask, cfg.model).data
    return [
        {"question_id": q.question_id, "probability": float(p), "label": "SPQ" if p >= 0.5 else "NSPQ"}
        for q, p in zip(questions, probs)
    ]
