"""Graph-attention classifier over MoE-mixed question features, plus baselines.

Variants:

``spqi-moe``
    projections -> MoE mix -> stacked graph layers -> ``sigmoid(h . theta)``
``spqi-concat``
    projections -> equal-weight mean -> stacked graph layers -> head
``mlp-moe``
    projections -> MoE mix -> dense ELU layers -> head (no graph)
``mlp-concat``
    concatenated projections -> dense ELU layers -> head
``text-only``
    question (and, if ``text_a`` is in the mask, answer) text vectors ->
    dense ELU layers -> head
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .embeddings import FEATURE_TYPES, FeatureBundle, NodeInputs, behavior_tensor
from .moe import equal_mix, init_moe_params, moe_mix, project_features
from .numerics import (
    DimensionError,
    Tensor,
    activation,
    as_tensor,
    concat,
    gather_rows,
    masked_softmax,
    matmul,
    reshape,
    take,
    transpose,
)

VARIANTS = ("spqi-moe", "spqi-concat", "mlp-moe", "mlp-concat", "text-only")
GRAPH_VARIANTS = ("spqi-moe", "spqi-concat")
PRETRAINED = frozenset({"skipgram.product"})


@dataclass(frozen=True)
class ModelConfig:
    node_dim: int = 64
    gate_dim: int | None = None
    text_dim: int = 32
    cat_dim: int = 16
    gat_layers: int = 4
    heads: int = 1
    leaky_slope: float = 0.2
    layer_kind: str = "gat"
    mlp_layers: int = 2
    moe_norm: str = "softmax"

    def __post_init__(self):
        if self.layer_kind not in ("gat", "gcn"):
            raise ValueError(f"layer_kind must be gat or gcn, got {self.layer_kind!r}")
        if self.moe_norm not in ("softmax", "raw_ratio"):
            raise ValueError(f"moe_norm must be softmax or raw_ratio, got {self.moe_norm!r}")
        if self.node_dim % self.heads:
            raise ValueError("node_dim must be divisible by heads")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must be in (0, 1)")

    @property
    def gate_width(self) -> int:
        return self.gate_dim or max(1, self.node_dim // 4)

    def to_dict(self) -> dict:
        return asdict(self)


def mask_from_features(features) -> np.ndarray:
    names = set(features)
    unknown = names - set(FEATURE_TYPES)
    if unknown:
        raise ValueError(f"unknown feature types {sorted(unknown)}")
    mask = np.array([f in names for f in FEATURE_TYPES])
    if not mask.any():
        raise ValueError("feature mask must keep at least one type")
    return mask


@dataclass
class ModelParams:
    """Named float64 arrays; ``pretrained`` names are frozen in the first stage."""

    arrays: dict[str, np.ndarray]
    pretrained: frozenset = field(default_factory=lambda: PRETRAINED)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.pretrained)

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def randomly_initialized(self) -> list[str]:
        return [k for k in self.names() if k not in self.pretrained]

    def tensors(self, trainable=()) -> dict[str, Tensor]:
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.arrays.items()}

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.arrays.items()}, self.pretrained)


def _glorot(rng, a, b):
    lim = np.sqrt(6.0 / (a + b))
    return rng.uniform(-lim, lim, size=(a, b))


def init_params(
    variant: str,
    cfg: ModelConfig,
    mask,
    n_rows: Mapping[str, int],
    skipgram_vectors: np.ndarray | None,
    rng: np.random.Generator,
) -> ModelParams:
    """Fresh parameters. ``n_rows`` gives table heights for product/category/parent."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    mask = np.asarray(mask, bool)
    n = cfg.node_dim
    p: dict[str, np.ndarray] = {}
    if variant == "text-only":
        d_in = cfg.text_dim * (2 if mask[FEATURE_TYPES.index("text_a")] else 1)
        dims = [d_in] + [n] * cfg.mlp_layers
        for l in range(cfg.mlp_layers):
            p[f"mlp.{l}.w"] = _glorot(rng, dims[l], dims[l + 1])
            p[f"mlp.{l}.b"] = np.zeros(dims[l + 1])
        p["head.theta"] = rng.uniform(-1, 1, size=n) * np.sqrt(3.0 / n)
        return ModelParams(p)

    k = cfg.cat_dim
    for key, name in (("product", "emb.product"), ("category", "emb.category"), ("parent", "emb.parent")):
        p[name] = rng.uniform(-0.05, 0.05, size=(n_rows[key], k))
    if skipgram_vectors is None:
        raise ValueError("skip-gram vectors required for feature-based variants")
    p["skipgram.product"] = np.array(skipgram_vectors, dtype=np.float64)
    input_dims = [cfg.text_dim, cfg.text_dim, k, k, k, 6]
    p.update(init_moe_params(input_dims, n, cfg.gate_width, rng))

    if variant in GRAPH_VARIANTS:
        d_head = n // cfg.heads
        for l in range(cfg.gat_layers):
            p[f"gat.{l}.w"] = _glorot(rng, n, n)
            p[f"gat.{l}.a"] = _glorot(rng, cfg.heads, 2 * d_head)
    else:
        d_in = n * int(mask.sum()) if variant == "mlp-concat" else n
        dims = [d_in] + [n] * cfg.mlp_layers
        for l in range(cfg.mlp_layers):
            p[f"mlp.{l}.w"] = _glorot(rng, dims[l], dims[l + 1])
            p[f"mlp.{l}.b"] = np.zeros(dims[l + 1])
    p["head.theta"] = rng.uniform(-1, 1, size=n) * np.sqrt(3.0 / n)
    return ModelParams(p)


def feature_bundle(params: Mapping, inputs: NodeInputs) -> FeatureBundle:
    """The six expert inputs for a batch, built on the tape from id rows."""
    sg = as_tensor(params["skipgram.product"])
    hist_idx, hist_mask = inputs.padded_history(pad_row=sg.shape[0] - 1)
    return FeatureBundle(
        question_text_vec=Tensor(inputs.text_q),
        answer_text_vec=Tensor(inputs.text_a),
        product_vec=gather_rows(params["emb.product"], inputs.product_row),
        category_vec=gather_rows(params["emb.category"], inputs.category_row),
        parent_category_vec=gather_rows(params["emb.parent"], inputs.parent_row),
        behavior_vec=behavior_tensor(sg, inputs.skipgram_row, hist_idx, hist_mask),
    )


def gat_layer(H, adj, W, a, slope: float = 0.2, heads: int = 1) -> Tensor:
    """One attention layer.

    ``z = H @ W``; per head, ``e_ij = leaky_relu(a_src . z_i + a_dst . z_j)``
    over neighbors ``j`` of ``i``, ``alpha = softmax_j(e_ij)`` and the output
    is ``elu(sum_j alpha_ij z_j)``. Heads split ``z`` column-wise and their
    outputs are concatenated. ``a`` has shape ``(heads, 2 * d_head)``.
    """
    H, W, a = as_tensor(H), as_tensor(W), as_tensor(a)
    adj = np.asarray(adj, dtype=bool)
    n = H.shape[0]
    if adj.shape != (n, n):
        raise DimensionError(f"adjacency {adj.shape} does not match {n} nodes")
    if not adj.diagonal().all():
        raise DimensionError("adjacency needs self-loops on every node")
    Z = matmul(H, W)
    d_head = Z.shape[1] // heads
    if a.shape != (heads, 2 * d_head):
        raise DimensionError(f"attention vector shape {a.shape}, expected {(heads, 2 * d_head)}")
    outs = []
    for h in range(heads):
        Zh = Z if heads == 1 else take(Z, np.arange(h * d_head, (h + 1) * d_head), axis=1)
        ah = take(a, [h], axis=0)
        a_src = take(ah, np.arange(d_head), axis=1)
        a_dst = take(ah, np.arange(d_head, 2 * d_head), axis=1)
        s_src = matmul(Zh, transpose(a_src))  # (n, 1)
        s_dst = matmul(Zh, transpose(a_dst))  # (n, 1)
        e = activation("leaky_relu", s_src + transpose(s_dst), slope)
        alpha = masked_softmax(e, adj)
        outs.append(activation("elu", matmul(alpha, Zh)))
    return outs[0] if heads == 1 else concat(outs, axis=1)


def attention_weights(H, adj, W, a, slope: float = 0.2) -> np.ndarray:
    """Single-head attention matrix of a layer, for inspection."""
    Z = matmul(as_tensor(H), as_tensor(W)).data
    a = np.asarray(as_tensor(a).data)[0]
    d = Z.shape[1]
    e = (Z @ a[:d])[:, None] + (Z @ a[d:])[None, :]
    e = np.where(e > 0, e, slope * e)
    return masked_softmax(e, adj).data


def gcn_layer(H, adj, W) -> Tensor:
    """Mean aggregation over neighbors (self included), then ELU."""
    adj = np.asarray(adj, dtype=bool)
    norm = adj / adj.sum(axis=1, keepdims=True)
    return activation("elu", matmul(Tensor(norm), matmul(as_tensor(H), as_tensor(W))))


def graph_stack(h, adj, params: Mapping, cfg: ModelConfig) -> Tensor:
    for l in range(cfg.gat_layers):
        if cfg.layer_kind == "gat":
            h = gat_layer(h, adj, params[f"gat.{l}.w"], params[f"gat.{l}.a"], cfg.leaky_slope, cfg.heads)
        else:
            h = gcn_layer(h, adj, params[f"gat.{l}.w"])
    return h


def mlp_stack(h, params: Mapping, cfg: ModelConfig) -> Tensor:
    for l in range(cfg.mlp_layers):
        h = activation("elu", matmul(h, params[f"mlp.{l}.w"]) + params[f"mlp.{l}.b"])
    return h


def head(h, params: Mapping) -> Tensor:
    return activation("sigmoid", matmul(h, params["head.theta"]))


def forward(variant: str, params: Mapping, inputs: NodeInputs, adjacency, mask, cfg: ModelConfig) -> Tensor:
    """SPQ probabilities for every node of a batch."""
    mask = np.asarray(mask, bool)
    if variant == "text-only":
        x = Tensor(inputs.text_q)
        if mask[FEATURE_TYPES.index("text_a")]:
            x = concat([x, Tensor(inputs.text_a)], axis=1)
        return head(mlp_stack(x, params, cfg), params)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    F = project_features(feature_bundle(params, inputs), params, mask)
    if variant in ("spqi-moe", "mlp-moe"):
        h, _ = moe_mix(F, params, mask, cfg.moe_norm)
    elif variant == "spqi-concat":
        h = equal_mix(F, mask)
    else:
        N, f, n = F.shape
        kept = np.flatnonzero(mask)
        h = reshape(take(F, kept, axis=1), (N, len(kept) * n))
    if variant in GRAPH_VARIANTS:
        h = graph_stack(h, adjacency, params, cfg)
    else:
        h = mlp_stack(h, params, cfg)
    return head(h, params)


def spqi_forward(batch, inputs: NodeInputs, params: Mapping, mask, cfg: ModelConfig) -> Tensor:
    return forward("spqi-moe", params, inputs, batch.adjacency, mask, cfg)


def baseline_forward(variant: str, batch, inputs: NodeInputs, params: Mapping, mask, cfg: ModelConfig) -> Tensor:
    if variant == "spqi-moe":
        raise ValueError("spqi-moe is the main model; use spqi_forward")
    return forward(variant, params, inputs, batch.adjacency, mask, cfg)
