"""Per-feature projection and mixture-of-experts mixing of the expert inputs.

Shapes, for ``N`` nodes, ``f`` feature types, common width ``n`` and gate
width ``i``:

* ``F``: ``(N, f, n)``, row ``j`` is ``elu(x_j @ W_j + b_j)``
* gate scores ``G = (F @ W_e + c1) @ W'_e^T + c2``: ``(N, f, n)``, indexed
  (feature type, dimension); ``W_e`` and ``W'_e`` are ``(n, i)``, ``c1`` is
  ``(i,)`` and ``c2`` is ``(f, n)``
* ``Lambda`` normalizes ``G`` over the feature-type axis per dimension
* ``h = sum_j F[:, j] * Lambda[:, j]``: ``(N, n)``

Parameters live in a flat mapping under ``ffn.<type>.w``, ``ffn.<type>.b``,
``moe.w_e``, ``moe.w_e2``, ``moe.c1`` and ``moe.c2``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .embeddings import FEATURE_TYPES, FeatureBundle
from .numerics import (
    DimensionError,
    Tensor,
    abs_floor,
    activation,
    as_tensor,
    masked_softmax,
    matmul,
    reshape,
    stack,
    transpose,
    tsum,
)

RAW_RATIO_FLOOR = 1e-8


def full_mask(f: int = len(FEATURE_TYPES)) -> np.ndarray:
    return np.ones(f, dtype=bool)


def init_moe_params(
    input_dims: Sequence[int], n: int, i: int | None = None, rng: np.random.Generator | None = None
) -> dict[str, np.ndarray]:
    """Glorot-uniform FFNs and gate weights, zero biases."""
    rng = rng or np.random.default_rng(0)
    i = i or max(1, n // 4)
    params: dict[str, np.ndarray] = {}

    def glorot(a, b):
        lim = np.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    for name, d in zip(FEATURE_TYPES, input_dims):
        params[f"ffn.{name}.w"] = glorot(d, n)
        params[f"ffn.{name}.b"] = np.zeros(n)
    params["moe.w_e"] = glorot(n, i)
    params["moe.w_e2"] = glorot(n, i)
    params["moe.c1"] = np.zeros(i)
    params["moe.c2"] = np.zeros((len(input_dims), n))
    return params


def project_features(bundle: FeatureBundle, params: Mapping, mask=None) -> Tensor:
    """Stack ``elu(x_j @ W_j + b_j)`` into ``(N, 6, n)``; masked types are zero rows."""
    feats = bundle.as_list()
    mask = full_mask(len(feats)) if mask is None else np.asarray(mask, bool)
    rows = []
    zero = None
    for name, x, keep in zip(FEATURE_TYPES, feats, mask):
        w, b = as_tensor(params[f"ffn.{name}.w"]), as_tensor(params[f"ffn.{name}.b"])
        x = as_tensor(x)
        if x.ndim == 1:
            x = reshape(x, (1, -1))
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"feature {name}: width {x.shape[1]} but FFN expects {w.shape[0]}")
        if not keep:
            zero = zero if zero is not None else Tensor(np.zeros((x.shape[0], w.shape[1])))
            rows.append(zero)
            continue
        rows.append(activation("elu", matmul(x, w) + b))
    return stack(rows, axis=1)


def gate_scores(F, params: Mapping) -> Tensor:
    F = as_tensor(F)
    N, f, n = F.shape
    w_e, w_e2 = as_tensor(params["moe.w_e"]), as_tensor(params["moe.w_e2"])
    hidden = matmul(reshape(F, (N * f, n)), w_e) + as_tensor(params["moe.c1"])
    scores = matmul(hidden, transpose(w_e2))
    return reshape(scores, (N, f, n)) + as_tensor(params["moe.c2"])


def normalize_scores(G, mask=None, norm: str = "softmax") -> Tensor:
    """Weights over feature types (axis 1) per dimension; masked types get 0."""
    G = as_tensor(G)
    f = G.shape[1]
    mask = full_mask(f) if mask is None else np.asarray(mask, bool)
    m3 = mask.reshape(1, f, 1)
    if norm == "softmax":
        return masked_softmax(G, m3, axis=1)
    if norm == "raw_ratio":
        kept = G * m3.astype(np.float64)
        denom = abs_floor(tsum(kept, axis=1, keepdims=True), RAW_RATIO_FLOOR)
        return kept / denom
    raise ValueError(f"unknown moe_norm {norm!r}")


def moe_mix(F, params: Mapping, mask=None, norm: str = "softmax") -> tuple[Tensor, Tensor]:
    """Joint representation ``h`` (N, n) and the weights ``Lambda`` (N, f, n)."""
    F = as_tensor(F)
    if F.ndim == 2:
        F = reshape(F, (1,) + F.shape)
    lam = normalize_scores(gate_scores(F, params), mask, norm)
    h = tsum(F * lam, axis=1)
    return h, lam


def equal_mix(F, mask=None) -> Tensor:
    """Gate-free combination: mean of the unmasked projections."""
    F = as_tensor(F)
    f = F.shape[1]
    mask = full_mask(f) if mask is None else np.asarray(mask, bool)
    w = (mask / mask.sum()).reshape(1, f, 1)
    return tsum(F * w, axis=1)
