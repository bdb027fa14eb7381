"""
How the feature gate mixes six inputs
=====================================

Each feature type is projected to a common width, then a gate produces one
weight per (feature type, dimension). Weights in a dimension sum to one, so
the joint vector is a per-dimension convex mix of the projected features.
"""

import numpy as np

from spqi.embeddings import FEATURE_TYPES
from spqi.moe import gate_scores, init_moe_params, moe_mix

rng = np.random.default_rng(0)
n = 4
params = init_moe_params([1] * 6, n, 2, rng)
F = rng.normal(size=(1, 6, n))

h, lam = moe_mix(F, params)
np.set_printoptions(precision=3, suppress=True)
print("gate weights at init (rows: feature types, columns: dimensions)")
for name, row in zip(FEATURE_TYPES, lam.data[0]):
    print(f"  {name:16s}", row)
print("column sums:", lam.data[0].sum(axis=0))

# push the behavior row of the gate bias far above the rest
j = FEATURE_TYPES.index("behavior")
G = gate_scores(F, params).data[0]
params["moe.c2"][j] += np.delete(G, j, axis=0).max(axis=0) - G[j] + 20
h, lam = moe_mix(F, params)
print("\nafter a +20 margin on behavior:")
print("  behavior weights:", lam.data[0, j])
print("  h                :", h.data[0])
print("  behavior feature :", F[0, j])

# masking drops feature types and renormalizes over the rest
mask = np.array([True, True, False, False, False, False])
_, lam = moe_mix(F, params, mask)
print("\ntext-only mask, weights per type:", lam.data[0].sum(axis=1) / n)
