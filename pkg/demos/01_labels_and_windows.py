"""
Labels and purchase windows on synthetic data
=============================================

A question is a shopping-need question (SPQ) when the same user buys the
queried product, or anything from its leaf category, within 28 days after
asking. This script generates a small calibrated log and looks at how the
label relates to purchases in the windows before the question.
"""

from collections import Counter
from dataclasses import replace

from spqi.catalog import SPQ, purchase_window_correlations, window_indicators
from spqi.synth import SynthConfig, calibrate_signal, generate_dataset

cfg = replace(SynthConfig(), n_questions=8000, seed=3)

# find the prior-purchase weight that plants r = 0.67 between "bought in the
# previous 28 days" and the label
cfg = calibrate_signal(cfg, 0.67)
print("calibrated prior-purchase weight:", round(cfg.signal_strengths.prior_purchase_weight, 3))

ds = generate_dataset(cfg)
print("questions:", len(ds.questions), " purchases:", len(ds.purchases))
print("label counts:", Counter(q.label for q in ds.questions))

q = next(q for q in ds.questions if q.label == SPQ)
print("\nan SPQ:", " ".join(q.question_tokens))
print("  product", q.product_id, "in category", ds.catalog.category_of(q.product_id))
print("  history before asking:", ds.history_window(q.user_id, q.timestamp)[:10])

# indicator columns: bought in the category during T0 (the label window),
# T-1, T-2 and T-3 (consecutive 28-day windows before the question)
ind = window_indicators(ds)
print("\nshare of questions with a category purchase per window:")
for name, col in zip(("T0", "T-1", "T-2", "T-3"), ind.T):
    print(f"  {name:4s} {col.mean():.3f}")

corr = purchase_window_correlations(ds)
print("\ncorrelation of T0 with:")
print(f"  T-1 {corr.r_T0_Tm1:.3f}   (planted)")
print(f"  T-2 {corr.r_T0_Tm2:.3f}")
print(f"  T-3 {corr.r_T0_Tm3:.3f}")
