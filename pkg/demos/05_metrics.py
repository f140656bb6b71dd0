#!/usr/bin/env python3
"""Error rates, ROC operating points, and sub-protocol aggregation.

    python3 demos/05_metrics.py
"""

import numpy as np

from padkit.metrics import (ScoredSet, aggregate, evaluate_scored_set,
                            rates_at, report_lines, roc, tpr_at_fpr)

rng = np.random.default_rng(0)

print("== a noisy but decent detector ==")
n = 400
bona = rng.uniform(size=n) < 0.5
scores = np.where(bona, rng.beta(6, 2, size=n), rng.beta(2, 6, size=n))
scored = ScoredSet(scores, bona)

for thr in (0.3, 0.5, 0.7):
    apcer, bpcer, acer = rates_at(scored, thr)
    print(f"threshold {thr:.1f}: APCER {100 * apcer:5.2f}%  "
          f"BPCER {100 * bpcer:5.2f}%  ACER {100 * acer:5.2f}%")

curve = roc(scored)
print(f"\nROC: {len(curve.fpr)} operating points, AUC = {curve.auc():.4f}")
pos, neg = scores[bona], scores[~bona]
wins = (pos[:, None] > neg[None, :]).sum()
ties = (pos[:, None] == neg[None, :]).sum()
print(f"pairwise-comparison AUC estimate agrees: "
      f"{(wins + 0.5 * ties) / (len(pos) * len(neg)):.4f}")
for target in (1e-1, 1e-2):
    print(f"TPR at FPR <= {target:g}: {tpr_at_fpr(curve, target):.3f}")

print("\n== aggregating sub-protocols (mean and sample std) ==")
reports = []
for i, sharp in enumerate((8.0, 4.0, 6.0)):
    labels = rng.uniform(size=200) < 0.5
    vals = np.where(labels, rng.beta(sharp, 2, size=200),
                    rng.beta(2, sharp, size=200))
    reports.append(evaluate_scored_set(
        ScoredSet(vals, labels, subprotocol=f"1_{i + 1}")))
for line in report_lines(reports):
    print(line)

print("\nacer values 0.6 / 4.4 / 1.5 percent aggregate to:")
mean, std = aggregate([{"acer": 0.006}, {"acer": 0.044}, {"acer": 0.015}])["acer"]
print(f"  {100 * mean:.1f} +- {100 * std:.1f}  (percent)")
