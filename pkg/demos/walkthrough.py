"""Train a small edge/boundary classifier on synthetic data and compare it with CA.

Run from the repository root::

    python3 demos/walkthrough.py

Takes a couple of minutes on one core. The shortened training (one run of
400 iterations) is for illustration; the acceptance suite uses the full
protocol.
"""
import time

import numpy as np

from bounded import (BOUNDARY, SHARP_EDGE, CaConfig, ScaleConfig, TrainConfig, ca_classify, classify,
                     evaluate_cloud, extract_features, generate_suite, train)

suite = generate_suite("defaultpp-like", seed=1)
counts = suite.pooled_counts()
print(f"training pool: {counts.tolist()} (non-edge, sharp-edge, boundary)")

config = ScaleConfig()   # scales 128, 64, 32, 16 and all 12 columns
t0 = time.perf_counter()
feats = [extract_features(c, config, dtype=np.float32) for _, c in suite.train]
print(f"features for {sum(len(f) for f in feats)} points in {time.perf_counter() - t0:.1f} s")

x = np.concatenate([f[~m] for f, m in zip(feats, suite.validation)])
y = np.concatenate([c.labels[~m] for (_, c), m in zip(suite.train, suite.validation)])
vx = np.concatenate([f[m] for f, m in zip(feats, suite.validation)])
vy = np.concatenate([c.labels[m] for (_, c), m in zip(suite.train, suite.validation)])

result = train(x, y, vx, vy, TrainConfig(iterations=400, runs=1, log_every=100))
for it, tl, vl in result.log:
    print(f"  iter {it:4d}  train loss {tl:.4f}  validation loss {vl:.4f}")

print("\nper evaluation cloud, F1 (model sharp / model boundary / CA sharp):")
for name, cloud in suite.evaluation:
    pred, _ = classify(result.model, extract_features(cloud, config, dtype=np.float32))
    ours = evaluate_cloud(pred, cloud.labels)
    ca = evaluate_cloud(ca_classify(cloud, CaConfig(64, 0.025)), cloud.labels)
    print(f"  {name}: {ours[SHARP_EDGE]['f1']:.3f} / {ours[BOUNDARY]['f1']:.3f} / {ca[SHARP_EDGE]['f1']:.3f}")
