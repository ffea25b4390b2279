"""
Training engine basics
======================

Builds a small dense net on a toy imbalanced binary task, trains it with
class-balanced BCE, and spot-checks one analytic gradient against central
finite differences. Everything is seeded, so two runs print the same numbers.
"""

import numpy as np

from fedfusion.nn import (
    TrainConfig,
    backward,
    class_balanced_weights,
    init_params,
    predict_probs,
    train_classifier,
    weighted_bce_loss,
)

rng = np.random.default_rng(7)

# toy task: y depends on the first two of five columns, ~15% positives
n = 600
x = rng.normal(size=(n, 5))
logit = 1.8 * x[:, 0] - 1.2 * x[:, 1] - 1.9
y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
counts = (int(np.sum(y == 0)), int(np.sum(y == 1)))
print(f"class counts: {counts}")

weights = class_balanced_weights(counts, 0.999)
print(f"class-balanced weights: ({weights[0]:.4f}, {weights[1]:.4f})")

cfg = TrainConfig(learning_rate=3e-3, epochs=12, batch_size=32, rng_seed=0)
params, losses = train_classifier(x, y, weights, [5, 16, 1], cfg)
print("loss per epoch:", " ".join(f"{l:.4f}" for l in losses))

probs = predict_probs(params, x)
print(f"train accuracy at 0.5: {np.mean((probs > 0.5) == (y == 1)):.3f}")

# gradient spot check: nudge one weight both ways and compare the slope
check = init_params([5, 4, 1], ["relu", "sigmoid"], seed=3)
xb, yb = x[:8], y[:8].astype(float)
analytic = backward(check, xb, yb, weights)[0][0][0, 0]
h = 1e-5
w0 = check.layers[0].weights[0, 0]
check.layers[0].weights[0, 0] = w0 + h
up = weighted_bce_loss(predict_probs(check, xb), yb, weights)
check.layers[0].weights[0, 0] = w0 - h
down = weighted_bce_loss(predict_probs(check, xb), yb, weights)
check.layers[0].weights[0, 0] = w0
numeric = (up - down) / (2 * h)
print(f"dL/dw[0,0]: analytic {analytic:+.8f} vs numeric {numeric:+.8f}")
