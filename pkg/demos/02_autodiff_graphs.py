#!/usr/bin/env python3
"""The graph engine: build, run, differentiate, verify, checkpoint.

    python3 demos/02_autodiff_graphs.py
"""

import tempfile

import numpy as np

from padkit.diffcore import (Graph, backward, forward, grad_check,
                             load_checkpoint, save_checkpoint)

rng = np.random.default_rng(0)

print("== a small convolutional classifier ==")
g = Graph()
g.input("image", (8, 8, 1))
g.param("conv/w", 0.4 * rng.normal(size=(3, 3, 1, 4)))
g.param("conv/b", np.zeros(4))
g.conv2d("conv", "image", "conv/w", "conv/b", stride=2)
g.relu("act", "conv")
g.gap("pooled", "act")
g.param("head/w", 0.4 * rng.normal(size=(4, 2)))
g.param("head/b", np.zeros(2))
g.linear("logits", "pooled", "head/w", "head/b")
g.input("label", ())
g.softmax_xent("loss", "logits", "label")
print(f"{len(g.nodes)} nodes, "
      f"{sum(p.size for p in g.params.values())} trainable scalars")

feed = {"image": rng.uniform(size=(8, 8, 1)), "label": np.asarray(1.0)}
values = forward(g, feed)
print("loss:", float(values["loss"]))

grads = backward(g, values, "loss")
print("gradient shapes:", {k: v.shape for k, v in grads.items()})

print("\n== every analytic gradient vs central differences ==")
err = grad_check(g, feed, "loss", epsilon=1e-5)
print(f"max relative error over all coordinates: {err:.3e}")

print("\n== bitwise determinism ==")
again = forward(g, feed)
print("two forward passes agree bitwise:",
      float(values["loss"]) == float(again["loss"]))

print("\n== parameter checkpoints ==")
with tempfile.NamedTemporaryFile(suffix=".ckpt") as f:
    save_checkpoint(f.name, g.params)
    loaded = load_checkpoint(f.name)
    same = all(np.array_equal(loaded[k], g.params[k]) for k in g.params)
    print("round trip through the binary layout is exact:", same)
