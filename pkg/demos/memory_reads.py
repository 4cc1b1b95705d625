"""How the four separation functions turn key similarities into mixing weights."""

import numpy as np

from mira import AdapterVector, MemoryUnit, Separation

rng = np.random.default_rng(0)
keys = np.eye(3)
values = rng.normal(size=(3, 4))

for kind, beta in [("affine", 1.0), ("relu", 1.0), ("tanh", 1.0), ("softmax", 1.0), ("softmax", 20.0)]:
    mem = MemoryUnit(0, key_dim=3, value_dim=4, sep=Separation(kind, beta))
    for k, v in zip(keys.T, values):
        mem.write(k, AdapterVector(0, v))
    q = np.array([0.9, 0.3, -0.2])
    value, w = mem.read(q)
    print(f"{kind:>8} beta={beta:<5} weights={np.round(w.weights, 3)}  sum={w.weights.sum():.3f}")

# a query with no positive similarity has no ReLU mass; the read falls back to uniform weights
mem = MemoryUnit(0, 3, 4, Separation("relu"))
for k, v in zip(keys.T, values):
    mem.write(k, AdapterVector(0, v))
_, w = mem.read(-np.ones(3))
print(f"\nrelu on an all-negative query: weights={w.weights}, degenerate={w.degenerate}")
