"""The energy-truncated gradient basis and a Sanger learner find the same subspace."""

import numpy as np

from mira.continual import (GradientSubspace, HebbianLearner, accumulate, oja_converge, principal_angles,
                            project_gradient, update_basis)

rng = np.random.default_rng(3)
d = 6
R, _ = np.linalg.qr(rng.normal(size=(d, d)))
grads = (rng.normal(size=(200, d)) * np.array([3.0, 2.0, 1.0, 0.5, 0.3, 0.1])) @ R.T

sub = update_basis(accumulate(GradientSubspace(d, eps=0.7), grads))
print(f"rank kept at 70% energy: {sub.rank}")

learner = HebbianLearner.create(d, sub.rank, rng, eta=0.5)
W = oja_converge(learner, grads)
print(f"Hebbian sweeps to converge: {learner.sweeps}")
print(f"principal angles (rad): {principal_angles(W, sub.basis)}")

g = rng.normal(size=d)
p = project_gradient(g, sub)
print(f"|U^T g| before {np.abs(sub.basis.T @ g).max():.3f}, after {np.abs(sub.basis.T @ p).max():.1e}")
