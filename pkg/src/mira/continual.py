"""Gradient-subspace protection for sequential consolidation.

Each parameter group keeps the second moment of gradients seen on earlier
tasks, the energy-truncated eigenbasis of that moment, and projects new
gradients onto its orthogonal complement. A Sanger/Oja learner is included
as an independent route to the same subspace.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import NumericError, ShapeError

log = logging.getLogger(__name__)


def select_rank(eigenvalues, eps: float) -> int:
    """Smallest k whose leading eigenvalues hold at least ``eps`` of the total."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be non-negative")
    total = lam.sum()
    if total <= 0:
        raise ContractError("all-zero spectrum has no energy to retain")
    ratios = np.cumsum(lam) / total
    # guard the ratio against rounding just below eps
    k = int(np.searchsorted(ratios, eps - 1e-12, side="left")) + 1
    nonzero = int(np.count_nonzero(lam > lam.max() * 1e-12))
    return min(k, nonzero, lam.size)


@dataclass
class GradientSubspace:
    """Protected subspace of one parameter group.

    The summed second moment is stored in factored form ``Sigma = F^T F``;
    this stays exact while avoiding a ``d x d`` matrix for wide groups.
    """

    dim: int
    eps: float = 0.7
    group: str = ""
    basis: np.ndarray = None  # d x k, orthonormal columns
    factor: np.ndarray = None  # r x d, moments of finished tasks
    pending: np.ndarray = None  # r x d, current task (before update_basis)

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise ValueError("energy budget must lie in (0, 1]")
        if self.basis is None:
            self.basis = np.zeros((self.dim, 0))
        if self.factor is None:
            self.factor = np.zeros((0, self.dim))
        if self.pending is None:
            self.pending = np.zeros((0, self.dim))

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def second_moment(self) -> np.ndarray:
        return self.factor.T @ self.factor

    @property
    def task_moment(self) -> np.ndarray:
        return self.pending.T @ self.pending

    def grow(self, new_dim: int) -> None:
        """Zero-pad to a larger group (new trailing coordinates are unprotected)."""
        if new_dim < self.dim:
            raise ShapeError("subspace cannot shrink")
        pad = new_dim - self.dim
        if pad:
            self.basis = np.vstack([self.basis, np.zeros((pad, self.basis.shape[1]))])
            self.factor = np.hstack([self.factor, np.zeros((self.factor.shape[0], pad))])
            self.pending = np.hstack([self.pending, np.zeros((self.pending.shape[0], pad))])
            self.dim = new_dim


def accumulate(sub: GradientSubspace, grads) -> GradientSubspace:
    """Set the current task's moment to ``(1/N) sum g g^T`` over ``grads``."""
    G = np.asarray([np.ravel(g) for g in grads], dtype=np.float64)
    if G.size == 0 or len(G) == 0:
        raise ContractError("accumulate needs at least one gradient")
    if G.shape[1] != sub.dim:
        raise ShapeError(f"gradient dim {G.shape[1]} != subspace dim {sub.dim}")
    sub.pending = G / np.sqrt(len(G))
    return sub


def _compress(F: np.ndarray) -> np.ndarray:
    """Equivalent factor with at most min(r, d) rows (same F^T F)."""
    if F.shape[0] <= F.shape[1]:
        return F
    _, s, vt = np.linalg.svd(F, full_matrices=False)
    return s[:, None] * vt


def top_eigen(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (desc) and eigenvectors of ``F^T F`` via a thin SVD of F."""
    try:
        _, s, vt = np.linalg.svd(F, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    return s * s, vt.T


def update_basis(sub: GradientSubspace) -> GradientSubspace:
    """Fold the current task into the summed moment and re-truncate by energy."""
    if sub.pending.shape[0] == 0:
        raise ContractError("update_basis called before accumulate")
    F = _compress(np.vstack([sub.factor, sub.pending]))
    lam, vecs = top_eigen(F)
    if lam.size == 0 or lam.sum() <= 0:
        log.debug("group %s: zero gradient energy, basis unchanged", sub.group)
        sub.factor = F
        sub.pending = np.zeros((0, sub.dim))
        return sub
    k = select_rank(lam, sub.eps)
    basis, _ = np.linalg.qr(vecs[:, :k])
    sub.basis = basis
    sub.factor = F
    sub.pending = np.zeros((0, sub.dim))
    return sub


def project_gradient(g, sub: GradientSubspace) -> np.ndarray:
    """Remove the component of ``g`` inside the protected subspace."""
    g = np.asarray(g, dtype=np.float64)
    flat = g.reshape(-1)
    if flat.size != sub.dim:
        raise ShapeError(f"gradient size {flat.size} != subspace dim {sub.dim}")
    if sub.rank == 0:
        return g.copy()
    U = sub.basis
    return (flat - U @ (U.T @ flat)).reshape(g.shape)


# --------------------------------------------------------------------------
# Hebbian route
# --------------------------------------------------------------------------


class NotConverged(RuntimeError):
    pass


@dataclass
class HebbianLearner:
    """Generalised Hebbian (Sanger) learner for the top-k subspace."""

    W: np.ndarray
    eta: float = 1e-2
    decay: float = 1e-4
    sweeps: int = 0

    @classmethod
    def create(cls, d: int, k: int, rng: np.random.Generator, eta: float = 1e-2) -> "HebbianLearner":
        W = rng.normal(size=(d, k))
        W /= np.linalg.norm(W, axis=0, keepdims=True)
        return cls(W=W, eta=eta)

    def delta(self, g: np.ndarray, eta: float) -> np.ndarray:
        y = self.W.T @ g
        # Sanger: lower-triangular decorrelation keeps columns ordered by eigenvalue
        return eta * (np.outer(g, y) - self.W @ np.triu(np.outer(y, y)))


def oja_converge(learner: HebbianLearner, grads, tol: float = 1e-8, max_sweeps: int = 100_000) -> np.ndarray:
    """Sweep Sanger's rule over ``grads`` until a sweep moves W by < ``tol``.

    Each sweep applies the update averaged over the gradient set, i.e. the
    expected Hebbian step under the empirical second moment.
    """
    G = np.asarray([np.ravel(g) for g in grads], dtype=np.float64)
    if len(G) == 0:
        raise ContractError("oja_converge needs gradients")
    Sigma = G.T @ G / len(G)
    # step size relative to the spectrum keeps the iteration stable
    top = np.linalg.norm(Sigma, 2)
    if top <= 0:
        raise ContractError("zero gradient set")
    for sweep in range(max_sweeps):
        eta = learner.eta / top / (1.0 + learner.decay * sweep)
        Y = Sigma @ learner.W
        dW = eta * (Y - learner.W @ np.triu(learner.W.T @ Y))
        learner.W += dW
        learner.sweeps = sweep + 1
        if np.linalg.norm(dW) < tol:
            return learner.W
    raise NotConverged(f"Hebbian learner did not converge within {max_sweeps} sweeps")


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Canonical angles (radians, ascending) between the column spans of A and B."""
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))
