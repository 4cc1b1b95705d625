"""Accuracy-matrix metrics and the evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def _matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ContractError(f"accuracy matrix must be square and non-empty, got shape {A.shape}")
    return A


def avg_accuracy(A) -> float:
    """Mean accuracy over all tasks after the last training step."""
    A = _matrix(A)
    last = A[-1]
    if np.any(np.isnan(last)):
        raise ContractError("final row of the accuracy matrix is not fully populated")
    return float(last.mean())


def forgetting(A) -> float:
    """Mean drop from each earlier task's best accuracy to its final accuracy.

    For task ``j`` the best is taken over steps ``j .. T-2``; the result is
    not clamped, so backward transfer shows up as a negative value.
    """
    A = _matrix(A)
    T = A.shape[0]
    if T < 2:
        raise ContractError("forgetting needs at least two tasks")
    drops = []
    for j in range(T - 1):
        hist = A[j:T - 1, j]
        if np.any(np.isnan(hist)) or np.isnan(A[T - 1, j]):
            raise ContractError(f"accuracy history of task {j} is incomplete")
        drops.append(hist.max() - A[T - 1, j])
    return float(np.mean(drops))


def step_avg_accuracy(A) -> float:
    """Average over steps of the mean accuracy on tasks seen so far."""
    A = _matrix(A)
    return float(np.mean([A[i, :i + 1].mean() for i in range(A.shape[0])]))


@dataclass
class EvalReport:
    setting: str
    seed: int
    accuracy: np.ndarray  # T x T (NaN above the diagonal) or 1 x 1 for DG
    avg_acc: float
    forgetting: float | None
    step_avg_acc: float
    degenerate_retrievals: int = 0
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, setting: str, seed: int, A, **kw) -> "EvalReport":
        A = _matrix(A)
        fg = forgetting(A) if A.shape[0] >= 2 else None
        return cls(setting, seed, A, avg_accuracy(A), fg, step_avg_accuracy(A), **kw)

    def to_dict(self) -> dict:
        acc = [[None if np.isnan(v) else float(v) for v in row] for row in self.accuracy]
        return {
            "setting": self.setting,
            "seed": self.seed,
            "accuracy_matrix": acc,
            "final_avg_acc": self.avg_acc,
            "step_avg_acc": self.step_avg_acc,
            "forgetting": self.forgetting,
            "degenerate_retrievals": self.degenerate_retrievals,
            "warnings": list(self.warnings),
            "config": self.config,
        }
