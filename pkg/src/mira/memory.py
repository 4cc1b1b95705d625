"""Universal-Hopfield key/value memory holding per-layer adapter vectors.

A read is ``Theta @ sep(K^T q)``: similarities against every stored key, a
separation function turning them into mixing weights, and a weighted sum of
stored values. Only the keys are trainable.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import AdapterVector
from .errors import ContractError
from .numerics import ShapeError, Tensor

log = logging.getLogger(__name__)

EPS_DENOM = 1e-8

SEPARATIONS = ("affine", "softmax", "relu", "tanh")


class DegenerateRetrieval(ArithmeticError):
    """Raised by :func:`separation` in strict mode when a denominator vanishes."""


@dataclass(frozen=True)
class Separation:
    kind: str = "affine"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in SEPARATIONS:
            raise ValueError(f"unknown separation {self.kind!r}; choose from {SEPARATIONS}")


def normalize_sum(x, eps: float = EPS_DENOM) -> tuple[Tensor, np.ndarray]:
    """Divide rows by their sum; rows with ``|sum| < eps`` become uniform.

    Returns the normalised tensor and a boolean mask of degenerate rows.
    Degenerate rows are constants on the tape (zero gradient).
    """
    x = nx.as_tensor(x)
    X = x.data
    n = X.shape[-1]
    s = X.sum(axis=-1, keepdims=True)
    bad = np.abs(s) < eps
    safe = np.where(bad, 1.0, s)
    out = np.where(bad, 1.0 / n, X / safe)

    def backward(g):
        # d(x_i / S)/dx_j = (delta_ij - out_i) / S
        gx = (g - (g * out).sum(axis=-1, keepdims=True)) / safe
        return (np.where(bad, 0.0, gx),)

    return nx.record(out, (x,), backward), bad[..., 0]


def separation(sep: Separation | str, s, strict: bool = False) -> tuple[Tensor, np.ndarray]:
    """Map similarities ``s`` (last axis = memories) to weights summing to one.

    Returns ``(weights, degenerate_mask)``. In strict mode a degenerate
    denominator raises :class:`DegenerateRetrieval` instead of falling back
    to uniform weights.
    """
    if isinstance(sep, str):
        sep = Separation(sep)
    s = nx.as_tensor(s)
    if s.shape[-1] < 1:
        raise ContractError("separation needs at least one similarity")
    if sep.kind == "softmax":
        w = nx.softmax(nx.scale(s, sep.beta), axis=-1)
        return w, np.zeros(s.shape[:-1], dtype=bool)
    if sep.kind == "affine":
        f = s
    elif sep.kind == "relu":
        f = nx.relu(s)
    else:
        f = nx.tanh(s)
    w, bad = normalize_sum(f)
    if np.any(bad):
        if strict:
            raise DegenerateRetrieval(f"{int(np.sum(bad))} degenerate retrieval(s) under {sep.kind}")
        log.debug("uniform weights substituted for %d degenerate retrieval(s)", int(np.sum(bad)))
    return w, np.atleast_1d(bad)


def sample_key(sigma2: float, d_k: int, seed) -> np.ndarray:
    """Key with i.i.d. N(0, sigma2) entries; ``seed`` is an int, SeedSequence or Generator."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(sigma2), size=d_k)


@dataclass
class RetrievalWeights:
    weights: np.ndarray
    layer: int
    query_id: np.ndarray | None = None
    degenerate: np.ndarray | None = None


@dataclass
class MemoryUnit:
    """Keys ``K`` (d_k x N, trainable) and values ``Theta`` (d_v x N, frozen)."""

    layer: int
    key_dim: int
    value_dim: int
    sep: Separation = field(default_factory=Separation)
    K: Tensor = None
    Theta: np.ndarray = None

    def __post_init__(self):
        if self.K is None:
            self.K = Tensor(np.zeros((self.key_dim, 0)), requires_grad=True, name=f"K{self.layer}")
        if self.Theta is None:
            self.Theta = np.zeros((self.value_dim, 0))
        self.Theta.flags.writeable = False
        if self.K.shape[1] != self.Theta.shape[1]:
            raise ContractError("key and value column counts differ")

    @property
    def count(self) -> int:
        return self.Theta.shape[1]

    def write(self, k, theta: AdapterVector) -> "MemoryUnit":
        """Append a key/value column; earlier columns are left untouched."""
        k = np.asarray(k, dtype=np.float64)
        if theta.layer != self.layer:
            raise ContractError(f"adapter for layer {theta.layer} written to memory {self.layer}")
        flat = np.asarray(theta.flat.data, dtype=np.float64)
        if k.shape != (self.key_dim,):
            raise ShapeError(f"key shape {k.shape} != ({self.key_dim},)")
        if flat.shape != (self.value_dim,):
            raise ShapeError(f"value shape {flat.shape} != ({self.value_dim},)")
        trainable = self.K.requires_grad
        self.K = Tensor(np.concatenate([self.K.data, k[:, None]], axis=1), trainable, self.K.name)
        theta_new = np.concatenate([self.Theta, flat[:, None]], axis=1)
        theta_new.flags.writeable = False
        self.Theta = theta_new
        return self

    def similarities(self, q) -> Tensor:
        q = nx.as_tensor(q)
        if q.shape[-1] != self.key_dim:
            raise ShapeError(f"query dim {q.shape[-1]} != key dim {self.key_dim}")
        return nx.matmul(q, self.K)

    def read(self, q, strict: bool = False) -> tuple[AdapterVector, RetrievalWeights]:
        """Retrieve ``Theta @ sep(K^T q)`` for a query ``(d_k,)`` or batch ``(B, d_k)``."""
        if self.count == 0:
            raise ContractError(f"read from empty memory at layer {self.layer}")
        s = self.similarities(q)
        w, bad = separation(self.sep, s, strict=strict)
        value = nx.matmul(w, nx.Tensor(self.Theta.T))
        qid = np.arange(w.shape[0]) if w.ndim == 2 else None
        return AdapterVector(self.layer, value), RetrievalWeights(w.data, self.layer, qid, bad)

    def theta_checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.Theta).tobytes()).hexdigest()
