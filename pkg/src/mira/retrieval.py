"""Query modules and the memory-modulated forward pass.

For every layer the previous layer's pooled output is mapped to a query, the
layer's memory is read per sample, and the retrieved adapter is loaded into
that layer before it runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import Backbone, Head
from .errors import ConfigError, ContractError
from .memory import MemoryUnit, RetrievalWeights
from .numerics import Tensor

QUERY_KINDS = ("identity", "linear", "mlp3")


@dataclass
class QueryModule:
    """``g_l``: maps ``h_{l-1}`` (d_h) to a query (d_k)."""

    kind: str
    layer: int
    in_dim: int
    out_dim: int
    weights: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ConfigError(f"unknown query module {self.kind!r}")
        if self.kind == "identity" and self.in_dim != self.out_dim:
            raise ConfigError("identity query module needs d_h == d_k")

    @classmethod
    def create(cls, kind: str, layer: int, d_h: int, d_k: int, rng: np.random.Generator) -> "QueryModule":
        mod = cls(kind, layer, d_h, d_k)
        if kind == "linear":
            # starts as the identity map (padded/truncated when d_k != d_h)
            mod.weights = [Tensor(np.eye(d_k, d_h), True, f"g{layer}.W"),
                           Tensor(np.zeros(d_k), True, f"g{layer}.b")]
        elif kind == "mlp3":
            dims = [d_h, d_h, d_h, d_k]
            ws = []
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                ws.append(Tensor(rng.normal(0.0, 1.0 / np.sqrt(a), size=(b, a)), True, f"g{layer}.W{i}"))
                ws.append(Tensor(np.zeros(b), True, f"g{layer}.b{i}"))
            mod.weights = ws
        return mod

    def params(self) -> list[Tensor]:
        return list(self.weights)

    def set_trainable(self, flag: bool) -> None:
        for w in self.weights:
            w.requires_grad = flag

    def __call__(self, h) -> Tensor:
        h = nx.as_tensor(h)
        if h.shape[-1] != self.in_dim:
            raise nx.ShapeError(f"query module {self.layer} expects dim {self.in_dim}, got {h.shape[-1]}")
        if self.kind == "identity":
            return h
        if self.kind == "linear":
            W, b = self.weights
            return nx.add(nx.matmul(h, nx.swap_last(W)), b)
        W0, b0, W1, b1, W2, b2 = self.weights
        z = nx.tanh(nx.add(nx.matmul(h, nx.swap_last(W0)), b0))
        z = nx.tanh(nx.add(nx.matmul(z, nx.swap_last(W1)), b1))
        return nx.add(nx.matmul(z, nx.swap_last(W2)), b2)


def query(g: QueryModule, h) -> Tensor:
    return g(h)


@dataclass
class LayerTrace:
    h_prev: np.ndarray
    q: np.ndarray
    weights: RetrievalWeights
    adapter: np.ndarray


@dataclass
class ModulatedForwardTrace:
    layers: list[LayerTrace]
    logits: np.ndarray

    def degenerate_count(self) -> int:
        """Samples with a degenerate retrieval at any layer."""
        masks = [np.atleast_1d(t.weights.degenerate) for t in self.layers if t.weights.degenerate is not None]
        if not masks:
            return 0
        return int(np.any(np.stack(masks), axis=0).sum())


def modulated_forward(backbone: Backbone, x, memories: list[MemoryUnit], gs: list[QueryModule],
                      head: Head, keep_trace: bool = False):
    """Per-sample retrieval forward. Returns ``(logits, trace_or_None, degenerate_mask)``."""
    L = backbone.cfg.num_layers
    if len(memories) != L or len(gs) != L:
        raise ContractError(f"need {L} memories and query modules")
    for mem in memories:
        if mem.count == 0:
            raise ContractError(f"memory for layer {mem.layer} is empty")
    h = backbone.embed(x)
    trace = []
    degenerate = np.zeros(h.shape[0], dtype=bool)
    for i in range(L):
        h_prev = backbone.pool(h)
        q = gs[i](h_prev)
        adapter, rw = memories[i].read(q)
        if rw.degenerate is not None:
            degenerate |= rw.degenerate
        if keep_trace:
            trace.append(LayerTrace(h_prev.data.copy(), q.data.copy(), rw, adapter.flat.data.copy()))
        h = backbone.block(i, h, adapter)
    logits = backbone.logits(h, head)
    tr = ModulatedForwardTrace(trace, logits.data.copy()) if keep_trace else None
    return logits, tr, degenerate


def inference_forward(backbone: Backbone, x, memories, gs, head: Head, batch_size: int | None = None) -> np.ndarray:
    """Gradient-free logits; records nothing on any tape and mutates nothing."""
    x = np.asarray(x, dtype=np.float64)
    with nx.no_grad():
        if batch_size is None or len(x) <= batch_size:
            return modulated_forward(backbone, x, memories, gs, head)[0].data
        parts = [modulated_forward(backbone, x[i:i + batch_size], memories, gs, head)[0].data
                 for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)
