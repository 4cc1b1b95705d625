"""Frozen pre-norm transformer classifier with LoRA slots on Q and V."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    input_dim: int = 16
    num_classes: int = 8
    lora_rank: int = 4
    # LoRA scale is lora_alpha / lora_rank; None means lora_alpha = lora_rank
    lora_alpha: float | None = None
    seq_len: int = 1
    mlp_hidden: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "input_dim", "num_classes", "lora_rank", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.lora_rank > self.model_dim:
            raise ValueError("lora_rank must not exceed model_dim")
        if self.input_dim % self.seq_len:
            raise ValueError("input_dim must be divisible by seq_len")

    @property
    def adapter_dim(self) -> int:
        return 4 * self.lora_rank * self.model_dim

    @property
    def lora_scale(self) -> float:
        alpha = self.lora_rank if self.lora_alpha is None else self.lora_alpha
        return alpha / self.lora_rank

    @property
    def hidden_dim(self) -> int:
        return self.mlp_hidden or 2 * self.model_dim

    @property
    def token_dim(self) -> int:
        return self.input_dim // self.seq_len


# --------------------------------------------------------------------------
# adapters
# --------------------------------------------------------------------------


@dataclass
class AdapterVector:
    """Flattened LoRA payload of one layer: A_Q, B_Q, A_V, B_V (row-major).

    ``flat`` has shape ``(d_v,)`` or ``(batch, d_v)`` for per-sample
    adapters. It may be a plain array or a tape tensor.
    """

    layer: int
    flat: Tensor

    def __post_init__(self):
        self.flat = nx.as_tensor(self.flat)


def adapter_slices(r: int, d: int) -> dict[str, tuple[slice, tuple[int, int]]]:
    n = r * d
    return {
        "A_Q": (slice(0, n), (r, d)),
        "B_Q": (slice(n, 2 * n), (d, r)),
        "A_V": (slice(2 * n, 3 * n), (r, d)),
        "B_V": (slice(3 * n, 4 * n), (d, r)),
    }


def flatten_adapter(A_Q, B_Q, A_V, B_V) -> np.ndarray:
    return np.concatenate([np.ravel(A_Q), np.ravel(B_Q), np.ravel(A_V), np.ravel(B_V)])


def deflatten_adapter(flat, r: int, d: int) -> dict[str, Tensor]:
    """Split a flat (or batched flat) adapter into its four matrices."""
    flat = nx.as_tensor(flat)
    if flat.shape[-1] != 4 * r * d:
        raise ShapeError(f"adapter length {flat.shape[-1]} != {4 * r * d}")
    lead = flat.shape[:-1]
    out = {}
    for name, (sl, shape) in adapter_slices(r, d).items():
        part = nx.getitem(flat, (Ellipsis, sl))
        out[name] = nx.reshape(part, lead + shape)
    return out


def apply_adapter(frozen_w, A, B, scale: float = 1.0) -> Tensor:
    """Effective weight ``W + scale * B @ A``; batched A/B give a batch of weights."""
    frozen_w, A, B = nx.as_tensor(frozen_w), nx.as_tensor(A), nx.as_tensor(B)
    d_out, d_in = frozen_w.shape[-2:]
    r = A.shape[-2]
    if A.shape[-1] != d_in or B.shape[-2] != d_out or B.shape[-1] != r:
        raise ShapeError(f"adapter shapes A{A.shape} B{B.shape} do not fit W{frozen_w.shape}")
    delta = nx.matmul(B, A)
    if scale != 1.0:
        delta = nx.scale(delta, scale)
    return nx.add(frozen_w, delta)


def init_adapter(cfg: BackboneConfig, rng: np.random.Generator) -> np.ndarray:
    """A ~ N(0, 0.02^2), B = 0 for both projections."""
    r, d = cfg.lora_rank, cfg.model_dim
    A_Q = rng.normal(0.0, 0.02, size=(r, d))
    A_V = rng.normal(0.0, 0.02, size=(r, d))
    zeros = np.zeros((d, r))
    return flatten_adapter(A_Q, zeros, A_V, zeros)


def zero_adapter(cfg: BackboneConfig) -> np.ndarray:
    return np.zeros(cfg.adapter_dim)


# --------------------------------------------------------------------------
# frozen network
# --------------------------------------------------------------------------


@dataclass
class LayerWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W_1: np.ndarray
    b_1: np.ndarray
    W_2: np.ndarray
    b_2: np.ndarray


@dataclass
class Head:
    """Linear classifier ``pooled @ W + b`` with W of shape (d_h, C)."""

    W: Tensor
    b: Tensor

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def copy(self, trainable: bool = False) -> "Head":
        return Head(Tensor(self.W.data.copy(), trainable, "head.W"),
                    Tensor(self.b.data.copy(), trainable, "head.b"))


@dataclass
class Backbone:
    cfg: BackboneConfig
    embed_W: np.ndarray
    embed_b: np.ndarray
    pos: np.ndarray
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray

    @classmethod
    def init(cls, cfg: BackboneConfig, rng: np.random.Generator) -> "Backbone":
        d, hdim = cfg.model_dim, cfg.hidden_dim

        def lin(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        layers = [
            LayerWeights(
                W_Q=lin(d, d), W_K=lin(d, d), W_V=lin(d, d), W_O=lin(d, d),
                ln1_g=np.ones(d), ln1_b=np.zeros(d), ln2_g=np.ones(d), ln2_b=np.zeros(d),
                W_1=lin(d, hdim), b_1=np.zeros(hdim), W_2=lin(hdim, d), b_2=np.zeros(d),
            )
            for _ in range(cfg.num_layers)
        ]
        bb = cls(
            cfg=cfg,
            embed_W=lin(cfg.token_dim, d),
            embed_b=np.zeros(d),
            pos=rng.normal(0.0, 0.1, size=(cfg.seq_len, d)),
            layers=layers,
            lnf_g=np.ones(d),
            lnf_b=np.zeros(d),
        )
        bb.freeze()
        return bb

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embed_W": self.embed_W, "embed_b": self.embed_b, "pos": self.pos,
               "lnf_g": self.lnf_g, "lnf_b": self.lnf_b}
        for i, lw in enumerate(self.layers):
            for k, v in vars(lw).items():
                out[f"layers.{i}.{k}"] = v
        return out

    def freeze(self) -> None:
        for arr in self.arrays().values():
            arr.flags.writeable = False

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @classmethod
    def from_arrays(cls, cfg: BackboneConfig, arrays: dict[str, np.ndarray]) -> "Backbone":
        layers = []
        for i in range(cfg.num_layers):
            fields = {k.split(".", 2)[2]: np.array(v) for k, v in arrays.items()
                      if k.startswith(f"layers.{i}.")}
            layers.append(LayerWeights(**fields))
        bb = cls(cfg=cfg, embed_W=np.array(arrays["embed_W"]), embed_b=np.array(arrays["embed_b"]),
                 pos=np.array(arrays["pos"]), layers=layers,
                 lnf_g=np.array(arrays["lnf_g"]), lnf_b=np.array(arrays["lnf_b"]))
        bb.freeze()
        return bb

    # ---- forward pieces --------------------------------------------------

    def embed(self, x) -> Tensor:
        """Tokenise flat features into ``seq_len`` chunks and embed them."""
        x = nx.as_tensor(x)
        cfg = self.cfg
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ShapeError(f"expected input [B, {cfg.input_dim}], got {x.shape}")
        tokens = nx.reshape(x, (x.shape[0], cfg.seq_len, cfg.token_dim))
        h = nx.matmul(tokens, self.embed_W)
        return nx.add(nx.add(h, self.embed_b), self.pos)

    @staticmethod
    def pool(h: Tensor) -> Tensor:
        """Token-mean summary ``[B, d_h]`` used as the layer output for retrieval."""
        return nx.mean(h, axis=1)

    def block(self, i: int, h: Tensor, adapter: AdapterVector | Tensor | np.ndarray) -> Tensor:
        cfg = self.cfg
        lw = self.layers[i]
        flat = adapter.flat if isinstance(adapter, AdapterVector) else nx.as_tensor(adapter)
        parts = deflatten_adapter(flat, cfg.lora_rank, cfg.model_dim)
        # stored matrices act as y = u @ W, so the LoRA delta B @ A lives in W's frame
        W_Q = apply_adapter(lw.W_Q, parts["A_Q"], parts["B_Q"], cfg.lora_scale)
        W_V = apply_adapter(lw.W_V, parts["A_V"], parts["B_V"], cfg.lora_scale)

        B, T, d = h.shape
        H = cfg.num_heads
        dh = d // H
        u = nx.layer_norm(h, lw.ln1_g, lw.ln1_b)
        q = nx.matmul(u, W_Q)
        k = nx.matmul(u, lw.W_K)
        v = nx.matmul(u, W_V)

        def heads(t):
            return nx.transpose(nx.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = nx.scale(nx.matmul(qh, nx.swap_last(kh)), 1.0 / np.sqrt(dh))
        attn = nx.matmul(nx.softmax(scores, axis=-1), vh)
        attn = nx.reshape(nx.transpose(attn, (0, 2, 1, 3)), (B, T, d))
        h = nx.add(h, nx.matmul(attn, lw.W_O))

        u2 = nx.layer_norm(h, lw.ln2_g, lw.ln2_b)
        m = nx.relu(nx.add(nx.matmul(u2, lw.W_1), lw.b_1))
        m = nx.add(nx.matmul(m, lw.W_2), lw.b_2)
        return nx.add(h, m)

    def logits(self, h: Tensor, head: Head) -> Tensor:
        hf = nx.layer_norm(h, self.lnf_g, self.lnf_b)
        return nx.add(nx.matmul(self.pool(hf), head.W), head.b)

    def forward(self, x, adapters, head: Head, return_hidden: bool = False):
        """Logits under one adapter per layer (shared ``(d_v,)`` or per-sample ``(B, d_v)``).

        With ``return_hidden`` also returns the pooled per-layer outputs
        ``[h_0, ..., h_L]``.
        """
        if adapters is None or len(adapters) != self.cfg.num_layers:
            got = 0 if adapters is None else len(adapters)
            raise ContractError(f"need {self.cfg.num_layers} adapters, got {got}")
        h = self.embed(x)
        hidden = [self.pool(h)]
        for i, ad in enumerate(adapters):
            if ad is None:
                raise ContractError(f"missing adapter for layer {i}")
            h = self.block(i, h, ad)
            hidden.append(self.pool(h))
        out = self.logits(h, head)
        return (out, hidden) if return_hidden else out


def init_head(cfg: BackboneConfig, rng: np.random.Generator, trainable: bool = True) -> Head:
    W = rng.normal(0.0, 1.0 / np.sqrt(cfg.model_dim), size=(cfg.model_dim, cfg.num_classes))
    return Head(Tensor(W, trainable, "head.W"), Tensor(np.zeros(cfg.num_classes), trainable, "head.b"))
