"""Fast invariant checks runnable from the command line (``mira selftest``)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import AdapterVector, Backbone, BackboneConfig, init_head
from .continual import (GradientSubspace, HebbianLearner, accumulate, oja_converge, principal_angles,
                        project_gradient, select_rank, update_basis)
from .memory import MemoryUnit, Separation
from .metrics import forgetting
from .retrieval import QueryModule, inference_forward, modulated_forward


def _check_read() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for kind in ("affine", "softmax", "relu", "tanh"):
        mem = MemoryUnit(0, 5, 7, Separation(kind, 2.0))
        for _ in range(6):
            mem.write(rng.normal(size=5), AdapterVector(0, rng.normal(size=7)))
        q = rng.normal(size=5)
        s = mem.K.data.T @ q
        if kind == "softmax":
            w = np.exp(2.0 * (s - s.max()))
        else:
            w = {"affine": s, "relu": np.maximum(s, 0), "tanh": np.tanh(s)}[kind]
        want = mem.Theta @ (w / w.sum())
        got = mem.read(q)[0].flat.data
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst < 1e-10, f"read deviates from direct evaluation by {worst:.2e}"
    return f"max deviation {worst:.1e}"


def _check_gradients() -> str:
    rng = np.random.default_rng(1)
    cfg = BackboneConfig(num_layers=2, model_dim=8, num_heads=2, input_dim=8, num_classes=3,
                         lora_rank=2, seq_len=2)
    bb = Backbone.init(cfg, rng)
    head = init_head(cfg, rng, trainable=False)
    mems, gs = [], []
    for layer in range(2):
        mem = MemoryUnit(layer, 8, cfg.adapter_dim, Separation("softmax"))
        for _ in range(3):
            mem.write(rng.normal(size=8) * 0.3, AdapterVector(layer, rng.normal(size=cfg.adapter_dim) * 0.2))
        mems.append(mem)
        gs.append(QueryModule.create("linear", layer, 8, 8, rng))
    x, y = rng.normal(size=(4, 8)), rng.integers(0, 3, 4)
    params = [m.K for m in mems] + [p for g in gs for p in g.params()]
    err = nx.gradient_check(lambda: nx.cross_entropy(modulated_forward(bb, x, mems, gs, head)[0], y), params)
    assert err < 1e-3, f"end-to-end gradient error {err:.2e}"
    return f"relative error {err:.1e}"


def _check_inference_pure() -> str:
    rng = np.random.default_rng(2)
    cfg = BackboneConfig(num_layers=2, model_dim=8, num_heads=2, input_dim=8, num_classes=3, lora_rank=2)
    bb = Backbone.init(cfg, rng)
    head = init_head(cfg, rng, trainable=False)
    mems = []
    for layer in range(2):
        mem = MemoryUnit(layer, 8, cfg.adapter_dim)
        mem.write(rng.normal(size=8), AdapterVector(layer, rng.normal(size=cfg.adapter_dim) * 0.1))
        mems.append(mem)
    gs = [QueryModule.create("identity", layer, 8, 8, rng) for layer in range(2)]
    before = nx.record_counter
    x = rng.normal(size=(5, 8))
    a = inference_forward(bb, x, mems, gs, head)
    b = modulated_forward(bb, x, mems, gs, head)[0].data
    assert nx.record_counter == before, "inference recorded tape nodes"
    assert np.array_equal(a, b), "inference and training forward disagree"
    return "no tape records, bitwise equal logits"


def _check_subspace() -> str:
    assert select_rank([4, 3, 2, 1], 0.7) == 2
    sub = update_basis(accumulate(GradientSubspace(4, 0.7),
                                  [np.array([2.0, 0, 0, 0]), np.array([0, np.sqrt(3.0), 0, 0]),
                                   np.array([0, 0, np.sqrt(2.0), 0]), np.array([0, 0, 0, 1.0])]))
    assert sub.rank == 2
    g = np.random.default_rng(3).normal(size=4)
    assert np.max(np.abs(sub.basis.T @ project_gradient(g, sub))) < 1e-12
    G = np.random.default_rng(4).normal(size=(40, 5)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2])
    sub = update_basis(accumulate(GradientSubspace(5, 0.7), G))
    W = oja_converge(HebbianLearner.create(5, sub.rank, np.random.default_rng(5), eta=0.5), G)
    ang = float(principal_angles(W, sub.basis).max())
    assert ang < 1e-3, f"Hebbian span differs by {ang:.2e} rad"
    return f"largest principal angle {ang:.1e}"


def _check_metrics() -> str:
    A = np.array([[0.9, np.nan], [0.7, 0.8]])
    assert abs(forgetting(A) - 0.2) < 1e-12
    return "forgetting([[0.9,-],[0.7,0.8]]) = 0.2"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("memory read matches direct evaluation", _check_read),
    ("end-to-end gradients match finite differences", _check_gradients),
    ("inference is gradient-free and pure", _check_inference_pure),
    ("gradient subspace and projection", _check_subspace),
    ("forgetting metric", _check_metrics),
]


def run(out=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn()
            out(f"PASS  {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
        except Exception as exc:  # report every failing check, keep going
            ok = False
            out(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    return ok
