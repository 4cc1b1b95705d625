"""Invariants checked over generated inputs."""

import csv
import io

import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mira import numerics as nx
from mira.backbone import AdapterVector, Backbone, BackboneConfig, deflatten_adapter, flatten_adapter, init_head
from mira.continual import GradientSubspace, accumulate, project_gradient, select_rank, update_basis
from mira.harness import metrics_csv_text
from mira.memory import MemoryUnit, Separation, separation
from mira.metrics import EvalReport, avg_accuracy, forgetting
from mira.retrieval import QueryModule, modulated_forward

import oracles

FAST = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
floats = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
KINDS = st.sampled_from(["affine", "softmax", "relu", "tanh"])


def vec(n_min=1, n_max=8, elements=floats):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, n, elements=elements))


@FAST
@given(KINDS, vec(), st.floats(0.1, 10))
def test_separation_weights_sum_to_one(kind, s, beta):
    w, bad = separation(Separation(kind, beta), s)
    # affine weights can be large and signed when the denominator nearly cancels
    assert abs(w.data.sum() - 1.0) < 1e-9 * max(1.0, np.abs(w.data).sum())
    if kind == "softmax":
        assert ((w.data >= 0) & (w.data <= 1)).all()


@FAST
@given(KINDS, vec(), st.floats(0.1, 10))
def test_separation_matches_loop_oracle(kind, s, beta):
    w, bad = separation(Separation(kind, beta), s)
    f = {"affine": s, "relu": np.maximum(s, 0), "tanh": np.tanh(s)}.get(kind)
    # skip near-cancelling denominators, where both sides are ill-conditioned
    assume(kind == "softmax" or bad.any() or abs(f.sum()) > 1e-3 * max(1.0, np.abs(f).sum()))
    np.testing.assert_allclose(w.data, oracles.separation_loop(kind, list(s), beta), rtol=1e-9, atol=1e-12)


@FAST
@given(vec(), floats)
def test_softmax_shift_invariance(s, c):
    np.testing.assert_allclose(nx.softmax(s + c).data, nx.softmax(s).data, atol=1e-12)


@FAST
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 5), st.integers(1, 4), KINDS)
def test_read_equals_loop_oracle(seed, n, d_k, d_v, kind):
    rng = np.random.default_rng(seed)
    K = np.abs(rng.normal(size=(d_k, n))) + 0.05
    V = rng.normal(size=(d_v, n))
    mem = MemoryUnit(0, d_k, d_v, Separation(kind, 1.3))
    for i in range(n):
        mem.write(K[:, i], AdapterVector(0, V[:, i]))
    q = np.abs(rng.normal(size=d_k)) + 0.05
    np.testing.assert_allclose(mem.read(q)[0].flat.data, oracles.uhn_read_loop(K, V, q, kind, 1.3),
                               rtol=1e-12, atol=1e-12)


@FAST
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_write_appends_without_touching_old_columns(seed, n):
    rng = np.random.default_rng(seed)
    mem = MemoryUnit(0, 3, 4)
    snapshots = []
    for i in range(n):
        mem.write(rng.normal(size=3), AdapterVector(0, rng.normal(size=4)))
        snapshots.append(mem.Theta.copy())
        assert mem.K.shape[1] == mem.Theta.shape[1] == i + 1
    for i, snap in enumerate(snapshots):
        np.testing.assert_array_equal(mem.Theta[:, :i + 1], snap)


@FAST
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_adapter_layout_round_trip(r, d, seed):
    assume(r <= d)
    rng = np.random.default_rng(seed)
    flat = rng.normal(size=4 * r * d)
    parts = deflatten_adapter(flat, r, d)
    again = flatten_adapter(*(parts[k].data for k in ("A_Q", "B_Q", "A_V", "B_V")))
    np.testing.assert_array_equal(again, flat)


@st.composite
def subspace_and_grad(draw):
    d = draw(st.integers(2, 10))
    seed = draw(st.integers(0, 2**31))
    eps = draw(st.floats(0.05, 1.0))
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(draw(st.integers(1, 12)), d)) * rng.uniform(0.1, 3, size=d)
    sub = update_basis(accumulate(GradientSubspace(d, eps), G))
    return sub, rng.normal(size=d) * 10


@FAST
@given(subspace_and_grad())
def test_projection_is_orthogonal_idempotent_and_contracting(case):
    sub, g = case
    p = project_gradient(g, sub)
    assert np.max(np.abs(sub.basis.T @ p)) < 1e-8 * max(1.0, np.abs(g).max())
    np.testing.assert_allclose(project_gradient(p, sub), p, atol=1e-10)
    assert np.linalg.norm(p) <= np.linalg.norm(g) + 1e-9
    np.testing.assert_allclose(sub.basis.T @ sub.basis, np.eye(sub.rank), atol=1e-10)


@FAST
@given(st.lists(st.floats(0, 100), min_size=1, max_size=10), st.floats(0.01, 1.0))
def test_select_rank_is_smallest_meeting_the_budget(lams, eps):
    lams = sorted(lams, reverse=True)
    assume(sum(lams) > 1e-6)
    k = select_rank(lams, eps)
    ratio = np.cumsum(lams) / sum(lams)
    assert 1 <= k <= len(lams)
    assert ratio[k - 1] >= eps - 1e-9 or lams[k] <= lams[0] * 1e-12
    if k > 1:
        assert ratio[k - 2] < eps


@st.composite
def acc_matrix(draw):
    T = draw(st.integers(2, 6))
    vals = draw(arrays(np.float64, (T, T), elements=st.floats(0, 1)))
    vals[np.triu_indices(T, 1)] = np.nan
    return vals


@FAST
@given(acc_matrix())
def test_metrics_match_loop_oracles(A):
    assert abs(avg_accuracy(A) - oracles.avg_accuracy_loop(A.tolist())) < 1e-15
    assert abs(forgetting(A) - oracles.forgetting_loop(A.tolist())) < 1e-15
    assert -1 <= forgetting(A) <= 1 and 0 <= avg_accuracy(A) <= 1


@FAST
@given(acc_matrix(), st.floats(-0.5, 0.5))
def test_forgetting_ignores_uniform_offsets(A, c):
    assert abs(forgetting(A + c) - forgetting(A)) < 1e-12


@FAST
@given(acc_matrix())
def test_metrics_csv_round_trips_values(A):
    rep = EvalReport.from_matrix("dil", 0, A)
    rows = list(csv.DictReader(io.StringIO(metrics_csv_text(rep), newline="")))
    T = A.shape[0]
    assert len(rows) == T * (T + 1) // 2
    for r in rows:
        assert float(r["acc"]) == A[int(r["step"]), int(r["task"])]


_CFG = BackboneConfig(num_layers=2, model_dim=4, num_heads=2, input_dim=4, num_classes=3, lora_rank=1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["identity", "linear", "mlp3"]), KINDS)
def test_retrieval_is_per_sample(seed, qkind, kind):
    rng = np.random.default_rng(seed)
    bb, head = Backbone.init(_CFG, rng), init_head(_CFG, rng)
    mems = []
    for layer in range(2):
        m = MemoryUnit(layer, 4, _CFG.adapter_dim, Separation(kind))
        for _ in range(3):
            m.write(np.abs(rng.normal(size=4)) + 0.1, AdapterVector(layer, rng.normal(size=_CFG.adapter_dim) * 0.3))
        mems.append(m)
    gs = [QueryModule.create(qkind, layer, 4, 4, rng) for layer in range(2)]
    x = rng.normal(size=(3, 4))
    full = modulated_forward(bb, x, mems, gs, head)[0].data
    for i in range(3):
        np.testing.assert_allclose(modulated_forward(bb, x[i:i + 1], mems, gs, head)[0].data[0], full[i],
                                   rtol=1e-10, atol=1e-12)
