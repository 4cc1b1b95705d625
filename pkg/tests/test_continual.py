import numpy as np
import pytest
from scipy.linalg import subspace_angles

from mira.continual import (GradientSubspace, HebbianLearner, NotConverged, accumulate, oja_converge,
                            principal_angles, project_gradient, select_rank, update_basis)
from mira.errors import ContractError
from mira.numerics import ShapeError

import oracles


def _diag_grads(lams):
    """Gradients whose averaged second moment is diag(lams)."""
    d = len(lams)
    return [np.sqrt(d * lam) * np.eye(d)[i] for i, lam in enumerate(lams)]


def test_accumulate_single_axis():
    sub = accumulate(GradientSubspace(3), [np.array([1.0, 0, 0])])
    np.testing.assert_array_equal(sub.task_moment, np.diag([1.0, 0, 0]))


def test_accumulate_two_axes_averages():
    sub = accumulate(GradientSubspace(2), [np.array([1.0, 0]), np.array([0, 1.0])])
    np.testing.assert_allclose(sub.task_moment, 0.5 * np.eye(2), atol=1e-15)


def test_accumulate_matches_loop_oracle():
    G = np.random.default_rng(0).normal(size=(50, 4))
    sub = accumulate(GradientSubspace(4), G)
    np.testing.assert_allclose(sub.task_moment, oracles.second_moment_loop(G.tolist()), rtol=0, atol=1e-12)


def test_accumulate_validates():
    with pytest.raises(ContractError):
        accumulate(GradientSubspace(2), [])
    with pytest.raises(ShapeError):
        accumulate(GradientSubspace(2), [np.zeros(3)])


def test_select_rank_examples():
    assert select_rank([4, 3, 2, 1], 0.7) == 2
    assert select_rank([5, 2, 1, 0, 0], 1.0) == 3
    for eps in (0.01, 0.5, 1.0):
        assert select_rank([1, 0, 0], eps) == 1


def test_select_rank_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        lams = np.sort(rng.exponential(size=rng.integers(1, 9)))[::-1]
        eps = float(rng.uniform(0.05, 1.0))
        assert select_rank(lams, eps) == oracles.select_rank_loop(list(lams), eps)


def test_select_rank_rejects_bad_spectra():
    with pytest.raises(ValueError):
        select_rank([1, -1], 0.5)
    with pytest.raises(ContractError):
        select_rank([0, 0], 0.5)


def test_update_basis_diagonal_example():
    sub = update_basis(accumulate(GradientSubspace(4, 0.7), _diag_grads([4, 3, 2, 1])))
    assert sub.rank == 2
    P = sub.basis @ sub.basis.T
    np.testing.assert_allclose(P, np.diag([1.0, 1, 0, 0]), atol=1e-12)


def test_update_basis_isotropic_checks_projector():
    sub = update_basis(accumulate(GradientSubspace(3, 0.5), _diag_grads([1, 1, 1])))
    U = sub.basis
    np.testing.assert_allclose(U.T @ U, np.eye(sub.rank), atol=1e-10)
    P = U @ U.T
    np.testing.assert_allclose(P @ P, P, atol=1e-12)


def test_update_basis_matches_eigh_oracle_across_tasks():
    rng = np.random.default_rng(2)
    sub = GradientSubspace(6, 0.9)
    moments = []
    for t in range(3):
        G = rng.normal(size=(20, 6)) * rng.uniform(0.2, 3, size=6)
        update_basis(accumulate(sub, G))
        moments.append(G.T @ G / len(G))
        S = sum(moments)
        lams = np.sort(np.linalg.eigvalsh(S))[::-1]
        k = oracles.select_rank_loop(list(lams), 0.9)
        assert sub.rank == k
        assert np.max(subspace_angles(sub.basis, oracles.top_eigvecs_eigh(S, k))) < 1e-8
        np.testing.assert_allclose(sub.second_moment, S, atol=1e-10)


def test_update_basis_requires_accumulate():
    with pytest.raises(ContractError):
        update_basis(GradientSubspace(2))


def test_zero_gradients_leave_basis_empty():
    sub = update_basis(accumulate(GradientSubspace(3), [np.zeros(3)]))
    assert sub.rank == 0


def test_project_gradient_examples():
    sub = GradientSubspace(2)
    sub.basis = np.array([[1.0], [0.0]])
    np.testing.assert_array_equal(project_gradient(np.array([3.0, 4.0]), sub), [0.0, 4.0])
    g = np.array([3.0, 4.0])
    out = project_gradient(g, GradientSubspace(2))
    np.testing.assert_array_equal(out, g)
    assert out is not g


def test_project_gradient_random_instance():
    rng = np.random.default_rng(3)
    sub = update_basis(accumulate(GradientSubspace(10, 0.8), rng.normal(size=(15, 10))))
    g = rng.normal(size=10)
    assert np.max(np.abs(sub.basis.T @ project_gradient(g, sub))) < 1e-10


def test_project_gradient_keeps_shape_and_checks_size():
    sub = GradientSubspace(6)
    sub.basis = np.eye(6)[:, :1]
    assert project_gradient(np.ones((2, 3)), sub).shape == (2, 3)
    with pytest.raises(ShapeError):
        project_gradient(np.ones(5), sub)


def test_grow_pads_with_unprotected_coordinates():
    sub = update_basis(accumulate(GradientSubspace(2, 1.0), [np.array([1.0, 0.0])]))
    sub.grow(4)
    assert sub.basis.shape == (4, 1)
    np.testing.assert_array_equal(project_gradient(np.ones(4), sub), [0, 1, 1, 1])
    with pytest.raises(ShapeError):
        sub.grow(3)


def test_oja_rank_one_axis():
    W = oja_converge(HebbianLearner.create(3, 1, np.random.default_rng(0), eta=0.5), [np.array([1.0, 0, 0])])
    np.testing.assert_allclose(np.abs(W[:, 0]), [1, 0, 0], atol=1e-6)


def test_oja_diag_two_orders_columns():
    W = oja_converge(HebbianLearner.create(2, 2, np.random.default_rng(1), eta=0.5), _diag_grads([4, 3]))
    assert np.max(principal_angles(W, np.eye(2))) < 1e-6
    assert abs(abs(W[0, 0]) - 1) < 1e-4 and abs(W[1, 0]) < 1e-4


def test_oja_span_equals_update_basis_on_diagonal():
    grads = _diag_grads([4, 3, 2, 1])
    U = update_basis(accumulate(GradientSubspace(4, 0.7), grads)).basis
    W = oja_converge(HebbianLearner.create(4, 2, np.random.default_rng(2), eta=0.5), grads)
    assert np.max(principal_angles(W, U)) < 1e-3


def test_oja_reports_non_convergence():
    with pytest.raises(NotConverged):
        oja_converge(HebbianLearner.create(4, 2, np.random.default_rng(0), eta=1e-6),
                     np.random.default_rng(1).normal(size=(10, 4)), max_sweeps=5)


def test_principal_angles_agree_with_scipy():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    np.testing.assert_allclose(np.sort(principal_angles(A, B)), np.sort(subspace_angles(A, B)), atol=1e-10)
