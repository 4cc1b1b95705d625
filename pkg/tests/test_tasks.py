import numpy as np
import pytest

from mira.errors import ConfigError
from mira.tasks import (DataAccessError, TaskDataset, TaskStream, build_stream, load_csv, make_domain_blobs,
                        save_csv, simplex_means)

import oracles


def test_zero_shift_domains_are_identically_distributed():
    blobs = make_domain_blobs(num_classes=4, num_domains=2, samples_per_class=500, domain_shift=0.0, seed=3)
    a, b = blobs[0].features, blobs[1].features
    assert len(a) == 2000
    for j in range(a.shape[1]):
        assert oracles.ks_distance(a[:, j], b[:, j]) < 0.05


def test_two_class_single_domain_is_linearly_separable():
    blobs = make_domain_blobs(num_classes=2, num_domains=1, samples_per_class=200, seed=1)
    assert oracles.logistic_probe_accuracy(blobs[0].features, blobs[0].labels) > 0.95


def test_distinct_seeds_give_distinct_rotations():
    r0 = make_domain_blobs(num_domains=2, seed=0).rotations[1]
    r1 = make_domain_blobs(num_domains=2, seed=1).rotations[1]
    assert not np.allclose(r0, r1)


def test_rotations_are_orthogonal():
    for R in make_domain_blobs(num_domains=3, seed=2).rotations:
        np.testing.assert_allclose(R @ R.T, np.eye(R.shape[0]), atol=1e-10)


def test_same_seed_same_data():
    a = make_domain_blobs(num_domains=2, seed=4)
    b = make_domain_blobs(num_domains=2, seed=4)
    np.testing.assert_array_equal(a[1].features, b[1].features)


def test_domains_are_distinguishable_under_default_shift():
    blobs = make_domain_blobs(num_classes=4, num_domains=2, samples_per_class=150, seed=5)
    X = np.vstack([blobs[0].features, blobs[1].features])
    d = np.repeat([0, 1], len(blobs[0]))
    assert oracles.logistic_probe_accuracy(X, d) > 0.9


def test_simplex_means_are_equidistant():
    M = simplex_means(5, 8, 2.0, np.random.default_rng(0))
    D = np.linalg.norm(M[:, None] - M[None], axis=-1)
    off = D[~np.eye(5, dtype=bool)]
    np.testing.assert_allclose(off, off[0])
    np.testing.assert_allclose(np.linalg.norm(M, axis=1), 2.0)
    with pytest.raises(ConfigError):
        simplex_means(9, 8, 1.0, np.random.default_rng(0))


def test_blob_argument_checks():
    with pytest.raises(ConfigError):
        make_domain_blobs(num_classes=1)
    with pytest.raises(ConfigError):
        make_domain_blobs(num_domains=0)


def test_cil_label_sets_are_disjoint_pairs():
    blobs = make_domain_blobs(num_classes=10, num_domains=1, samples_per_class=20, input_dim=12)
    stream = build_stream("cil", blobs, num_tasks=5)
    assert stream.label_sets() == [frozenset({2 * t, 2 * t + 1}) for t in range(5)]
    for t in range(5):
        assert set(np.unique(stream.tests[t].labels)) <= stream.label_sets()[t]


def test_dg_holdout_excluded_from_training():
    stream = build_stream("dg", make_domain_blobs(num_domains=4, samples_per_class=10), holdout=3)
    assert stream.domain_ids() == [0, 1, 2]
    assert stream.held_out.domain_id == 3


def test_dil_tasks_share_label_set():
    stream = build_stream("dil", make_domain_blobs(num_domains=3, samples_per_class=10))
    assert len(set(stream.label_sets())) == 1
    assert stream.num_tasks == 3 and stream.num_classes == 8


def test_split_is_per_class_and_disjoint():
    blobs = make_domain_blobs(num_domains=1, samples_per_class=40)
    stream = build_stream("dil", blobs, test_fraction=0.25)
    tr, te = stream.train_data(0), stream.tests[0]
    assert len(tr) + len(te) == len(blobs[0])
    assert np.bincount(te.labels).tolist() == [10] * 8
    rows = {r.tobytes() for r in tr.features}
    assert not any(r.tobytes() in rows for r in te.features)


def test_continual_streams_release_old_training_data():
    stream = build_stream("dil", make_domain_blobs(num_domains=3, samples_per_class=5))
    stream.train_data(0)
    stream.train_data(1)
    stream.train_data(1)
    with pytest.raises(DataAccessError):
        stream.train_data(0)


def test_dg_allows_revisiting_sources():
    stream = build_stream("dg", make_domain_blobs(num_domains=3, samples_per_class=5))
    stream.train_data(1)
    stream.train_data(0)


def test_invariants_enforced_at_construction():
    d = TaskDataset(np.zeros((2, 2)), [0, 1], 0, 0, frozenset({0, 1}))
    e = TaskDataset(np.zeros((2, 2)), [1, 2], 1, 1, frozenset({1, 2}))
    with pytest.raises(ConfigError):
        TaskStream("dil", [d, e], [d, e])
    with pytest.raises(ConfigError):
        TaskStream("cil", [d, e], [d, e])
    with pytest.raises(ConfigError):
        TaskStream("dg", [d, e], [d])
    with pytest.raises(ConfigError):
        TaskStream("dg", [d, e], [d], held_out=d)
    with pytest.raises(ConfigError):
        build_stream("iid", [d])


def test_task_dataset_validation():
    with pytest.raises(ValueError):
        TaskDataset(np.zeros((0, 2)), [], 0, 0, frozenset())
    with pytest.raises(ValueError):
        TaskDataset(np.zeros((2, 2)), [0, 5], 0, 0, frozenset({0, 1}))
    with pytest.raises(ValueError):
        TaskDataset(np.zeros((3, 2)), [0, 1], 0, 0, frozenset({0, 1}))


def test_csv_round_trip(tmp_path):
    blobs = make_domain_blobs(num_domains=2, samples_per_class=3)
    p = tmp_path / "s.csv"
    save_csv(p, blobs.domains)
    back = load_csv(p)
    assert [b.domain_id for b in back] == [0, 1]
    for a, b in zip(blobs.domains, back):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n1,2\n")
    with pytest.raises(ConfigError):
        load_csv(p)
    p.write_text("f0,label,domain\n")
    with pytest.raises(ConfigError):
        load_csv(p)
