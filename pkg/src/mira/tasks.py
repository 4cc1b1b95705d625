"""Synthetic domain-shifted Gaussian tasks and DG / DIL / CIL streams."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError

SETTINGS = ("dg", "dil", "cil")
CL_SETTINGS = ("dil", "cil")

SIGMA_DATA = 0.3


class DataAccessError(RuntimeError):
    """A continual-learning trainer asked for the training data of a finished task."""


@dataclass
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray
    task_id: int
    domain_id: int | None
    label_set: frozenset
    domains: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1:
            raise ValueError("a task needs at least one sample")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if not set(np.unique(self.labels).tolist()) <= set(self.label_set):
            raise ValueError("labels outside the declared label set")
        if self.domains is None and self.domain_id is not None:
            self.domains = np.full(len(self.labels), self.domain_id, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, task_id: int | None = None) -> "TaskDataset":
        dom = None if self.domains is None else self.domains[idx]
        labels = self.labels[idx]
        return TaskDataset(self.features[idx], labels,
                           self.task_id if task_id is None else task_id,
                           self.domain_id, frozenset(np.unique(labels).tolist()) or self.label_set, dom)


@dataclass
class DomainBlobs:
    """Raw per-domain data before it is cut into a stream."""

    domains: list[TaskDataset]
    class_means: np.ndarray
    rotations: list[np.ndarray] = field(default_factory=list)
    translations: list[np.ndarray] = field(default_factory=list)

    def __iter__(self):
        return iter(self.domains)

    def __len__(self):
        return len(self.domains)

    def __getitem__(self, i):
        return self.domains[i]


def simplex_means(num_classes: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Vertices of a regular simplex (``num_classes`` x ``dim``) at ``radius``."""
    if num_classes > dim:
        raise ConfigError(f"{num_classes} simplex vertices need input_dim >= {num_classes}")
    V = np.eye(num_classes) - 1.0 / num_classes
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    Q, _ = np.linalg.qr(rng.normal(size=(dim, num_classes)))
    return radius * V @ Q.T


def make_domain_blobs(num_classes: int = 8, num_domains: int = 4, samples_per_class: int = 200,
                      domain_shift: float = 2.0, seed: int = 0, input_dim: int = 16,
                      radius: float = 2.0, warp: float = 0.5) -> DomainBlobs:
    """Gaussian class blobs seen through per-domain rotation, translation and warp.

    Rotation angle, translation length and warp strength all scale with
    ``domain_shift``; at zero every domain has the same distribution.
    """
    if num_domains < 1 or num_classes < 2:
        raise ConfigError("need at least one domain and two classes")
    rng = np.random.default_rng(seed)
    means = simplex_means(num_classes, input_dim, radius, rng)
    domains, rots, trans = [], [], []
    for d in range(num_domains):
        S = rng.normal(size=(input_dim, input_dim)) / np.sqrt(input_dim)
        R = expm(domain_shift * (S - S.T) / 2.0)
        t = rng.normal(size=input_dim)
        t *= domain_shift / np.linalg.norm(t)
        Wd = rng.normal(size=(input_dim, input_dim)) / np.sqrt(input_dim)
        labels = np.repeat(np.arange(num_classes), samples_per_class)
        x = means[labels] @ R.T + t + SIGMA_DATA * rng.normal(size=(len(labels), input_dim))
        x = x + warp * domain_shift * np.tanh(x @ Wd)
        perm = rng.permutation(len(labels))
        domains.append(TaskDataset(x[perm], labels[perm], d, d, frozenset(range(num_classes))))
        rots.append(R)
        trans.append(t)
    return DomainBlobs(domains, means, rots, trans)


# --------------------------------------------------------------------------
# streams
# --------------------------------------------------------------------------


@dataclass
class TaskStream:
    """Ordered training tasks plus their evaluation data.

    In the continual settings the training split of task ``s`` becomes
    unreachable once any later task has been requested.
    """

    setting: str
    _train: list[TaskDataset]
    tests: list[TaskDataset]
    held_out: TaskDataset | None = None
    _cursor: int = -1

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        self.validate()

    @property
    def num_tasks(self) -> int:
        return len(self._train)

    @property
    def num_classes(self) -> int:
        labels = set()
        for t in self._train + self.tests:
            labels |= set(t.label_set)
        if self.held_out is not None:
            labels |= set(self.held_out.label_set)
        return max(labels) + 1

    @property
    def input_dim(self) -> int:
        return self._train[0].features.shape[1]

    def label_sets(self) -> list[frozenset]:
        return [t.label_set for t in self._train]

    def domain_ids(self) -> list[int | None]:
        return [t.domain_id for t in self._train]

    def train_data(self, t: int) -> TaskDataset:
        if self.setting in CL_SETTINGS:
            if t < self._cursor:
                raise DataAccessError(f"task {t} training data was released when task {self._cursor} began")
            self._cursor = t
        return self._train[t]

    def validate(self) -> None:
        sets = self.label_sets()
        if self.setting == "dil" and len(set(sets)) > 1:
            raise ConfigError("DIL tasks must share one label set")
        if self.setting == "cil":
            for i in range(len(sets)):
                for j in range(i + 1, len(sets)):
                    if sets[i] & sets[j]:
                        raise ConfigError("CIL label sets must be disjoint")
        if self.setting == "dg":
            if self.held_out is None:
                raise ConfigError("DG stream needs a held-out domain")
            seen = {t.domain_id for t in self._train}
            if self.held_out.domain_id in seen:
                raise ConfigError("held-out domain appears in training tasks")


def _split(ds: TaskDataset, test_fraction: float, rng: np.random.Generator, task_id: int):
    """Per-class split into (train, test)."""
    train_idx, test_idx = [], []
    for c in sorted(np.unique(ds.labels)):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) > 1:
            n_test = min(max(n_test, 1), len(idx) - 1)
        else:
            n_test = 0
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    def cut(idx):
        return TaskDataset(ds.features[idx], ds.labels[idx], task_id, ds.domain_id, ds.label_set,
                           None if ds.domains is None else ds.domains[idx])
    return cut(tr), cut(te)


def build_stream(setting: str, domains, num_tasks: int | None = None, holdout: int | None = None,
                 test_fraction: float = 0.25, seed: int = 0) -> TaskStream:
    """Cut raw per-domain data into a stream.

    * ``dil``: one task per domain, shared labels.
    * ``cil``: classes split into ``num_tasks`` ordered disjoint groups, each
      task holding its classes from every domain.
    * ``dg``: one task per source domain; domain ``holdout`` (default last) is
      the unseen test domain.
    """
    setting = setting.lower()
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    domains = list(domains)
    rng = np.random.default_rng(seed)
    if setting == "dil":
        pairs = [_split(d, test_fraction, rng, t) for t, d in enumerate(domains)]
        return TaskStream("dil", [p[0] for p in pairs], [p[1] for p in pairs])
    if setting == "dg":
        if holdout is None:
            holdout = len(domains) - 1
        if not 0 <= holdout < len(domains):
            raise ConfigError(f"holdout {holdout} out of range")
        sources = [d for i, d in enumerate(domains) if i != holdout]
        train = []
        for t, d in enumerate(sources):
            # DG keeps every source sample for training
            train.append(TaskDataset(d.features, d.labels, t, d.domain_id, d.label_set, d.domains))
        ho = domains[holdout]
        held = TaskDataset(ho.features, ho.labels, len(sources), ho.domain_id, ho.label_set, ho.domains)
        return TaskStream("dg", train, [held], held_out=held)
    # cil
    classes = sorted(set().union(*[d.label_set for d in domains]))
    num_tasks = num_tasks or len(domains)
    if num_tasks > len(classes):
        raise ConfigError(f"cannot split {len(classes)} classes into {num_tasks} CIL tasks")
    groups = np.array_split(np.asarray(classes), num_tasks)
    feats = np.concatenate([d.features for d in domains])
    labels = np.concatenate([d.labels for d in domains])
    doms = np.concatenate([d.domains if d.domains is not None else np.full(len(d), -1) for d in domains])
    train, tests = [], []
    for t, grp in enumerate(groups):
        mask = np.isin(labels, grp)
        ds = TaskDataset(feats[mask], labels[mask], t, None, frozenset(grp.tolist()), doms[mask])
        tr, te = _split(ds, test_fraction, rng, t)
        train.append(tr)
        tests.append(te)
    return TaskStream("cil", train, tests)


# --------------------------------------------------------------------------
# CSV import / export
# --------------------------------------------------------------------------


def save_csv(path, datasets) -> None:
    """Write samples as ``f0..f{D-1},label,domain`` rows."""
    datasets = list(datasets)
    dim = datasets[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dim)] + ["label", "domain"])
        for ds in datasets:
            doms = ds.domains if ds.domains is not None else np.full(len(ds), -1)
            for x, y, d in zip(ds.features, ds.labels, doms):
                w.writerow([repr(float(v)) for v in x] + [int(y), int(d)])


def load_csv(path) -> list[TaskDataset]:
    """Read a sample CSV back as one dataset per domain (sorted by domain id)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "domain"] or any(h != f"f{i}" for i, h in enumerate(header[:-2])):
            raise ConfigError(f"{path}: expected header f0..f{{D-1}},label,domain")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigError(f"{path}: no samples")
    arr = np.asarray(rows, dtype=np.float64)
    X = arr[:, :-2]
    y = arr[:, -2].astype(np.int64)
    dom = arr[:, -1].astype(np.int64)
    if y.min() < 0:
        raise ConfigError("labels must be non-negative integers")
    classes = frozenset(np.unique(y).tolist())
    out = []
    for d in sorted(np.unique(dom).tolist()):
        m = dom == d
        out.append(TaskDataset(X[m], y[m], len(out), d, classes))
    return out
