"""Two-stage trainer: per-task adapter training, then key/query consolidation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import AdapterVector, Backbone, BackboneConfig, Head, init_adapter, init_head
from .continual import GradientSubspace, accumulate, project_gradient, update_basis
from .errors import ConfigError, ContractError
from .memory import SEPARATIONS, MemoryUnit, Separation, sample_key
from .metrics import EvalReport
from .numerics import NumericError, OptimizerState, Tensor, adamw_step
from .retrieval import QUERY_KINDS, QueryModule, inference_forward, modulated_forward
from .tasks import CL_SETTINGS, SETTINGS, TaskDataset, TaskStream, build_stream, make_domain_blobs

log = logging.getLogger(__name__)

# stage codes mixed into per-stage RNG seeds so a resumed run draws the same numbers
_BACKBONE, _ADAPT, _KEY, _CONSOLIDATE, _QUERY, _HEAD = range(6)

DEGENERATE_WARN_RATE = 0.10


@dataclass
class TrainConfig:
    setting: str = "dil"
    lora_rank: int = 4
    adapt_epochs: int = 5
    # None picks 2 for the continual settings and 10 for DG
    consolidate_epochs: int | None = None
    lr_adapt: float = 1e-3
    lr_consolidate: float = 1e-3
    weight_decay: float = 1e-3
    sigma2: float = 1.0
    adapters_per_task: int = 1
    sep_kind: str = "softmax"
    sep_beta: float = 1.0
    query_kind: str = "identity"
    key_dim: int | None = None
    dual_gpm: bool = True
    dual_gpm_eps: float = 0.7
    project_keys: bool = True
    project_queries: bool = True
    project_update: bool = True
    key_projection: str = "query"
    replica_mode: str = "init"
    dg_mixed_batches: bool = False
    batch_size: int = 32
    seed: int = 0
    # frozen backbone
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    seq_len: int = 1
    # synthetic stream
    num_classes: int = 8
    num_tasks: int = 5
    num_domains: int | None = None
    input_dim: int = 16
    samples_per_class: int = 200
    domain_shift: float = 2.0
    test_fraction: float = 0.25
    data_seed: int | None = None

    def __post_init__(self):
        self.setting = str(self.setting).lower()
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.sep_kind not in SEPARATIONS:
            raise ConfigError(f"sep_kind must be one of {SEPARATIONS}")
        if self.query_kind not in QUERY_KINDS:
            raise ConfigError(f"query_kind must be one of {QUERY_KINDS}")
        if self.key_projection not in ("query", "column", "flat"):
            raise ConfigError("key_projection must be 'query', 'column' or 'flat'")
        if self.replica_mode not in ("init", "shard"):
            raise ConfigError("replica_mode must be 'init' or 'shard'")
        for name in ("lr_adapt", "lr_consolidate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("adapt_epochs", "adapters_per_task", "batch_size", "num_tasks", "lora_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.consolidate_epochs is not None and self.consolidate_epochs < 1:
            raise ConfigError("consolidate_epochs must be at least 1")
        if self.weight_decay < 0 or self.sigma2 < 0:
            raise ConfigError("weight_decay and sigma2 must be non-negative")
        if not 0.0 < self.dual_gpm_eps <= 1.0:
            raise ConfigError("dual_gpm_eps must lie in (0, 1]")
        if self.query_kind == "identity" and self.key_dim not in (None, self.model_dim):
            raise ConfigError("identity query module needs key_dim == model_dim")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings tuned for the small synthetic streams this package ships with.

        The plain defaults move keys too little at this scale; a larger
        consolidation step, small-norm keys and a tighter subspace energy
        threshold make retrieval separate the domains.
        """
        base = dict(lr_consolidate=3e-2, dual_gpm_eps=0.9)
        base.update(overrides)
        cfg = cls(**base)
        if "sigma2" not in overrides:
            cfg.sigma2 = 1.0 / cfg.d_k
        return cfg

    @property
    def n_consolidate(self) -> int:
        if self.consolidate_epochs is not None:
            return self.consolidate_epochs
        return 10 if self.setting == "dg" else 2

    @property
    def d_k(self) -> int:
        return self.key_dim or self.model_dim

    def backbone_config(self) -> BackboneConfig:
        try:
            return BackboneConfig(num_layers=self.num_layers, model_dim=self.model_dim,
                                  num_heads=self.num_heads, input_dim=self.input_dim,
                                  num_classes=self.num_classes, lora_rank=self.lora_rank,
                                  seq_len=self.seq_len)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def make_stream(cfg: TrainConfig) -> TaskStream:
    """The synthetic stream described by ``cfg`` (same config, same data)."""
    if cfg.num_domains is not None:
        n_dom = cfg.num_domains
    elif cfg.setting == "dil":
        n_dom = cfg.num_tasks
    elif cfg.setting == "dg":
        n_dom = cfg.num_tasks + 1
    else:
        n_dom = 1
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    blobs = make_domain_blobs(num_classes=cfg.num_classes, num_domains=n_dom,
                              samples_per_class=cfg.samples_per_class, domain_shift=cfg.domain_shift,
                              seed=seed, input_dim=cfg.input_dim)
    return build_stream(cfg.setting, blobs, num_tasks=cfg.num_tasks if cfg.setting == "cil" else None,
                        test_fraction=cfg.test_fraction, seed=seed + 1)


@dataclass
class ModelState:
    backbone: Backbone
    head: Head
    memories: list[MemoryUnit]
    queries: list[QueryModule]
    subspaces: dict[str, GradientSubspace] = field(default_factory=dict)
    tasks_adapted: int = 0
    tasks_consolidated: int = 0
    seen_classes: list[int] = field(default_factory=list)
    head_trained: bool = False
    accuracy_rows: list[list[float]] = field(default_factory=list)
    events: list[tuple[str, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    degenerate_total: int = 0
    adapt_losses: list[list[float]] = field(default_factory=list)

    def trainable_groups(self) -> dict[str, list[Tensor]]:
        groups = {f"keys.{m.layer}": [m.K] for m in self.memories}
        for g in self.queries:
            if g.params():
                groups[f"query.{g.layer}"] = g.params()
        return groups


def init_state(cfg: TrainConfig) -> ModelState:
    bcfg = cfg.backbone_config()
    backbone = Backbone.init(bcfg, np.random.default_rng([cfg.seed, _BACKBONE]))
    head = init_head(bcfg, np.random.default_rng([cfg.seed, _HEAD]), trainable=False)
    sep = Separation(cfg.sep_kind, cfg.sep_beta)
    memories = [MemoryUnit(layer, cfg.d_k, bcfg.adapter_dim, sep) for layer in range(bcfg.num_layers)]
    for m in memories:
        m.K.requires_grad = False
    queries = []
    for layer in range(bcfg.num_layers):
        g = QueryModule.create(cfg.query_kind, layer, bcfg.model_dim, cfg.d_k,
                               np.random.default_rng([cfg.seed, _QUERY, layer]))
        g.set_trainable(False)
        queries.append(g)
    return ModelState(backbone, head, memories, queries)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _check_finite(loss: Tensor, where: str) -> None:
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss ({loss.data}) during {where}")


def _take_grads(params: list[Tensor]) -> list[np.ndarray]:
    grads = []
    for p in params:
        grads.append(np.zeros_like(p.data) if p.grad is None else p.grad)
        p.grad = None
    return grads


def _class_index(classes: list[int], labels: np.ndarray) -> np.ndarray:
    cls = np.asarray(classes)
    idx = np.searchsorted(cls, labels)
    if np.any(idx >= len(cls)) or np.any(cls[np.minimum(idx, len(cls) - 1)] != labels):
        raise ContractError("labels outside the active class set")
    return idx


# --------------------------------------------------------------------------
# Adaptation
# --------------------------------------------------------------------------


def adaptation(data: TaskDataset, state: ModelState, cfg: TrainConfig, task: int) -> ModelState:
    """Train ``adapters_per_task`` adapter replicas on one task and store them under random keys."""
    if len(data) == 0:
        raise ContractError("adaptation needs a non-empty task")
    bb = state.backbone
    bcfg = bb.cfg
    frozen = bb.checksum()
    cil = cfg.setting == "cil"
    classes = sorted(int(c) for c in data.label_set)
    if cil:
        state.seen_classes = sorted(set(state.seen_classes) | set(classes))
    else:
        state.seen_classes = list(range(bcfg.num_classes))
    m = cfg.adapters_per_task
    losses = []
    for r in range(m):
        rng = np.random.default_rng([cfg.seed, _ADAPT, task, r])
        adapters = [Tensor(init_adapter(bcfg, rng), True, f"adapter.{layer}") for layer in range(bcfg.num_layers)]
        idx = np.arange(len(data))
        if cfg.replica_mode == "shard" and m > 1:
            idx = idx[r::m]
        X, y = data.features[idx], data.labels[idx]
        train_head = r == 0 and (cil or not state.head_trained)
        if cil:
            cols = np.asarray(classes)
            head = Head(Tensor(state.head.W.data[:, cols].copy(), train_head, "head.W"),
                        Tensor(state.head.b.data[cols].copy(), train_head, "head.b"))
            y = _class_index(classes, y)
        else:
            head = state.head.copy(trainable=train_head)
        params = adapters + (head.params() if train_head else [])
        opt = OptimizerState.for_params(params, learning_rate=cfg.lr_adapt, weight_decay=cfg.weight_decay)
        epoch_losses = []
        for _ in range(cfg.adapt_epochs):
            total = 0.0
            for b in _batches(len(y), cfg.batch_size, rng):
                with nx.GradTape() as tape:
                    loss = nx.cross_entropy(bb.forward(X[b], adapters, head), y[b])
                _check_finite(loss, f"adaptation of task {task}")
                tape.backward(loss)
                adamw_step(params, _take_grads(params), opt)
                total += float(loss.data) * len(b)
            epoch_losses.append(total / len(y))
        losses.append(epoch_losses)
        if train_head:
            if cil:
                state.head.W.data[:, cols] = head.W.data
                state.head.b.data[cols] = head.b.data
            else:
                state.head = head.copy(trainable=False)
        for layer, ad in enumerate(adapters):
            key = sample_key(cfg.sigma2, cfg.d_k, np.random.default_rng([cfg.seed, _KEY, task, r, layer]))
            state.memories[layer].write(key, AdapterVector(layer, ad.data.copy()))
    if not cil:
        state.head_trained = True
    if bb.checksum() != frozen:
        raise ContractError("frozen backbone changed during adaptation")
    state.adapt_losses.append(np.mean(losses, axis=0).tolist())
    state.tasks_adapted += 1
    state.events.append(("adapt", task))
    return state


# --------------------------------------------------------------------------
# Consolidation
# --------------------------------------------------------------------------


class _Projected:
    """How one parameter group's gradients are sampled and projected.

    ``column`` treats every key column's gradient as one sample in key
    space, so a single ``d_k`` subspace guards all keys, including ones
    written after the subspace was built. ``query`` guards the same key
    space but samples it with the queries themselves (the gradient of each
    similarity with respect to its key), so a task is protected even when
    its key gradients vanish, e.g. with a single stored adapter. ``flat`` uses the whole group as
    one vector (keys flattened column by column, so new memories append
    trailing coordinates).
    """

    def __init__(self, name: str, params: list[Tensor], mode: str):
        self.name, self.params, self.mode = name, params, mode

    @property
    def dim(self) -> int:
        if self.mode in ("column", "query"):
            return self.params[0].shape[0]
        return sum(p.data.size for p in self.params)

    def samples(self, arrays: list[np.ndarray]) -> list[np.ndarray]:
        if self.mode == "column":
            return list(arrays[0].T)
        if self.mode == "query":
            return []
        if self.name.startswith("keys."):
            return [arrays[0].T.ravel()]
        return [np.concatenate([a.ravel() for a in arrays])]

    def project(self, arrays: list[np.ndarray], sub: GradientSubspace) -> list[np.ndarray]:
        if self.mode in ("column", "query"):
            return [np.stack([project_gradient(c, sub) for c in arrays[0].T], axis=1)]
        (flat,) = self.samples(arrays)
        flat = project_gradient(flat, sub)
        if self.name.startswith("keys."):
            K = self.params[0]
            return [flat.reshape(K.shape[1], K.shape[0]).T]
        out, i = [], 0
        for p in self.params:
            out.append(flat[i:i + p.data.size].reshape(p.shape))
            i += p.data.size
        return out


def _consolidation_head(state: ModelState, cfg: TrainConfig, task_classes: list[int]):
    """Head over seen classes; only the current task's columns are trainable (CIL)."""
    seen = state.seen_classes
    W, b = state.head.W.data, state.head.b.data
    if cfg.setting != "cil":
        return state.head, [], None
    old = [c for c in seen if c not in task_classes]
    new = list(task_classes)
    W_new = Tensor(W[:, new].copy(), True, "head.W.new")
    b_new = Tensor(b[new].copy(), True, "head.b.new")
    order = old + new

    def build():
        Wt = nx.concat([Tensor(W[:, old]), W_new], axis=1) if old else W_new
        bt = nx.concat([Tensor(b[old]), b_new], axis=0) if old else b_new
        return Head(Wt, bt)

    def commit():
        state.head.W.data[:, new] = W_new.data
        state.head.b.data[new] = b_new.data

    return (build, commit, order), [W_new, b_new], order


def consolidation(data: TaskDataset, state: ModelState, cfg: TrainConfig, task: int) -> ModelState:
    """Train keys and query modules (plus new CIL head columns) through retrieval."""
    if any(mem.count == 0 for mem in state.memories):
        raise ContractError("consolidation needs every memory to hold at least one adapter")
    bb = state.backbone
    frozen = bb.checksum()
    theta_sums = [m.theta_checksum() for m in state.memories]
    cl = cfg.setting in CL_SETTINGS
    cil = cfg.setting == "cil"

    groups = state.trainable_groups()
    for params in groups.values():
        for p in params:
            p.requires_grad = True
    task_classes = sorted(int(c) for c in data.label_set)
    head_spec, head_params, order = _consolidation_head(state, cfg, task_classes)
    y_all = _class_index(order, data.labels) if cil else data.labels
    params = [p for ps in groups.values() for p in ps] + head_params
    allowed = {id(p) for p in params}

    proj: list[_Projected] = []
    if cl and cfg.dual_gpm:
        for name, ps in groups.items():
            if name.startswith("keys.") and cfg.project_keys:
                proj.append(_Projected(name, ps, cfg.key_projection))
            elif name.startswith("query.") and cfg.project_queries:
                proj.append(_Projected(name, ps, "flat"))
    for grp in proj:
        sub = state.subspaces.get(grp.name)
        if sub is None:
            sub = state.subspaces[grp.name] = GradientSubspace(grp.dim, cfg.dual_gpm_eps, grp.name)
        sub.grow(grp.dim)
    grad_log: dict[str, list[np.ndarray]] = {grp.name: [] for grp in proj}
    index = {id(p): i for i, p in enumerate(params)}
    need_queries = any(grp.mode == "query" for grp in proj)

    opt = OptimizerState.for_params(params, learning_rate=cfg.lr_consolidate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, _CONSOLIDATE, task])
    X = data.features
    try:
        for epoch in range(cfg.n_consolidate):
            degenerate = 0
            for b in _batches(len(y_all), cfg.batch_size, rng):
                head = head_spec[0]() if cil else state.head
                with nx.GradTape() as tape:
                    logits, trace, bad = modulated_forward(bb, X[b], state.memories, state.queries, head,
                                                           keep_trace=need_queries)
                    loss = nx.cross_entropy(logits, y_all[b])
                _check_finite(loss, f"consolidation of task {task}")
                stray = [p.name for p in tape.leaves if id(p) not in allowed]
                if stray:
                    raise ContractError(f"consolidation touched non-trainable tensors: {stray}")
                tape.backward(loss)
                degenerate += int(bad.sum())
                grads = _take_grads(params)
                before = {}
                for grp in proj:
                    if grp.mode == "query":
                        grad_log[grp.name].extend(trace.layers[int(grp.name.split(".")[1])].q)
                    sl = [index[id(p)] for p in grp.params]
                    raw = [grads[i] for i in sl]
                    grad_log[grp.name].extend(grp.samples(raw))
                    sub = state.subspaces[grp.name]
                    if sub.rank:
                        for i, g in zip(sl, grp.project(raw, sub)):
                            grads[i] = g
                        if cfg.project_update:
                            before[grp.name] = [p.data.copy() for p in grp.params]
                adamw_step(params, grads, opt)
                for grp in proj:
                    if grp.name in before:
                        old = before[grp.name]
                        steps = grp.project([p.data - o for p, o in zip(grp.params, old)],
                                            state.subspaces[grp.name])
                        for p, o, st in zip(grp.params, old, steps):
                            p.data[...] = o + st
            state.degenerate_total += degenerate
            if degenerate > DEGENERATE_WARN_RATE * len(y_all):
                msg = (f"task {task} epoch {epoch}: {degenerate}/{len(y_all)} samples had a "
                       f"degenerate retrieval")
                log.warning(msg)
                state.warnings.append(msg)
    finally:
        for ps in groups.values():
            for p in ps:
                p.requires_grad = False
                p.grad = None
    if cil:
        head_spec[1]()
    for name, gs in grad_log.items():
        if gs:
            update_basis(accumulate(state.subspaces[name], gs))
    if bb.checksum() != frozen or [m.theta_checksum() for m in state.memories] != theta_sums:
        raise ContractError("frozen backbone or stored adapters changed during consolidation")
    state.tasks_consolidated += 1
    state.events.append(("consolidate", task))
    return state


def _consolidate_dg_mixed(stream: TaskStream, state: ModelState, cfg: TrainConfig) -> None:
    parts = [stream.train_data(t) for t in range(stream.num_tasks)]
    feats = np.concatenate([p.features for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    mixed = TaskDataset(feats, labels, 0, None, frozenset(np.unique(labels).tolist()))
    consolidation(mixed, state, cfg, 0)
    state.tasks_consolidated = stream.num_tasks


# --------------------------------------------------------------------------
# evaluation and orchestration
# --------------------------------------------------------------------------


def predict(state: ModelState, X, cfg: TrainConfig) -> np.ndarray:
    logits = inference_forward(state.backbone, X, state.memories, state.queries, state.head, batch_size=256)
    if cfg.setting == "cil":
        seen = np.asarray(state.seen_classes)
        return seen[np.argmax(logits[:, seen], axis=1)]
    return np.argmax(logits, axis=1)


def evaluate(state: ModelState, data: TaskDataset, cfg: TrainConfig) -> float:
    return float(np.mean(predict(state, data.features, cfg) == data.labels))


def _cl_row(state: ModelState, stream: TaskStream, cfg: TrainConfig, step: int) -> list[float]:
    row = [np.nan] * stream.num_tasks
    for j in range(step + 1):
        row[j] = evaluate(state, stream.tests[j], cfg)
    return row


def report_from_state(state: ModelState, cfg: TrainConfig) -> EvalReport:
    rows = np.asarray(state.accuracy_rows, dtype=np.float64)
    if cfg.setting == "dg":
        A = rows.reshape(1, 1)
    else:
        A = rows[:, :rows.shape[0]]
    return EvalReport.from_matrix(cfg.setting, cfg.seed, A, degenerate_retrievals=state.degenerate_total,
                                  warnings=list(state.warnings), config=cfg.to_dict())


def adapt_task(stream: TaskStream, state: ModelState, cfg: TrainConfig, task: int | None = None) -> int:
    """Adaptation stage for the next task in schedule order; returns its index."""
    t = state.tasks_adapted if task is None else task
    if t != state.tasks_adapted:
        raise ContractError(f"task {state.tasks_adapted} is next for adaptation, not {t}")
    if t >= stream.num_tasks:
        raise ContractError("every task in the stream has already been adapted")
    if cfg.setting in CL_SETTINGS and state.tasks_consolidated != t:
        raise ContractError(f"consolidate task {t - 1} before adapting task {t}")
    if cfg.setting == "dg" and state.tasks_consolidated:
        raise ContractError("DG adapts every source domain before any consolidation")
    adaptation(stream.train_data(t), state, cfg, t)
    return t


def consolidate_task(stream: TaskStream, state: ModelState, cfg: TrainConfig, task: int | None = None) -> int:
    """Consolidation stage for the next task, followed by the evaluation it triggers."""
    T = stream.num_tasks
    t = state.tasks_consolidated if task is None else task
    if t != state.tasks_consolidated:
        raise ContractError(f"task {state.tasks_consolidated} is next for consolidation, not {t}")
    if t >= T:
        raise ContractError("every task in the stream has already been consolidated")
    if cfg.setting in CL_SETTINGS:
        if t >= state.tasks_adapted:
            raise ContractError(f"task {t} has not been adapted yet")
        consolidation(stream.train_data(t), state, cfg, t)
        state.accuracy_rows.append(_cl_row(state, stream, cfg, t))
        return t
    if state.tasks_adapted < T:
        raise ContractError("DG consolidates only after every source domain is adapted")
    if cfg.dg_mixed_batches:
        _consolidate_dg_mixed(stream, state, cfg)
    else:
        consolidation(stream.train_data(t), state, cfg, t)
    if state.tasks_consolidated == T:
        state.accuracy_rows = [[evaluate(state, stream.held_out, cfg)]]
    return t


def run_mira(stream: TaskStream, cfg: TrainConfig, state: ModelState | None = None,
             on_step=None) -> tuple[ModelState, EvalReport]:
    """Run (or resume) the full two-stage schedule over ``stream``.

    Continual settings alternate adaptation and consolidation task by task;
    DG adapts every source domain first and consolidates afterwards.
    ``on_step(kind, task, state)`` is called after every stage, and a
    resumed ``state`` skips the stages it has already completed.
    """
    if stream.setting != cfg.setting:
        raise ConfigError(f"stream setting {stream.setting!r} does not match config {cfg.setting!r}")
    if state is None:
        state = init_state(cfg)
    T = stream.num_tasks
    if cfg.setting in CL_SETTINGS:
        schedule = [k for _ in range(T) for k in ("adapt", "consolidate")]
    else:
        schedule = ["adapt"] * T + ["consolidate"] * T
    for kind in schedule:
        if kind == "adapt" and state.tasks_adapted < T and (
                cfg.setting == "dg" or state.tasks_adapted == state.tasks_consolidated):
            t = adapt_task(stream, state, cfg)
        elif kind == "consolidate" and state.tasks_consolidated < min(T, state.tasks_adapted):
            t = consolidate_task(stream, state, cfg)
        else:
            continue
        if on_step:
            on_step(kind, t, state)
    return state, report_from_state(state, cfg)


def run_naive(stream: TaskStream, cfg: TrainConfig) -> EvalReport:
    """Baseline: one adapter set and head fine-tuned on each task in turn."""
    if stream.setting not in CL_SETTINGS:
        raise ConfigError("the naive baseline is defined for the continual settings")
    bcfg = cfg.backbone_config()
    bb = Backbone.init(bcfg, np.random.default_rng([cfg.seed, _BACKBONE]))
    head = init_head(bcfg, np.random.default_rng([cfg.seed, _HEAD]), trainable=True)
    rng = np.random.default_rng([cfg.seed, _ADAPT, 0, 0])
    adapters = [Tensor(init_adapter(bcfg, rng), True, f"adapter.{layer}") for layer in range(bcfg.num_layers)]
    params = adapters + head.params()
    seen: list[int] = []
    rows = []
    epochs = cfg.adapt_epochs + cfg.n_consolidate
    for t in range(stream.num_tasks):
        data = stream.train_data(t)
        seen = sorted(set(seen) | set(int(c) for c in data.label_set))
        cols = np.asarray(seen)
        opt = OptimizerState.for_params(params, learning_rate=cfg.lr_adapt, weight_decay=cfg.weight_decay)
        trng = np.random.default_rng([cfg.seed, _ADAPT, t, 0])
        y = _class_index(seen, data.labels)
        for _ in range(epochs):
            for b in _batches(len(y), cfg.batch_size, trng):
                with nx.GradTape() as tape:
                    logits = bb.forward(data.features[b], adapters, head)
                    if cfg.setting == "cil":
                        logits = nx.getitem(logits, (slice(None), cols))
                    loss = nx.cross_entropy(logits, y[b])
                _check_finite(loss, f"naive training of task {t}")
                tape.backward(loss)
                adamw_step(params, _take_grads(params), opt)
        row = [np.nan] * stream.num_tasks
        with nx.no_grad():
            for j in range(t + 1):
                test = stream.tests[j]
                lg = bb.forward(test.features, [a.data for a in adapters], head).data[:, cols]
                row[j] = float(np.mean(cols[np.argmax(lg, axis=1)] == test.labels))
        rows.append(row)
    return EvalReport.from_matrix(cfg.setting, cfg.seed, np.asarray(rows), config=cfg.to_dict())
