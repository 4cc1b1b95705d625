"""Run artifacts: checkpoint container, metrics.csv and report.json."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .backbone import Backbone, Head
from .continual import GradientSubspace
from .memory import MemoryUnit, Separation
from .metrics import EvalReport, avg_accuracy, forgetting, step_avg_accuracy
from .numerics import Tensor
from .pipeline import ModelState, TrainConfig
from .retrieval import QueryModule

__all__ = [
    "FORMAT_VERSION", "CheckpointError", "CheckpointVersionError", "CheckpointCorruptError",
    "save_checkpoint", "load_checkpoint", "write_metrics_csv", "write_report_json",
    "EvalReport", "avg_accuracy", "forgetting", "step_avg_accuracy",
]

FORMAT_VERSION = 1
FILE_MAGIC = b"MIRACKPT"
BLOB_MAGIC = b"MIRA"
_HEADER = struct.Struct("<4sIII")  # magic, rank, dim0, dim1 -> 16 bytes
METRICS_COLUMNS = ("step", "task", "acc", "avg_acc", "forgetting")


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------


def _tensors(state: ModelState) -> list[tuple[str, np.ndarray]]:
    out = [(f"backbone.{k}", v) for k, v in sorted(state.backbone.arrays().items())]
    out += [("head.W", state.head.W.data), ("head.b", state.head.b.data)]
    for m in state.memories:
        out += [(f"memory.{m.layer}.K", m.K.data), (f"memory.{m.layer}.Theta", m.Theta)]
    for g in state.queries:
        out += [(f"query.{g.layer}.{i}", w.data) for i, w in enumerate(g.weights)]
    for name, sub in sorted(state.subspaces.items()):
        out += [(f"subspace.{name}.basis", sub.basis), (f"subspace.{name}.factor", sub.factor),
                (f"subspace.{name}.pending", sub.pending)]
    return out


def _blob(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim > 2:
        raise CheckpointError(f"only tensors of rank <= 2 are stored, got rank {arr.ndim}")
    dims = list(arr.shape) + [0] * (2 - arr.ndim)
    return _HEADER.pack(BLOB_MAGIC, arr.ndim, *dims) + np.ascontiguousarray(arr).tobytes()


def _nan_to_none(rows):
    return [[None if (isinstance(v, float) and math.isnan(v)) else v for v in row] for row in rows]


def save_checkpoint(state: ModelState, cfg: TrainConfig, path) -> None:
    """Write ``state`` as a JSON manifest followed by fixed-order tensor blobs."""
    blobs, entries, offset = [], [], 0
    for name, arr in _tensors(state):
        b = _blob(arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "layers": [{"layer": m.layer, "key_dim": m.key_dim, "value_dim": m.value_dim, "columns": m.count,
                    "sep_kind": m.sep.kind, "sep_beta": m.sep.beta} for m in state.memories],
        "queries": [{"layer": g.layer, "kind": g.kind, "in_dim": g.in_dim, "out_dim": g.out_dim,
                     "weights": [w.name for w in g.weights]} for g in state.queries],
        "subspaces": [{"name": n, "dim": s.dim, "eps": s.eps, "rank": s.rank}
                      for n, s in sorted(state.subspaces.items())],
        "state": {
            "tasks_adapted": state.tasks_adapted,
            "tasks_consolidated": state.tasks_consolidated,
            "seen_classes": list(state.seen_classes),
            "head_trained": state.head_trained,
            "accuracy_rows": _nan_to_none(state.accuracy_rows),
            "events": [list(e) for e in state.events],
            "warnings": list(state.warnings),
            "degenerate_total": state.degenerate_total,
            "adapt_losses": state.adapt_losses,
        },
        "tensors": entries,
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(FILE_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def _read_manifest(buf: bytes) -> tuple[dict, int]:
    if len(buf) < len(FILE_MAGIC) + 8 or buf[:len(FILE_MAGIC)] != FILE_MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<Q", buf, len(FILE_MAGIC))
    start = len(FILE_MAGIC) + 8
    if start + n > len(buf):
        raise CheckpointCorruptError("manifest is truncated")
    try:
        manifest = json.loads(buf[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    return manifest, start + n


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return _read_manifest(fh.read())[0]


def _read_tensors(buf: bytes, base: int, entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        pos = base + e["offset"]
        if pos + _HEADER.size > len(buf):
            raise CheckpointCorruptError(f"blob {e['name']} is truncated")
        magic, rank, d0, d1 = _HEADER.unpack_from(buf, pos)
        if magic != BLOB_MAGIC or rank > 2:
            raise CheckpointCorruptError(f"blob {e['name']} has a bad header")
        shape = tuple([d0, d1][:rank])
        if list(shape) != list(e["shape"]):
            raise CheckpointCorruptError(f"blob {e['name']} shape {shape} disagrees with manifest {e['shape']}")
        count = int(np.prod(shape)) if shape else 1
        data_pos = pos + _HEADER.size
        if data_pos + 8 * count > len(buf):
            raise CheckpointCorruptError(f"blob {e['name']} is truncated")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=data_pos).reshape(shape)
        out[e["name"]] = arr.astype(np.float64)
    return out


def load_checkpoint(path) -> tuple[ModelState, TrainConfig]:
    """Inverse of :func:`save_checkpoint` (bitwise on every tensor)."""
    buf = Path(path).read_bytes()
    manifest, base = _read_manifest(buf)
    cfg = TrainConfig.from_dict(manifest["config"])
    t = _read_tensors(buf, base, manifest["tensors"])
    bcfg = cfg.backbone_config()
    prefix = "backbone."
    backbone = Backbone.from_arrays(bcfg, {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)})
    head = Head(Tensor(t["head.W"], False, "head.W"), Tensor(t["head.b"], False, "head.b"))
    memories = []
    for spec in manifest["layers"]:
        layer = spec["layer"]
        K, Theta = t[f"memory.{layer}.K"], t[f"memory.{layer}.Theta"]
        if K.shape[1] != spec["columns"] or Theta.shape[1] != spec["columns"]:
            raise CheckpointCorruptError(
                f"layer {layer}: manifest lists {spec['columns']} columns, blobs hold "
                f"{K.shape[1]} keys and {Theta.shape[1]} values")
        memories.append(MemoryUnit(layer, spec["key_dim"], spec["value_dim"],
                                   Separation(spec["sep_kind"], spec["sep_beta"]),
                                   Tensor(K, False, f"K{layer}"), Theta))
    queries = []
    for spec in manifest["queries"]:
        g = QueryModule(spec["kind"], spec["layer"], spec["in_dim"], spec["out_dim"])
        g.weights = [Tensor(t[f"query.{g.layer}.{i}"], False, name) for i, name in enumerate(spec["weights"])]
        queries.append(g)
    subspaces = {}
    for spec in manifest["subspaces"]:
        n = spec["name"]
        subspaces[n] = GradientSubspace(spec["dim"], spec["eps"], n, basis=t[f"subspace.{n}.basis"],
                                        factor=t[f"subspace.{n}.factor"], pending=t[f"subspace.{n}.pending"])
    s = manifest["state"]
    rows = [[math.nan if v is None else v for v in row] for row in s["accuracy_rows"]]
    state = ModelState(backbone, head, memories, queries, subspaces,
                       tasks_adapted=s["tasks_adapted"], tasks_consolidated=s["tasks_consolidated"],
                       seen_classes=list(s["seen_classes"]), head_trained=s["head_trained"],
                       accuracy_rows=rows, events=[tuple(e) for e in s["events"]],
                       warnings=list(s["warnings"]), degenerate_total=s["degenerate_total"],
                       adapt_losses=s["adapt_losses"])
    return state, cfg


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def metrics_rows(report: EvalReport) -> list[list[str]]:
    """One row per (step, evaluated task)."""
    A = report.accuracy
    rows = []
    if report.setting == "dg":
        acc = float(A[0, 0])
        held = report.config.get("num_tasks", 0)
        return [["0", str(held), _fmt(acc), _fmt(acc), ""]]
    for i in range(A.shape[0]):
        avg = float(np.mean(A[i, :i + 1]))
        fg = forgetting(A[:i + 1, :i + 1]) if i >= 1 else None
        for j in range(i + 1):
            rows.append([str(i), str(j), _fmt(A[i, j]), _fmt(avg), _fmt(fg)])
    return rows


def metrics_csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(METRICS_COLUMNS)
    w.writerows(metrics_rows(report))
    return buf.getvalue()


def write_metrics_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv_text(report))


def write_report_json(path, report: EvalReport, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
