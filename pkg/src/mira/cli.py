"""Command-line entry point: ``mira {run,adapt,consolidate,eval,inspect,selftest,make-stream}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .harness import load_checkpoint, save_checkpoint, write_metrics_csv, write_report_json
from .pipeline import (TrainConfig, adapt_task, consolidate_task, evaluate, init_state, make_stream,
                       report_from_state, run_mira)
from .retrieval import modulated_forward
from .tasks import load_csv, save_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(args) -> TrainConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    if getattr(args, "setting", None):
        data["setting"] = args.setting
    env = os.environ.get("MIRA_SEED")
    if env is not None:
        try:
            data["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"MIRA_SEED must be an integer, got {env!r}") from exc
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return TrainConfig.from_dict(data)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = make_stream(cfg)

    def progress(kind, task, state):
        logging.getLogger("mira").info("%s task %d done", kind, task)

    state, report = run_mira(stream, cfg, on_step=progress)
    write_metrics_csv(out / "metrics.csv", report)
    write_report_json(out / "report.json", report)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.checkpoint:
        save_checkpoint(state, cfg, out / "final.ckpt")
    print(f"avg_acc={report.avg_acc!r} forgetting={report.forgetting!r}")
    return EXIT_OK


def _state_for(args):
    if getattr(args, "checkpoint", None):
        state, cfg = load_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args)
        state = init_state(cfg)
    return state, cfg


def cmd_adapt(args) -> int:
    state, cfg = _state_for(args)
    t = adapt_task(make_stream(cfg), state, cfg, args.task)
    save_checkpoint(state, cfg, args.out)
    print(f"adapted task {t}; memories hold {[m.count for m in state.memories]} adapters")
    return EXIT_OK


def cmd_consolidate(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    stream = make_stream(cfg)
    t = consolidate_task(stream, state, cfg, args.task)
    save_checkpoint(state, cfg, args.out)
    print(f"consolidated task {t}")
    if args.report_dir and state.accuracy_rows:
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        report = report_from_state(state, cfg)
        write_metrics_csv(d / "metrics.csv", report)
        write_report_json(d / "report.json", report)
    return EXIT_OK


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    datasets = load_csv(args.stream)
    per = {}
    correct = total = 0
    for ds in datasets:
        acc = evaluate(state, ds, cfg)
        per[str(ds.domain_id)] = acc
        correct += acc * len(ds)
        total += len(ds)
    _emit({"per_domain_accuracy": per, "accuracy": correct / total, "samples": total})
    return EXIT_OK


def _probe(cfg: TrainConfig, path, size: int) -> np.ndarray:
    if path:
        X = np.concatenate([d.features for d in load_csv(path)])
    else:
        stream = make_stream(cfg)
        X = np.concatenate([t.features for t in stream.tests])
    return X[:size]


def cmd_inspect(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    layers = []
    entropies = [None] * len(state.memories)
    if all(m.count for m in state.memories):
        X = _probe(cfg, args.probe, args.probe_size)
        with nx.no_grad():
            _, trace, _ = modulated_forward(state.backbone, X, state.memories, state.queries, state.head,
                                            keep_trace=True)
        for lt in trace.layers:
            w = np.clip(lt.weights.weights, 1e-300, None)
            # entropy is only meaningful for non-negative weights; affine weights may be signed
            ent = -np.sum(np.where(lt.weights.weights > 0, w * np.log(w), 0.0), axis=1)
            entropies[lt.weights.layer] = float(ent.mean())
    for m in state.memories:
        layers.append({
            "layer": m.layer,
            "memories": m.count,
            "key_dim": m.key_dim,
            "value_dim": m.value_dim,
            "key_norms": [float(v) for v in np.linalg.norm(m.K.data, axis=0)],
            "mean_weight_entropy": entropies[m.layer],
        })
    _emit({
        "setting": cfg.setting,
        "tasks_adapted": state.tasks_adapted,
        "tasks_consolidated": state.tasks_consolidated,
        "layers": layers,
        "subspace_ranks": {k: v.rank for k, v in sorted(state.subspaces.items())},
        "backbone_checksum": state.backbone.checksum(),
    })
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest
    return EXIT_OK if selftest.run() else EXIT_RUNTIME


def cmd_make_stream(args) -> int:
    cfg = _load_config(args)
    stream = make_stream(cfg)
    parts = stream.tests if args.split == "test" else [stream.train_data(t) for t in range(stream.num_tasks)]
    save_csv(args.out, parts)
    print(f"wrote {sum(len(p) for p in parts)} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mira", description="Associative-memory adapter retrieval on synthetic task streams.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="full pipeline; writes report.json and metrics.csv")
    r.add_argument("--setting", choices=["dg", "dil", "cil"], required=True)
    r.add_argument("--config", help="JSON file with TrainConfig fields")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--checkpoint", action="store_true", help="also save final.ckpt")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("adapt", help="run the adaptation stage of the next task")
    a.add_argument("--config")
    a.add_argument("--setting", choices=["dg", "dil", "cil"])
    a.add_argument("--seed", type=int)
    a.add_argument("--checkpoint", help="resume from this checkpoint instead of a fresh state")
    a.add_argument("--task", type=int)
    a.add_argument("--out", required=True, help="checkpoint to write")
    a.set_defaults(fn=cmd_adapt)

    c = sub.add_parser("consolidate", help="run the consolidation stage of the next task")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--task", type=int)
    c.add_argument("--out", required=True, help="checkpoint to write")
    c.add_argument("--report-dir", help="write report.json and metrics.csv here")
    c.set_defaults(fn=cmd_consolidate)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a stream CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--stream", required=True)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="memory sizes, key norms and retrieval entropy")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--probe", help="stream CSV used as probe set (default: the config's test splits)")
    i.add_argument("--probe-size", type=int, default=256)
    i.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(fn=cmd_selftest)

    m = sub.add_parser("make-stream", help="export the configured synthetic stream as CSV")
    m.add_argument("--config")
    m.add_argument("--setting", choices=["dg", "dil", "cil"])
    m.add_argument("--seed", type=int)
    m.add_argument("--split", choices=["train", "test"], default="test")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_make_stream)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("mira: a subcommand is required (see --help)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"mira {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
