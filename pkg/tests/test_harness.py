import csv
import io
import json
import struct

import numpy as np
import pytest

from mira.errors import ContractError
from mira.harness import (CheckpointCorruptError, CheckpointVersionError, FILE_MAGIC, load_checkpoint,
                          metrics_csv_text, read_manifest, save_checkpoint, write_metrics_csv, write_report_json)
from mira.harness import _tensors
from mira.metrics import EvalReport, avg_accuracy, forgetting, step_avg_accuracy
from mira.pipeline import (TrainConfig, adapt_task, consolidate_task, evaluate, init_state, make_stream,
                           run_mira)

import oracles

NAN = float("nan")
TINY = dict(num_tasks=3, samples_per_class=20, model_dim=8, num_heads=2, num_classes=4, input_dim=8,
            adapt_epochs=2, consolidate_epochs=1, lora_rank=2, batch_size=16)


# ---- metrics ----------------------------------------------------------------


def test_avg_accuracy_examples():
    assert avg_accuracy([[0.9]]) == 0.9
    assert avg_accuracy([[0.5, NAN], [0.8, 0.6]]) == pytest.approx(0.7)


def test_avg_accuracy_matches_loop_oracle():
    A = np.random.default_rng(0).uniform(size=(3, 3))
    assert avg_accuracy(A) == pytest.approx(oracles.avg_accuracy_loop(A.tolist()), abs=1e-15)


def test_forgetting_examples():
    assert forgetting([[0.9, NAN], [0.7, 0.8]]) == pytest.approx(0.2, abs=1e-15)
    assert forgetting(np.full((4, 4), 0.6)) == 0.0
    assert forgetting([[0.5, NAN], [0.7, 0.8]]) < 0


def test_forgetting_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for T in range(2, 7):
        A = np.tril(rng.uniform(size=(T, T)))
        A[np.triu_indices(T, 1)] = NAN
        assert forgetting(A) == pytest.approx(oracles.forgetting_loop(A.tolist()), abs=1e-15)


def test_metric_contracts():
    with pytest.raises(ContractError):
        forgetting([[0.9]])
    with pytest.raises(ContractError):
        avg_accuracy([[0.9, NAN], [0.7, NAN]])
    with pytest.raises(ContractError):
        avg_accuracy(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        forgetting([[NAN, NAN], [0.7, 0.8]])


def test_step_average():
    assert step_avg_accuracy([[1.0, NAN], [0.5, 0.7]]) == pytest.approx((1.0 + 0.6) / 2)


def test_report_dict_replaces_nan():
    rep = EvalReport.from_matrix("dil", 0, [[0.9, NAN], [0.7, 0.8]])
    d = rep.to_dict()
    assert d["accuracy_matrix"] == [[0.9, None], [0.7, 0.8]]
    assert d["final_avg_acc"] == pytest.approx(0.75) and d["forgetting"] == pytest.approx(0.2)
    json.dumps(d)


def test_metrics_csv_parses_as_rfc4180():
    rep = EvalReport.from_matrix("dil", 0, [[0.9, NAN, NAN], [0.7, 0.8, NAN], [0.6, 0.75, 1.0]])
    text = metrics_csv_text(rep)
    assert text.endswith("\r\n") and "\n" not in text.replace("\r\n", "")
    rows = list(csv.DictReader(io.StringIO(text, newline=""), strict=True))
    assert list(rows[0]) == ["step", "task", "acc", "avg_acc", "forgetting"]
    assert [(r["step"], r["task"]) for r in rows] == [("0", "0"), ("1", "0"), ("1", "1"),
                                                     ("2", "0"), ("2", "1"), ("2", "2")]
    assert rows[0]["forgetting"] == ""
    assert float(rows[2]["forgetting"]) == pytest.approx(0.2)
    last = rows[-1]
    assert float(last["avg_acc"]) == pytest.approx(rep.avg_acc)
    assert float(last["forgetting"]) == pytest.approx(rep.forgetting)


def test_metrics_csv_single_row_for_dg(tmp_path):
    rep = EvalReport.from_matrix("dg", 0, [[0.55]], config={"num_tasks": 3})
    write_metrics_csv(tmp_path / "m.csv", rep)
    rows = list(csv.reader(open(tmp_path / "m.csv", newline="")))
    assert rows == [["step", "task", "acc", "avg_acc", "forgetting"], ["0", "3", "0.55", "0.55", ""]]


def test_report_json_extra_fields(tmp_path):
    rep = EvalReport.from_matrix("dil", 2, [[0.5]])
    write_report_json(tmp_path / "r.json", rep, {"runtime_s": 1.5})
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["seed"] == 2 and d["runtime_s"] == 1.5 and d["forgetting"] is None


# ---- checkpoints ------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(**TINY, query_kind="mlp3", key_dim=6, adapters_per_task=2)
    stream = make_stream(cfg)
    state = init_state(cfg)
    adapt_task(stream, state, cfg)
    consolidate_task(stream, state, cfg)
    adapt_task(stream, state, cfg)
    return state, cfg


def test_round_trip_is_bitwise(trained, tmp_path):
    state, cfg = trained
    p = tmp_path / "s.ckpt"
    save_checkpoint(state, cfg, p)
    back, cfg2 = load_checkpoint(p)
    assert cfg2 == cfg
    a, b = _tensors(state), _tensors(back)
    assert [n for n, _ in a] == [n for n, _ in b]
    for (name, x), (_, y) in zip(a, b):
        assert x.tobytes() == y.tobytes(), name
    assert back.events == state.events and back.seen_classes == state.seen_classes
    assert back.tasks_adapted == 2 and back.tasks_consolidated == 1
    assert back.backbone.checksum() == state.backbone.checksum()
    np.testing.assert_array_equal(np.asarray(back.accuracy_rows), np.asarray(state.accuracy_rows))


def test_save_is_deterministic(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "a")
    save_checkpoint(state, cfg, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_loaded_state_predicts_identically(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "s")
    back, _ = load_checkpoint(tmp_path / "s")
    test = make_stream(cfg).tests[0]
    assert evaluate(back, test, cfg) == evaluate(state, test, cfg)


def _rewrite_manifest(src, dst, edit):
    buf = src.read_bytes()
    (n,) = struct.unpack_from("<Q", buf, 8)
    man = json.loads(buf[16:16 + n])
    edit(man)
    raw = json.dumps(man, sort_keys=True).encode()
    dst.write_bytes(FILE_MAGIC + struct.pack("<Q", len(raw)) + raw + buf[16 + n:])


def test_column_count_mismatch_is_corruption(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "s")

    def edit(m):
        m["layers"][0]["columns"] += 1
    _rewrite_manifest(tmp_path / "s", tmp_path / "bad", edit)
    with pytest.raises(CheckpointCorruptError, match="columns"):
        load_checkpoint(tmp_path / "bad")


def test_shape_mismatch_is_corruption(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "s")

    def edit(m):
        m["tensors"][0]["shape"] = [1, 1]
    _rewrite_manifest(tmp_path / "s", tmp_path / "bad", edit)
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "bad")


def test_version_mismatch_names_both_versions(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "s")

    def edit(m):
        m["format_version"] = 99
    _rewrite_manifest(tmp_path / "s", tmp_path / "v", edit)
    with pytest.raises(CheckpointVersionError, match="99.*1"):
        load_checkpoint(tmp_path / "v")


def test_truncation_and_garbage_are_corruption(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "s")
    buf = (tmp_path / "s").read_bytes()
    (tmp_path / "t").write_bytes(buf[:-10])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "t")
    (tmp_path / "g").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "g")
    (tmp_path / "h").write_bytes(buf[:30])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "h")


def test_manifest_is_readable_on_its_own(trained, tmp_path):
    state, cfg = trained
    save_checkpoint(state, cfg, tmp_path / "s")
    m = read_manifest(tmp_path / "s")
    assert [lay["columns"] for lay in m["layers"]] == [4, 4]
    assert m["config"]["query_kind"] == "mlp3"


@pytest.mark.parametrize("setting", ["dil", "cil", "dg"])
def test_resume_from_adapt_checkpoint_matches_uninterrupted(setting, tmp_path):
    cfg = TrainConfig(**{**TINY, "setting": setting, "num_tasks": 2})
    _, full = run_mira(make_stream(cfg), cfg)
    stream, state = make_stream(cfg), init_state(cfg)
    adapt_task(stream, state, cfg)
    save_checkpoint(state, cfg, tmp_path / "a.ckpt")
    back, cfg2 = load_checkpoint(tmp_path / "a.ckpt")
    # the original process is gone; a fresh stream object continues from the checkpoint
    _, resumed = run_mira(make_stream(cfg2), cfg2, state=back)
    assert metrics_csv_text(resumed) == metrics_csv_text(full)
    assert resumed.to_dict() == full.to_dict()
