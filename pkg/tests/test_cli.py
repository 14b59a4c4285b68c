"""Command-line surface: exit codes, emitted files, determinism."""

import json
import os

import numpy as np
import pytest

from minml import cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def read_jsonl(text):
    return [json.loads(line) for line in text.strip().splitlines() if line]


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--epochs", "not_a_number"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_config_validation_exits_2(capsys, tmp_path):
    out = str(tmp_path)
    code, _, err = run_cli(capsys, "train", "--synthetic", "--epochs", "-1", "--out", out)
    assert code == 2 and "error:" in err
    code, _, err = run_cli(capsys, "train", "--out", out)   # neither data source
    assert code == 2
    code, _, err = run_cli(capsys, "train", "--synthetic", "--data-dir", "x", "--out", out)
    assert code == 2
    code, _, err = run_cli(capsys, "train", "--synthetic", "--alloc", "split:banana",
                           "--out", out)
    assert code == 2
    code, _, err = run_cli(capsys, "train", "--synthetic", "--graph-dot",
                           str(tmp_path / "g.dot"), "--out", out)
    assert code == 2 and "deferred" in err


def test_missing_data_dir_exits_3(capsys, tmp_path):
    code, _, err = run_cli(capsys, "train", "--data-dir", str(tmp_path / "nope"),
                           "--epochs", "0", "--out", str(tmp_path))
    assert code == 3


def test_missing_trace_file_exits_3(capsys, tmp_path):
    code, _, err = run_cli(capsys, "memsim", "--trace", str(tmp_path / "gone.trace"),
                           "--out", str(tmp_path))
    assert code == 3


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for token in ("exit codes", "0", "2", "3", "4", "5"):
        assert token in out


def test_train_epoch_zero_writes_initial_checkpoint(capsys, tmp_path):
    out = str(tmp_path / "run")
    code, stdout, _ = run_cli(capsys, "train", "--synthetic", "--epochs", "0",
                              "--seed", "3", "--out", out)
    assert code == 0
    assert os.path.exists(os.path.join(out, "model.flck"))
    assert read_jsonl(stdout) == []


def test_train_synthetic_writes_metrics_and_artifacts(capsys, tmp_path):
    out = str(tmp_path / "run")
    code, stdout, _ = run_cli(capsys, "train", "--synthetic", "--epochs", "1",
                              "--batch", "64", "--seed", "0", "--out", out)
    assert code == 0
    rows = read_jsonl(stdout)
    assert len(rows) == 1
    assert {"epoch", "train_loss", "test_accuracy", "wall_seconds"} <= set(rows[0])
    for name in ("metrics.jsonl", "model.flck", "training.png"):
        assert os.path.exists(os.path.join(out, name)), name
    on_disk = read_jsonl(open(os.path.join(out, "metrics.jsonl")).read())
    assert on_disk == rows


def strip_wall(rows):
    return [{k: v for k, v in row.items() if k != "wall_seconds"} for row in rows]


def test_train_seed_reproducible(capsys, tmp_path):
    args = ("train", "--synthetic", "--epochs", "1", "--batch", "64", "--seed", "11")
    _, out_a, _ = run_cli(capsys, *args, "--out", str(tmp_path / "a"))
    _, out_b, _ = run_cli(capsys, *args, "--out", str(tmp_path / "b"))
    assert strip_wall(read_jsonl(out_a)) == strip_wall(read_jsonl(out_b))


def test_train_graph_dot_on_deferred(capsys, tmp_path):
    dot = tmp_path / "loss.dot"
    code, _, _ = run_cli(capsys, "train", "--synthetic", "--epochs", "1",
                         "--batch", "64", "--backend", "deferred",
                         "--graph-dot", str(dot), "--out", str(tmp_path))
    assert code == 0
    text = dot.read_text()
    assert text.startswith("digraph") and "conv2d" in text and "matmul" in text


def test_train_mem_telemetry(capsys, tmp_path):
    code, stdout, _ = run_cli(capsys, "train", "--synthetic", "--epochs", "0",
                              "--alloc", "caching", "--mem-telemetry",
                              "--out", str(tmp_path))
    assert code == 0
    rows = read_jsonl(stdout)
    assert any("allocator" in row for row in rows)
    telem = next(row for row in rows if "allocator" in row)
    assert "peak_granted" in telem["allocator"]


def test_bench_table_and_report(capsys, tmp_path):
    out = str(tmp_path / "bench")
    code, stdout, _ = run_cli(capsys, "bench", "--model", "mlp", "--iters", "3",
                              "--warmup", "1", "--batch", "8", "--backend", "both",
                              "--out", out)
    assert code == 0
    lines = stdout.strip().splitlines()
    header = lines[0].split("\t")
    assert header == ["backend", "total_s", "data_s", "forward_s",
                      "backward_s", "step_s", "final_loss"]
    assert {row.split("\t")[0] for row in lines[1:3]} == {"eager", "deferred"}
    assert any("max loss gap" in l for l in lines)
    report = json.load(open(os.path.join(out, "bench.json")))
    assert len(report["runs"]) == 2
    assert report["max_loss_gap"] <= 1e-5
    assert os.path.exists(os.path.join(out, "bench.png"))


def test_memsim_bundled_relative_table(capsys, tmp_path):
    out = str(tmp_path / "m")
    code, stdout, _ = run_cli(capsys, "memsim",
                              "--policies", "caching,split:1048576,native",
                              "--out", out)
    assert code == 0
    lines = stdout.strip().splitlines()
    jsonl = [json.loads(l) for l in lines if l.startswith("{")]
    assert [row["policy"] for row in jsonl] == ["caching", "split:1048576", "native"]
    assert jsonl[2]["peak_internal_fragmentation"] == 0
    table = [l for l in lines if not l.startswith("{")]
    assert table[0].split("\t") == ["policy", "peak_internal_frag", "vs_caching"]
    assert "baseline" in table[1]
    assert os.path.exists(os.path.join(out, "memsim.json"))
    assert os.path.exists(os.path.join(out, "memsim.png"))


def test_memsim_bad_policy_exits_2(capsys, tmp_path):
    code, _, err = run_cli(capsys, "memsim", "--policies", "arena",
                           "--out", str(tmp_path))
    assert code == 2


def test_memsim_record_from_train_writes_trace(capsys, tmp_path):
    out = str(tmp_path / "rec")
    code, stdout, _ = run_cli(capsys, "memsim", "--record-from-train",
                              "--policies", "caching,split", "--out", out)
    assert code == 0
    trace = os.path.join(out, "recorded.trace")
    assert os.path.exists(trace)
    first = open(trace).readline().split()
    assert first[0] == "A" and first[2].isdigit()
    rows = [json.loads(l) for l in stdout.splitlines() if l.startswith("{")]
    caching = next(r for r in rows if r["policy"] == "caching")
    split = next(r for r in rows if r["policy"] == "split")
    assert split["peak_internal_fragmentation"] < caching["peak_internal_fragmentation"]
