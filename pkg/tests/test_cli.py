import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import ia3_set, lora_set
from xlmerge import AdapterSet, Ia3Layer, read_checkpoint, write_checkpoint
from xlmerge.checkpoint import read_manifest
from xlmerge.cli import main


def payload(path) -> bytes:
    m = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(m.data_start)
        return fh.read()


@pytest.fixture
def triple(tmp_path, rng):
    paths = []
    for name in ("task", "tgt", "src"):
        p = tmp_path / f"{name}.amgx"
        write_checkpoint(lora_set(rng, language="fr" if name == "tgt" else "en"), p)
        paths.append(p)
    return paths


def merge_args(triple, out, *extra):
    task, tgt, src = triple
    return ["merge", "--task-src", str(task), "--ref-tgt", str(tgt), "--ref-src", str(src), "--out", str(out), *extra]


def test_t_zero_payload_matches_task(tmp_path, triple, capsys):
    out = tmp_path / "m.amgx"
    assert main(merge_args(triple, out, "--t", "0", "--filter", "*")) == 0
    assert payload(out) == payload(triple[0])
    line = capsys.readouterr().out.strip()
    assert "merged=4 copied=0" in line and "\n" not in line


def test_filter_merges_only_matching(tmp_path, triple):
    only_q, everything = tmp_path / "q.amgx", tmp_path / "all.amgx"
    assert main(merge_args(triple, only_q, "--t", "1", "--filter", "W^Q*")) == 0
    assert main(merge_args(triple, everything, "--t", "1", "--filter", "*")) == 0
    task, q, full = (read_checkpoint(p) for p in (triple[0], only_q, everything))
    for path in task.module_paths:
        expected = full if path.endswith("W^Q") else task
        assert q.layers[path] == expected.layers[path]


def test_default_filter_in_summary(tmp_path, triple, capsys):
    assert main(merge_args(triple, tmp_path / "m.amgx", "--t", "0.5", "--json")) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["merged"] == 2 and summary["copied"] == 2 and summary["rule"] == "lora_additive"


def test_missing_t_is_usage_error(tmp_path, triple):
    with pytest.raises(SystemExit) as exc:
        main(merge_args(triple, tmp_path / "m.amgx"))
    assert exc.value.code == 64


def test_bad_choice_is_usage_error(tmp_path, triple):
    with pytest.raises(SystemExit) as exc:
        main(merge_args(triple, tmp_path / "m.amgx", "--t", "1", "--lora-mode", "fused"))
    assert exc.value.code == 64


def test_validation_error_exit_1(tmp_path, triple, rng, capsys):
    bad = tmp_path / "bad.amgx"
    write_checkpoint(lora_set(rng, r=3), bad)
    assert main(merge_args([triple[0], bad, triple[2]], tmp_path / "m.amgx", "--t", "1")) == 1
    assert "rank mismatch" in capsys.readouterr().err
    assert not (tmp_path / "m.amgx").exists()


def test_rule_kind_mismatch_exit_1(tmp_path, triple):
    assert main(merge_args(triple, tmp_path / "m.amgx", "--t", "1", "--rule", "prefix_matmul")) == 1


def test_io_errors_exit_2(tmp_path, triple, capsys):
    missing = tmp_path / "nope.amgx"
    assert main(merge_args([missing, *triple[1:]], tmp_path / "m.amgx", "--t", "1")) == 2
    corrupt = tmp_path / "corrupt.amgx"
    corrupt.write_bytes(b"JUNKJUNKJUNKJUNK")
    assert main(["inspect", "--path", str(corrupt)]) == 2
    assert "[bad_magic]" in capsys.readouterr().err


def test_numeric_failure_exit_3(tmp_path, rng):
    paths = []
    for i, v in enumerate([[1.0, 2.0], [1.0, 1.0], [0.0, 1.0]]):
        p = tmp_path / f"{i}.amgx"
        write_checkpoint(AdapterSet("ia3", {"m": Ia3Layer(np.array(v))}), p)
        paths.append(p)
    assert main(merge_args(paths, tmp_path / "m.amgx", "--t", "1", "--eps", "0")) == 3


def test_clamp_warning_reaches_stderr(tmp_path, capsys):
    paths = []
    for i, v in enumerate([[1.0, 2.0], [1.0, 1.0], [0.0, 1.0]]):
        p = tmp_path / f"{i}.amgx"
        write_checkpoint(AdapterSet("ia3", {"m": Ia3Layer(np.array(v))}), p)
        paths.append(p)
    assert main(merge_args(paths, tmp_path / "m.amgx", "--t", "1")) == 0
    assert "warning:" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["factorwise", "composed"])
def test_merge_threads_bitwise(tmp_path, triple, mode):
    outs = []
    for threads in ("1", "8"):
        out = tmp_path / f"m{threads}.amgx"
        assert main(merge_args(triple, out, "--t", "0.8", "--filter", "*", "--lora-mode", mode, "--threads", threads)) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_diverge_equal_inputs(tmp_path, rng):
    lora, ia3 = tmp_path / "l.amgx", tmp_path / "i.amgx"
    write_checkpoint(lora_set(rng), lora)
    write_checkpoint(ia3_set(rng), ia3)
    assert main(["diverge", "--ref-tgt", str(lora), "--ref-src", str(lora), "--out", str(tmp_path / "dl.amgx")]) == 0
    assert main(["diverge", "--ref-tgt", str(ia3), "--ref-src", str(ia3), "--out", str(tmp_path / "di.amgx")]) == 0
    dl, di = read_checkpoint(tmp_path / "dl.amgx"), read_checkpoint(tmp_path / "di.amgx")
    assert all(not np.any(t) for layer in dl.layers.values() for t in layer.tensors().values())
    assert all(np.array_equal(layer.v, np.ones_like(layer.v)) for layer in di.layers.values())


def test_diverge_matches_subtraction(tmp_path, triple):
    out = tmp_path / "d.amgx"
    assert main(["diverge", "--ref-tgt", str(triple[1]), "--ref-src", str(triple[2]), "--out", str(out)]) == 0
    d, tgt, src = read_checkpoint(out), read_checkpoint(triple[1]), read_checkpoint(triple[2])
    for p in d.layers:
        assert np.array_equal(d.layers[p].B, tgt.layers[p].B - src.layers[p].B)
        assert np.array_equal(d.layers[p].A, tgt.layers[p].A - src.layers[p].A)


def test_inspect_outputs(triple, capsys):
    assert main(["inspect", "--path", str(triple[0])]) == 0
    text = capsys.readouterr().out
    assert "kind         lora" in text and "r=2" in text
    assert main(["inspect", "--path", str(triple[0]), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["module_count"] == 4
    assert main(["inspect", "--path", str(triple[0]), "--manifest"]) == 0
    assert json.loads(capsys.readouterr().out)["adapter_kind"] == "lora"


def test_sweep_with_score_file(tmp_path, triple, capsys):
    scores = tmp_path / "s.txt"
    scores.write_text("0 0.2\n0.5 0.7\n1 0.6\n")
    out = tmp_path / "best.amgx"
    args = merge_args(triple, out, "--score-file", str(scores), "--grid", "0,0.5,1", "--json")
    args[0] = "sweep"
    assert main(args) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["best_t"] == 0.5
    assert read_checkpoint(out).meta.notes["merge"]["t"] == 0.5


def test_sweep_command_scorer_and_failure(tmp_path, triple, capsys):
    script = tmp_path / "score.py"
    script.write_text("import sys\nt = float(sys.argv[1])\nprint(-abs(t - 0.7))\n")
    args = merge_args(triple, tmp_path / "o.amgx", "--scorer-cmd", f"{sys.executable} {script} {{t}}")
    args[0] = "sweep"
    assert main(args) == 0
    assert "best t = 0.7" in capsys.readouterr().out
    failing = merge_args(triple, tmp_path / "o.amgx", "--scorer-cmd", f"{sys.executable} -c 'raise SystemExit(2)'")
    failing[0] = "sweep"
    assert main(failing) == 1
    assert "t=0" in capsys.readouterr().err


def test_synth_requires_seed(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"d": 6, "k": 5, "r": 2, "n": 40}))
    assert main(["synth", "--spec", str(spec)]) == 64


def test_synth_runs_and_is_thread_invariant(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"d": 6, "k": 5, "r": 2, "n": 40, "sigma": 0.01}))
    reports = []
    for threads in ("1", "8"):
        out = tmp_path / f"r{threads}.json"
        assert main(["synth", "--spec", str(spec), "--seed", "3", "--threads", threads, "--out", str(out)]) == 0
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]
    assert json.loads(reports[0])["spec"]["seed"] == 3


def test_synth_bad_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seed": 1, "depth": 2}))
    assert main(["synth", "--spec", str(spec)]) == 1


def test_module_entrypoint(triple):
    proc = subprocess.run(
        [sys.executable, "-m", "xlmerge", "inspect", "--path", str(triple[0]), "--json"],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["kind"] == "lora"
