import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cinet import viz
from cinet.autograd import ops
from cinet.cli import main
from cinet.metrics import FIELDS


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_data_dir, tiny_config_file):
    out = tmp_path_factory.mktemp("train") / "run"
    assert main(["train", "--config", str(tiny_config_file), "--data", str(tiny_data_dir), "--out", str(out)]) == 0
    return out


# -- gen-data ------------------------------------------------------------------------

def test_gen_data_layout_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--seed", 5, "--count", 8, "--size", 32, "--out", tmp_path / name)
        assert code == 0 and json.loads(out)["schema"] == 1
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len([f for f in files if f.endswith(".tns")]) == 24 and "manifest.json" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_bad_size_writes_nothing(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--count", 2, "--size", 60, "--out", tmp_path / "d")
    assert code != 0 and error_of(err)["error"] == "invalid_argument"
    assert list(tmp_path.iterdir()) == []


def test_gen_data_refuses_non_empty_output_unless_overwrite(tmp_path, capsys):
    target = tmp_path / "d"
    target.mkdir()
    (target / "keep.txt").write_text("x")
    code, _, err = run(capsys, "gen-data", "--count", 1, "--size", 16, "--out", target)
    assert code != 0 and error_of(err)["error"] == "output_exists" and (target / "keep.txt").exists()
    code, _, _ = run(capsys, "gen-data", "--count", 1, "--size", 16, "--out", target, "--overwrite")
    assert code == 0 and not (target / "keep.txt").exists() and (target / "manifest.json").exists()


# -- train -------------------------------------------------------------------------

def test_train_outputs(trained):
    metrics = json.loads((trained / "metrics.json").read_text())
    assert metrics["schema"] == 1 and set(FIELDS) <= set(metrics["metrics"])
    assert len(metrics["stages"]) == 3
    for k in (1, 2, 3):
        assert (trained / f"stage{k}" / "manifest.json").exists()
    assert len((trained / "train_log.jsonl").read_text().splitlines()) == 6


def test_train_missing_field_names_it(tmp_path, capsys, tiny_config_file, tiny_data_dir):
    d = json.loads(tiny_config_file.read_text())
    del d["weight_decay"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    code, _, err = run(capsys, "train", "--config", bad, "--data", tiny_data_dir, "--out", tmp_path / "o")
    assert code != 0 and "weight_decay" in error_of(err)["message"]
    assert not (tmp_path / "o").exists()


def test_train_routes_lsu_block(tmp_path, capsys, tiny_config_file, tiny_data_dir):
    d = json.loads(tiny_config_file.read_text())
    d["block"] = "lsu"
    cfg = tmp_path / "lsu.json"
    cfg.write_text(json.dumps(d))
    code, _, _ = run(capsys, "train", "--config", cfg, "--data", tiny_data_dir, "--out", tmp_path / "o")
    assert code == 0
    names = json.loads((tmp_path / "o" / "stage3" / "manifest.json").read_text())["parameters"]
    assert any(".fd1." in n for n in names) and not any(".trunk." in n for n in names)


def test_train_rejects_class_count_mismatch(tmp_path, capsys, tiny_config_file, tiny_data_dir):
    d = json.loads(tiny_config_file.read_text())
    d["model"]["n_classes"] = 7
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(d))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", tiny_data_dir, "--out", tmp_path / "o")
    assert code != 0 and error_of(err)["error"] == "bad_config"


# -- eval ---------------------------------------------------------------------------

def test_eval_is_repeatable_and_writes_images(trained, tiny_data_dir, tmp_path, capsys):
    for name in ("e1", "e2"):
        code, _, _ = run(capsys, "eval", "--checkpoint", trained / "stage3", "--data", tiny_data_dir,
                         "--out", tmp_path / name, "--images")
        assert code == 0
    a, b = ((tmp_path / n / "metrics.json").read_bytes() for n in ("e1", "e2"))
    assert a == b and json.loads(a)["schema"] == 1
    depth = viz.read_pnm(tmp_path / "e1" / "0000.depth.pgm")
    labels = viz.read_pnm(tmp_path / "e1" / "0000.label.ppm")
    assert depth.shape == (16, 16) and labels.shape == (16, 16, 3)


def test_eval_bad_checkpoint_leaves_no_output(tmp_path, tiny_data_dir, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "missing", "--data", tiny_data_dir,
                       "--out", tmp_path / "e")
    assert code != 0 and error_of(err)["error"] == "bad_checkpoint"
    assert list(tmp_path.iterdir()) == []


# -- grad-check ------------------------------------------------------------------------

def test_grad_check_ops_passes(capsys, tmp_path):
    code, out, _ = run(capsys, "grad-check", "--scope", "ops", "--out", tmp_path / "g")
    assert code == 0
    assert any(line.split()[1] == "sigmoid" and line.endswith("ok") for line in out.splitlines()[:-1])
    assert json.loads((tmp_path / "g" / "grad_check.json").read_text())["scopes"]["ops"]["worst"] <= 1e-4


def test_grad_check_reports_injected_sigmoid_bug(capsys, monkeypatch):
    monkeypatch.setattr(ops, "_sigmoid_grad", lambda out, g: g * out)
    code, out, err = run(capsys, "grad-check", "--scope", "ops")
    assert code != 0
    failing = {line.split()[1] for line in out.splitlines() if line.endswith("FAIL")}
    assert "sigmoid" in failing and "relu" not in failing
    assert "ops:sigmoid" in error_of(err)["message"]


# -- viz-attention --------------------------------------------------------------------------

def test_viz_attention_writes_three_panels(trained, tiny_data_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "viz-attention", "--checkpoint", trained / "stage3", "--unsupervised",
                       trained / "stage3", "--data", tiny_data_dir, "--pixel", "1,0", "--pixel", "0,1",
                       "--with-features", "--out", tmp_path / "v")
    assert code == 0
    v = tmp_path / "v"
    for name in ("ideal", "supervised", "unsupervised"):
        for pix in ("r1_c0", "r0_c1"):
            assert viz.read_pnm(v / f"{name}_{pix}.pgm").shape == (2, 2)
    assert set(np.unique(viz.read_pnm(v / "ideal_r1_c0.pgm"))) <= {0, 255}
    assert (v / "alloc_fsm_stage0_depth.pgm").exists()
    assert 0 <= json.loads(out)["agreement"]["supervised"] <= 1


def test_viz_attention_pixel_out_of_bounds(trained, tiny_data_dir, tmp_path, capsys):
    code, _, err = run(capsys, "viz-attention", "--checkpoint", trained / "stage3", "--data", tiny_data_dir,
                       "--pixel", "2,0", "--out", tmp_path / "v")
    assert code != 0 and error_of(err)["error"] == "invalid_argument"
    assert not (tmp_path / "v").exists()


# -- ablate ----------------------------------------------------------------------------------

def test_ablate_grid(tiny_config_file, tiny_data_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "ablate", "--config", tiny_config_file, "--data", tiny_data_dir,
                     "--out", tmp_path / "a", "--with-lsu")
    assert code == 0
    with open(tmp_path / "a" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["baseline", "+SUM", "+FSM", "+SUM+FSM", "+SUM+FSM+L_con"]
    assert (rows[0]["sum"], rows[0]["block"], rows[0]["consistency"]) == ("0", "none", "0")
    assert all(r["schema"] == "1" and all(r[f] for f in FIELDS) for r in rows)
    with open(tmp_path / "a" / "fsm_vs_lsu.csv") as fh:
        lsu = list(csv.DictReader(fh))
    assert [r["row"] for r in lsu] == ["baseline", "baseline+LSU", "baseline+FSM"]
    assert lsu[0][FIELDS[0]] == rows[0][FIELDS[0]] and lsu[2]["mIoU"] == rows[2]["mIoU"]


# -- entry point ---------------------------------------------------------------------------------

def test_console_entry_point_reports_usage_errors(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cinet.cli", "eval", "--checkpoint", str(tmp_path / "x"),
                           "--data", str(tmp_path), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode != 0
    assert json.loads(proc.stderr.strip())["schema"] == 1
