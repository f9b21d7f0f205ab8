import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from pdecnn.cli import format_table, main

CONFIG = """\
data: {kind: synth, synth_kind: blobs, n: 120, size: 8}
dynamics: {family: hamiltonian, widths: [4, 8], steps: 2}
train: {stages: [[2, 0.1], [1, 0.02]], batch_size: 20}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(CONFIG)
    return str(p)


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_twice_identical(tmp_path, cfg, capsys):
    for run in ("a", "b"):
        assert main(["train", "--config", cfg, "--seed", "7", "--out", str(tmp_path / run)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    assert (a / "checkpoint.ckpt").read_bytes() == (b / "checkpoint.ckpt").read_bytes()
    assert len(_read(a / "history.csv")) == 3


def test_train_resume(tmp_path, cfg):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--config", cfg, "--out", str(full)]) == 0
    assert main(["train", "--config", cfg, "--out", str(part), "--stop-after", "1"]) == 0
    assert main(["train", "--config", cfg, "--out", str(part), "--resume"]) == 0
    assert (full / "history.csv").read_bytes() == (part / "history.csv").read_bytes()
    assert (full / "checkpoint.ckpt").read_bytes() == (part / "checkpoint.ckpt").read_bytes()


def test_eval_and_analyze_from_checkpoint(tmp_path, cfg, capsys):
    out = tmp_path / "o"
    main(["train", "--config", cfg, "--out", str(out)])
    ck = str(out / "checkpoint.ckpt")
    assert main(["eval", "--config", cfg, "--checkpoint", ck, "--out", str(out)]) == 0
    ev = _read(out / "eval.csv")[0]
    assert ev["split"] == "test" and 0 <= float(ev["accuracy"]) <= 1
    for mode in ("stability", "spectrum", "confusion"):
        assert main(["analyze", "--mode", mode, "--config", cfg, "--checkpoint", ck, "--trials", "3",
                     "--out", str(out)]) == 0
    assert len(_read(out / "stability.csv")) == 3


def test_derive_pde_laplacian(capsys, tmp_path):
    assert main(["derive-pde", "--stencil", "-1,2,-1", "--h", "1", "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "pde.csv")
    assert [round(float(r["value"]), 12) for r in rows] == [0, 0, 1]
    assert rows[2]["operator"] == "diffusion"
    assert main(["derive-pde", "--stencil", "0,0,0,0,1,0,0,0,0"]) == 0


def test_zero_weight_stability_all_ones(tmp_path, cfg):
    assert main(["analyze", "--mode", "stability", "--config", cfg, "--init", "zero", "--trials", "5",
                 "--out", str(tmp_path)]) == 0
    ratios = [float(r["ratio"]) for r in _read(tmp_path / "stability.csv")]
    assert len(ratios) == 5 and np.allclose(ratios, 1.0, rtol=0, atol=1e-12)


def test_energy_and_check_grad(tmp_path, cfg, capsys):
    assert main(["analyze", "--mode", "energy", "--config", cfg, "--steps", "8", "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "energy.csv")
    assert len(rows) == 8 and all(float(r["energy"]) <= float(r["energy_lin"]) for r in rows)
    assert main(["check-grad", "--config", cfg, "--strategy", "reversible", "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "check_grad.csv")
    assert rows[0]["group"] == "all" and float(rows[0]["rel_error"]) <= 1e-6


def test_weights_verb(tmp_path):
    assert main(["weights", "--out", str(tmp_path)]) == 0
    counts = {(r["dataset"], r["family"]): int(r["weights"]) for r in _read(tmp_path / "weights.csv")}
    assert counts[("STL-10", "parabolic")] == 618554 and counts[("CIFAR-100", "hamiltonian")] == 362180


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 2
    assert main(["analyze", "--mode", "nope"]) == 2
    assert main(["derive-pde", "--stencil", "1,2"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("dynamics: {family: elliptic}\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "pdecnn", "derive-pde", "--stencil", "-1,2,-1"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "diffusion" in r.stdout


def test_format_table_aligns():
    text = format_table([{"a": 1, "bb": 0.5}, {"a": 100, "bb": 2.0}])
    lines = text.splitlines()
    assert len({len(l) for l in lines}) == 1
