import json

import pytest

from statprune.cli import main
from statprune.formats import load_calib, load_model


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rc = main(["gen", "--n", "16", "--layers", "2", "--heads", "4", "--f", "32", "--m", "16", "--b", "8",
               "--seed", "3", "--classes", "2", "--out", str(d / "toy")])
    assert rc == 0
    return d


def test_gen_outputs(gen_dir):
    m = load_model(gen_dir / "toy.stm")
    c = load_calib(gen_dir / "toy.stc")
    assert m.n == 16 and c.m == 16 and c.b == 8
    assert load_calib(gen_dir / "toy.holdout.stc").m == 16


def test_prune_and_eval(gen_dir):
    d = gen_dir
    rc = main(["prune", "--model", str(d / "toy.stm"), "--calib", str(d / "toy.stc"), "--flops-ratio", "0.6",
               "--mode", "refine-ls", "--error", "rel", "--weighting", "llama", "--sketch", "countsketch",
               "--sketch-threshold", "0", "--out", str(d / "p.stm"), "--report", str(d / "r.json")])
    assert rc == 0
    rep = json.loads((d / "r.json").read_text())
    assert rep["plan"]["achieved_ratio"] <= 0.6 and rep["error_mode"] == "relative"
    assert main(["eval", "--a", str(d / "p.stm"), "--b", str(d / "toy.stm"), "--data", str(d / "toy.stc"),
                 "--report", str(d / "e.json")]) == 0
    ev = json.loads((d / "e.json").read_text())
    assert ev["relative_error"] == pytest.approx(rep["metrics"]["calibration"]["relative_error"])


def test_allocate_dry_run(gen_dir, capsys):
    d = gen_dir
    rc = main(["allocate", "--dry-run", "--model", str(d / "toy.stm"), "--calib", str(d / "toy.stc"),
               "--flops-ratio", "0.5"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["plan"]["achieved_ratio"] <= 0.5 and out["weighting"] == "bert"


def test_exit_codes(gen_dir, tmp_path):
    d = gen_dir
    base = ["prune", "--model", str(d / "toy.stm"), "--calib", str(d / "toy.stc"), "--out", str(tmp_path / "x.stm")]
    assert main(base + ["--flops-ratio", "0.01"]) == 2
    assert main(base + ["--flops-ratio", "1.5"]) == 1
    assert main(["eval", "--a", str(d / "nope.stm"), "--b", str(d / "toy.stm"), "--data", str(d / "toy.stc")]) == 1
    (tmp_path / "bad.stc").write_bytes(b"STM1" + bytes(8))
    assert main(["eval", "--a", str(d / "toy.stm"), "--b", str(d / "toy.stm"), "--data", str(tmp_path / "bad.stc")]) == 1
    with pytest.raises(SystemExit) as ei:
        main(["prune", "--model", "x"])
    assert ei.value.code == 1
