import json
import subprocess
import sys

import pytest

from pfnet import load_dataset
from pfnet.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--case", "case14", "--count", "60", "--seed", "3",
                 "--out", str(d / "d.pfds"), "--splits", "0.5,0.2,0.3"]) == 0
    assert main(["train", "--data", str(d / "d.pfds"), "--model", "small", "--loss", "mse",
                 "--epochs", "3", "--seed", "1", "--out", str(d / "m.npz"),
                 "--metrics", str(d / "m.csv")]) == 0
    return d


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out)


def test_solve_nr(capsys):
    code, rep = run_json(capsys, ["solve", "--case", "case14", "--method", "nr", "--tol", "1e-10"])
    assert code == 0 and rep["converged"] and rep["max_mismatch"] < 1e-10
    assert len(rep["vm_pu"]) == 14 and rep["va_deg"][0] == 0.0


def test_solve_dc(capsys):
    code, rep = run_json(capsys, ["solve", "--case", "case118", "--method", "dc"])
    assert code == 0 and rep["method"] == "dc" and set(rep["q_mvar"]) == {0.0}


def test_generate_output(workdir):
    ds = load_dataset(workdir / "d.pfds")
    assert len(ds) == 60 and ds.splits["test"] == (42, 60)


def test_train_outputs(workdir):
    lines = (workdir / "m.csv").read_text().splitlines()
    assert lines[0].startswith("# pfnet-metrics") and len(lines) == 5
    assert (workdir / "m.npz").exists()


def test_eval(workdir, capsys):
    code, rep = run_json(capsys, ["eval", "--ckpt", str(workdir / "m.npz"), "--data", str(workdir / "d.pfds"),
                                  "--split", "test"])
    assert code == 0 and rep["n_samples"] == 18
    assert set(rep) >= {"masked_l2", "mse", "physical", "denorm_errors", "wall_time_per_sample"}


def test_eval_dcpf_to_file(workdir, capsys):
    out = workdir / "dc.json"
    assert main(["eval", "--baseline", "dcpf", "--data", str(workdir / "d.pfds"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["masked_l2"] > 1


def test_bench(workdir, capsys):
    out = workdir / "t.csv"
    assert main(["bench", "--case", "case14", "--case", "case118", "--ckpt", str(workdir / "m.npz"),
                 "--repeats", "3", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# pfnet-timing/1" and len(lines) == 2 + 6


def test_hop_study(workdir, capsys):
    code, rep = run_json(capsys, ["hop-study", "--ckpt", str(workdir / "m.npz"), "--data",
                                  str(workdir / "d.pfds"), "--k-max", "3", "--max-samples", "5"])
    assert code == 0 and rep["ks"] == [1, 2, 3]


def test_ablation_and_scale(workdir, capsys):
    out = workdir / "abl.csv"
    assert main(["ablation", "--data", str(workdir / "d.pfds"), "--variants", "full,no_mp", "--seeds", "0",
                 "--epochs", "1", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2 + 2
    summary = json.loads(capsys.readouterr().out)
    assert {r["variant"] for r in summary} == {"full", "no_mp"}
    out = workdir / "scale.csv"
    assert main(["scale-study", "--data", str(workdir / "d.pfds"), "--sizes", "small", "--losses", "mse",
                 "--epochs", "1", "--out", str(out)]) == 0
    assert "reference_params" in out.read_text().splitlines()[1]


def test_error_json_on_stderr(workdir, capsys):
    code = main(["eval", "--ckpt", str(workdir / "missing.npz"), "--data", str(workdir / "d.pfds")])
    err = json.loads(capsys.readouterr().err)
    assert code == 1 and err["error"] == "FileNotFoundError" and err["command"] == "eval"


def test_topology_mismatch_is_an_error(workdir, capsys):
    assert main(["generate", "--case", "case118", "--count", "4", "--out", str(workdir / "o.pfds")]) == 0
    capsys.readouterr()
    code = main(["eval", "--ckpt", str(workdir / "m.npz"), "--data", str(workdir / "o.pfds")])
    assert code == 1 and json.loads(capsys.readouterr().err)["error"] == "CheckpointError"


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pfnet.cli", "solve", "--case", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["error"] == "CaseError"
