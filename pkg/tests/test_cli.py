import json
import subprocess
import sys

import pytest

from vbreg import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_deterministic(tmp_path, capsys):
    assert run("simulate", "--spec", "bench-chlrm", "--seed", 1, "--out", tmp_path / "a") == 0
    assert run("simulate", "--spec", "bench-chlrm", "--seed", 1, "--out", tmp_path / "b") == 0
    a, b = (tmp_path / "a" / "data.csv").read_bytes(), (tmp_path / "b" / "data.csv").read_bytes()
    assert a == b and a.count(b"\n") == 301
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert len(truth["gamma"]) == 15


def test_simulate_bad_omega_is_usage_error(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("model = chlrm\nbeta = 0,1;1,1;2,1\nsigma_sq = 1,1,1\nm = 6\nomega = 0.4,0.3,0.2\n")
    assert run("simulate", "--spec", spec, "--out", tmp_path / "o") == 2
    assert "simplex" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run("fit", "--data", "iris", "--model", "lrm", "--method", "gibbs") == 2
    assert run("fit", "--data", "iris", "--model", "lrm", "--method", "svi", "--out", tmp_path) == 2
    assert run("fit", "--data", tmp_path / "x.csv", "--model", "lrm", "--method", "vi") == 2
    assert run("select-k", "--data", "iris", "--k-range", "3:x") == 2
    assert run("frobnicate") == 2


def test_missing_file_is_engine_error(tmp_path, capsys):
    assert run("fit", "--data", tmp_path / "none.csv", "--schema", "y ~ x", "--model", "lrm",
               "--method", "vi", "--out", tmp_path) == 1


def test_fit_iris_vi(tmp_path, capsys):
    out = tmp_path / "iris"
    assert run("fit", "--data", "iris", "--model", "lrm", "--method", "vi", "--reps", 100, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["r2"] == pytest.approx(0.760, abs=0.001)
    assert rep["method"] == "vi" and "ppp_sd" in rep
    assert (out / "state.bin").exists()
    lines = (out / "trace.txt").read_text().splitlines()
    assert lines[0] == "iteration\tvalue" and len(lines) > 2
    assert "waic" in capsys.readouterr().out


def test_fit_chlrm_outputs(tmp_path, capsys):
    run("simulate", "--spec", "bench-chlrm", "--seed", 1, "--out", tmp_path / "sim")
    out = tmp_path / "fit"
    rc = run("fit", "--data", tmp_path / "sim" / "data.csv", "--schema", "y ~ x1 + x2 | group",
             "--model", "chlrm", "--method", "mcmc", "--samples", 600, "--reps", 100, "--out", out)
    assert rc == 0
    for name in ("draws.bin", "report.json", "trace.txt", "cocluster.csv", "kappa.csv"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert rep["K"] == 3 and rep["kappa_3"] > 0.9


def test_compare_warns_on_mixed_datasets(tmp_path, capsys):
    run("fit", "--data", "iris", "--model", "lrm", "--method", "vi", "--reps", 0, "--out", tmp_path / "a")
    run("fit", "--data", "iris", "--model", "lrm", "--method", "vi", "--prior", "zellner", "--reps", 0,
        "--out", tmp_path / "b")
    run("simulate", "--spec", "bench-lrm-200-2", "--out", tmp_path / "s")
    run("fit", "--data", tmp_path / "s" / "data.csv", "--schema", "y ~ x1", "--model", "lrm", "--method", "vi",
        "--reps", 0, "--out", tmp_path / "c")
    capsys.readouterr()
    assert run("compare", tmp_path / "a" / "report.json", tmp_path / "b" / "report.json") == 0
    assert "WARNING" not in capsys.readouterr().out
    assert run("compare", tmp_path / "a" / "report.json", tmp_path / "c" / "report.json",
               "--out", tmp_path / "t.csv") == 0
    assert capsys.readouterr().out.startswith("WARNING")
    assert (tmp_path / "t.csv").read_text().count("\n") == 3


def test_select_k_single_value(tmp_path, capsys):
    run("simulate", "--spec", "bench-chlrm", "--seed", 1, "--out", tmp_path / "sim")
    out = tmp_path / "k"
    assert run("select-k", "--data", tmp_path / "sim" / "data.csv", "--schema", "y ~ x1 + x2 | group",
               "--k-range", "3", "--restarts", 1, "--out", out) == 0
    lines = (out / "elbo_by_k.csv").read_text().splitlines()
    assert lines[0] == "K,elbo,occupied" and len(lines) == 2 and lines[1].startswith("3,")


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# fit settings\ndata = iris\nmodel = lrm\nmethod = mcmc\nsamples = 500\nseed = 4\n")
    args = cli.parse_args(["fit", "--config", str(cfg), "--seed", "9"])
    assert args.samples == 500 and args.seed == 9 and args.burn_in == 50 and args.method == "mcmc"
    cfg.write_text("colour = red\n")
    with pytest.raises(cli.UsageError):
        cli.parse_args(["fit", "--config", str(cfg)])
    cfg.write_text("method = gibbs\n")
    with pytest.raises(cli.UsageError):
        cli.parse_args(["fit", "--config", str(cfg)])


def test_parse_k_range():
    assert cli.parse_k_range("1:4") == [1, 2, 3, 4]
    assert cli.parse_k_range("2,5") == [2, 5]
    with pytest.raises(cli.UsageError):
        cli.parse_k_range("0:3")


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vbreg.cli", "simulate", "--spec", "bench-lrm-50-2",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "wrote 50 rows" in r.stdout
