import csv
import json
import os

import pytest

import cli


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("FEDVQCS_DATA_DIR", raising=False)
    return tmp_path


def test_codebook_build(workdir, capsys):
    code = cli.main(["codebook", "build", "--dim", "4", "--shape-bits", "3", "--budget", "5", "--output", "cb-run"])
    assert code == cli.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["kind"] == "shape" and summary["size"] == 4
    assert os.path.exists(summary["path"])
    assert os.path.exists(workdir / "cb-run" / "manifest.json")


def test_gain_codebook_build(workdir, capsys):
    assert cli.main(["codebook", "build", "--dim", "2", "--gain-bits", "2", "--output", "gain"]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["size"] == 4


def test_bench_vq(workdir):
    code = cli.main(["bench", "vq", "--dim", "2", "--q", "1,2", "--samples", "500", "--output", "vq"])
    assert code == cli.EXIT_OK
    with open(workdir / "vq" / "vq_bench.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 3


def test_bench_recover(workdir):
    code = cli.main(
        ["bench", "recover", "--n", "64", "--trials", "2", "--caps", "1", "--ratios", "2",
         "--algorithms", "oracle", "--output", "sweep"]
    )
    assert code == cli.EXIT_OK
    assert os.path.exists(workdir / "sweep" / "recovery.csv")


def test_missing_config_exits_with_config_code(workdir):
    assert cli.main(["fl", "run", "--config", "absent.ini"]) == cli.EXIT_CONFIG


def test_missing_mnist_exits_with_data_code(workdir):
    (workdir / "mnist.ini").write_text(
        "[experiment]\nscenario = fl-mnist\nseed = 0\ndata_dir = no-such-dir\n", encoding="utf-8"
    )
    assert cli.main(["fl", "run", "--config", "mnist.ini"]) == cli.EXIT_DATA


def test_infeasible_capacity_exits_with_code_4(workdir):
    (workdir / "tight.ini").write_text(
        "[experiment]\nscenario = fl-synthetic\nseed = 0\noutput_dir = tight\n"
        "[training]\nK = 2\nT = 1\n"
        "[compression]\nB = 1\ncapacity = 0.001\n"
        "[synthetic]\ndim = 100\n",
        encoding="utf-8",
    )
    assert cli.main(["fl", "run", "--config", "tight.ini"]) == cli.EXIT_INFEASIBLE


def test_seed_override_changes_run_id(workdir, capsys):
    (workdir / "syn.ini").write_text(
        "[experiment]\nscenario = fl-synthetic\nseed = 0\noutput_dir = syn\ncodebook_budget = 5\n"
        "[training]\nK = 2\nT = 1\n"
        "[compression]\nB = 1\ncap = 2\ncapacity = 0.3\nfixed_subvector_dim = 4\n"
        "[synthetic]\ndim = 200\nrate = 0.05\n",
        encoding="utf-8",
    )
    assert cli.main(["fl", "run", "--config", "syn.ini", "--seed", "9"]) == cli.EXIT_OK
    with open(workdir / "syn" / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert manifest["run_id"] == "fl-synthetic-s9-syn"
    assert manifest["config"]["round"]["seed"] == 9


def test_exit_codes():
    from experiment import ConfigError
    from param_opt import InfeasibleError

    assert cli.exit_code_for(ConfigError("x")) == 2
    assert cli.exit_code_for(FileNotFoundError("x")) == 3
    assert cli.exit_code_for(InfeasibleError("x")) == 4
    assert cli.exit_code_for(RuntimeError("x")) == 1
