import json

import pytest

from safegil.cli import main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the 1-D pipeline twice in separate directories."""
    dirs = []
    for name in ("one", "two"):
        d = tmp_path_factory.mktemp(name)
        (d / "train.json").write_text(json.dumps({"hidden": [8], "epochs": 40}))
        assert run("solve", "--env", "integrator1d", "--out", d / "vf.sgvf") == 0
        assert run("collect", "--method", "safegil", "--env", "integrator1d", "--vf", d / "vf.sgvf",
                   "-K", 4, "--seed", 3, "--out", d / "d.jsonl") == 0
        assert run("train", "--data", d / "d.jsonl", "--cfg", d / "train.json", "--seed", 1,
                   "--out", d / "p.json") == 0
        assert run("eval", "--policy", d / "p.json", "--env", "integrator1d", "--vf", d / "vf.sgvf",
                   "--filter", "-n", 5, "--seed", 7, "--out", d / "eval.json") == 0
        dirs.append(d)
    return dirs


@pytest.mark.parametrize("name", ["vf.sgvf", "d.jsonl", "d.jsonl.manifest.json", "p.json", "eval.json"])
def test_reruns_are_byte_identical(pipeline, name):
    a, b = pipeline
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_eval_output_is_plain_json(pipeline):
    report = json.loads((pipeline[0] / "eval.json").read_text())
    assert report["n_starts"] == 5 and report["filter"] is True


def test_ablate_and_report(tmp_path, capsys):
    spec = {"env": "integrator1d", "methods": ["bc", "safegil"], "K": [1, 2], "seeds": 1, "n_eval": 3,
            "train": {"hidden": [4], "epochs": 5}, "name": "mini"}
    (tmp_path / "exp.json").write_text(json.dumps(spec))
    assert run("ablate", "--spec", tmp_path / "exp.json", "--out", tmp_path / "out") == 0
    assert "failure_rate" in capsys.readouterr().out
    assert run("report", "--dir", tmp_path / "out") == 0
    assert (tmp_path / "out" / "plots" / "mini_failure_rate.svg").exists()


def test_report_refuses_mixed_environments(tmp_path):
    from safegil.bench_io import write_report

    rows = [{"method": "bc", "K": 1, "seed": s, "failure_rate": 0.0, "env_hash": h, "error": ""}
            for s, h in enumerate(["aaa", "bbb"])]
    write_report(rows, tmp_path / "reports" / "mixed.csv")
    assert run("report", "--dir", tmp_path) == 3


def test_usage_errors_exit_2(tmp_path):
    assert run("eval", "--bogus") == 2
    assert run("frobnicate") == 2
    assert run("train", "--data", tmp_path / "missing.jsonl", "--out", tmp_path / "p.json") == 2
    assert run("solve", "--env", "no-such-env", "--out", tmp_path / "v.sgvf") == 2
    assert run("collect", "--method", "safegil", "--env", "integrator1d", "-K", 1, "--out", tmp_path / "d") == 2


def test_hash_mismatch_exits_3(pipeline, tmp_path):
    from safegil.envmodels import BUILTIN_ENVS

    raw = BUILTIN_ENVS["integrator1d"]()
    raw["dbar_max"] = 0.25
    (tmp_path / "other.json").write_text(json.dumps(raw))
    d = pipeline[0]
    assert run("eval", "--policy", d / "p.json", "--env", tmp_path / "other.json", "--vf", d / "vf.sgvf",
               "-n", 2) == 3
