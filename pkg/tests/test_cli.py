import json

import pytest
from filelock import FileLock

from _pipeline import METRIC_FILES, run, run_pipeline
from mealsynth.cli import build_parser, build_report, dump_json, main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe"))


def test_every_command_writes_config(pipeline):
    for name in ("data", "vocab", "assoc", "gan"):
        cfg = json.loads((pipeline / name / "config.json").read_text())
        assert {"command", "version", "args"} <= set(cfg)
        assert "seed" in cfg["args"]


def test_metric_files_present(pipeline):
    for rel in METRIC_FILES:
        assert (pipeline / rel).is_file(), rel
    gen = json.loads((pipeline / "gan/metrics.json").read_text())
    assert gen["kind"] == "generation" and gen["scorer"] == "oracle"
    assert {"IS_mean", "IS_std", "FID", "fake2recipe", "presence_f1", "presence_f1_shuffled"} <= set(gen)
    assert 1.0 - 1e-9 <= gen["IS_mean"] <= 8 + 1e-9
    ret = json.loads((pipeline / "assoc/metrics.json").read_text())
    assert ret["kind"] == "retrieval" and ret["pool_size"] == 40


def test_grids_and_interp_outputs(pipeline):
    run("grid", "--run", pipeline / "gan", "--mode", "fixed-z", "--recipes", "syn000001", "syn000002")
    run("grid", "--run", pipeline / "gan", "--mode", "fixed-c", "--recipes", "syn000001", "--num-z", 3)
    grids = pipeline / "gan/grids"
    assert (grids / "fixed_z_0_64px.png").exists() and (grids / "fixed_c_syn000001.json").exists()
    rows = json.loads((pipeline / "gan/interp/interp.json").read_text())
    assert rows and all(r["points"] == ["0", "1/4", "1/2", "3/4", "1"] for r in rows)
    assert all(len(r["target_prob"]) == 5 for r in rows)


def test_report_lists_tables_and_random_row(pipeline, capsys):
    assert main(["report", str(pipeline / "assoc"), str(pipeline / "gan"), str(pipeline / "vocab")]) == 0
    text = capsys.readouterr().out
    assert "Retrieval, pool 40" in text and "Image quality" in text
    assert "Fake image to recipe MedR, pool 40" in text
    assert "20.00" in text  # random column is pool / 2
    assert "unrecognised metrics kind" in text  # vocab metrics are not a report table


def test_report_random_column_at_pool_900(tmp_path):
    doc = {"kind": "generation", "model": "ours", "category": "all", "IS_mean": 3.0, "IS_std": 0.1,
           "FID": 12.0, "pool_size": 900, "fake2recipe": {"medr": {"mean": 40.0, "std": 1.0}}}
    dump_json(doc, tmp_path / "metrics.json")
    text = build_report([tmp_path])
    row = [ln for ln in text.splitlines() if ln.startswith("all") and "450.00" in ln]
    assert row and "40.00" in row[0]


def test_report_flags_missing_metrics(tmp_path):
    doc = {"kind": "generation", "model": "m", "category": "all", "IS_mean": None, "IS_std": None,
           "FID": 1.0, "pool_size": 10, "fake2recipe": None}
    dump_json(doc, tmp_path / "metrics.json")
    text = build_report([tmp_path, tmp_path / "nowhere"])
    assert "IS_mean" in text.split("Missing metrics")[1]
    assert "no metrics.json" in text


def test_locked_run_directory_is_refused(tmp_path, capsys):
    out = tmp_path / "data"
    out.mkdir()
    with FileLock(str(out / ".lock")):
        code = main(["data", "synth", "--out", str(out), "--num-recipes", "20"])
    assert code == 1
    assert "locked" in capsys.readouterr().err


def test_user_errors_exit_cleanly(pipeline, capsys):
    assert main(["assoc", "eval", "--run", str(pipeline / "assoc"), "--pool-size", "1000"]) == 1
    assert "short by" in capsys.readouterr().err
    assert main(["interp", "--run", str(pipeline / "gan"), "--target", "g1"]) == 1
    assert main(["gan", "eval", "--run", str(pipeline / "gan")]) == 1


def test_parser_covers_every_command():
    p = build_parser()
    for argv in (["vocab", "build", "--data", "d", "--out", "o"], ["data", "prepare", "--corpus", "c", "--out", "o"],
                 ["assoc", "train", "--data", "d", "--vocab", "v", "--out", "o"], ["assoc", "eval", "--run", "r"],
                 ["gan", "train", "--assoc", "a", "--out", "o"], ["gan", "eval", "--run", "r"],
                 ["grid", "--run", "r", "--mode", "fixed-z", "--recipes", "a", "b"],
                 ["interp", "--run", "r", "--target", "t", "--mine"], ["report", "r"]):
        assert callable(p.parse_args(argv).func)


def test_fixed_seed_pipeline_is_bitwise_reproducible(pipeline, tmp_path):
    again = run_pipeline(tmp_path)
    for rel in METRIC_FILES:
        assert (pipeline / rel).read_bytes() == (again / rel).read_bytes(), rel
