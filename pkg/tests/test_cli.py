import csv
import json
import shutil

import pytest

from flowdistill import cli
from flowdistill.config import parse_config
from flowdistill.pipeline import Manifest, MissingArtifactError, OutputExistsError, Run, cmd_distill, cmd_gen_data

TINY = {
    "seed": 3,
    "task": {"n_demos": 24},
    "cfm": {"epochs": 2, "steps": 4, "K": 4, "batch_size": 12},
    "distill": {"K": 4, "n_obs": 4, "epochs": 2, "batch_items": 2},
    "eval": {"n_obs": 2, "n_per_mode": 8, "K": 4},
    "simloop": {"n_episodes": 2, "speed_factors": [0.0, 1.0], "budget": 60},
    "ablate": {"ks": [1, 4], "t_e": [8], "n_episodes": 2},
    "speed": {"repeats": 30, "warmup": 0},
}


def write_cfg(tmp_path, data=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps({**data, "out_dir": str(tmp_path / "run")}))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny")
    cfg = write_cfg(tmp)
    assert cli.main(["all", "--config", str(cfg)]) == 0
    return tmp


def test_config_error_exit_code(tmp_path, capsys):
    bad = write_cfg(tmp_path, {**TINY, "distill": {"K": 0}})
    assert cli.main(["gen-data", "--config", str(bad)]) == 2
    assert "distill.K" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2


def test_missing_artifact_exit_code_names_producer(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert cli.main(["train-teacher", "--config", str(cfg)]) == 3
    assert "gen-data" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", str(cfg)]) == 0
    assert cli.main(["distill", "--config", str(cfg)]) == 3
    assert "train-teacher" in capsys.readouterr().err


def test_existing_output_needs_force(tmp_path):
    run = Run.open(parse_config(TINY, out_dir=str(tmp_path / "r")))
    cmd_gen_data(run)
    with pytest.raises(OutputExistsError):
        cmd_gen_data(run)
    cmd_gen_data(run, force=True)
    assert cli.main(["gen-data", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "r")]) == 1


def test_demo_count_and_seed_override(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    meta = json.loads((tmp_path / "a" / "data" / "demos.meta.json").read_text())
    assert meta["n"] == 24 and meta["seed"] == 7
    assert len(list((tmp_path / "a" / "data").glob("demo_*.tset"))) == 24
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert Manifest(tmp_path / "a").digest() == Manifest(tmp_path / "b").digest()
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert Manifest(tmp_path / "a").digest() != Manifest(tmp_path / "c").digest()


def test_full_pipeline_outputs(tiny_run):
    root = tiny_run / "run"
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["config_hash"] and manifest["tool_version"]
    commands = {r["command"] for r in manifest["runs"]}
    assert commands == {"gen-data", "train-teacher", "sample-teacher", "distill", "eval", "simulate", "speed", "ablate"}
    assert Manifest(root).verify() == []
    for rel in ("eval/student.csv", "eval/teacher.json", "sim/sweep.csv", "speed/timing.csv", "ablate/ablate_k.csv", "ablate/ablate_te.csv"):
        assert (root / rel).exists(), rel
    timing = [k for k, v in manifest["artifacts"].items() if v["timing"]]
    assert sorted(timing) == ["speed/timing.csv", "speed/timing.json"]
    with open(root / "ablate" / "ablate_k.csv") as f:
        assert [int(r["K"]) for r in csv.DictReader(f)] == [1, 4]


def test_rerun_with_force_is_idempotent(tiny_run):
    root = tiny_run / "run"
    before = Manifest(root).digest()
    assert cli.main(["eval", "--config", str(tiny_run / "cfg.json"), "--force"]) == 0
    assert Manifest(root).digest() == before


def test_tampered_upstream_is_reported(tiny_run, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_run / "run", root)
    (root / "teacher" / "model.fdck").write_bytes(b"garbage")
    run = Run.open(parse_config(TINY, out_dir=str(root)))
    with pytest.raises(MissingArtifactError, match="train-teacher"):
        cmd_distill(run, force=True)


def test_resume_skips_up_to_date_stages(tiny_run, capsys):
    cfg = str(tiny_run / "cfg.json")
    assert cli.main(["all", "--config", cfg, "--resume"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert all(x["result"] == "up-to-date" for x in lines) and len(lines) == 8
    # a tampered stage and everything downstream of it rerun
    (tiny_run / "run" / "student" / "model.fdck").write_bytes(b"x")
    assert cli.main(["all", "--config", cfg, "--resume"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [x["command"] for x in lines if x["result"] != "up-to-date"] == ["distill", "eval", "simulate", "speed", "ablate"]
    assert Manifest(tiny_run / "run").verify() == []
