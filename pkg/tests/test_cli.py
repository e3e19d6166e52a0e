import argparse
import json

import pytest
import yaml

from saliteach.cli import apply_overrides, main
from saliteach.config import OUTPUT_ROOT_ENV
from saliteach.pipeline import ExperimentConfig
from saliteach.saliency import SaliencyMethod

TINY = {
    "experiment": {
        "name": "tiny",
        "teacher_arch": "plain",
        "student_arch": "plain",
        "num_seeds": 2,
        "deterministic": True,
    },
    "data": {"num_per_split": [16, 16, 32, 16], "seed": 3},
    "train": {"max_epochs": 1, "base_lr": 0.05, "momentum": 0.9, "batch_size": 8},
    "rise": {"num_masks": 20, "grid_size": 4, "batch_size": 20},
}


def _config(tmp_path, name="tiny.yaml", **sections):
    path = tmp_path / name
    path.write_text(yaml.safe_dump({**TINY, **sections}))
    return path


def test_gen_data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(_config(tmp_path)), "--out", str(out)]) == 0
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 80
    assert (out / "task.yaml").is_file()
    assert json.loads((out / "run-gen-data.json").read_text())["status"] == "ok"


def test_gen_data_rejects_overlapping_regions(tmp_path, capsys):
    data = TINY["data"] | {"spurious_cue": {"region": [5, 5, 6, 6]}}
    config = _config(tmp_path, data=data)
    code = main(["gen-data", "--config", str(config), "--out", str(tmp_path / "data")])
    assert code == 1
    assert "causal_patch.region and spurious_cue.region overlap" in capsys.readouterr().err
    assert not (tmp_path / "data" / "manifest.jsonl").exists()


def test_gen_data_refuses_to_overwrite_without_force(tmp_path, capsys):
    cfg, out = str(_config(tmp_path)), str(tmp_path / "data")
    assert main(["gen-data", "--config", cfg, "--out", out]) == 0
    before = (tmp_path / "data" / "manifest.jsonl").read_bytes()
    image = (tmp_path / "data" / "images" / "eais-00000.png").read_bytes()
    assert main(["gen-data", "--config", cfg, "--out", out]) == 1
    assert "already exists" in capsys.readouterr().err
    assert main(["gen-data", "--config", cfg, "--out", out, "--force"]) == 0
    assert (tmp_path / "data" / "manifest.jsonl").read_bytes() == before
    assert (tmp_path / "data" / "images" / "eais-00000.png").read_bytes() == image


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["gen-data", "--config", str(_config(tmp_path))]) == 0
    assert (tmp_path / "root" / "data" / "tiny" / "manifest.jsonl").is_file()


def test_missing_config_file(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert "does not exist" in capsys.readouterr().err


@pytest.fixture
def finished(tmp_path):
    out = tmp_path / "exp"
    argv = ["run-experiment", "--config", str(_config(tmp_path)), "--out", str(out)]
    assert main([*argv, "--condition", "baseline2"]) == 0
    return out


def test_run_experiment_single_condition(finished):
    summary = json.loads((finished / "summary.json").read_text())
    assert [c["condition"] for c in summary["conditions"]] == ["baseline2"]
    assert len(summary["conditions"][0]["aucs"]) == 2
    lines = (finished / "results.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("baseline2,plain,none,,")
    assert (finished / "roc" / "baseline2__plain.csv").is_file()
    assert json.loads((finished / "run-run-experiment.json").read_text())["status"] == "ok"


def test_report_regenerates_identical_files(finished, capsys):
    names = ["summary.json", "results.csv", "roc/baseline2__plain.csv"]
    before = {name: (finished / name).read_bytes() for name in names}
    assert main(["report", str(finished)]) == 0
    assert "results.csv" in capsys.readouterr().out
    assert {name: (finished / name).read_bytes() for name in before} == before


def test_report_json_only(finished):
    (finished / "results.csv").unlink()
    assert main(["report", str(finished), "--format", "json-only"]) == 0
    assert not (finished / "results.csv").exists()


def test_report_of_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert "summary.json" in capsys.readouterr().err


def test_run_experiment_json_only(tmp_path):
    out = tmp_path / "exp"
    args = ["run-experiment", "--config", str(_config(tmp_path)), "--out", str(out)]
    args += ["--condition", "baseline2", "--format", "json-only", "--num-seeds", "1"]
    assert main(args) == 0
    assert (out / "summary.json").is_file()
    assert not (out / "results.csv").exists()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["run-experiment", "--config", "x.yaml", "--condition", "everything"],
        ["run-experiment", "--config", "x.yaml", "--seed-list", "a,b"],
        ["gen-data"],
    ],
)
def test_bad_arguments_exit_with_usage(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def _namespace(**kwargs):
    defaults = dict(
        seed_list=None,
        num_seeds=None,
        saliency=None,
        alpha=None,
        teacher_alpha=None,
        deterministic=False,
        workers=None,
    )
    return argparse.Namespace(**defaults | kwargs)


def test_overrides_leave_config_alone_by_default():
    cfg = ExperimentConfig()
    assert apply_overrides(cfg, _namespace()) is cfg


def test_overrides_win_over_the_config_file():
    cfg = ExperimentConfig(seed_list=(4, 5))
    args = _namespace(num_seeds=3, saliency="rise", alpha=0.2, teacher_alpha=0.7, workers=2)
    got = apply_overrides(cfg, args)
    assert got.seeds == (0, 1, 2)
    assert got.saliency_method == SaliencyMethod.RISE
    assert got.student_alpha == 0.2
    assert got.teacher_loss.alpha == 0.7 and got.teacher_loss.kind == cfg.teacher_loss.kind
    assert got.workers == 2
    assert apply_overrides(cfg, _namespace(seed_list=(9,))).seeds == (9,)
