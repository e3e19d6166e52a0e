import json
from dataclasses import replace
from pathlib import Path

import pytest

from saliteach.data import Split
from saliteach.errors import ConfigurationError
from saliteach.loss import LossConfig, LossKind
from saliteach.model import Arch
from saliteach.pipeline import (
    Condition,
    Experiment,
    ExperimentConfig,
    Selection,
    TeacherRanking,
    annotate_tais,
    audit_hygiene,
    run_baseline1,
    run_baseline2,
    run_condition,
    run_transfer_matrix,
    select_teacher,
    train_student_cohort,
    train_teacher_cohort,
)
from saliteach.saliency import SaliencyArchive, SaliencyMethod
from saliteach.training import TrainedModelRecord

CONFIGS = Path(__file__).parent.parent / "configs"


def _record(seed, auc):
    return TrainedModelRecord(
        Arch.PLAIN, seed, LossConfig(), "best.pt", "h", (auc,), (1.0,), 0, auc
    )


def test_select_teacher_takes_the_highest_validation_auc():
    records = [_record(0, 0.61), _record(1, 0.70), _record(2, 0.65)]
    assert select_teacher(records).seed == 1
    assert select_teacher(records, Selection.WORST).seed == 0


def test_select_teacher_breaks_ties_by_lowest_seed():
    assert select_teacher([_record(3, 0.70), _record(1, 0.70)]).seed == 1
    assert select_teacher([_record(3, 0.50), _record(1, 0.50)], Selection.WORST).seed == 1


def test_select_teacher_from_nothing():
    with pytest.raises(ConfigurationError):
        select_teacher([])


@pytest.mark.parametrize("name", ["default.yaml", "multiclass.yaml"])
def test_shipped_configs_load(name):
    cfg = ExperimentConfig.load(CONFIGS / name)
    cfg.data.validate()
    assert cfg.num_seeds == 5
    assert cfg.to_dict()["experiment"]["name"] == cfg.name
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_default_config_is_the_optimal_student_setup():
    cfg = ExperimentConfig.load(CONFIGS / "default.yaml")
    assert cfg.student_alpha == 0.01
    assert cfg.saliency_method == SaliencyMethod.CAM
    assert cfg.data.spurious_correlation_train == 0.95 and cfg.data.spurious_correlation_eais == 0.0


def test_unknown_config_keys_are_named():
    with pytest.raises(ConfigurationError, match="unknown key train.learning_rate"):
        ExperimentConfig.from_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigurationError, match="saliency_method"):
        ExperimentConfig.from_dict({"experiment": {"saliency_method": "gradcam"}})


def test_bad_seed_settings():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(num_seeds=0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(seed_list=(1, 1))


@pytest.fixture
def tiny_cfg(tiny_train, tiny_rise):
    return ExperimentConfig(
        name="tiny",
        teacher_arch=Arch.PLAIN,
        student_arch=Arch.PLAIN,
        student_alpha=0.01,
        num_seeds=2,
        train=tiny_train,
        rise=tiny_rise,
        transfer_archs=(Arch.PLAIN, Arch.SEPARABLE),
        deterministic=True,
    )


@pytest.fixture
def experiment(tmp_path, tiny_cfg, tiny_bundle):
    return Experiment(tiny_cfg, tmp_path / "exp", bundle=tiny_bundle)


def test_teacher_cohort(experiment):
    cohort = train_teacher_cohort(experiment)
    assert len(cohort.records) == 2 and cohort.seeds == (0, 1)
    assert cohort.split == Split.TAIT_VAL
    assert cohort.aucs == tuple(r.selected_val_auc for r in cohort.records)
    with pytest.raises(ConfigurationError):
        cohort.eais_aucs


def test_cross_entropy_teacher_cohort_trains_without_maps(experiment):
    cohort = train_teacher_cohort(experiment, Arch.PLAIN, LossConfig(LossKind.CROSS_ENTROPY))
    assert all(r.loss.kind == LossKind.CROSS_ENTROPY for r in cohort.records)


def test_teacher_cohorts_with_different_alphas_are_kept_apart(tmp_path, tiny_cfg, tiny_bundle):
    exp = Experiment(replace(tiny_cfg, num_seeds=1), tmp_path, bundle=tiny_bundle)
    a = train_teacher_cohort(exp, Arch.PLAIN, LossConfig(LossKind.CYBORG, 0.5))
    b = train_teacher_cohort(exp, Arch.PLAIN, LossConfig(LossKind.CYBORG, 0.9))
    assert a is not b
    assert [r.loss.alpha for r in b.records] == [0.9]
    assert Path(a.records[0].run_dir).parent != Path(b.records[0].run_dir).parent
    assert train_teacher_cohort(exp, Arch.PLAIN, LossConfig(LossKind.CYBORG, 0.5)) is a


def test_student_cohort_uses_the_selected_teacher(experiment):
    teacher = select_teacher(train_teacher_cohort(experiment).records)
    archive = annotate_tais(experiment, teacher)
    assert not archive.missing([s.id for s in experiment.bundle.tais])
    index = json.loads((archive.root / SaliencyArchive.INDEX).read_text())
    assert index["checkpoint_hash"] == teacher.checkpoint_hash
    students = train_student_cohort(experiment, archive, teacher)
    assert len(students.eais_aucs) == 2
    assert all(r.loss == LossConfig(LossKind.CYBORG, 0.01) for r in students.records)


def test_worst_teacher_produces_different_maps(experiment):
    records = train_teacher_cohort(experiment).records
    best, worst = select_teacher(records), select_teacher(records, Selection.WORST)
    if best.seed == worst.seed:
        pytest.skip("both seeds reached the same validation AUC")
    a, b = annotate_tais(experiment, best), annotate_tais(experiment, worst)
    assert any(not a.load(s.id).equals(b.load(s.id)) for s in experiment.bundle.tais)


def test_baseline1_is_the_teacher_cohort_on_eais(experiment):
    teachers = train_teacher_cohort(experiment)
    result = run_baseline1(experiment)
    assert result.records == teachers.records
    assert result.split == Split.EAIS
    for r in result.records:
        loaders = json.loads((Path(r.run_dir) / "loaders.json").read_text())
        assert set(loaders["train"]) == experiment.bundle.ids(Split.TAIT_TRAIN)


def test_baseline2_trains_on_everything_but_the_test_split(experiment):
    result = run_baseline2(experiment)
    bundle = experiment.bundle
    for r in result.records:
        loaders = json.loads((Path(r.run_dir) / "loaders.json").read_text())
        assert len(loaders["train"]) == len(bundle.tait_train) + len(bundle.tais)
        assert r.loss.kind == LossKind.CROSS_ENTROPY
    assert not (experiment.exp_dir / "saliency").exists()


def test_cohort_statistics_match_recomputation(experiment):
    result = run_baseline2(experiment)
    summary = experiment.summary().find("baseline2")
    assert summary.aucs == result.aucs
    assert (summary.mean_auc, summary.std_auc) == (result.mean_auc, result.std_auc)


def test_full_run_is_hygienic(experiment):
    summary = run_condition(experiment, Condition.FULL)
    conditions = {c.condition for c in summary.conditions}
    assert conditions == {"teacher", "student", "baseline1", "baseline2"}
    report = audit_hygiene(experiment.exp_dir, experiment.bundle)
    assert report.clean, report
    lines = (experiment.exp_dir / "evaluations.jsonl").read_text().splitlines()
    roles = [json.loads(line) for line in lines]
    on_eais = {(e["role"], e["purpose"]) for e in roles if e["split"] == "eais"}
    assert {p for p in on_eais if p[0] == "teacher"} == {("teacher", "baseline1")}


def test_audit_flags_leaks_and_teacher_evaluations(tmp_path, tiny_bundle):
    run = tmp_path / "students" / "x" / "seed0"
    run.mkdir(parents=True)
    leaked = tiny_bundle.eais[0].id
    (run / "loaders.json").write_text(json.dumps({"train": [leaked], "val": []}))
    entry = {
        "run": "teachers/x/seed0",
        "role": "teacher",
        "split": "eais",
        "purpose": "student",
        "checkpoint_hash": "h",
    }
    (tmp_path / "evaluations.jsonl").write_text(json.dumps(entry) + "\n")
    report = audit_hygiene(tmp_path, tiny_bundle)
    assert report.eais_leaks == (("students/x/seed0:train", leaked),)
    assert report.teacher_eais_evaluations == ("teachers/x/seed0",)
    assert not report.clean


def test_ce_teacher_control_adds_a_condition(tmp_path, tiny_cfg, tiny_bundle):
    cfg = replace(tiny_cfg, ce_teacher_control=True, num_seeds=1)
    exp = Experiment(cfg, tmp_path, bundle=tiny_bundle)
    summary = run_condition(exp, Condition.STUDENT)
    assert summary.find("student_ce_teacher").teacher.endswith("ce")


def test_transfer_matrix(tmp_path, tiny_cfg, tiny_bundle):
    cfg = replace(tiny_cfg, num_seeds=1)
    matrix = run_transfer_matrix(Experiment(cfg, tmp_path, bundle=tiny_bundle))
    assert set(matrix) == {Arch.PLAIN, Arch.SEPARABLE}
    for row in matrix.values():
        assert set(row) == {"same", "best", "worst"}
        assert row["best"] is row["same"] or row["worst"] is row["same"]
    student_dirs = {p.name for p in (tmp_path / "students").iterdir()}
    assert len(student_dirs) == 4


def test_transfer_matrix_ranked_by_student_eais(tmp_path, tiny_cfg, tiny_bundle):
    cfg = replace(tiny_cfg, num_seeds=1, rank_teachers_by=TeacherRanking.STUDENT_EAIS)
    matrix = run_transfer_matrix(Experiment(cfg, tmp_path, bundle=tiny_bundle))
    same = {a: row["same"].mean_auc for a, row in matrix.items()}
    best = max(same, key=same.get)
    for row in matrix.values():
        cohort_dir = Path(row["best"].records[0].run_dir).parent.name
        assert cohort_dir.split("-from-")[1].startswith(best.value)


def test_resumed_experiment_reuses_runs(tmp_path, tiny_cfg, tiny_bundle):
    cfg = replace(tiny_cfg, num_seeds=1)
    first = run_condition(
        Experiment(cfg, tmp_path, resume=True, bundle=tiny_bundle), Condition.TRANSFER
    )
    stamps = {p: p.stat().st_mtime_ns for p in tmp_path.rglob("record.json")}
    second = run_condition(
        Experiment(cfg, tmp_path, resume=True, bundle=tiny_bundle), Condition.TRANSFER
    )
    assert second == first
    assert {p: p.stat().st_mtime_ns for p in tmp_path.rglob("record.json")} == stamps


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = replace(ExperimentConfig.load(CONFIGS / "default.yaml"), deterministic=True)
    exp = Experiment(cfg, tmp_path_factory.mktemp("default"))
    return exp, run_condition(exp, Condition.FULL)


@pytest.mark.slow
def test_default_teachers_fit_the_validation_split(default_run):
    exp, _ = default_run
    aucs = train_teacher_cohort(exp).aucs
    assert sum(aucs) / len(aucs) > 0.9


@pytest.mark.slow
def test_default_baseline1_beats_chance_on_eais(default_run):
    _, summary = default_run
    assert summary.find("baseline1").mean_auc > 0.5


@pytest.mark.slow
def test_default_baseline2_shows_a_generalization_gap(default_run):
    exp, summary = default_run
    baseline2 = summary.find("baseline2")
    runs = sorted((exp.exp_dir / "baseline2" / exp.cfg.student_arch.value).glob("seed*"))
    val_aucs = [TrainedModelRecord.load(run).selected_val_auc for run in runs]
    assert len(val_aucs) == exp.cfg.num_seeds
    assert baseline2.mean_auc < sum(val_aucs) / len(val_aucs)
