"""Teacher-student experiments: teacher cohorts, selection, TAIS annotation,
student cohorts, both baselines and the cross-architecture transfer matrix.

Experiment directory:

    config.yaml                 effective ExperimentConfig
    teachers/<arch>-<loss>/seed<s>/       teacher runs (TAIT-train / TAIT-val)
    saliency/<method>-<arch>-<loss>-seed<s>/  teacher maps for TAIS
    students/<arch>-from-<teacher>-<method>-a<alpha>/seed<s>/
    baseline2/<arch>/seed<s>/
    evaluations.jsonl           one line per model evaluated on a split
    summary.json, results.csv, roc/
"""

from __future__ import annotations

import doctest
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import torch

from .config import config_hash, dump_yaml, from_plain, read_yaml, to_plain
from .data import (
    DatasetBundle,
    PlantedTaskSpec,
    Sample,
    Split,
    generate_planted_dataset,
    load_manifest,
)
from .errors import ConfigurationError
from .evaluation import (
    ConditionSummary,
    ExperimentSummary,
    RocPoint,
    aggregate_runs,
    build_roc_band,
    emit_report,
)
from .loss import LossConfig, LossKind
from .model import Arch, ArchitectureSpec
from .saliency import (
    ClassSelector,
    RiseConfig,
    SaliencyArchive,
    SaliencyMethod,
    generate_teacher_saliency,
)
from .training import TrainConfig, TrainedModelRecord, evaluate_roc, train_model

log = logging.getLogger(__name__)

OPTIMAL_STUDENT_ALPHA = 0.01
SECTIONS = ("data", "train", "rise")


class Selection(Enum):
    BEST = "best"
    WORST = "worst"


class TeacherRanking(Enum):
    TEACHER_VAL = "teacher_val"
    STUDENT_EAIS = "student_eais"


class Condition(Enum):
    TEACHER = "teacher"
    BASELINE1 = "baseline1"
    BASELINE2 = "baseline2"
    STUDENT = "student"
    TRANSFER = "transfer"
    FULL = "full"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "planted"
    teacher_arch: Arch = Arch.RESIDUAL
    student_arch: Arch = Arch.RESIDUAL
    teacher_loss: LossConfig = field(default_factory=LossConfig)
    student_alpha: float = OPTIMAL_STUDENT_ALPHA
    saliency_method: SaliencyMethod = SaliencyMethod.CAM
    rise: RiseConfig = field(default_factory=RiseConfig)
    num_seeds: int = 10
    seed_list: tuple[int, ...] | None = None
    data: PlantedTaskSpec = field(default_factory=PlantedTaskSpec)
    manifest: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: Selection = Selection.BEST
    rank_teachers_by: TeacherRanking = TeacherRanking.TEACHER_VAL
    transfer_archs: tuple[Arch, ...] = tuple(Arch)
    ce_teacher_control: bool = False
    generation_selector: ClassSelector | None = None
    workers: int = 1
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.num_seeds < 1:
            raise ConfigurationError(f"num_seeds must be >= 1, got {self.num_seeds}")
        if self.seed_list is not None and len(set(self.seed_list)) != len(self.seed_list):
            raise ConfigurationError(f"seed_list has duplicates: {self.seed_list}")
        if self.seed_list is not None and not self.seed_list:
            raise ConfigurationError("seed_list must not be empty")
        if not 0 <= self.student_alpha <= 1:
            raise ConfigurationError(f"student_alpha must lie in [0, 1], got {self.student_alpha}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if not self.transfer_archs:
            raise ConfigurationError("transfer_archs must name at least one architecture")

    @property
    def seeds(self) -> tuple[int, ...]:
        """``seed_list`` when given, else ``0 .. num_seeds - 1``.

        >>> ExperimentConfig(num_seeds=3).seeds, ExperimentConfig(seed_list=(7, 2)).seeds
        ((0, 1, 2), (7, 2))
        """
        return self.seed_list if self.seed_list is not None else tuple(range(self.num_seeds))

    def to_dict(self) -> dict:
        plain = to_plain(self)
        experiment = {k: v for k, v in plain.items() if k not in SECTIONS}
        return {"experiment": experiment} | {k: plain[k] for k in SECTIONS}

    @classmethod
    def from_dict(cls, raw: dict, where: str = "") -> ExperimentConfig:
        """Build from the sectioned layout ``experiment`` / ``data`` / ``train`` / ``rise``.

        >>> raw = {"experiment": {"num_seeds": 2}, "train": {"max_epochs": 3}}
        >>> cfg = ExperimentConfig.from_dict(raw)
        >>> cfg.num_seeds, cfg.train.max_epochs, cfg.train.base_lr
        (2, 3, 0.005)

        >>> ExperimentConfig.from_dict({"x": {}})
        Traceback (most recent call last):
        ...
        saliteach.errors.ConfigurationError: unknown section 'x', use experiment, data, train, rise
        """
        if unknown := set(raw) - {"experiment", *SECTIONS}:
            sections = ", ".join(("experiment", *SECTIONS))
            raise ConfigurationError(f"unknown section {sorted(unknown)[0]!r}, use {sections}")
        flat = dict(raw.get("experiment") or {})
        if nested := sorted(flat.keys() & set(SECTIONS)):
            raise ConfigurationError(f"{nested[0]} is a section of its own, not an experiment key")
        flat |= {k: raw[k] for k in SECTIONS if k in raw}
        return from_plain(cls, flat, where)

    @classmethod
    def load(cls, path: Path) -> ExperimentConfig:
        return cls.from_dict(read_yaml(path), "")

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass(frozen=True)
class CohortResult:
    """Seed cohort evaluated on one split; ``aucs`` align with ``records``."""

    label: str
    records: tuple[TrainedModelRecord, ...]
    aucs: tuple[float, ...]
    split: Split
    curves: tuple[tuple[RocPoint, ...], ...] = ()

    def __post_init__(self) -> None:
        if len(self.records) != len(self.aucs):
            raise ConfigurationError(
                f"{self.label}: {len(self.records)} records but {len(self.aucs)} AUCs"
            )

    @property
    def eais_aucs(self) -> tuple[float, ...]:
        if self.split != Split.EAIS:
            raise ConfigurationError(f"{self.label} was evaluated on {self.split.value}, not eais")
        return self.aucs

    @property
    def mean_auc(self) -> float:
        return aggregate_runs(self.aucs)[0]

    @property
    def std_auc(self) -> float:
        return aggregate_runs(self.aucs)[1]

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(r.seed for r in self.records)


class TrainJob(NamedTuple):
    spec: ArchitectureSpec
    train: tuple[Sample, ...]
    val: tuple[Sample, ...]
    cfg: TrainConfig
    run_dir: Path
    archive: SaliencyArchive | None
    resume: bool


def _run_job(job: TrainJob) -> TrainedModelRecord:
    return train_model(job.spec, job.train, job.val, job.cfg, job.run_dir, job.archive, job.resume)


class Experiment:
    """One experiment directory and the dataset bundle its cohorts share."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        exp_dir: Path,
        resume: bool = False,
        bundle: DatasetBundle | None = None,
    ) -> None:
        self.cfg = cfg
        self.exp_dir = Path(exp_dir)
        self.resume = resume
        self.bundle = bundle or self._load_bundle()
        self.conditions: dict[str, ConditionSummary] = {}
        self._teacher_cohorts: dict[tuple[Arch, str], CohortResult] = {}
        self._archives: dict[str, SaliencyArchive] = {}
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        self.exp_dir.mkdir(parents=True, exist_ok=True)
        (self.exp_dir / "config.yaml").write_text(dump_yaml(cfg.to_dict()))

    def _load_bundle(self) -> DatasetBundle:
        if self.cfg.manifest:
            return load_manifest(Path(self.cfg.manifest), num_classes=self.cfg.data.num_classes)
        return generate_planted_dataset(self.cfg.data)

    def spec(self, arch: Arch) -> ArchitectureSpec:
        return ArchitectureSpec(arch, self.bundle.image_shape, self.bundle.num_classes)

    def split(self, split: Split) -> tuple[Sample, ...]:
        return self.bundle.split(split)

    def relative(self, path: Path | str) -> str:
        return Path(path).relative_to(self.exp_dir).as_posix()

    def train_cohort(
        self,
        arch: Arch,
        train: Sequence[Sample],
        cfg: TrainConfig,
        root: Path,
        archive: SaliencyArchive | None = None,
    ) -> tuple[TrainedModelRecord, ...]:
        val = self.split(Split.TAIT_VAL)
        jobs = [
            TrainJob(
                self.spec(arch),
                tuple(train),
                val,
                replace(cfg, seed=s),
                root / f"seed{s}",
                archive,
                self.resume,
            )
            for s in self.cfg.seeds
        ]
        log.info("cohort %s: %d runs on %d samples", self.relative(root), len(jobs), len(train))
        if self.cfg.workers > 1 and not self.cfg.deterministic and len(jobs) > 1:
            ctx = multiprocessing.get_context("spawn")
            workers = min(self.cfg.workers, len(jobs))
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                return tuple(pool.map(_run_job, jobs))
        return tuple(_run_job(j) for j in jobs)

    def evaluate(
        self, label: str, records: Sequence[TrainedModelRecord], split: Split, role: str
    ) -> CohortResult:
        """Score every record on ``split`` and log each evaluation to ``evaluations.jsonl``."""
        samples = self.split(split)
        positive = self.cfg.train.positive_class
        aucs, curves = [], []
        for r in records:
            auc, curve = evaluate_roc(r.load_model(), samples, positive)
            aucs.append(auc)
            curves.append(tuple(curve))
            self._log_evaluation(r, split, role, label)
        return CohortResult(label, tuple(records), tuple(aucs), split, tuple(curves))

    def _log_evaluation(
        self, record: TrainedModelRecord, split: Split, role: str, purpose: str
    ) -> None:
        entry = {
            "run": self.relative(record.run_dir),
            "role": role,
            "split": split.value,
            "purpose": purpose,
            "checkpoint_hash": record.checkpoint_hash,
        }
        with open(self.exp_dir / "evaluations.jsonl", "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    def record(
        self,
        result: CohortResult,
        condition: str,
        arch: Arch,
        method: str,
        alpha: float | None,
        teacher: str | None = None,
    ) -> ConditionSummary:
        summary = ConditionSummary(
            condition,
            arch.value,
            method,
            alpha,
            result.seeds,
            result.aucs,
            result.split.value,
            teacher,
            build_roc_band(result.curves) if result.curves else None,
        )
        self.conditions[summary.key] = summary
        log.info(
            "%s %s: auc %.4f +- %.4f over %d seeds",
            condition,
            arch.value,
            result.mean_auc,
            result.std_auc,
            len(result.aucs),
        )
        return summary

    def summary(self) -> ExperimentSummary:
        conditions = tuple(self.conditions[k] for k in sorted(self.conditions))
        notes = {
            "task": self.bundle.task_name,
            "num_classes": self.bundle.num_classes,
            "positive_class": self.cfg.train.positive_class,
        }
        return ExperimentSummary(self.cfg.name, self.cfg.hash(), conditions, notes)

    def report(self, json_only: bool = False) -> list[Path]:
        return emit_report(self.summary(), self.exp_dir, json_only)


def teacher_dir(exp: Experiment, arch: Arch, loss: LossConfig) -> Path:
    return exp.exp_dir / "teachers" / f"{arch.value}-{loss.label()}"


def train_teacher_cohort(
    exp: Experiment, arch: Arch | None = None, loss: LossConfig | None = None
) -> CohortResult:
    """Teachers trained on TAIT-train and validated on TAIT-val.

    The returned cohort carries validation AUCs; teachers are only scored on
    EAIS through ``run_baseline1``.
    """
    arch = arch or exp.cfg.teacher_arch
    loss = loss or exp.cfg.teacher_loss
    key = (arch, loss.label())
    if key not in exp._teacher_cohorts:
        train = exp.split(Split.TAIT_TRAIN)
        if not loss.uses_saliency:
            train = tuple(s.without_salience() for s in train)
        cfg = replace(exp.cfg.train, loss=loss)
        records = exp.train_cohort(arch, train, cfg, teacher_dir(exp, arch, loss))
        exp._teacher_cohorts[key] = CohortResult(
            f"teacher {arch.value} {loss.label()}",
            records,
            tuple(r.selected_val_auc for r in records),
            Split.TAIT_VAL,
        )
    return exp._teacher_cohorts[key]


def select_teacher(
    records: Sequence[TrainedModelRecord], selection: Selection = Selection.BEST
) -> TrainedModelRecord:
    """Highest (or lowest) selected validation AUC; ties go to the lowest seed."""
    if not records:
        raise ConfigurationError("no teacher records to select from")
    if selection == Selection.BEST:
        return min(records, key=lambda r: (-r.selected_val_auc, r.seed))
    return min(records, key=lambda r: (r.selected_val_auc, r.seed))


def annotate_tais(
    exp: Experiment, teacher: TrainedModelRecord, method: SaliencyMethod | None = None
) -> SaliencyArchive:
    method = method or exp.cfg.saliency_method
    tag = f"{teacher.arch_id.value}-{teacher.loss.label()}-seed{teacher.seed}"
    out = exp.exp_dir / "saliency" / f"{method.value}-{tag}"
    if out.as_posix() not in exp._archives:
        exp._archives[out.as_posix()] = generate_teacher_saliency(
            teacher.load_model(),
            exp.split(Split.TAIS),
            method,
            out,
            teacher.checkpoint_hash,
            exp.cfg.rise,
            exp.cfg.generation_selector,
            overwrite=not exp.resume,
        )
    return exp._archives[out.as_posix()]


def train_student_cohort(
    exp: Experiment,
    archive: SaliencyArchive,
    teacher: TrainedModelRecord,
    arch: Arch | None = None,
    alpha: float | None = None,
) -> CohortResult:
    """Students trained on TAIS against ``archive``, validated on TAIT-val, scored on EAIS."""
    arch = arch or exp.cfg.student_arch
    alpha = exp.cfg.student_alpha if alpha is None else alpha
    tais = tuple(s.without_salience() for s in exp.split(Split.TAIS))
    if missing := archive.missing([s.id for s in tais]):
        raise ConfigurationError(
            f"teacher archive {archive.root} lacks {len(missing)} TAIS samples: {missing[:10]}"
        )
    loss = LossConfig(LossKind.CYBORG, alpha)
    teacher_tag = f"{teacher.arch_id.value}-{teacher.loss.label()}-seed{teacher.seed}"
    name = f"{arch.value}-from-{teacher_tag}-{archive.method.value}-a{alpha:g}"
    root = exp.exp_dir / "students" / name
    records = exp.train_cohort(arch, tais, replace(exp.cfg.train, loss=loss), root, archive)
    return exp.evaluate(f"student {root.name}", records, Split.EAIS, "student")


def run_baseline1(exp: Experiment) -> CohortResult:
    """Saliency-trained teachers scored directly on EAIS."""
    alpha = exp.cfg.teacher_loss.alpha
    cohort = train_teacher_cohort(exp, exp.cfg.teacher_arch, LossConfig(LossKind.CYBORG, alpha))
    result = exp.evaluate(Condition.BASELINE1.value, cohort.records, Split.EAIS, "teacher")
    exp.record(result, Condition.BASELINE1.value, exp.cfg.teacher_arch, "ground_truth", alpha)
    return result


def run_baseline2(exp: Experiment, arch: Arch | None = None) -> CohortResult:
    """Cross-entropy models on TAIT-train and TAIS together, no salience."""
    arch = arch or exp.cfg.student_arch
    pooled = exp.split(Split.TAIT_TRAIN) + exp.split(Split.TAIS)
    train = tuple(s.without_salience() for s in pooled)
    cfg = replace(exp.cfg.train, loss=LossConfig(LossKind.CROSS_ENTROPY))
    records = exp.train_cohort(arch, train, cfg, exp.exp_dir / "baseline2" / arch.value)
    result = exp.evaluate(Condition.BASELINE2.value, records, Split.EAIS, "baseline2")
    exp.record(result, Condition.BASELINE2.value, arch, "none", None)
    return result


def run_teacher(exp: Experiment) -> TrainedModelRecord:
    cohort = train_teacher_cohort(exp)
    loss = exp.cfg.teacher_loss
    exp.record(
        cohort,
        Condition.TEACHER.value,
        exp.cfg.teacher_arch,
        "ground_truth" if loss.uses_saliency else "none",
        loss.alpha if loss.uses_saliency else None,
    )
    teacher = select_teacher(cohort.records, exp.cfg.selection)
    log.info("selected teacher %s with val auc %.4f", teacher.name, teacher.selected_val_auc)
    return teacher


def run_student(exp: Experiment) -> CohortResult:
    teacher = run_teacher(exp)
    archive = annotate_tais(exp, teacher)
    result = train_student_cohort(exp, archive, teacher)
    method, alpha = archive.method.value, exp.cfg.student_alpha
    exp.record(result, Condition.STUDENT.value, exp.cfg.student_arch, method, alpha, teacher.name)
    if exp.cfg.ce_teacher_control:
        ce = train_teacher_cohort(exp, exp.cfg.teacher_arch, LossConfig(LossKind.CROSS_ENTROPY))
        ce_teacher = select_teacher(ce.records, exp.cfg.selection)
        control = train_student_cohort(exp, annotate_tais(exp, ce_teacher), ce_teacher)
        label = f"{ce_teacher.name} ce"
        exp.record(control, "student_ce_teacher", exp.cfg.student_arch, method, alpha, label)
    return result


def rank_teacher_pool(
    exp: Experiment, pool: dict[Arch, TrainedModelRecord], same: dict[Arch, CohortResult]
) -> list[Arch]:
    """Teacher architectures from best to worst."""
    if exp.cfg.rank_teachers_by == TeacherRanking.TEACHER_VAL:
        score = {a: pool[a].selected_val_auc for a in pool}
    else:
        score = {a: same[a].mean_auc for a in pool}
    return sorted(pool, key=lambda a: (-score[a], list(Arch).index(a)))


def run_transfer_matrix(
    exp: Experiment, archs: Sequence[Arch] | None = None
) -> dict[Arch, dict[str, CohortResult]]:
    """Students of every architecture taught by the same-architecture, best and worst teacher.

    Coinciding teachers share one cohort directory, so a condition that equals
    another is trained once.
    """
    archs = tuple(archs or exp.cfg.transfer_archs)
    loss = LossConfig(LossKind.CYBORG, exp.cfg.teacher_loss.alpha)
    pool = {a: select_teacher(train_teacher_cohort(exp, a, loss).records) for a in archs}
    archives = {a: annotate_tais(exp, t) for a, t in pool.items()}
    same = {a: train_student_cohort(exp, archives[a], pool[a], a) for a in archs}
    ranking = rank_teacher_pool(exp, pool, same)
    best, worst = ranking[0], ranking[-1]
    log.info("transfer: best teacher %s, worst teacher %s", pool[best].name, pool[worst].name)
    matrix: dict[Arch, dict[str, CohortResult]] = {}
    for a in archs:
        row = {"same": same[a]}
        teachers = {"same": a, "best": best, "worst": worst}
        for name in ("best", "worst"):
            t = teachers[name]
            row[name] = same[a] if t == a else train_student_cohort(exp, archives[t], pool[t], a)
        for name, result in row.items():
            exp.record(
                result,
                f"transfer_{name}",
                a,
                exp.cfg.saliency_method.value,
                exp.cfg.student_alpha,
                pool[teachers[name]].name,
            )
        matrix[a] = row
    return matrix


def run_condition(exp: Experiment, condition: Condition) -> ExperimentSummary:
    match condition:
        case Condition.TEACHER:
            run_teacher(exp)
        case Condition.BASELINE1:
            run_baseline1(exp)
        case Condition.BASELINE2:
            run_baseline2(exp)
        case Condition.STUDENT:
            run_student(exp)
        case Condition.TRANSFER:
            run_transfer_matrix(exp)
        case Condition.FULL:
            run_student(exp)
            run_baseline1(exp)
            run_baseline2(exp)
    return exp.summary()


@dataclass(frozen=True)
class HygieneReport:
    eais_leaks: tuple[tuple[str, str], ...]
    teacher_eais_evaluations: tuple[str, ...]

    @property
    def clean(self) -> bool:
        return not self.eais_leaks and not self.teacher_eais_evaluations


def _loader_logs(exp_dir: Path) -> Iterator[tuple[Path, dict]]:
    for path in sorted(Path(exp_dir).rglob("loaders.json")):
        yield path.parent, json.loads(path.read_text())


def audit_hygiene(exp_dir: Path, bundle: DatasetBundle) -> HygieneReport:
    """EAIS ids fed to any loader, and teacher EAIS evaluations outside baseline 1."""
    eais = bundle.ids(Split.EAIS)
    leaks = []
    for run_dir, loaders in _loader_logs(exp_dir):
        for role in ("train", "val"):
            where = f"{run_dir.relative_to(exp_dir).as_posix()}:{role}"
            leaks.extend((where, i) for i in loaders[role] if i in eais)
    violations = []
    log_path = Path(exp_dir) / "evaluations.jsonl"
    if log_path.is_file():
        for line in log_path.read_text().splitlines():
            entry = json.loads(line)
            on_eais = entry["role"] == "teacher" and entry["split"] == Split.EAIS.value
            if on_eais and entry["purpose"] != Condition.BASELINE1.value:
                violations.append(entry["run"])
    return HygieneReport(tuple(leaks), tuple(violations))


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
