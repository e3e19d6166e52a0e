"""AUC and ROC metrics, cross-seed aggregation and report files."""

from __future__ import annotations

import csv
import doctest
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UndefinedAUCError

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["condition", "arch", "saliency_method", "alpha", "mean_auc", "std_auc", "n_seeds"]
FPR_GRID = np.linspace(0, 1, 101)


class RocPoint(NamedTuple):
    fpr: float
    tpr: float


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Scores with binary labels (1 = positive class)."""

    scores: np.ndarray
    labels: np.ndarray
    positive_class_meaning: str = "positive"

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if len(scores) != len(labels):
            raise ConfigurationError(f"{len(scores)} scores for {len(labels)} labels")
        if not np.isin(labels, (0, 1)).all():
            raise ConfigurationError("labels must be 0 or 1")
        if not np.isfinite(scores).all():
            raise NumericError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negative(self) -> int:
        return len(self.labels) - self.num_positive

    def check_defined(self) -> None:
        if self.num_positive == 0 or self.num_negative == 0:
            raise UndefinedAUCError(
                f"AUC needs both classes, got {self.num_positive} positive"
                f" and {self.num_negative} negative"
            )


def tied_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing their average rank.

    >>> tied_ranks(np.array([0.3, 0.1, 0.3, 0.7])).tolist()
    [2.5, 1.0, 2.5, 4.0]
    """
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    return (starts + (counts + 1) / 2)[inverse.reshape(-1)]


def compute_auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC, ties between a positive and a negative counted one half.

    >>> compute_auc(ScoredSet([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]))
    0.75
    >>> compute_auc(ScoredSet([0.2] * 4, [1, 0, 1, 0]))
    0.5
    >>> compute_auc(ScoredSet([0.2, 0.3], [1, 1]))
    Traceback (most recent call last):
    ...
    saliteach.errors.UndefinedAUCError: AUC needs both classes, got 2 positive and 0 negative
    """
    s.check_defined()
    p, n = s.num_positive, s.num_negative
    u = tied_ranks(s.scores)[s.labels == 1].sum() - p * (p + 1) / 2
    return float(u / (p * n))


def roc_curve(s: ScoredSet) -> list[RocPoint]:
    """Threshold sweep from (0, 0) to (1, 1), one point per distinct score.

    >>> roc_curve(ScoredSet([0.2] * 4, [1, 0, 1, 0]))
    [RocPoint(fpr=0.0, tpr=0.0), RocPoint(fpr=1.0, tpr=1.0)]
    >>> RocPoint(0.0, 1.0) in roc_curve(ScoredSet([0.9, 0.8, 0.1], [1, 1, 0]))
    True
    """
    s.check_defined()
    order = np.argsort(-s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tps = np.cumsum(labels)[last]
    fps = last + 1 - tps
    fpr = np.r_[0, fps / s.num_negative]
    tpr = np.r_[0, tps / s.num_positive]
    return [RocPoint(float(f), float(t)) for f, t in zip(fpr, tpr)]


def trapezoid_area(curve: Sequence[RocPoint]) -> float:
    """Area under a piecewise-linear curve.

    >>> trapezoid_area(roc_curve(ScoredSet([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])))
    0.75
    """
    fpr = np.array([p.fpr for p in curve])
    tpr = np.array([p.tpr for p in curve])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def aggregate_runs(aucs: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1), std 0 for a single run.

    >>> tuple(round(x, 6) for x in aggregate_runs([0.5, 0.7]))
    (0.6, 0.141421)
    >>> aggregate_runs([0.72])
    (0.72, 0.0)
    """
    if not len(aucs):
        raise UndefinedAUCError("no runs to aggregate")
    values = np.asarray(aucs, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1)) if len(values) > 1 else 0.0


def interpolate_curve(curve: Sequence[RocPoint], grid: np.ndarray) -> np.ndarray:
    """Piecewise-linear TPR at each grid FPR, taking the upper end of vertical steps."""
    fpr = np.array([p.fpr for p in curve])
    tpr = np.array([p.tpr for p in curve])
    idx = np.searchsorted(fpr, grid, side="right") - 1
    out = np.empty(len(grid))
    for i, (x, j) in enumerate(zip(grid, idx)):
        if j >= len(fpr) - 1:
            out[i] = tpr[-1]
        else:
            out[i] = tpr[j] + (x - fpr[j]) * (tpr[j + 1] - tpr[j]) / (fpr[j + 1] - fpr[j])
    return np.clip(out, 0, 1)


@dataclass(frozen=True)
class RocBand:
    fpr_grid: tuple[float, ...]
    mean_tpr: tuple[float, ...]
    std_tpr: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "fpr": list(self.fpr_grid),
            "mean_tpr": list(self.mean_tpr),
            "std_tpr": list(self.std_tpr),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RocBand:
        return cls(tuple(d["fpr"]), tuple(d["mean_tpr"]), tuple(d["std_tpr"]))


def build_roc_band(
    curves: Sequence[Sequence[RocPoint]], fpr_grid: np.ndarray = FPR_GRID
) -> RocBand:
    """Mean and sample std of several ROC curves on a common FPR grid.

    >>> band = build_roc_band([[RocPoint(0, 0), RocPoint(1, 1)]] * 2, np.linspace(0, 1, 5))
    >>> band.mean_tpr, band.std_tpr
    ((0.0, 0.25, 0.5, 0.75, 1.0), (0.0, 0.0, 0.0, 0.0, 0.0))
    """
    if not curves:
        raise UndefinedAUCError("no ROC curves to aggregate")
    grid = np.asarray(fpr_grid, dtype=np.float64)
    tprs = np.stack([interpolate_curve(c, grid) for c in curves])
    std = tprs.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(len(grid))
    return RocBand(tuple(grid.tolist()), tuple(tprs.mean(axis=0).tolist()), tuple(std.tolist()))


@dataclass(frozen=True)
class ConditionSummary:
    """One row of the results table: a cohort's per-seed AUCs under one condition."""

    condition: str
    arch: str
    saliency_method: str
    alpha: float | None
    seeds: tuple[int, ...]
    aucs: tuple[float, ...]
    split: str = "eais"
    teacher: str | None = None
    roc: RocBand | None = None

    @property
    def key(self) -> str:
        return f"{self.condition}__{self.arch}"

    @property
    def mean_auc(self) -> float:
        return aggregate_runs(self.aucs)[0]

    @property
    def std_auc(self) -> float:
        return aggregate_runs(self.aucs)[1]

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "arch": self.arch,
            "saliency_method": self.saliency_method,
            "alpha": self.alpha,
            "seeds": list(self.seeds),
            "aucs": list(self.aucs),
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "n_seeds": len(self.aucs),
            "split": self.split,
            "teacher": self.teacher,
            "roc": self.roc.to_dict() if self.roc else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConditionSummary:
        return cls(
            d["condition"],
            d["arch"],
            d["saliency_method"],
            d["alpha"],
            tuple(d["seeds"]),
            tuple(d["aucs"]),
            d.get("split", "eais"),
            d.get("teacher"),
            RocBand.from_dict(d["roc"]) if d.get("roc") else None,
        )


@dataclass(frozen=True)
class ExperimentSummary:
    name: str
    config_hash: str
    conditions: tuple[ConditionSummary, ...] = ()
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "conditions": [c.to_dict() for c in self.conditions],
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSummary:
        return cls(
            d["name"],
            d["config_hash"],
            tuple(ConditionSummary.from_dict(c) for c in d["conditions"]),
            d.get("notes", {}),
        )

    def find(self, condition: str, arch: str | None = None) -> ConditionSummary:
        for c in self.conditions:
            if c.condition == condition and arch in (None, c.arch):
                return c
        raise KeyError(f"no {condition} condition for {arch or 'any arch'}")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def results_csv(summary: ExperimentSummary) -> str:
    """Render the results table.

    >>> row = ConditionSummary("baseline2", "plain", "none", None, (0, 1), (0.5, 0.7))
    >>> print(results_csv(ExperimentSummary("toy", "abc", (row,))), end="")
    condition,arch,saliency_method,alpha,mean_auc,std_auc,n_seeds
    baseline2,plain,none,,0.600000,0.141421,2
    """
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for c in summary.conditions:
        alpha = "" if c.alpha is None else f"{c.alpha:g}"
        row = [c.condition, c.arch, c.saliency_method, alpha, _fmt(c.mean_auc), _fmt(c.std_auc)]
        w.writerow([*row, len(c.aucs)])
    return out.getvalue()


def band_csv(band: RocBand) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["fpr", "mean_tpr", "std_tpr"])
    for row in zip(band.fpr_grid, band.mean_tpr, band.std_tpr):
        w.writerow([_fmt(v) for v in row])
    return out.getvalue()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def emit_report(summary: ExperimentSummary, exp_dir: Path, json_only: bool = False) -> list[Path]:
    """Write ``summary.json`` plus, unless ``json_only``, ``results.csv`` and ``roc/*.csv``."""
    exp_dir = Path(exp_dir)
    payload = json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"
    written = [_write(exp_dir / "summary.json", payload)]
    if not json_only:
        written.append(_write(exp_dir / "results.csv", results_csv(summary)))
        for c in summary.conditions:
            if c.roc is not None:
                written.append(_write(exp_dir / "roc" / f"{c.key}.csv", band_csv(c.roc)))
    log.info("report: %s", ", ".join(str(p.relative_to(exp_dir)) for p in written))
    return written


def load_summary(exp_dir: Path) -> ExperimentSummary:
    path = Path(exp_dir) / "summary.json"
    if not path.is_file():
        raise ConfigurationError(f"{exp_dir} holds no summary.json; run an experiment there first")
    return ExperimentSummary.from_dict(json.loads(path.read_text()))


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
