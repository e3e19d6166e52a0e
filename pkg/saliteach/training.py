"""One training run: SGD with step decay, per-epoch validation AUC, best-epoch checkpoint.

A run directory holds:

    config.yaml    effective config plus the ids and teacher it trained with
    loaders.json   sample ids fed to the train and validation loaders
    metrics.csv    epoch, lr, train_loss, val_auc
    best.pt        checkpoint of the earliest epoch with the highest val AUC
    record.json    TrainedModelRecord
"""

from __future__ import annotations

import csv
import doctest
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.optim import SGD
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, TensorDataset

from .config import dump_yaml, to_plain
from .data import Sample, fit_salience
from .errors import ConfigurationError
from .evaluation import ScoredSet, compute_auc, roc_curve, RocPoint
from .loss import BatchLossInputs, LossConfig, LossKind, batch_loss
from .model import (
    Arch,
    ArchitectureSpec,
    Classifier,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
    to_batch,
)
from .saliency import SaliencyArchive, cam_batch

log = logging.getLogger(__name__)


class ComparisonResolution(Enum):
    FEATURE_GRID = "feature_grid"
    INPUT = "input"


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    base_lr: float = 0.005
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 12
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    saliency_comparison_resolution: ComparisonResolution = ComparisonResolution.FEATURE_GRID
    positive_class: int = 1

    def __post_init__(self) -> None:
        if min(self.max_epochs, self.batch_size, self.lr_decay_every) < 1 or self.base_lr <= 0:
            raise ConfigurationError(
                "max_epochs, base_lr, batch_size and lr_decay_every must be positive"
            )
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError(
                f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}"
            )
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be >= 0")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate used during ``epoch`` (0-based).

    >>> [round(lr_schedule(e, TrainConfig()), 8) for e in (0, 11, 12, 24)]
    [0.005, 0.005, 0.0005, 5e-05]
    """
    assert epoch >= 0
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def best_epoch(history: Sequence[float]) -> tuple[int, float]:
    """Earliest epoch holding the maximum.

    >>> best_epoch([0.6, 0.8, 0.7, 0.8])
    (1, 0.8)
    """
    if not history:
        raise ConfigurationError("empty validation history")
    i = int(np.argmax(history))
    return i, float(history[i])


@dataclass(frozen=True)
class TrainedModelRecord:
    arch_id: Arch
    seed: int
    loss: LossConfig
    checkpoint: str
    checkpoint_hash: str
    val_auc_history: tuple[float, ...]
    train_loss_history: tuple[float, ...]
    selected_epoch: int
    selected_val_auc: float
    run_dir: str = ""

    FILE = "record.json"

    def __post_init__(self) -> None:
        if (self.selected_epoch, self.selected_val_auc) != best_epoch(self.val_auc_history):
            raise ConfigurationError(
                f"{self.run_dir}: selected epoch is not the earliest best validation epoch"
            )

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.run_dir) / self.checkpoint

    @property
    def name(self) -> str:
        return f"{self.arch_id.value}/seed{self.seed}"

    def to_dict(self) -> dict:
        d = to_plain(self)
        d.pop("run_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, run_dir: Path) -> TrainedModelRecord:
        return cls(
            arch_id=Arch.from_str(d["arch_id"]),
            seed=int(d["seed"]),
            loss=LossConfig(LossKind(d["loss"]["kind"]), float(d["loss"]["alpha"])),
            checkpoint=d["checkpoint"],
            checkpoint_hash=d["checkpoint_hash"],
            val_auc_history=tuple(d["val_auc_history"]),
            train_loss_history=tuple(d["train_loss_history"]),
            selected_epoch=int(d["selected_epoch"]),
            selected_val_auc=float(d["selected_val_auc"]),
            run_dir=str(run_dir),
        )

    def save(self) -> None:
        path = Path(self.run_dir) / self.FILE
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, run_dir: Path) -> TrainedModelRecord:
        return cls.from_dict(json.loads((Path(run_dir) / cls.FILE).read_text()), run_dir)

    def load_model(self) -> Classifier:
        return load_checkpoint(self.checkpoint_path)[0]


def score_samples(
    model: Classifier, samples: Sequence[Sample], positive_class: int, batch_size: int = 256
) -> np.ndarray:
    """Softmax probability of ``positive_class`` per sample."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            logits, _ = forward(model, to_batch([s.image for s in samples[i : i + batch_size]]))
            out.append(torch.softmax(logits.double(), dim=1)[:, positive_class].numpy())
    return np.concatenate(out) if out else np.zeros(0)


def scored_set(model: Classifier, samples: Sequence[Sample], positive_class: int) -> ScoredSet:
    return ScoredSet(
        score_samples(model, samples, positive_class),
        np.array([int(s.label == positive_class) for s in samples]),
        f"class {positive_class}",
    )


def evaluate_auc(model: Classifier, samples: Sequence[Sample], positive_class: int = 1) -> float:
    return compute_auc(scored_set(model, samples, positive_class))


def evaluate_roc(
    model: Classifier, samples: Sequence[Sample], positive_class: int = 1
) -> tuple[float, list[RocPoint]]:
    s = scored_set(model, samples, positive_class)
    return compute_auc(s), roc_curve(s)


def _teacher_maps(
    samples: Sequence[Sample], archive: SaliencyArchive | None, target: tuple[int, int]
) -> torch.Tensor:
    missing = [
        s.id for s in samples if s.salience is None and (archive is None or s.id not in archive)
    ]
    if missing:
        raise ConfigurationError(
            f"saliency-guided loss needs maps for {len(missing)} samples"
            f" without one: {missing[:10]}"
        )
    maps = [
        s.salience if s.salience is not None else archive.load(s.id)  # type: ignore[union-attr]
        for s in samples
    ]
    grids = [fit_salience(m, target).grid for m in maps]
    return torch.from_numpy(np.stack(grids).astype(np.float32))


def _fingerprint(
    spec: ArchitectureSpec,
    train: Sequence[Sample],
    val: Sequence[Sample],
    cfg: TrainConfig,
    archive: SaliencyArchive | None,
) -> dict:
    ids = hashlib.sha256(
        "\n".join(s.id for s in train).encode() + b"|" + "\n".join(s.id for s in val).encode()
    )
    if archive is None:
        teacher_saliency = None
    else:
        teacher_saliency = {
            "method": archive.method.value,
            "checkpoint_hash": archive.checkpoint_hash,
        }
    return {
        "arch": spec.to_dict(),
        "train": to_plain(cfg),
        "num_train": len(train),
        "num_val": len(val),
        "ids_sha256": ids.hexdigest(),
        "teacher_saliency": teacher_saliency,
    }


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train_model(
    spec: ArchitectureSpec,
    train: Sequence[Sample],
    val: Sequence[Sample],
    cfg: TrainConfig,
    run_dir: Path,
    teacher_saliency: SaliencyArchive | None = None,
    resume: bool = True,
) -> TrainedModelRecord:
    """Train one model and return the record of its best validation epoch.

    With the saliency-guided loss every training sample needs a map, either
    its own ground-truth salience or an entry in ``teacher_saliency``. A
    finished run with the same fingerprint is reused when ``resume`` is set.
    """
    run_dir = Path(run_dir)
    snapshot = dump_yaml(_fingerprint(spec, train, val, cfg, teacher_saliency))
    finished = (run_dir / TrainedModelRecord.FILE).is_file() and (run_dir / "config.yaml").is_file()
    if resume and finished:
        if (run_dir / "config.yaml").read_text() == snapshot:
            log.info("reusing finished run %s", run_dir)
            return TrainedModelRecord.load(run_dir)
        log.warning("%s holds a run with another config; retraining", run_dir)
    if not train or not val:
        raise ConfigurationError("training and validation sets must be non-empty")

    h, w, _ = spec.input_shape
    if cfg.saliency_comparison_resolution == ComparisonResolution.FEATURE_GRID:
        target = spec.feature_grid
    else:
        target = (h, w)
    guided = cfg.loss.uses_saliency
    images = to_batch([s.image for s in train])
    labels = torch.tensor([s.label for s in train])
    if guided:
        maps = _teacher_maps(train, teacher_saliency, target)
    else:
        maps = torch.zeros(len(train), 1, 1)

    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in (TrainedModelRecord.FILE, "best.pt"):
        (run_dir / stale).unlink(missing_ok=True)
    _write_text(run_dir / "config.yaml", snapshot)
    loaders = {"train": [s.id for s in train], "val": [s.id for s in val]}
    _write_text(run_dir / "loaders.json", json.dumps(loaders, indent=1) + "\n")

    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        TensorDataset(images, labels, maps),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=generator,
    )
    model = build_model(spec, cfg.seed)
    optimizer = SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    scheduler = LambdaLR(optimizer, lambda e: cfg.lr_decay_factor ** (e // cfg.lr_decay_every))

    metrics = io.StringIO()
    writer = csv.writer(metrics, lineterminator="\n")
    writer.writerow(["epoch", "lr", "train_loss", "val_auc"])
    val_history: list[float] = []
    loss_history: list[float] = []
    digest = ""
    for epoch in range(cfg.max_epochs):
        model.train()
        total, count = 0.0, 0
        for xb, yb, mb in loader:
            if guided:
                logits, model_maps = cam_batch(model, xb, yb, target)
                inputs = BatchLossInputs(torch.softmax(logits, dim=1), yb, mb, model_maps)
            else:
                logits, _ = forward(model, xb)
                inputs = BatchLossInputs(torch.softmax(logits, dim=1), yb)
            loss = batch_loss(inputs, cfg.loss)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(yb)
            count += len(yb)
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        val_auc = evaluate_auc(model, val, cfg.positive_class)
        if not val_history or val_auc > max(val_history):
            digest = save_checkpoint(model, run_dir / "best.pt", cfg.seed, epoch)
        val_history.append(val_auc)
        loss_history.append(total / count)
        writer.writerow([epoch, f"{lr:.8g}", f"{total / count:.8f}", f"{val_auc:.8f}"])
        log.debug(
            "%s epoch %d lr %.3g loss %.5f val auc %.4f",
            run_dir.name,
            epoch,
            lr,
            total / count,
            val_auc,
        )
    _write_text(run_dir / "metrics.csv", metrics.getvalue())

    selected, selected_auc = best_epoch(val_history)
    record = TrainedModelRecord(
        spec.arch_id, cfg.seed, cfg.loss, "best.pt", digest,
        tuple(val_history), tuple(loss_history), selected, selected_auc, str(run_dir),
    )
    record.save()
    log.info("%s: best val auc %.4f at epoch %d", run_dir, selected_auc, selected)
    return record


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
