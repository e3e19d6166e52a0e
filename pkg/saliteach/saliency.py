"""Model saliency: CAM (white-box), RISE (black-box) and min-max normalization."""

from __future__ import annotations

import doctest
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .data import RAW_SUFFIX, Provenance, Sample, SalienceMap, read_salience, write_salience
from .errors import ConfigurationError, NumericError, UnsupportedArchitectureError
from .model import Classifier, forward, to_batch

log = logging.getLogger(__name__)

INDEX_EVERY = 64  # maps between index refreshes during generation

ScoreFn = Callable[[np.ndarray], np.ndarray]  # N x H x W x C images -> N scores


class SaliencyMethod(Enum):
    CAM = "cam"
    RISE = "rise"

    @property
    def provenance(self) -> Provenance:
        return Provenance.TEACHER_CAM if self == SaliencyMethod.CAM else Provenance.TEACHER_RISE

    @property
    def default_selector(self) -> ClassSelector:
        """CAM explains the predicted class, RISE scores the true one."""
        return ClassSelector.PREDICTED if self == SaliencyMethod.CAM else ClassSelector.TRUE_LABEL


class ClassSelector(Enum):
    TRUE_LABEL = "true_label"
    PREDICTED = "predicted"


class Upsample(Enum):
    BILINEAR = "bilinear"
    NEAREST = "nearest"


@dataclass(frozen=True)
class RiseConfig:
    num_masks: int = 4000
    grid_size: int = 6
    keep_probability: float = 0.5
    upsample: Upsample = Upsample.BILINEAR
    random_shift: bool = True
    seed: int = 0
    batch_size: int = 500

    def __post_init__(self) -> None:
        if self.num_masks < 1 or self.grid_size < 1 or self.batch_size < 1:
            raise ConfigurationError(
                f"num_masks, grid_size and batch_size must be positive: {self}"
            )
        if not 0 < self.keep_probability < 1:
            raise ConfigurationError(
                f"keep_probability must lie in (0, 1), got {self.keep_probability}"
            )


def normalize_map(raw: np.ndarray, provenance: Provenance = Provenance.TEACHER_CAM) -> SalienceMap:
    """Min-max normalize to [0, 1]; a constant map becomes all zeros.

    >>> normalize_map(np.array([[0, 2], [4, 8]])).grid.tolist()
    [[0.0, 0.25], [0.5, 1.0]]

    >>> float(normalize_map(np.full((3, 3), 7.0)).grid.max())
    0.0

    >>> normalize_map(np.array([[0, np.nan]]))
    Traceback (most recent call last):
    ...
    saliteach.errors.NumericError: saliency map has non-finite entries
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise NumericError("saliency map has non-finite entries")
    lo, hi = raw.min(), raw.max()
    grid = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    return SalienceMap(np.clip(grid, 0, 1), provenance)


def normalize_grid(raw: torch.Tensor) -> torch.Tensor:
    """Differentiable batched min-max over the last two dims (N x h x w).

    >>> normalize_grid(torch.tensor([[[0.0, 2.0], [4.0, 8.0]], [[1.0, 1.0], [1.0, 1.0]]])).tolist()
    [[[0.0, 0.25], [0.5, 1.0]], [[0.0, 0.0], [0.0, 0.0]]]
    """
    lo = raw.amin(dim=(-2, -1), keepdim=True)
    span = raw.amax(dim=(-2, -1), keepdim=True) - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (raw - lo) / safe, torch.zeros_like(raw))


def cam_raw(maps: torch.Tensor, weights: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """Class-weighted sum of feature maps, ``R = sum_f w[c, f] * A_f`` per sample."""
    return torch.einsum("nf,nfhw->nhw", weights[classes], maps)


def cam_batch(
    model: Classifier,
    batch: torch.Tensor,
    classes: torch.Tensor,
    size: tuple[int, int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable normalized CAMs for a batch; returns (logits, N x h x w maps).

    With ``size`` the raw maps are upsampled bilinearly before normalization.
    """
    _check_head(model)
    logits, maps = forward(model, batch)
    raw = cam_raw(maps, model.head.weight, classes)
    if size is not None and tuple(raw.shape[-2:]) != tuple(size):
        raw = F.interpolate(
            raw[:, None], size=tuple(size), mode="bilinear", align_corners=False
        )[:, 0]
    return logits, normalize_grid(raw)


def _check_head(model: nn.Module) -> None:
    if not isinstance(getattr(model, "head", None), nn.Linear) or not hasattr(model, "features"):
        raise UnsupportedArchitectureError(
            f"{type(model).__name__} has no global-average-pooling + linear head"
        )


def cam(
    model: Classifier,
    image: np.ndarray,
    selector: ClassSelector = ClassSelector.PREDICTED,
    label: int | None = None,
) -> SalienceMap:
    """CAM at feature-grid resolution for the true or the predicted class.

    With one feature map ``A = [[1, 3], [2, 0]]`` and class weight 2:

    >>> net = Classifier(nn.Conv2d(1, 1, 2, stride=2, bias=False), nn.Linear(1, 2, bias=False))
    >>> with torch.no_grad():
    ...     _ = net.features.weight.fill_(0.25)
    ...     _ = net.head.weight.copy_(torch.tensor([[2.0], [-1.0]]))
    >>> image = np.kron(np.array([[1.0, 3.0], [2.0, 0.0]]), np.ones((2, 2)))[..., None] / 3
    >>> cam(net, image, ClassSelector.TRUE_LABEL, label=0).grid.astype(float).round(6).tolist()
    [[0.333333, 1.0], [0.666667, 0.0]]

    >>> with torch.no_grad():
    ...     _ = net.head.weight.zero_()
    >>> cam(net, image, ClassSelector.TRUE_LABEL, label=0).grid.tolist()
    [[0.0, 0.0], [0.0, 0.0]]
    """
    _check_head(model)
    if selector == ClassSelector.TRUE_LABEL and label is None:
        raise ConfigurationError("true-label CAM needs the sample's label")
    model.eval()
    with torch.no_grad():
        logits, maps = forward(model, to_batch([image]))
        c = label if selector == ClassSelector.TRUE_LABEL else int(logits.argmax(dim=1))
        raw = cam_raw(maps.double(), model.head.weight.double(), torch.tensor([c]))[0]
    return normalize_map(raw.numpy(), Provenance.TEACHER_CAM)


def _masks(
    grid: np.ndarray, size: tuple[int, int], cfg: RiseConfig, rng: np.random.Generator
) -> np.ndarray:
    """Upsample n x s x s binary grids to n x H x W masks, shifting by up to one cell."""
    n, s, _ = grid.shape
    cell = (math.ceil(size[0] / s), math.ceil(size[1] / s))
    cells = s + 1 if cfg.random_shift else s
    up = F.interpolate(
        torch.from_numpy(grid)[:, None],
        size=(cells * cell[0], cells * cell[1]),
        mode=cfg.upsample.value,
        **({"align_corners": False} if cfg.upsample == Upsample.BILINEAR else {}),
    )[:, 0].numpy()
    if not cfg.random_shift:
        return up[:, : size[0], : size[1]]
    dy, dx = rng.integers(0, cell[0], size=n), rng.integers(0, cell[1], size=n)
    return np.stack([up[i, dy[i] : dy[i] + size[0], dx[i] : dx[i] + size[1]] for i in range(n)])


def rise_raw(score_fn: ScoreFn, image: np.ndarray, cfg: RiseConfig) -> np.ndarray:
    """Unnormalized RISE map ``(1 / (N * p)) * sum_i score(image * M_i) * M_i``.

    >>> image = np.ones((4, 4, 1))
    >>> cfg = RiseConfig(num_masks=50, grid_size=1, upsample=Upsample.NEAREST, random_shift=False)
    >>> raw = rise_raw(lambda batch: np.full(len(batch), 2.0), image, cfg)
    >>> bool((raw == raw[0, 0]).all())
    True
    """
    h, w = image.shape[:2]
    if not 1 <= cfg.grid_size <= min(h, w):
        raise ConfigurationError(f"grid_size {cfg.grid_size} must lie in [1, {min(h, w)}]")
    rng = np.random.default_rng(cfg.seed)
    total = np.zeros((h, w))
    for start in range(0, cfg.num_masks, cfg.batch_size):
        n = min(cfg.batch_size, cfg.num_masks - start)
        cells = rng.random((n, cfg.grid_size, cfg.grid_size))
        grid = (cells < cfg.keep_probability).astype(np.float32)
        masks = _masks(grid, (h, w), cfg, rng)
        scores = np.asarray(score_fn(image[None] * masks[..., None]), dtype=np.float64).reshape(-1)
        if len(scores) != n:
            raise ConfigurationError(
                f"score function returned {len(scores)} scores for {n} masked images"
            )
        if not (ok := np.isfinite(scores)).all():
            bad = start + int(np.argmin(ok))
            raise NumericError(f"score function returned {scores[bad - start]}", index=bad)
        total += np.tensordot(scores, masks, axes=1)
    return total / (cfg.num_masks * cfg.keep_probability)


def rise(score_fn: ScoreFn, image: np.ndarray, cfg: RiseConfig) -> SalienceMap:
    """Normalized RISE map at image resolution.

    >>> image = np.ones((4, 4, 1))
    >>> cfg = RiseConfig(num_masks=50, grid_size=1, upsample=Upsample.NEAREST, random_shift=False)
    >>> smap = rise(lambda batch: np.full(len(batch), 2.0), image, cfg)
    >>> smap.provenance, float(smap.grid.max())
    (<Provenance.TEACHER_RISE: 'teacher_rise'>, 0.0)
    """
    return normalize_map(rise_raw(score_fn, image, cfg), Provenance.TEACHER_RISE)


def model_score_fn(model: Classifier, class_index: int, batch_size: int = 500) -> ScoreFn:
    """Softmax probability of ``class_index``, as a black box over H x W x C images."""
    model.eval()

    def score(images: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                logits, _ = forward(model, to_batch(images[i : i + batch_size]))
                out.append(torch.softmax(logits.double(), dim=1)[:, class_index].numpy())
        return np.concatenate(out)

    return score


def sample_seed(seed: int, sample_id: str) -> int:
    """Independent per-sample seed derived from the config seed and the sample id.

    >>> sample_seed(0, "tais-00001") == sample_seed(0, "tais-00001") != sample_seed(1, "tais-00001")
    True
    """
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SaliencyArchive:
    """Directory of per-sample ``.salf`` maps plus ``index.json``."""

    root: Path
    method: SaliencyMethod
    checkpoint_hash: str
    ids: tuple[str, ...]
    computed: int = 0

    INDEX = "index.json"

    def path(self, sample_id: str) -> Path:
        return map_path(self.root, sample_id)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in set(self.ids)

    def load(self, sample_id: str) -> SalienceMap:
        return read_salience(self.path(sample_id), self.method.provenance)

    def missing(self, ids: Sequence[str]) -> list[str]:
        have = set(self.ids)
        return [i for i in ids if i not in have]

    @classmethod
    def open(cls, root: Path) -> SaliencyArchive:
        root = Path(root)
        index = json.loads((root / cls.INDEX).read_text())
        return cls(
            root,
            SaliencyMethod(index["method"]),
            index["checkpoint_hash"],
            tuple(e["id"] for e in index["entries"]),
        )

    def write_index(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        entries = [
            {
                "id": i,
                "method": self.method.value,
                "checkpoint_hash": self.checkpoint_hash,
                "file": self.path(i).relative_to(self.root).as_posix(),
            }
            for i in sorted(self.ids)
        ]
        payload = {
            "method": self.method.value,
            "checkpoint_hash": self.checkpoint_hash,
            "entries": entries,
        }
        tmp = self.root / f".{self.INDEX}.tmp"
        tmp.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.root / self.INDEX)


def map_path(root: Path, sample_id: str) -> Path:
    return Path(root) / "maps" / f"{sample_id}{RAW_SUFFIX}"


def _confirmed(out_dir: Path, method: SaliencyMethod, checkpoint_hash: str) -> set[str]:
    """Ids whose map on disk is listed by an index of the same method and checkpoint."""
    if not (out_dir / SaliencyArchive.INDEX).exists():
        if any(out_dir.glob(f"maps/*{RAW_SUFFIX}")):
            log.warning("%s holds maps without an index; regenerating", out_dir)
        return set()
    previous = SaliencyArchive.open(out_dir)
    if (previous.method, previous.checkpoint_hash) != (method, checkpoint_hash):
        log.warning(
            "%s holds %s maps of another teacher; regenerating", out_dir, previous.method.value
        )
        return set()
    return {i for i in previous.ids if previous.path(i).exists()}


def generate_teacher_saliency(
    teacher: Classifier,
    samples: Sequence[Sample],
    method: SaliencyMethod,
    out_dir: Path,
    checkpoint_hash: str,
    rise_cfg: RiseConfig | None = None,
    selector: ClassSelector | None = None,
    overwrite: bool = False,
) -> SaliencyArchive:
    """Annotate ``samples`` with teacher saliency, one atomic file per sample.

    The index is rewritten for this teacher before any map is generated and
    only ever lists maps made by it, so an interrupted run resumes where it
    stopped and a run with another teacher regenerates everything. Without a
    ``selector`` the method's default class is explained.
    """
    out_dir = Path(out_dir)
    selector = selector or method.default_selector
    rise_cfg = rise_cfg or RiseConfig()
    done = set() if overwrite else _confirmed(out_dir, method, checkpoint_hash)
    SaliencyArchive(out_dir, method, checkpoint_hash, tuple(done)).write_index()
    teacher.eval()
    computed = 0
    try:
        for s in tqdm(samples, desc=f"{method.value} saliency", disable=None, leave=False):
            if s.id in done:
                continue
            smap = teacher_map(teacher, s, method, rise_cfg, selector)
            write_salience(smap, map_path(out_dir, s.id))
            done.add(s.id)
            computed += 1
            if computed % INDEX_EVERY == 0:
                SaliencyArchive(out_dir, method, checkpoint_hash, tuple(done)).write_index()
    finally:
        archive = SaliencyArchive(
            out_dir, method, checkpoint_hash, tuple(s.id for s in samples if s.id in done), computed
        )
        archive.write_index()
    log.info("%s archive %s: %d maps, %d computed", method.value, out_dir, len(samples), computed)
    return archive


def teacher_map(
    teacher: Classifier,
    sample: Sample,
    method: SaliencyMethod,
    rise_cfg: RiseConfig,
    selector: ClassSelector | None = None,
) -> SalienceMap:
    selector = selector or method.default_selector
    match method:
        case SaliencyMethod.CAM:
            return cam(teacher, sample.image, selector, sample.label)
        case SaliencyMethod.RISE:
            if selector == ClassSelector.TRUE_LABEL:
                c = sample.label
            else:
                c = _predicted(teacher, sample)
            cfg = replace(rise_cfg, seed=sample_seed(rise_cfg.seed, sample.id))
            return rise(model_score_fn(teacher, c, rise_cfg.batch_size), sample.image, cfg)


def _predicted(model: Classifier, sample: Sample) -> int:
    with torch.no_grad():
        logits, _ = forward(model.eval(), to_batch([sample.image]))
    return int(logits.argmax(dim=1))


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
