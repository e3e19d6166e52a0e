"""Planted-salience datasets, manifest ingestion and salience map files.

A bundle has four id-disjoint splits: ``tait_train`` (annotated, trains the
teachers), ``tait_val`` (validates teachers and students), ``tais`` (large,
unannotated, trains the students) and ``eais`` (test set).
"""

from __future__ import annotations

import doctest
import errno
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, InvalidSpecError, ManifestFormatError, NumericError

log = logging.getLogger(__name__)

RAW_MAGIC = b"SALMAP01"  # 8 bytes magic + uint32 h + uint32 w = 16-byte header
RAW_SUFFIX = ".salf"


class Provenance(Enum):
    GROUND_TRUTH = "ground_truth"
    TEACHER_CAM = "teacher_cam"
    TEACHER_RISE = "teacher_rise"


class Split(Enum):
    TAIT_TRAIN = "tait_train"
    TAIT_VAL = "tait_val"
    TAIS = "tais"
    EAIS = "eais"

    @classmethod
    def from_str(cls, s: str) -> Split:
        """Return the split for a manifest tag.

        >>> Split.from_str("tais")
        <Split.TAIS: 'tais'>

        >>> Split.from_str("test")
        Traceback (most recent call last):
        ...
        saliteach.errors.ManifestFormatError: unknown split tag 'test'
        """
        try:
            return cls(s)
        except ValueError:
            raise ManifestFormatError(f"unknown split tag {s!r}") from None


class ResizeMode(Enum):
    AREA_AVERAGE = "area_average"
    BILINEAR = "bilinear"


class Region(NamedTuple):
    """Rectangle of pixels, ``top``/``left`` inclusive, sizes in pixels."""

    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def overlaps(self, other: Region) -> bool:
        """Tell whether two regions share at least one pixel.

        >>> Region(2, 2, 7, 7).overlaps(Region(8, 8, 4, 4))
        True

        >>> Region(2, 2, 7, 7).overlaps(Region(9, 2, 4, 4))
        False
        """
        return not (
            self.top + self.height <= other.top
            or other.top + other.height <= self.top
            or self.left + self.width <= other.left
            or other.left + other.width <= self.left
        )

    def fits(self, height: int, width: int) -> bool:
        return (
            self.top >= 0
            and self.left >= 0
            and self.height >= 1
            and self.width >= 1
            and self.top + self.height <= height
            and self.left + self.width <= width
        )


@dataclass(frozen=True, eq=False)
class SalienceMap:
    """A 2D grid of reals in [0, 1] plus where it came from.

    >>> m = SalienceMap(np.ones((7, 7)))
    >>> m.resolution, m.provenance, float(m.grid.sum())
    ((7, 7), <Provenance.GROUND_TRUTH: 'ground_truth'>, 49.0)

    >>> SalienceMap(np.array([[0.5, 1.5]]))
    Traceback (most recent call last):
    ...
    saliteach.errors.NumericError: salience values outside [0, 1]
    """

    grid: np.ndarray
    provenance: Provenance = Provenance.GROUND_TRUTH

    def __post_init__(self) -> None:
        grid = np.array(self.grid, dtype=np.float32)
        if grid.ndim != 2 or min(grid.shape) < 1:
            raise InvalidSpecError(
                f"salience grid must be a non-empty matrix, got shape {grid.shape}"
            )
        if not np.isfinite(grid).all():
            raise NumericError("salience values must be finite")
        if grid.min() < 0 or grid.max() > 1:
            raise NumericError("salience values outside [0, 1]")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore

    def equals(self, other: SalienceMap) -> bool:
        return self.provenance == other.provenance and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True, eq=False)
class Sample:
    """One image (H x W x C, values in [0, 1]) with its label."""

    id: str
    image: np.ndarray
    label: int
    salience: SalienceMap | None = None

    def __post_init__(self) -> None:
        image = np.array(self.image, dtype=np.float32)
        if image.ndim == 2:
            image = image[..., None]
        if image.ndim != 3:
            raise InvalidSpecError(f"{self.id}: image must be H x W x C, got shape {image.shape}")
        if not np.isfinite(image).all():
            raise NumericError(f"{self.id}: image values must be finite")
        if image.min() < 0 or image.max() > 1:
            raise NumericError(f"{self.id}: image values outside [0, 1]")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)

    def without_salience(self) -> Sample:
        return Sample(self.id, self.image, self.label)


@dataclass(frozen=True)
class DatasetBundle:
    """The four named splits of one task over disjoint samples."""

    tait_train: tuple[Sample, ...]
    tait_val: tuple[Sample, ...]
    tais: tuple[Sample, ...]
    eais: tuple[Sample, ...]
    num_classes: int
    task_name: str = "planted"

    def __post_init__(self) -> None:
        seen: dict[str, Split] = {}
        for split, samples in self.items():
            for s in samples:
                if s.id in seen:
                    raise InvalidSpecError(
                        f"sample {s.id!r} appears in {seen[s.id].value} and {split.value}"
                    )
                seen[s.id] = split
                if not 0 <= s.label < self.num_classes:
                    raise InvalidSpecError(
                        f"sample {s.id!r} has label {s.label} >= {self.num_classes}"
                    )
        if missing := [s.id for s in self.tait_train if s.salience is None]:
            raise InvalidSpecError(f"tait_train samples without salience: {missing[:10]}")

    def split(self, split: Split) -> tuple[Sample, ...]:
        return getattr(self, split.value)

    def items(self) -> Iterator[tuple[Split, tuple[Sample, ...]]]:
        for split in Split:
            yield split, self.split(split)

    def ids(self, split: Split) -> set[str]:
        return {s.id for s in self.split(split)}

    def class_counts(self, split: Split) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.split(split):
            counts[s.label] += 1
        return counts

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.tait_train[0].image.shape  # type: ignore


@dataclass(frozen=True)
class CausalPatch:
    """Stripe texture that decides the label; class ``c`` uses orientation ``pi * c / C``."""

    region: Region = Region(2, 2, 7, 7)
    period: float = 4.0
    contrast: float = 0.3


@dataclass(frozen=True)
class SpuriousCue:
    """Flat block whose intensity encodes a class; ``levels`` defaults to an even spread."""

    region: Region = Region(12, 12, 12, 12)
    levels: tuple[float, ...] | None = None

    def level_table(self, num_classes: int) -> tuple[float, ...]:
        """Intensity per class.

        >>> SpuriousCue().level_table(2)
        (0.15, 0.85)
        """
        if self.levels is not None:
            return tuple(self.levels)
        return tuple(round(0.15 + 0.7 * c / (num_classes - 1), 6) for c in range(num_classes))


@dataclass(frozen=True)
class PlantedTaskSpec:
    """Recipe for a synthetic task whose label lives in one region and a shortcut in another.

    With the defaults the cue block is larger and cleaner than the stripes, so
    a model trained on labels alone picks the cue up first.
    """

    image_size: tuple[int, int] = (24, 24)
    num_per_split: tuple[int, int, int, int] = (100, 100, 600, 200)
    causal_patch: CausalPatch = field(default_factory=CausalPatch)
    spurious_cue: SpuriousCue = field(default_factory=SpuriousCue)
    spurious_correlation_train: float = 0.95
    spurious_correlation_eais: float = 0.0
    noise_std: float = 0.2
    seed: int = 0
    num_classes: int = 2
    channels: int = 1
    background: float = 0.5
    name: str = "planted"

    def validate(self) -> None:
        """Raise InvalidSpecError naming the offending fields.

        >>> PlantedTaskSpec(spurious_cue=SpuriousCue(Region(5, 5, 6, 6))).validate()
        Traceback (most recent call last):
        ...
        saliteach.errors.InvalidSpecError: causal_patch.region and spurious_cue.region overlap
        """
        h, w = self.image_size
        if h < 1 or w < 1:
            raise InvalidSpecError(f"image_size must be positive, got {self.image_size}")
        if len(self.num_per_split) != 4 or min(self.num_per_split) < 1:
            raise InvalidSpecError(
                f"num_per_split needs four positive sizes, got {self.num_per_split}"
            )
        if self.num_classes < 2:
            raise InvalidSpecError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.channels not in (1, 3):
            raise InvalidSpecError(f"channels must be 1 or 3, got {self.channels}")
        regions = {
            "causal_patch.region": self.causal_patch.region,
            "spurious_cue.region": self.spurious_cue.region,
        }
        for name, region in regions.items():
            if not region.fits(h, w):
                raise InvalidSpecError(f"{name} {tuple(region)} does not fit a {h}x{w} image")
        if self.causal_patch.region.overlaps(self.spurious_cue.region):
            raise InvalidSpecError("causal_patch.region and spurious_cue.region overlap")
        for name in ["spurious_correlation_train", "spurious_correlation_eais", "background"]:
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidSpecError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.noise_std < 0:
            raise InvalidSpecError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.causal_patch.period <= 0:
            raise InvalidSpecError(
                f"causal_patch.period must be positive, got {self.causal_patch.period}"
            )
        levels = self.spurious_cue.level_table(self.num_classes)
        if len(levels) != self.num_classes or not all(0 <= v <= 1 for v in levels):
            raise InvalidSpecError(f"spurious_cue.levels needs {self.num_classes} values in [0, 1]")


def generate_planted_dataset(spec: PlantedTaskSpec) -> DatasetBundle:
    """Generate the four splits of a planted-salience task.

    >>> bundle = generate_planted_dataset(PlantedTaskSpec(num_per_split=(10, 10, 60, 20)))
    >>> [len(samples) for _, samples in bundle.items()]
    [10, 10, 60, 20]

    >>> bundle.class_counts(Split.TAIS)
    [30, 30]

    >>> {float(s.salience.grid.sum()) for s in bundle.tait_train}
    {49.0}

    >>> any(s.salience for s in bundle.tais)
    False
    """
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(len(Split))
    splits = {}
    for (split, n), seq in zip(zip(Split, spec.num_per_split), children):
        if split == Split.EAIS:
            corr = spec.spurious_correlation_eais
        else:
            corr = spec.spurious_correlation_train
        rng = np.random.default_rng(seq)
        splits[split.value] = tuple(_planted_split(spec, split, n, corr, rng))
    return DatasetBundle(**splits, num_classes=spec.num_classes, task_name=spec.name)


def _planted_split(
    spec: PlantedTaskSpec, split: Split, n: int, corr: float, rng: np.random.Generator
) -> Iterator[Sample]:
    h, w, k = *spec.image_size, spec.num_classes
    labels = rng.permutation(np.arange(n) % k)
    agree = rng.random(n) < corr
    cue = np.where(agree, labels, (labels + rng.integers(1, k, size=n)) % k)
    phases = rng.uniform(0, 2 * math.pi, size=n)
    shape = (n, h, w, spec.channels)
    noise = rng.normal(0, spec.noise_std, size=shape) if spec.noise_std else np.zeros(shape)
    levels = spec.spurious_cue.level_table(k)
    causal, cued = spec.causal_patch.region.slices, spec.spurious_cue.region.slices
    gt = np.zeros((h, w), dtype=np.float32)
    gt[causal] = 1
    for i in range(n):
        image = np.full((h, w, spec.channels), spec.background)
        image[causal] = _stripes(spec.causal_patch, labels[i], k, phases[i])[..., None]
        image[cued] = levels[cue[i]]
        image = quantize(np.clip(image + noise[i], 0, 1))
        salience = SalienceMap(gt) if split == Split.TAIT_TRAIN else None
        yield Sample(f"{split.value}-{i:05d}", image, int(labels[i]), salience)


def _stripes(patch: CausalPatch, label: int, num_classes: int, phase: float) -> np.ndarray:
    """Sinusoidal grating whose orientation encodes the label.

    >>> g = _stripes(CausalPatch(Region(0, 0, 4, 4), period=4, contrast=1), 0, 2, 0.0)
    >>> g[:, 0].round(3).tolist(), bool((g == g[:, :1]).all())
    ([1.0, 0.5, 0.0, 0.5], True)
    """
    theta = math.pi * label / num_classes
    rows, cols = np.mgrid[0 : patch.region.height, 0 : patch.region.width]
    t = rows * math.cos(theta) + cols * math.sin(theta)
    return 0.5 + patch.contrast / 2 * np.cos(2 * math.pi * t / patch.period + phase)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap values onto the 8-bit grid so PNG files reproduce them exactly.

    >>> q = quantize(np.array([0.0, 0.5, 1.0]))
    >>> (q * 255).round().tolist(), bool((quantize(q) == q).all())
    ([0.0, 128.0, 255.0], True)
    """
    return (np.round(image * 255) / 255).astype(np.float32)


def resize_salience(
    smap: SalienceMap, target: tuple[int, int], mode: ResizeMode = ResizeMode.AREA_AVERAGE
) -> SalienceMap:
    """Resample a salience map; results stay within [0, 1].

    >>> m = SalienceMap(np.full((4, 4), 0.5))
    >>> resize_salience(m, (2, 2)).grid.tolist()
    [[0.5, 0.5], [0.5, 0.5]]

    >>> resize_salience(SalienceMap(np.eye(2)), (1, 1)).grid.tolist()
    [[0.5]]

    >>> resize_salience(m, (4, 4)) is m
    True
    """
    if min(target) < 1:
        raise InvalidSpecError(f"target resolution must be positive, got {target}")
    if tuple(target) == smap.resolution:
        return smap
    return SalienceMap(resample_grid(smap.grid, target, mode), smap.provenance)


def resample_grid(grid: np.ndarray, target: tuple[int, int], mode: ResizeMode) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float32))[None, None]
    match mode:
        case ResizeMode.AREA_AVERAGE:
            out = F.adaptive_avg_pool2d(t, tuple(target))
        case ResizeMode.BILINEAR:
            out = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)
    return out[0, 0].clamp(0, 1).numpy()


def fit_salience(smap: SalienceMap, target: tuple[int, int]) -> SalienceMap:
    """Area-average when shrinking in both directions, bilinear otherwise.

    >>> fit_salience(SalienceMap(np.ones((24, 24))), (6, 6)).resolution
    (6, 6)
    """
    h, w = smap.resolution
    shrink = target[0] <= h and target[1] <= w
    return resize_salience(smap, target, ResizeMode.AREA_AVERAGE if shrink else ResizeMode.BILINEAR)


def read_image(path: Path) -> np.ndarray:
    with Image.open(_existing(path)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255
    return arr[..., None] if arr.ndim == 2 else arr


def write_image(image: np.ndarray, path: Path) -> None:
    pixels = np.round(np.asarray(image) * 255).astype(np.uint8)
    if pixels.shape[-1] == 1:
        pixels = pixels[..., 0]
    _atomic(path, lambda tmp: Image.fromarray(pixels).save(tmp, format="PNG"))


def read_salience(path: Path, provenance: Provenance = Provenance.GROUND_TRUTH) -> SalienceMap:
    """Load a salience file: 8-bit PNG (``s = v / 255``) or the raw float32 grid."""
    path = _existing(path)
    if path.suffix == RAW_SUFFIX:
        payload = path.read_bytes()
        if len(payload) < 16 or payload[:8] != RAW_MAGIC:
            raise ManifestFormatError(f"{path}: not a raw salience file")
        h, w = struct.unpack("<II", payload[8:16])
        if len(payload) != 16 + 4 * h * w:
            raise ManifestFormatError(f"{path}: expected {h}x{w} floats after the header")
        return SalienceMap(np.frombuffer(payload, dtype="<f4", offset=16).reshape(h, w), provenance)
    with Image.open(path) as im:
        return SalienceMap(np.asarray(im.convert("L"), dtype=np.float32) / 255, provenance)


def write_salience(smap: SalienceMap, path: Path) -> None:
    """Write a salience map atomically; ``.salf`` is lossless, anything else is an 8-bit PNG."""
    path = Path(path)
    if path.suffix == RAW_SUFFIX:
        h, w = smap.resolution
        payload = RAW_MAGIC + struct.pack("<II", h, w) + smap.grid.astype("<f4").tobytes()
        _atomic(path, lambda tmp: Path(tmp).write_bytes(payload))
    else:
        pixels = np.round(smap.grid * 255).astype(np.uint8)
        _atomic(path, lambda tmp: Image.fromarray(pixels).save(tmp, format="PNG"))


def merge_salience(maps: list[SalienceMap]) -> SalienceMap:
    """Pixel-wise mean of several annotators' maps, clamped to [0, 1].

    >>> maps = [SalienceMap(np.ones((1, 2))), SalienceMap(np.array([[0.0, 1.0]]))]
    >>> merge_salience(maps).grid.tolist()
    [[0.5, 1.0]]
    """
    shapes = {m.resolution for m in maps}
    if len(shapes) != 1:
        raise ManifestFormatError(
            f"salience maps of one sample disagree in shape: {sorted(shapes)}"
        )
    return SalienceMap(np.clip(np.mean([m.grid for m in maps], axis=0), 0, 1), maps[0].provenance)


def load_manifest(
    path: Path, filter_correct: bool = False, num_classes: int | None = None
) -> DatasetBundle:
    """Read a JSON-lines manifest into a bundle.

    Each line holds ``id``, ``split``, ``image_path``, ``label`` and optionally
    ``salience_path`` (a path or a list of paths) and ``annotator_correct``.
    Relative paths resolve against the manifest's directory. With
    ``filter_correct`` annotated samples flagged incorrect are dropped.
    """
    path = _existing(Path(path))
    splits: dict[Split, list[Sample]] = {s: [] for s in Split}
    dropped = 0
    for lineno, record in _records(path):
        where = f"{path}:{lineno}"
        split = Split.from_str(str(record["split"]))
        image = read_image(path.parent / record["image_path"])
        if not isinstance(record["label"], int) or record["label"] < 0:
            raise ManifestFormatError(f"{where}: label must be a non-negative integer")
        salience = None
        if sources := record.get("salience_path"):
            if split in (Split.TAIS, Split.EAIS):
                log.warning("%s: ignoring salience listed for a %s sample", where, split.value)
            else:
                if isinstance(sources, str):
                    sources = [sources]
                maps = [read_salience(path.parent / p) for p in sources]
                salience = _fit_to_image(merge_salience(maps), image.shape[:2], where)
        elif split == Split.TAIT_TRAIN:
            raise ManifestFormatError(
                f"{where}: tait_train sample {record['id']!r} lacks salience_path"
            )
        if filter_correct and salience is not None and record.get("annotator_correct") is False:
            dropped += 1
            continue
        splits[split].append(Sample(str(record["id"]), image, record["label"], salience))
    if dropped:
        log.info("dropped %d annotated samples marked incorrect by the annotator", dropped)
    labels = [s.label for samples in splits.values() for s in samples]
    if not labels:
        raise ManifestFormatError(f"{path}: manifest lists no samples")
    return DatasetBundle(
        **{split.value: tuple(samples) for split, samples in splits.items()},
        num_classes=num_classes or max(max(labels) + 1, 2),
        task_name=path.parent.name,
    )


def _records(path: Path) -> Iterator[tuple[int, dict]]:
    required = {"id", "split", "image_path", "label"}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestFormatError(f"{path}:{lineno}: {e.msg}") from e
        if not isinstance(record, dict):
            raise ManifestFormatError(f"{path}:{lineno}: missing fields {sorted(required)}")
        if missing := required - record.keys():
            raise ManifestFormatError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        yield lineno, record


def _fit_to_image(smap: SalienceMap, shape: tuple[int, int], where: str) -> SalienceMap:
    (h, w), (H, W) = smap.resolution, shape
    if h * W != w * H:
        raise ManifestFormatError(f"{where}: salience {h}x{w} cannot be resized to image {H}x{W}")
    return fit_salience(smap, (H, W))


def write_bundle(bundle: DatasetBundle, out_dir: Path, force: bool = False) -> Path:
    """Materialize a bundle as PNG files plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.jsonl"
    if manifest.exists() and not force:
        raise ConfigurationError(f"{manifest} already exists (use --force to overwrite)")
    lines = []
    for split, samples in bundle.items():
        for s in samples:
            record = {
                "id": s.id,
                "split": split.value,
                "image_path": f"images/{s.id}.png",
                "label": s.label,
            }
            write_image(s.image, out_dir / record["image_path"])
            if s.salience is not None:
                record["salience_path"] = f"salience/{s.id}.png"
                write_salience(s.salience, out_dir / record["salience_path"])
            lines.append(json.dumps(record, sort_keys=True))
    _atomic(manifest, lambda tmp: Path(tmp).write_text("\n".join(lines) + "\n"))
    log.info("wrote %d samples to %s", len(lines), out_dir)
    return manifest


def _existing(path: Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(errno.ENOENT, "no such file", str(path))
    return path


def _atomic(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    write(tmp)
    os.replace(tmp, path)


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
