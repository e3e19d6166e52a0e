"""Four small CNN classifiers that all end in global average pooling + linear.

Each stands in for one of the large backbones: ``plain`` (stacked
convolutions), ``residual`` (skip connections), ``separable`` (depthwise
separable convolutions) and ``multibranch`` (parallel branches).
"""

from __future__ import annotations

import doctest
import hashlib
import logging
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputShapeError

log = logging.getLogger(__name__)


class Arch(Enum):
    PLAIN = "plain"
    RESIDUAL = "residual"
    SEPARABLE = "separable"
    MULTIBRANCH = "multibranch"

    @classmethod
    def from_str(cls, s: str) -> Arch:
        try:
            return cls(s)
        except ValueError:
            raise ConfigurationError(
                f"unknown architecture {s!r}, expected one of {[a.value for a in cls]}"
            ) from None

    @property
    def downsampling(self) -> int:
        return {Arch.PLAIN: 4, Arch.RESIDUAL: 4, Arch.SEPARABLE: 4, Arch.MULTIBRANCH: 6}[self]

    @property
    def width(self) -> int:
        return {Arch.PLAIN: 32, Arch.RESIDUAL: 32, Arch.SEPARABLE: 48, Arch.MULTIBRANCH: 40}[self]


@dataclass(frozen=True)
class ArchitectureSpec:
    """Architecture plus the input it accepts; ``input_shape`` is (H, W, C_in).

    >>> spec = ArchitectureSpec(Arch.RESIDUAL, (24, 24, 1), 2)
    >>> spec.feature_grid, spec.num_feature_maps
    ((6, 6), 32)

    >>> ArchitectureSpec(Arch.MULTIBRANCH, (24, 24, 1), 2).feature_grid
    (4, 4)
    """

    arch_id: Arch
    input_shape: tuple[int, int, int]
    num_classes: int

    @property
    def feature_grid(self) -> tuple[int, int]:
        h, w, _ = self.input_shape
        return h // self.arch_id.downsampling, w // self.arch_id.downsampling

    @property
    def num_feature_maps(self) -> int:
        return self.arch_id.width

    def validate(self) -> None:
        """Raise ConfigurationError when the input cannot be reduced to a clean feature grid.

        >>> ArchitectureSpec(Arch.MULTIBRANCH, (20, 20, 1), 2).validate()
        Traceback (most recent call last):
        ...
        saliteach.errors.ConfigurationError: multibranch needs H, W divisible by 6, got (20, 20, 1)
        """
        h, w, c = self.input_shape
        d = self.arch_id.downsampling
        if h % d or w % d or h // d < 1 or w // d < 1:
            raise ConfigurationError(
                f"{self.arch_id.value} needs H, W divisible by {d}, got {self.input_shape}"
            )
        if c < 1 or self.num_classes < 2:
            raise ConfigurationError(
                f"need at least one channel and two classes,"
                f" got {self.input_shape}, {self.num_classes}"
            )

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id.value,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        shape = tuple(d["input_shape"])
        return cls(Arch.from_str(d["arch_id"]), shape, int(d["num_classes"]))  # type: ignore


class Classifier(nn.Module):
    """``features`` produce the last convolutional maps, ``head`` scores their spatial mean."""

    def __init__(
        self, features: nn.Module, head: nn.Linear, spec: ArchitectureSpec | None = None
    ) -> None:
        super().__init__()
        self.features = features
        self.head = head
        self.spec = spec

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.features(x)
        return self.head(maps.mean(dim=(2, 3))), maps


def conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()
    )


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = (
            nn.Identity()
            if stride == 1 and cin == cout
            else nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.body(x) + self.skip(x))


class SeparableConv(nn.Sequential):
    def __init__(self, cin: int, cout: int) -> None:
        super().__init__(
            nn.Conv2d(cin, cin, 3, 1, 1, groups=cin, bias=False),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
        )


class BranchBlock(nn.Module):
    """Four parallel branches (1x1, 3x3, stacked 3x3, pool + 1x1) concatenated."""

    def __init__(self, cin: int, branch: int) -> None:
        super().__init__()
        self.branches = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(cin, branch, 1, bias=False), nn.BatchNorm2d(branch), nn.ReLU()
                ),
                conv_bn(cin, branch),
                nn.Sequential(conv_bn(cin, branch), conv_bn(branch, branch)),
                nn.Sequential(
                    nn.AvgPool2d(3, 1, 1),
                    nn.Conv2d(cin, branch, 1, bias=False),
                    nn.BatchNorm2d(branch),
                    nn.ReLU(),
                ),
            ]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([b(x) for b in self.branches], dim=1)


def _features(arch: Arch, cin: int) -> nn.Module:
    match arch:
        case Arch.PLAIN:
            return nn.Sequential(
                conv_bn(cin, 16),
                conv_bn(16, 16),
                nn.MaxPool2d(2),
                conv_bn(16, 32),
                nn.MaxPool2d(2),
                conv_bn(32, 32),
            )
        case Arch.RESIDUAL:
            return nn.Sequential(
                conv_bn(cin, 16),
                ResidualBlock(16, 16),
                ResidualBlock(16, 32, 2),
                ResidualBlock(32, 32, 2),
            )
        case Arch.SEPARABLE:
            return nn.Sequential(
                conv_bn(cin, 16),
                SeparableConv(16, 32),
                nn.MaxPool2d(2),
                SeparableConv(32, 48),
                nn.MaxPool2d(2),
                SeparableConv(48, 48),
            )
        case Arch.MULTIBRANCH:
            return nn.Sequential(
                conv_bn(cin, 16),
                nn.MaxPool2d(2),
                BranchBlock(16, 8),
                nn.MaxPool2d(3),
                BranchBlock(32, 10),
            )


def build_model(spec: ArchitectureSpec, seed: int) -> Classifier:
    """Build a freshly initialized classifier; equal seeds give equal parameters.

    >>> spec = ArchitectureSpec(Arch.PLAIN, (24, 24, 1), 2)
    >>> a, b = build_model(spec, 7), build_model(spec, 7)
    >>> all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    True

    >>> logits, maps = forward(a.eval(), torch.zeros(5, 1, 24, 24))
    >>> tuple(logits.shape), tuple(maps.shape), bool(torch.isfinite(logits).all())
    ((5, 2), (5, 32, 6, 6), True)
    """
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        features = _features(spec.arch_id, spec.input_shape[2])
        model = Classifier(features, nn.Linear(spec.num_feature_maps, spec.num_classes), spec)
    return model


def forward(model: Classifier, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run a N x C x H x W batch, returning (logits, last feature maps)."""
    if model.spec is not None:
        h, w, c = model.spec.input_shape
        if batch.ndim != 4 or tuple(batch.shape[1:]) != (c, h, w):
            raise InputShapeError(
                f"expected a batch of shape N x {c} x {h} x {w}, got {tuple(batch.shape)}"
            )
    return model(batch)


def to_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack H x W x C images into an N x C x H x W float tensor.

    >>> tuple(to_batch([np.zeros((24, 24, 1))] * 3).shape)
    (3, 1, 24, 24)
    """
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def classifier_weights(model: Classifier, class_index: int) -> torch.Tensor:
    """Row of the final linear layer for one class.

    >>> model = Classifier(nn.Identity(), nn.Linear(2, 2, bias=False))
    >>> with torch.no_grad():
    ...     _ = model.head.weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
    >>> classifier_weights(model, 0).tolist(), classifier_weights(model, 1).tolist()
    ([1.0, 2.0], [3.0, 4.0])

    >>> classifier_weights(model, 2)
    Traceback (most recent call last):
    ...
    IndexError: class index 2 out of range for 2 classes
    """
    n = model.head.out_features
    if not 0 <= class_index < n:
        raise IndexError(f"class index {class_index} out of range for {n} classes")
    return model.head.weight[class_index].detach().clone()


def parameter_count(model: nn.Module) -> int:
    """Number of learnable scalars.

    >>> [parameter_count(build_model(ArchitectureSpec(a, (24, 24, 1), 2), 0)) for a in Arch]
    [16530, 39090, 5746, 10874]
    """
    return sum(p.numel() for p in model.parameters())


def state_hash(model: nn.Module) -> str:
    """sha256 over the parameter and buffer bytes in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: Classifier, path: Path, seed: int, epoch: int) -> str:
    """Write a self-describing checkpoint atomically and return its content hash."""
    assert model.spec is not None, "only registry models can be checkpointed"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = state_hash(model)
    payload = {
        "arch_id": model.spec.arch_id.value,
        "spec": model.spec.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "hash": digest,
        "state_dict": model.state_dict(),
    }
    tmp = path.with_name(f".{path.name}.tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path: Path) -> tuple[Classifier, dict]:
    """Rebuild a classifier from a checkpoint; returns it in eval mode with its metadata."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    spec = ArchitectureSpec.from_dict(payload["spec"])
    model = build_model(spec, payload["seed"])
    model.load_state_dict(payload["state_dict"])
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    if state_hash(model) != meta["hash"]:
        raise ConfigurationError(f"{path}: checkpoint content does not match its recorded hash")
    return model.eval(), meta


def checkpoint_hash(path: Path) -> str:
    return load_checkpoint(path)[1]["hash"]


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
