"""Saliency-guided training loss and the plain cross-entropy it reduces to.

Per sample ``k`` of a batch of ``K``:

    (1 - alpha) * ||s_teacher_k - s_model_k||^2 + alpha * -log p_k[y_k]

averaged over the batch. The squared norm is summed over map elements.
"""

from __future__ import annotations

import doctest
from dataclasses import dataclass
from enum import Enum

import torch

from .errors import ConfigurationError, InputShapeError, NumericError

EPS = 1e-12


class LossKind(Enum):
    CYBORG = "cyborg"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class LossConfig:
    """``alpha`` weighs the classification term; it is ignored for cross-entropy.

    >>> LossConfig(alpha=1.5)
    Traceback (most recent call last):
    ...
    saliteach.errors.ConfigurationError: alpha must lie in [0, 1], got 1.5
    """

    kind: LossKind = LossKind.CYBORG
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def uses_saliency(self) -> bool:
        return self.kind == LossKind.CYBORG

    def label(self) -> str:
        return f"cyborg-a{self.alpha:g}" if self.uses_saliency else "ce"


@dataclass(frozen=True)
class BatchLossInputs:
    """Softmax rows (N x C), labels (N) and, for the saliency term, N x h x w maps."""

    class_probabilities: torch.Tensor
    labels: torch.Tensor
    teacher_maps: torch.Tensor | None = None
    model_maps: torch.Tensor | None = None

    def validate(self) -> None:
        p, y = self.class_probabilities, self.labels
        if p.ndim != 2 or y.shape != (p.shape[0],):
            raise InputShapeError(
                f"need N x C probabilities and N labels, got {tuple(p.shape)} and {tuple(y.shape)}"
            )
        with torch.no_grad():
            off_simplex = (p < 0).any() or ((p.sum(dim=1) - 1).abs() > 1e-6).any()
            if not torch.isfinite(p).all() or off_simplex:
                raise NumericError("class probability rows must be non-negative and sum to 1")
            if ((y < 0) | (y >= p.shape[1])).any():
                raise InputShapeError(f"labels must lie in [0, {p.shape[1]})")
        if (self.teacher_maps is None) != (self.model_maps is None):
            raise InputShapeError("teacher_maps and model_maps must be given together")
        if self.teacher_maps is not None:
            t, m = self.teacher_maps, self.model_maps
            if t.shape != m.shape or t.ndim != 3 or t.shape[0] != p.shape[0]:
                raise InputShapeError(
                    f"maps must both be N x h x w for N={p.shape[0]},"
                    f" got {tuple(t.shape)} and {tuple(m.shape)}"
                )
            with torch.no_grad():
                for name, maps in [("teacher", t), ("model", m)]:
                    if (maps < 0).any() or (maps > 1).any():
                        raise NumericError(f"{name} maps outside [0, 1]")


def saliency_term(teacher_map: torch.Tensor, model_map: torch.Tensor) -> torch.Tensor:
    """Sum of squared element-wise differences over the last two dimensions.

    >>> saliency_term(torch.ones(7, 7), torch.zeros(7, 7)).item()
    49.0
    >>> saliency_term(torch.tensor([[0.5, 0.0]]), torch.tensor([[0.0, 0.5]])).item()
    0.5
    >>> saliency_term(torch.ones(2, 2), torch.ones(3, 3))
    Traceback (most recent call last):
    ...
    saliteach.errors.InputShapeError: saliency maps differ in shape: (2, 2) vs (3, 3)
    """
    if teacher_map.shape != model_map.shape:
        raise InputShapeError(
            f"saliency maps differ in shape: {tuple(teacher_map.shape)} vs {tuple(model_map.shape)}"
        )
    return (teacher_map - model_map).square().sum(dim=(-2, -1))


def _nll(probabilities: torch.Tensor, labels: torch.Tensor, eps: float) -> torch.Tensor:
    picked = probabilities.gather(1, labels.long()[:, None])[:, 0]
    return -picked.clamp_min(eps).log()


def cross_entropy(
    probabilities: torch.Tensor, labels: torch.Tensor, eps: float = EPS
) -> torch.Tensor:
    """Mean negative log-probability of the true class.

    >>> round(cross_entropy(torch.tensor([[0.5, 0.5]]), torch.tensor([1])).item(), 6)
    0.693147
    >>> p = torch.tensor([[0.5, 0.5], [0.75, 0.25]], dtype=torch.float64)
    >>> round(cross_entropy(p, torch.tensor([0, 1])).item(), 6)
    1.039721
    """
    BatchLossInputs(probabilities, labels).validate()
    return _nll(probabilities, labels, eps).mean()


def cyborg_loss(inputs: BatchLossInputs, cfg: LossConfig, eps: float = EPS) -> torch.Tensor:
    """Batch mean of the alpha-weighted saliency and classification penalties.

    >>> inputs = BatchLossInputs(
    ...     torch.tensor([[0.5, 0.5]], dtype=torch.float64),
    ...     torch.tensor([0]),
    ...     torch.tensor([[[0.2]]], dtype=torch.float64),
    ...     torch.tensor([[[0.0]]], dtype=torch.float64),
    ... )
    >>> round(cyborg_loss(inputs, LossConfig(alpha=0.5)).item(), 6)
    0.366574
    """
    if cfg.kind != LossKind.CYBORG:
        raise ConfigurationError(f"cyborg_loss called with a {cfg.kind.value} config")
    inputs.validate()
    if inputs.teacher_maps is None:
        raise InputShapeError("the saliency-guided loss needs teacher and model maps")
    s = saliency_term(inputs.teacher_maps, inputs.model_maps)
    ce = _nll(inputs.class_probabilities, inputs.labels, eps)
    return ((1 - cfg.alpha) * s + cfg.alpha * ce).mean()


def batch_loss(inputs: BatchLossInputs, cfg: LossConfig) -> torch.Tensor:
    """Dispatch on ``cfg.kind``; cross-entropy ignores any maps."""
    match cfg.kind:
        case LossKind.CYBORG:
            return cyborg_loss(inputs, cfg)
        case LossKind.CROSS_ENTROPY:
            return cross_entropy(inputs.class_probabilities, inputs.labels)


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
