"""Loss functions for the pyramid: per-level reconstruction + hinge
adversarial terms, combined by per-level weights.

All functions are pure and operate on torch tensors of any matching shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ShapeError

__all__ = [
    "LossWeights",
    "LossReport",
    "recon_loss",
    "gen_hinge",
    "disc_hinge",
    "layer_loss",
    "pyramid_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Reconstruction weight and per-level totals weights.

    The bottom level gets a large weight by default because its error
    signal travels the longest path through the stack.
    """

    alpha: float = 1.0
    lambdas: tuple = (10.0, 1.0, 1.0)

    def __post_init__(self):
        if self.alpha < 0 or any(l < 0 for l in self.lambdas):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def for_levels(cls, levels: int, alpha: float = 1.0) -> "LossWeights":
        return cls(alpha=alpha, lambdas=(10.0,) + (1.0,) * (levels - 1))


@dataclass
class LossReport:
    """Per-level loss terms plus the weighted generator total."""

    recon: list = field(default_factory=list)
    gen_adv: list = field(default_factory=list)
    disc: list = field(default_factory=list)
    total_generator: float = 0.0

    def to_record(self) -> dict:
        return {
            "recon": [float(x) for x in self.recon],
            "gen_adv": [float(x) for x in self.gen_adv],
            "disc": [float(x) for x in self.disc],
            "total_generator": float(self.total_generator),
        }

    def is_finite(self) -> bool:
        import math

        vals = list(self.recon) + list(self.gen_adv) + list(self.disc)
        vals.append(self.total_generator)
        return all(math.isfinite(v) for v in vals)


def recon_loss(generated: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    if generated.shape != truth.shape:
        raise ShapeError(
            f"recon_loss shapes differ: {tuple(generated.shape)} vs {tuple(truth.shape)}"
        )
    return (generated - truth).abs().mean()


def gen_hinge(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator adversarial term: negated mean critic score on fakes."""
    return -fake_scores.mean()


def disc_hinge(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Margin loss: reals pushed above +1, fakes below -1."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def layer_loss(recon, gen_adv, alpha: float):
    """One level's generator loss: adversarial term plus weighted L1."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return gen_adv + alpha * recon


def pyramid_loss(layer_losses, weights: LossWeights):
    """Weighted sum of per-level losses."""
    if len(layer_losses) != len(weights.lambdas):
        raise ValueError(
            f"{len(layer_losses)} layer losses but {len(weights.lambdas)} lambdas"
        )
    total = None
    for lam, loss in zip(weights.lambdas, layer_losses):
        term = lam * loss
        total = term if total is None else total + term
    return total
