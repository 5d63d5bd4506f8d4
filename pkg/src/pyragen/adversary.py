"""Per-level patch discriminators.

Every level gets its own critic with the same topology: a stack of
spectral-normalized stride-2 convolutions with leaky activations and a
linear 1-channel head emitting a spatial grid of patch scores. Levels never
share parameters. The shared block depth is picked from the resolution
ladder so every level's score grid stays small (1x1 to 4x4 at desk scale).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .nnblocks import ConvSpec, SpectralNormConv

__all__ = ["LevelAdversary", "depth_for_ladder"]


def depth_for_ladder(resolutions) -> int:
    """Number of stride-2 blocks shared by all levels of a ladder.

    Chosen so the top level's grid is at most 4x4 while the coarsest level
    still has at least one pixel of score grid.
    """
    top = max(resolutions)
    bottom = min(resolutions)
    if bottom < 2 or top & (top - 1) or bottom & (bottom - 1):
        raise ConfigError(f"resolutions must be powers of two >= 2, got {resolutions}")
    depth = int(math.log2(top)) - 2
    depth = min(depth, int(math.log2(bottom)))
    return max(depth, 1)


class LevelAdversary(nn.Module):
    """Patch critic for one pyramid level.

    Input is the (composed) image with the mask appended as a channel; the
    output is an unactivated real-valued score per receptive patch.
    """

    def __init__(self, depth: int, base_width: int = 32, image_channels: int = 3):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        w = base_width
        widths = [min(4 * w, w * 2 ** i) for i in range(depth)]
        chans = [image_channels + 1] + widths
        self.blocks = nn.ModuleList(
            SpectralNormConv(
                ConvSpec(chans[i], chans[i + 1], 5, stride=2, activation="leaky"),
                name=f"disc.block{i}",
            )
            for i in range(depth)
        )
        self.head = SpectralNormConv(
            ConvSpec(chans[-1], 1, 3, activation="none"), name="disc.head"
        )
        self.depth = depth

    @torch.no_grad()
    def power_iteration_step(self, steps: int = 1) -> None:
        """Advance every block's spectral-norm estimate; called once per
        training step by the trainer, never during plain evaluation."""
        for m in self.modules():
            if isinstance(m, SpectralNormConv):
                m.power_iterate(steps)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4:
            raise ShapeError(f"image must be [B, C, H, W], got {tuple(image.shape)}")
        if mask.shape[-2:] != image.shape[-2:]:
            raise ShapeError("mask spatial size differs from image")
        h, w = image.shape[-2:]
        if h < 2 ** self.depth or w < 2 ** self.depth:
            raise ShapeError(
                f"input {h}x{w} too small for {self.depth} stride-2 blocks"
            )
        x = torch.cat([image, mask], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.head(x).squeeze(1)
