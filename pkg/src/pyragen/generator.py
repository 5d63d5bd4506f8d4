"""The coarse/refine sub-generator and the bottom-up pyramid stack.

Each level runs a two-stage inpainter: a coarse encoder-decoder fills holes
at that level's resolution, then a refine stage with two parallel branches
(contextual attention and dilated gated convolutions) sharpens the result.
Between levels, the lower level's refined image is upsampled and added to
the current level's coarse output before refinement, so structure recovered
at coarse scale guides detail synthesis at fine scale. Alternative fusion
wirings are selectable for ablations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .imaging import HoleMask, PyramidSample, RasterImage
from .nnblocks import AttentionSpec, ContextualAttention, ConvSpec, GatedConv, PlainConv

__all__ = [
    "DilationPlan",
    "FusionMode",
    "LevelOutput",
    "SubGenerator",
    "PyramidGenerator",
    "fuse",
    "compose",
    "count_params",
    "pyramid_forward",
    "inpaint_image",
]

MIN_LEVEL_RESOLUTION = 16


@dataclass(frozen=True)
class DilationPlan:
    """Per-level dilation rates for the dilated conv chains."""

    rates: tuple

    def __post_init__(self):
        if not self.rates:
            raise ConfigError("dilation plan needs at least one level")
        for level_rates in self.rates:
            if not level_rates:
                raise ConfigError("each level needs at least one dilation rate")
            if list(level_rates) != sorted(level_rates) or min(level_rates) < 1:
                raise ConfigError(f"rates must be ascending positives: {level_rates}")

    @classmethod
    def adaptive(cls, levels: int) -> "DilationPlan":
        """Wider receptive field at the structure level, narrower above."""
        return cls(((2, 4, 8, 12),) + ((2, 4, 8),) * (levels - 1))

    @classmethod
    def standard(cls, levels: int) -> "DilationPlan":
        """Single-scale baseline: the same chain at every level."""
        return cls(((2, 4, 8, 16),) * levels)

    def for_level(self, n: int) -> tuple:
        return self.rates[n]


class FusionMode(str, enum.Enum):
    IMAGE_REFINE_BOTH = "image_refine_both"
    IMAGE_REFINE_ATT_ONLY = "image_refine_att_only"
    IMAGE_REFINE_NONATT_ONLY = "image_refine_nonatt_only"
    FEATURE_COARSE = "feature_coarse"
    FEATURE_REFINE = "feature_refine"

    @property
    def is_image_level(self) -> bool:
        return self in (
            FusionMode.IMAGE_REFINE_BOTH,
            FusionMode.IMAGE_REFINE_ATT_ONLY,
            FusionMode.IMAGE_REFINE_NONATT_ONLY,
        )


@dataclass
class LevelOutput:
    """Outputs of one pyramid level, all at that level's resolution."""

    coarse: torch.Tensor
    refined: torch.Tensor
    fused_input: torch.Tensor


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def fuse(coarse: torch.Tensor, lower_output: torch.Tensor, mode: FusionMode) -> torch.Tensor:
    """Add the upsampled lower-level image to the coarse output, clamped to
    the image range. Only defined for image-level modes; feature modes fuse
    inside the network."""
    if not mode.is_image_level:
        raise ConfigError(f"{mode.value} fuses feature maps, not images")
    if coarse.shape[-2:] != tuple(2 * s for s in lower_output.shape[-2:]):
        raise ConfigError(
            f"lower output {tuple(lower_output.shape[-2:])} must be half of "
            f"coarse {tuple(coarse.shape[-2:])}"
        )
    return torch.clamp(coarse + _up2(lower_output), -1.0, 1.0)


def _gseq(*specs_names):
    return nn.ModuleList([GatedConv(spec, name) for spec, name in specs_names])


class SubGenerator(nn.Module):
    """One pyramid level: coarse fill followed by two-branch refinement.

    Input images arrive with hole pixels zeroed and the mask appended as an
    extra channel. Both stages emit full tanh-bounded images.
    """

    def __init__(
        self,
        base_width: int = 32,
        dilation_rates: tuple = (2, 4, 8),
        attention: AttentionSpec | None = None,
        image_channels: int = 3,
    ):
        super().__init__()
        if base_width < 2:
            raise ConfigError("base_width must be >= 2")
        w = base_width
        cin = image_channels + 1
        self.image_channels = image_channels
        self.base_width = w
        self.dilation_rates = tuple(dilation_rates)

        self.coarse_enc = _gseq(
            (ConvSpec(cin, w, 5), "coarse.enc0"),
            (ConvSpec(w, 2 * w, 3, stride=2), "coarse.enc1"),
            (ConvSpec(2 * w, 2 * w, 3), "coarse.enc2"),
            (ConvSpec(2 * w, 4 * w, 3, stride=2), "coarse.enc3"),
            (ConvSpec(4 * w, 4 * w, 3), "coarse.enc4"),
            (ConvSpec(4 * w, 4 * w, 3), "coarse.enc5"),
        )
        self.coarse_dilated = _gseq(
            *(
                (ConvSpec(4 * w, 4 * w, 3, dilation_rate=r), f"coarse.dil{r}")
                for r in dilation_rates
            )
        )
        self.coarse_dec = _gseq(
            (ConvSpec(4 * w, 4 * w, 3), "coarse.dec0"),
            (ConvSpec(4 * w, 2 * w, 3), "coarse.dec1"),
            (ConvSpec(2 * w, 2 * w, 3), "coarse.dec2"),
            (ConvSpec(2 * w, w, 3), "coarse.dec3"),
            (ConvSpec(w, max(2, w // 2), 3), "coarse.dec4"),
        )
        self.coarse_head = PlainConv(
            ConvSpec(max(2, w // 2), image_channels, 3, activation="none"),
            "coarse.head",
        )

        self.att_enc = _gseq(
            (ConvSpec(cin, w, 5), "refine.att0"),
            (ConvSpec(w, w, 3, stride=2), "refine.att1"),
            (ConvSpec(w, 2 * w, 3), "refine.att2"),
            (ConvSpec(2 * w, 4 * w, 3, stride=2), "refine.att3"),
            (ConvSpec(4 * w, 4 * w, 3), "refine.att4"),
        )
        self.attention = ContextualAttention(attention)
        self.att_post = _gseq(
            (ConvSpec(4 * w, 4 * w, 3), "refine.att5"),
            (ConvSpec(4 * w, 4 * w, 3), "refine.att6"),
        )

        self.nonatt_enc = _gseq(
            (ConvSpec(cin, w, 5), "refine.conv0"),
            (ConvSpec(w, w, 3, stride=2), "refine.conv1"),
            (ConvSpec(w, 2 * w, 3), "refine.conv2"),
            (ConvSpec(2 * w, 4 * w, 3, stride=2), "refine.conv3"),
            (ConvSpec(4 * w, 4 * w, 3), "refine.conv4"),
        )
        self.nonatt_dilated = _gseq(
            *(
                (ConvSpec(4 * w, 4 * w, 3, dilation_rate=r), f"refine.dil{r}")
                for r in dilation_rates
            )
        )

        self.refine_dec = _gseq(
            (ConvSpec(8 * w, 4 * w, 3), "refine.dec0"),
            (ConvSpec(4 * w, 4 * w, 3), "refine.dec1"),
            (ConvSpec(4 * w, 2 * w, 3), "refine.dec2"),
            (ConvSpec(2 * w, 2 * w, 3), "refine.dec3"),
            (ConvSpec(2 * w, w, 3), "refine.dec4"),
            (ConvSpec(w, max(2, w // 2), 3), "refine.dec5"),
        )
        self.refine_head = PlainConv(
            ConvSpec(max(2, w // 2), image_channels, 3, activation="none"),
            "refine.head",
        )

    @staticmethod
    def _check_resolution(x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h < MIN_LEVEL_RESOLUTION or w < MIN_LEVEL_RESOLUTION:
            raise ShapeError(
                f"level input {h}x{w} below minimum {MIN_LEVEL_RESOLUTION}"
            )
        if h % 4 or w % 4:
            raise ShapeError(f"level input {h}x{w} must be divisible by 4")

    def coarse_forward(self, image_masked: torch.Tensor, mask: torch.Tensor,
                       lower_feat: torch.Tensor | None = None) -> tuple:
        """Coarse stage; returns (image, bottleneck features)."""
        self._check_resolution(image_masked)
        x = torch.cat([image_masked, mask], dim=1)
        for block in self.coarse_enc:
            x = block(x)
        for block in self.coarse_dilated:
            x = block(x)
        if lower_feat is not None:
            x = x + _up2(lower_feat)
        feat = x
        x = self.coarse_dec[0](x)
        x = _up2(x)
        x = self.coarse_dec[1](x)
        x = self.coarse_dec[2](x)
        x = _up2(x)
        x = self.coarse_dec[3](x)
        x = self.coarse_dec[4](x)
        return torch.tanh(self.coarse_head(x)), feat

    def refine_forward(
        self,
        att_image: torch.Tensor,
        nonatt_image: torch.Tensor,
        mask: torch.Tensor,
        lower_feat: torch.Tensor | None = None,
    ) -> tuple:
        """Refine stage on per-branch input images; returns (image, features)."""
        a = torch.cat([att_image, mask], dim=1)
        for block in self.att_enc:
            a = block(a)
        # an all-hole sample has no usable source patches; pass features
        # through so fully masked inputs still produce an output
        a = self.attention(a, a, mask, degenerate_ok=True)
        for block in self.att_post:
            a = block(a)
        b = torch.cat([nonatt_image, mask], dim=1)
        for block in self.nonatt_enc:
            b = block(b)
        for block in self.nonatt_dilated:
            b = block(b)
        x = torch.cat([b, a], dim=1)
        if lower_feat is not None:
            x = x + _up2(lower_feat)
        feat = x
        x = self.refine_dec[0](x)
        x = self.refine_dec[1](x)
        x = _up2(x)
        x = self.refine_dec[2](x)
        x = self.refine_dec[3](x)
        x = _up2(x)
        x = self.refine_dec[4](x)
        x = self.refine_dec[5](x)
        return torch.tanh(self.refine_head(x)), feat

    def forward(
        self,
        image_masked: torch.Tensor,
        mask: torch.Tensor,
        lower_output: torch.Tensor | None = None,
        fusion: FusionMode = FusionMode.IMAGE_REFINE_BOTH,
        lower_coarse_feat: torch.Tensor | None = None,
        lower_refine_feat: torch.Tensor | None = None,
    ) -> tuple:
        """Run both stages; returns (LevelOutput, coarse_feat, refine_feat)."""
        coarse_lower = lower_coarse_feat if fusion == FusionMode.FEATURE_COARSE else None
        coarse, coarse_feat = self.coarse_forward(image_masked, mask, coarse_lower)

        if lower_output is not None and fusion.is_image_level:
            fused = fuse(coarse, lower_output, fusion)
        else:
            fused = coarse

        if fusion == FusionMode.IMAGE_REFINE_ATT_ONLY:
            att_in, nonatt_in = fused, coarse
        elif fusion == FusionMode.IMAGE_REFINE_NONATT_ONLY:
            att_in, nonatt_in = coarse, fused
        else:
            att_in = nonatt_in = fused

        refine_lower = lower_refine_feat if fusion == FusionMode.FEATURE_REFINE else None
        refined, refine_feat = self.refine_forward(att_in, nonatt_in, mask, refine_lower)
        return LevelOutput(coarse, refined, fused), coarse_feat, refine_feat


class PyramidGenerator(nn.Module):
    """Bottom-up stack of sub-generators sharing one topology.

    All levels use the same channel widths; only the dilation chains differ
    per the plan. The final artifact output is the top level's refined
    image. ``compose_feedback`` switches the inter-level handoff from the
    raw refined image to its paste-back composition (ablation toggle).
    """

    def __init__(
        self,
        levels: int = 3,
        base_width: int = 32,
        dilation: DilationPlan | None = None,
        fusion: FusionMode = FusionMode.IMAGE_REFINE_BOTH,
        attention: AttentionSpec | None = None,
        image_channels: int = 3,
        compose_feedback: bool = False,
    ):
        super().__init__()
        if levels < 2:
            raise ConfigError(f"pyramid needs at least 2 levels, got {levels}")
        dilation = dilation or DilationPlan.adaptive(levels)
        if len(dilation.rates) != levels:
            raise ConfigError(
                f"dilation plan has {len(dilation.rates)} levels, generator has {levels}"
            )
        self.fusion = fusion
        self.dilation = dilation
        self.compose_feedback = compose_feedback
        self.subs = nn.ModuleList(
            SubGenerator(
                base_width=base_width,
                dilation_rates=dilation.for_level(n),
                attention=attention,
                image_channels=image_channels,
            )
            for n in range(levels)
        )

    @property
    def num_levels(self) -> int:
        return len(self.subs)

    def forward(self, images: list, masks: list) -> list:
        """Run the stack bottom-up on coarsest-first image/mask tensors."""
        if len(images) != self.num_levels or len(masks) != self.num_levels:
            raise ConfigError(
                f"expected {self.num_levels} levels, got {len(images)} images "
                f"and {len(masks)} masks"
            )
        outputs = []
        lower_img = None
        lower_cfeat = None
        lower_rfeat = None
        for n, sub in enumerate(self.subs):
            img, mask = images[n], masks[n]
            masked = img * (1.0 - mask)
            out, cfeat, rfeat = sub(
                masked,
                mask,
                lower_output=lower_img if n > 0 else None,
                fusion=self.fusion,
                lower_coarse_feat=lower_cfeat if n > 0 else None,
                lower_refine_feat=lower_rfeat if n > 0 else None,
            )
            outputs.append(out)
            lower_img = (
                compose(out.refined, img, mask) if self.compose_feedback else out.refined
            )
            lower_cfeat, lower_rfeat = cfeat, rfeat
        return outputs


def compose(generated, original, mask):
    """Paste-back: keep generated content in the hole, original elsewhere.

    Accepts either torch tensors ([B,C,H,W] images with a [B,1,H,W] mask)
    or RasterImage/HoleMask values.
    """
    if torch.is_tensor(generated):
        if generated.shape != original.shape:
            raise ShapeError(
                f"compose shapes differ: {tuple(generated.shape)} vs {tuple(original.shape)}"
            )
        if mask.shape[-2:] != generated.shape[-2:]:
            raise ShapeError("mask spatial size differs from images")
        return mask * generated + (1.0 - mask) * original
    if (generated.height, generated.width) != (original.height, original.width):
        raise ShapeError("compose: image sizes differ")
    if (mask.height, mask.width) != (original.height, original.width):
        raise ShapeError("compose: mask size differs")
    m = mask.values[:, :, None].astype(np.float32)
    out = m * generated.values + (1.0 - m) * original.values
    return RasterImage(out)


def count_params(gen: PyramidGenerator) -> list:
    """Trainable parameter count per pyramid level."""
    return [sum(p.numel() for p in sub.parameters()) for sub in gen.subs]


def _collate(samples) -> tuple:
    if isinstance(samples, PyramidSample):
        samples = [samples]
    levels = samples[0].num_levels
    if any(s.num_levels != levels for s in samples):
        raise ConfigError("samples disagree on level count")
    images, masks = [], []
    for n in range(levels):
        imgs = np.stack([s.levels[n][0].values.transpose(2, 0, 1) for s in samples])
        msks = np.stack([s.levels[n][1].values[None].astype(np.float32) for s in samples])
        images.append(torch.from_numpy(imgs))
        masks.append(torch.from_numpy(msks))
    return images, masks


def pyramid_forward(samples, gen: PyramidGenerator) -> list:
    """Run the generator on one PyramidSample or a list of them."""
    images, masks = _collate(samples)
    if len(images) != gen.num_levels:
        raise ConfigError(
            f"sample has {len(images)} levels, generator has {gen.num_levels}"
        )
    return gen(images, masks)


def inpaint_image(gen: PyramidGenerator, image: RasterImage, mask: HoleMask) -> RasterImage:
    """Full-image restoration: pyramid forward plus paste-back at top level."""
    from .imaging import build_pyramid

    sample = build_pyramid(image, mask, gen.num_levels)
    with torch.no_grad():
        outputs = pyramid_forward(sample, gen)
    refined = outputs[-1].refined[0].numpy().transpose(1, 2, 0)
    refined = RasterImage(np.clip(refined, -1.0, 1.0))
    return compose(refined, image, mask)
