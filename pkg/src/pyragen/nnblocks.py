"""Differentiable building blocks shared by the generator and discriminators.

All blocks are plain ``nn.Module``s that run at float32 for training and at
float64 for finite-difference gradient checks. Parameter mutation (weights,
power-iteration vectors) is expected to happen on a single training thread;
forward evaluation is reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DegenerateInputError, ShapeError

_ACTIVATIONS = ("elu", "leaky", "none", "tanh", "sigmoid")


@dataclass(frozen=True)
class ConvSpec:
    """Shape/behavior contract of one convolution block."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation_rate: int = 1
    activation: str = "elu"

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.dilation_rate < 1:
            raise ConfigError(f"dilation_rate must be >= 1, got {self.dilation_rate}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def padding(self) -> int:
        # preserves spatial size at stride 1
        return self.dilation_rate * (self.kernel // 2)


@dataclass(frozen=True)
class AttentionSpec:
    """Contextual attention knobs: source patch geometry and score scaling."""

    patch_size: int = 3
    stride: int = 1
    softmax_scale: float = 10.0
    fuse_propagation: bool = False

    def __post_init__(self):
        if self.patch_size % 2 != 1:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if self.softmax_scale <= 0:
            raise ConfigError("softmax_scale must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


def _activate(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "elu":
        return F.elu(x)
    if kind == "leaky":
        return F.leaky_relu(x, 0.2)
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    return x


class GatedConv(nn.Module):
    """Convolution modulated by a learned sigmoid gate.

    Output is ``activation(conv_f(x)) * sigmoid(conv_g(x))`` with two
    independent parameter sets, so the gate can soft-select which spatial
    positions carry valid content.
    """

    def __init__(self, spec: ConvSpec, name: str = "gated_conv"):
        super().__init__()
        self.spec = spec
        self.name = name
        self.conv_f = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel,
            stride=spec.stride, padding=spec.padding, dilation=spec.dilation_rate,
        )
        self.conv_g = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel,
            stride=spec.stride, padding=spec.padding, dilation=spec.dilation_rate,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name}: expected [B, {self.spec.in_channels}, H, W], "
                f"got {tuple(x.shape)}"
            )
        return _activate(self.conv_f(x), self.spec.activation) * torch.sigmoid(
            self.conv_g(x)
        )


class PlainConv(nn.Module):
    """Ungated convolution with the same spec contract (used for heads)."""

    def __init__(self, spec: ConvSpec, name: str = "conv"):
        super().__init__()
        self.spec = spec
        self.name = name
        self.conv = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel,
            stride=spec.stride, padding=spec.padding, dilation=spec.dilation_rate,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name}: expected [B, {self.spec.in_channels}, H, W], "
                f"got {tuple(x.shape)}"
            )
        return _activate(self.conv(x), self.spec.activation)


class SpectralNormConv(nn.Module):
    """Convolution whose weight is divided by its leading singular value.

    The singular value of the unrolled [out, in*k*k] weight matrix is
    estimated by power iteration. The estimate is only advanced when
    :meth:`power_iterate` is called (the trainer calls it once per training
    step); forward passes never mutate it, so evaluation is frozen and
    reentrant by construction.
    """

    def __init__(self, spec: ConvSpec, name: str = "sn_conv"):
        super().__init__()
        self.spec = spec
        self.name = name
        conv = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel,
            stride=spec.stride, padding=spec.padding, dilation=spec.dilation_rate,
        )
        self.weight = nn.Parameter(conv.weight.detach().clone())
        self.bias = nn.Parameter(conv.bias.detach().clone())
        u = F.normalize(torch.randn(spec.out_channels), dim=0, eps=1e-12)
        self.register_buffer("u", u)
        with torch.no_grad():
            w2d = self.weight.reshape(spec.out_channels, -1)
            v = F.normalize(w2d.t() @ u, dim=0, eps=1e-12)
        self.register_buffer("v", v)

    @torch.no_grad()
    def power_iterate(self, steps: int = 1) -> None:
        w2d = self.weight.reshape(self.spec.out_channels, -1)
        u, v = self.u, self.v
        for _ in range(steps):
            v = F.normalize(w2d.t() @ u, dim=0, eps=1e-12)
            u = F.normalize(w2d @ v, dim=0, eps=1e-12)
        self.u.copy_(u)
        self.v.copy_(v)

    def sigma(self) -> torch.Tensor:
        w2d = self.weight.reshape(self.spec.out_channels, -1)
        return torch.einsum("o,oi,i->", self.u, w2d, self.v)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name}: expected [B, {self.spec.in_channels}, H, W], "
                f"got {tuple(x.shape)}"
            )
        w = self.weight / self.sigma()
        out = F.conv2d(
            x, w, self.bias, stride=self.spec.stride,
            padding=self.spec.padding, dilation=self.spec.dilation_rate,
        )
        return _activate(out, self.spec.activation)


def _pool_mask_to(mask: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Shrink a [B,1,H,W] binary mask to an h x w map of hole fractions."""
    mh, mw = mask.shape[-2:]
    if (mh, mw) == (h, w):
        return mask
    if mh % h or mw % w:
        raise ShapeError(f"mask {mh}x{mw} not reducible to features {h}x{w}")
    return F.avg_pool2d(mask, kernel_size=(mh // h, mw // w))


class ContextualAttention(nn.Module):
    """Copy known-region content into holes by patch matching.

    Source patches are sampled on a stride grid of the background feature
    map; a patch is usable while at least half of its center cell's image
    footprint is known. Every foreground location is scored against all
    usable patches by cosine similarity, a scaled softmax turns scores into
    weights, and the output is rebuilt by transposed convolution with the
    raw patches, averaging overlaps.
    """

    def __init__(self, spec: AttentionSpec | None = None):
        super().__init__()
        self.spec = spec or AttentionSpec()

    def forward(
        self,
        foreground: torch.Tensor,
        background: torch.Tensor,
        mask: torch.Tensor,
        degenerate_ok: bool = False,
    ) -> torch.Tensor:
        """Attend; with ``degenerate_ok`` a sample with no usable source
        passes through unchanged instead of raising."""
        if foreground.ndim != 4 or background.ndim != 4:
            raise ShapeError("foreground/background must be [B, C, H, W]")
        if foreground.shape != background.shape:
            raise ShapeError(
                f"foreground {tuple(foreground.shape)} and background "
                f"{tuple(background.shape)} must match"
            )
        if mask.ndim == 3:
            mask = mask.unsqueeze(1)
        b, _, h, w = foreground.shape
        mask = _pool_mask_to(mask.to(foreground.dtype), h, w)
        mask = mask.expand(b, *mask.shape[1:])
        outs = []
        for i in range(b):
            try:
                outs.append(self._attend(foreground[i], background[i], mask[i, 0]))
            except DegenerateInputError:
                if not degenerate_ok:
                    raise
                outs.append(foreground[i])
        return torch.stack(outs, dim=0)

    def attention_weights(self, foreground, background, mask) -> list:
        """Per-sample attention maps of shape [num_patches, H, W]; each
        location's weights are a probability simplex over source patches."""
        if mask.ndim == 3:
            mask = mask.unsqueeze(1)
        b, _, h, w = foreground.shape
        mask = _pool_mask_to(mask.to(foreground.dtype), h, w)
        mask = mask.expand(b, *mask.shape[1:])
        return [
            self._weights(foreground[i], background[i], mask[i, 0])[0].squeeze(0)
            for i in range(b)
        ]

    def _weights(self, fg, bg, hole):
        ps, stride = self.spec.patch_size, self.spec.stride
        c, h, w = bg.shape
        pad = ps // 2
        eps = 1e-8

        # source patches on the stride grid, replicate-padded so centers
        # cover every stride-th position without fabricating zero content
        padded = F.pad(bg.unsqueeze(0), (pad, pad, pad, pad), mode="replicate")
        patches = F.unfold(padded, ps, stride=stride)
        lh = (h + 2 * pad - ps) // stride + 1
        lw = (w + 2 * pad - ps) // stride + 1
        kernels = patches.squeeze(0).t().reshape(lh * lw, c, ps, ps)

        centers = hole[::stride, ::stride]
        valid = (centers.reshape(-1) <= 0.5)
        if not bool(valid.any()):
            raise DegenerateInputError(
                "contextual attention: no known background pixels to copy from"
            )

        norms = kernels.reshape(lh * lw, -1).norm(dim=1).clamp_min(eps)
        normed = kernels / norms.view(-1, 1, 1, 1)
        scores = F.conv2d(fg.unsqueeze(0), normed, padding=pad)
        fg_sq = (fg * fg).sum(dim=0, keepdim=True).unsqueeze(0)
        ones = torch.ones(1, 1, ps, ps, dtype=fg.dtype, device=fg.device)
        fg_norm = F.conv2d(fg_sq, ones, padding=pad).clamp_min(eps * eps).sqrt()
        cos = scores / fg_norm

        if self.spec.fuse_propagation:
            cos = self._propagate(cos, lh, lw)

        logits = self.spec.softmax_scale * cos
        logits = logits.masked_fill(~valid.view(1, -1, 1, 1), float("-inf"))
        return torch.softmax(logits, dim=1), kernels

    def _attend(self, fg, bg, hole):
        ps = self.spec.patch_size
        pad = ps // 2
        eps = 1e-8
        attn, kernels = self._weights(fg, bg, hole)
        recon = F.conv_transpose2d(attn, kernels, padding=pad)
        overlap = F.conv_transpose2d(
            attn,
            torch.ones(kernels.shape[0], 1, ps, ps, dtype=fg.dtype, device=fg.device),
            padding=pad,
        )
        return (recon / overlap.clamp_min(eps)).squeeze(0)

    def _propagate(self, cos, lh, lw):
        """Sum scores over diagonal (patch-shift, query-shift) neighbors so
        coherent whole-region matches reinforce each other."""
        s = self.spec.stride
        _, l, h, w = cos.shape
        grid = cos.reshape(lh, lw, h, w)
        out = torch.zeros_like(grid)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                src_y = slice(max(0, -dy), lh - max(0, dy))
                dst_y = slice(max(0, dy), lh - max(0, -dy))
                src_x = slice(max(0, -dx), lw - max(0, dx))
                dst_x = slice(max(0, dx), lw - max(0, -dx))
                qy, qx = dy * s, dx * s
                sq_y = slice(max(0, -qy), h - max(0, qy))
                dq_y = slice(max(0, qy), h - max(0, -qy))
                sq_x = slice(max(0, -qx), w - max(0, qx))
                dq_x = slice(max(0, qx), w - max(0, -qx))
                out[dst_y, dst_x, dq_y, dq_x] += grid[src_y, src_x, sq_y, sq_x]
        return out.reshape(1, l, h, w)


@dataclass
class GradProbe:
    target: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    probes: list
    max_rel_error: float

    def __str__(self):
        lines = [f"max relative error: {self.max_rel_error:.3e}"]
        for p in self.probes:
            lines.append(
                f"  {p.target}[{p.index}]: analytic={p.analytic:.6e} "
                f"numeric={p.numeric:.6e} rel={p.rel_error:.3e}"
            )
        return "\n".join(lines)


def grad_check(
    block,
    inputs,
    probe_count: int = 10,
    step: float = 1e-5,
    seed: int = 0,
    probe_inputs: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of ``sum(block(*inputs))`` against central
    finite differences at randomly probed parameter/input coordinates.

    The block and inputs are converted to float64 in place. ``inputs`` is a
    tuple of tensors; extra non-tensor args are passed through untouched.
    """
    if isinstance(block, nn.Module):
        block = block.double()
        params = {f"param:{k}": p for k, p in block.named_parameters()}
    else:
        params = {}
    tensors = []
    call_args = []
    for j, a in enumerate(inputs):
        if torch.is_tensor(a) and a.is_floating_point():
            a = a.detach().double().requires_grad_(True)
            tensors.append((f"input:{j}", a))
        call_args.append(a)

    def scalar():
        out = block(*call_args)
        if isinstance(out, (tuple, list)):
            return sum(o.sum() for o in out if torch.is_tensor(o))
        return out.sum()

    def scalar_value() -> float:
        with torch.no_grad():
            return float(scalar())

    loss = scalar()
    grads = torch.autograd.grad(
        loss,
        [p for _, p in params.items()] + [t for _, t in tensors],
        allow_unused=True,
    )
    leaves = list(params.items()) + (tensors if probe_inputs else [])
    grad_map = dict(zip([k for k, _ in params.items()] + [k for k, _ in tensors], grads))

    rng = torch.Generator().manual_seed(seed)
    probes = []
    for _ in range(probe_count):
        name, leaf = leaves[int(torch.randint(len(leaves), (1,), generator=rng))]
        idx = int(torch.randint(leaf.numel(), (1,), generator=rng))
        g = grad_map[name]
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        flat = leaf.data.reshape(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + step
        f_plus = scalar_value()
        with torch.no_grad():
            flat[idx] = orig - step
        f_minus = scalar_value()
        with torch.no_grad():
            flat[idx] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-6)
        probes.append(
            GradProbe(name, idx, analytic, numeric, abs(analytic - numeric) / denom)
        )
    return GradCheckReport(probes, max((p.rel_error for p in probes), default=0.0))
