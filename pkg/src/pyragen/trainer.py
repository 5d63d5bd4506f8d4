"""Joint bottom-up training loop, optimizer plumbing and checkpointing.

One logical thread owns all parameters. Every stochastic choice flows from
the config seed through dedicated numpy streams, so runs are bit-reproducible
on the same machine/precision and checkpoints resume exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversary import LevelAdversary, depth_for_ladder
from .errors import ConfigError, NonFiniteLossError
from .generator import (
    MIN_LEVEL_RESOLUTION,
    DilationPlan,
    FusionMode,
    PyramidGenerator,
    compose,
    _collate,
)
from .imaging import (
    BrushConfig,
    HoleMask,
    PyramidSample,
    RasterImage,
    build_pyramid,
    gen_center_mask,
    gen_freeform_mask,
    mask_hole_ratio,
)
from .nnblocks import AttentionSpec
from .objective import LossReport, LossWeights, disc_hinge, gen_hinge, layer_loss, pyramid_loss, recon_loss

__all__ = [
    "TrainConfig",
    "TrainState",
    "init_state",
    "make_batch",
    "train_step",
    "overfit_single",
    "save_checkpoint",
    "load_checkpoint",
    "TrainLogger",
]

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run."""

    levels: int = 3
    top_resolution: int = 128
    base_width: int = 32
    batch_size: int = 2
    steps: int = 1000
    d_steps_per_g_step: int = 1
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    alpha: float = 1.0
    lambdas: tuple = ()
    fusion: str = "image_refine_both"
    dilation: str = "adaptive"
    training_scheme: str = "joint"
    center_ratio_min: float = 0.10
    center_ratio_max: float = 0.35
    use_freeform: bool = True
    coarse_l1: bool = False
    compose_feedback: bool = False
    att_patch_size: int = 3
    att_stride: int = 1
    att_softmax_scale: float = 10.0
    att_fuse: bool = False
    image_channels: int = 3

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        div = 2 ** (self.levels - 1)
        if self.top_resolution % div:
            raise ConfigError(
                f"top_resolution {self.top_resolution} not divisible by {div}"
            )
        if self.top_resolution // div < MIN_LEVEL_RESOLUTION:
            raise ConfigError(
                f"coarsest level {self.top_resolution // div} below minimum "
                f"{MIN_LEVEL_RESOLUTION}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.training_scheme not in ("joint", "layer_by_layer"):
            raise ConfigError(f"unknown training scheme {self.training_scheme!r}")
        if self.dilation not in ("adaptive", "standard"):
            raise ConfigError(f"unknown dilation scheme {self.dilation!r}")
        FusionMode(self.fusion)
        if not self.lambdas:
            object.__setattr__(
                self, "lambdas", tuple(LossWeights.for_levels(self.levels).lambdas)
            )
        if len(self.lambdas) != self.levels:
            raise ConfigError(
                f"{len(self.lambdas)} lambdas for {self.levels} levels"
            )
        if not 0 < self.center_ratio_min <= self.center_ratio_max < 1:
            raise ConfigError("center ratio range must be within (0, 1)")

    @property
    def ladder(self) -> tuple:
        return tuple(
            self.top_resolution // 2 ** (self.levels - 1 - n)
            for n in range(self.levels)
        )

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, lambdas=tuple(self.lambdas))

    @property
    def fusion_mode(self) -> FusionMode:
        return FusionMode(self.fusion)

    def dilation_plan(self) -> DilationPlan:
        if self.dilation == "standard":
            return DilationPlan.standard(self.levels)
        return DilationPlan.adaptive(self.levels)

    def attention_spec(self) -> AttentionSpec:
        return AttentionSpec(
            patch_size=self.att_patch_size,
            stride=self.att_stride,
            softmax_scale=self.att_softmax_scale,
            fuse_propagation=self.att_fuse,
        )

    def brush_config(self) -> BrushConfig:
        return BrushConfig.default_for(self.top_resolution)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "lambdas" in d and d["lambdas"] is not None:
            d["lambdas"] = tuple(d["lambdas"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class TrainState:
    """Mutable bundle of everything the loop owns."""

    def __init__(self, config, gen, advs, g_opts, d_opts, data_rng, step=0):
        self.config = config
        self.gen = gen
        self.advs = advs
        self.g_opts = g_opts
        self.d_opts = d_opts
        self.data_rng = data_rng
        self.step = step
        self.last_outputs = None


def _build_modules(config: TrainConfig):
    torch.manual_seed(config.seed)
    gen = PyramidGenerator(
        levels=config.levels,
        base_width=config.base_width,
        dilation=config.dilation_plan(),
        fusion=config.fusion_mode,
        attention=config.attention_spec(),
        image_channels=config.image_channels,
        compose_feedback=config.compose_feedback,
    )
    depth = depth_for_ladder(config.ladder)
    advs = [
        LevelAdversary(depth, base_width=config.base_width,
                       image_channels=config.image_channels)
        for _ in range(config.levels)
    ]
    return gen, advs


def init_state(config: TrainConfig) -> TrainState:
    """Fresh, fully seeded training state."""
    gen, advs = _build_modules(config)
    betas = (config.beta1, config.beta2)
    g_opts = [torch.optim.Adam(sub.parameters(), lr=config.lr, betas=betas)
              for sub in gen.subs]
    d_opts = [torch.optim.Adam(adv.parameters(), lr=config.lr, betas=betas)
              for adv in advs]
    data_rng = np.random.default_rng([config.seed, 0xDA7A])
    return TrainState(config, gen, advs, g_opts, d_opts, data_rng)


def _sample_mask(config: TrainConfig, rng: np.random.Generator) -> HoleMask:
    """Union of one center square mask and one free-form mask."""
    size = config.top_resolution
    ratio = float(rng.uniform(config.center_ratio_min, config.center_ratio_max))
    mask = gen_center_mask(size, ratio).values
    if config.use_freeform:
        seed = int(rng.integers(0, 2 ** 63))
        mask = mask | gen_freeform_mask(size, config.brush_config(), seed).values
    return HoleMask(mask)


def make_batch(dataset, config: TrainConfig, rng: np.random.Generator):
    """Draw a batch of pyramid samples in seeded order."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    batch = []
    for _ in range(config.batch_size):
        img = dataset.sample(rng)
        if (img.height, img.width) != (config.top_resolution, config.top_resolution):
            raise ConfigError(
                f"dataset image {img.height}x{img.width} does not match "
                f"top_resolution {config.top_resolution}"
            )
        mask = _sample_mask(config, rng)
        batch.append(build_pyramid(img, mask, config.levels))
    return batch


def _active_level(state: TrainState) -> int | None:
    """For layer-by-layer training: the single level currently learning."""
    cfg = state.config
    if cfg.training_scheme != "layer_by_layer":
        return None
    stage_len = max(1, cfg.steps // cfg.levels)
    return min(cfg.levels - 1, state.step // stage_len)


def train_step(state: TrainState, batch) -> LossReport:
    """One optimization step: per-level discriminator updates on detached
    composed fakes, then one generator update through the whole stack.

    Raises NonFiniteLossError (with a per-level dump) if any loss leaves
    the finite range; reported losses are the ones each update consumed.
    """
    cfg = state.config
    images, masks = _collate(batch)
    weights = cfg.weights

    for adv in state.advs:
        adv.power_iteration_step()

    with torch.no_grad():
        outs = state.gen(images, masks)
        fakes = [
            compose(out.refined, img, mask)
            for out, img, mask in zip(outs, images, masks)
        ]

    disc_losses = []
    for _ in range(cfg.d_steps_per_g_step):
        round_losses = []
        for n, adv in enumerate(state.advs):
            state.d_opts[n].zero_grad()
            real_scores = adv(images[n], masks[n])
            fake_scores = adv(fakes[n], masks[n])
            ld = disc_hinge(real_scores, fake_scores)
            ld.backward()
            state.d_opts[n].step()
            round_losses.append(float(ld.detach()))
        if not disc_losses:
            disc_losses = round_losses

    outs = state.gen(images, masks)
    recons, gen_advs, layer_losses = [], [], []
    for n, out in enumerate(outs):
        comp = compose(out.refined, images[n], masks[n])
        adv_term = gen_hinge(state.advs[n](comp, masks[n]))
        rec = recon_loss(out.refined, images[n])
        if cfg.coarse_l1:
            rec = rec + recon_loss(out.coarse, images[n])
        gen_advs.append(adv_term)
        recons.append(rec)
        layer_losses.append(layer_loss(rec, adv_term, cfg.alpha))

    active = _active_level(state)
    if active is None:
        total = pyramid_loss(layer_losses, weights)
        stepped = list(range(cfg.levels))
    else:
        total = weights.lambdas[active] * layer_losses[active]
        stepped = [active]

    for n in stepped:
        state.g_opts[n].zero_grad()
    # clear any leftover gradients on frozen sub-generators so nothing leaks
    for n in range(cfg.levels):
        if n not in stepped:
            state.gen.subs[n].zero_grad(set_to_none=True)
    total.backward()
    for n in stepped:
        state.g_opts[n].step()

    report = LossReport(
        recon=[float(r.detach()) for r in recons],
        gen_adv=[float(a.detach()) for a in gen_advs],
        disc=disc_losses,
        total_generator=float(total.detach()),
    )
    if not report.is_finite():
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}", diagnostics=report.to_record()
        )
    state.last_outputs = [out.refined.detach() for out in outs]
    state.step += 1
    return report


def hole_l1(generated: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor) -> float:
    """Mean absolute error inside the hole on the [0, 1] intensity scale.

    An empty hole contributes zero error by definition (paste-back keeps
    every known pixel).
    """
    m = mask.expand_as(generated) > 0.5
    if not bool(m.any()):
        return 0.0
    return float((generated[m] - truth[m]).abs().mean() / 2.0)


@dataclass
class OverfitResult:
    final_hole_l1: float
    history: list = field(default_factory=list)


def overfit_single(
    image: RasterImage,
    config: TrainConfig,
    mask: HoleMask | None = None,
    log_every: int = 1,
) -> OverfitResult:
    """Sanity harness: fit the pyramid to one fixed image/mask pair and
    report the top-level hole L1 of the final output."""
    if mask is None:
        mask = gen_center_mask(config.top_resolution, 0.25)
    sample = build_pyramid(image, mask, config.levels)
    batch = [sample] * config.batch_size
    images, masks = _collate(batch)
    state = init_state(config)
    history = []
    top_l1 = hole_l1(torch.zeros_like(images[-1]), images[-1], masks[-1])
    for _ in range(config.steps):
        report = train_step(state, batch)
        top_l1 = hole_l1(state.last_outputs[-1], images[-1], masks[-1])
        if state.step % log_every == 0:
            rec = report.to_record()
            rec["step"] = state.step
            rec["hole_l1"] = top_l1
            history.append(rec)
    return OverfitResult(final_hole_l1=top_l1, history=history)


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def save_checkpoint(state: TrainState, path) -> None:
    """Write the full state as a directory; atomic via temp-dir rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=".ckpt-tmp-"))
    try:
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "step": state.step,
            "config": state.config.to_dict(),
            "config_hash": state.config.hash(),
            "data_rng": _rng_state(state.data_rng),
        }
        (tmp / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n"
        )
        for n, sub in enumerate(state.gen.subs):
            torch.save(sub.state_dict(), tmp / f"G{n}.pt")
        for n, adv in enumerate(state.advs):
            torch.save(adv.state_dict(), tmp / f"D{n}.pt")
        torch.save(
            {
                "g": [opt.state_dict() for opt in state.g_opts],
                "d": [opt.state_dict() for opt in state.d_opts],
            },
            tmp / "optimizer.pt",
        )
        if path.exists():
            old = Path(tempfile.mkdtemp(dir=path.parent, prefix=".ckpt-old-"))
            os.rename(path, old / "stale")
            os.rename(tmp, path)
            import shutil

            shutil.rmtree(old, ignore_errors=True)
        else:
            os.rename(tmp, path)
    finally:
        if tmp.exists():
            import shutil

            shutil.rmtree(tmp, ignore_errors=True)


def load_checkpoint(path, expected_config: TrainConfig | None = None,
                    override: bool = False) -> TrainState:
    """Rebuild a TrainState from a checkpoint directory.

    If ``expected_config`` differs from the stored one, refuse unless
    ``override`` is set (in which case the expected config wins and layer
    blobs must still be structurally compatible).
    """
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    stored = TrainConfig.from_dict(manifest["config"])
    config = stored
    if expected_config is not None and expected_config.hash() != stored.hash():
        if not override:
            raise ConfigError(
                "checkpoint config does not match the requested config "
                f"(stored {stored.hash()[:12]}, requested {expected_config.hash()[:12]}); "
                "pass override to resume anyway"
            )
        config = expected_config
    state = init_state(config)
    for n, sub in enumerate(state.gen.subs):
        sub.load_state_dict(torch.load(path / f"G{n}.pt", weights_only=True))
    for n, adv in enumerate(state.advs):
        adv.load_state_dict(torch.load(path / f"D{n}.pt", weights_only=True))
    opt_state = torch.load(path / "optimizer.pt", weights_only=True)
    for opt, sd in zip(state.g_opts, opt_state["g"]):
        opt.load_state_dict(sd)
    for opt, sd in zip(state.d_opts, opt_state["d"]):
        opt.load_state_dict(sd)
    state.data_rng.bit_generator.state = manifest["data_rng"]
    state.step = int(manifest["step"])
    return state


class TrainLogger:
    """JSON-lines training log plus a wall-time sidecar.

    The main log holds one deterministic record per step (step number and
    per-level losses); wall-clock timing goes to a separate file so byte
    comparison of the primary log across reruns stays meaningful.
    """

    def __init__(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.loss_path = out / "train_log.jsonl"
        self.timing_path = out / "timing.jsonl"
        self._loss_f = open(self.loss_path, "a")
        self._timing_f = open(self.timing_path, "a")

    def log(self, step: int, report: LossReport) -> None:
        rec = {"step": step}
        rec.update(report.to_record())
        self._loss_f.write(json.dumps(rec, sort_keys=True) + "\n")
        self._loss_f.flush()
        self._timing_f.write(
            json.dumps({"step": step, "wall_time": time.time()}) + "\n"
        )
        self._timing_f.flush()

    def close(self):
        self._loss_f.close()
        self._timing_f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
