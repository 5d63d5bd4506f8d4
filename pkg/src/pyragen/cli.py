"""Command-line entry points and structured run configuration.

The config file is flat INI (key = value under sections); every key maps to
one field, unknown keys are rejected, and values round-trip losslessly.
Exit codes: 0 success, 2 configuration/argument problems, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit, trainer
from .data import ImageFolderDataset
from .errors import ConfigError, NonFiniteLossError
from .generator import compose
from .imaging import (
    RasterImage,
    gen_center_mask,
    load_image,
    load_mask,
    save_image,
)
from .nnblocks import (
    AttentionSpec,
    ContextualAttention,
    ConvSpec,
    GatedConv,
    SpectralNormConv,
    grad_check,
)
from .objective import LossWeights, disc_hinge, gen_hinge, layer_loss, pyramid_loss, recon_loss
from .trainer import TrainConfig, TrainLogger

# section -> {ini key -> TrainConfig field}
_TRAIN_SECTIONS = {
    "train": {
        k: k
        for k in (
            "levels", "top_resolution", "base_width", "batch_size", "steps",
            "d_steps_per_g_step", "seed", "training_scheme",
        )
    },
    "optimizer": {"name": "optimizer", "lr": "lr", "beta1": "beta1", "beta2": "beta2"},
    "loss": {"alpha": "alpha", "lambdas": "lambdas", "coarse_l1": "coarse_l1"},
    "model": {
        k: k
        for k in (
            "fusion", "dilation", "compose_feedback", "att_patch_size",
            "att_stride", "att_softmax_scale", "att_fuse", "image_channels",
        )
    },
    "masks": {
        k: k for k in ("center_ratio_min", "center_ratio_max", "use_freeform")
    },
}
_EXPERIMENT_KEYS = ("label", "dataset", "out", "sample_every")

_FIELD_TYPES = {
    "levels": int, "top_resolution": int, "base_width": int, "batch_size": int,
    "steps": int, "d_steps_per_g_step": int, "seed": int, "training_scheme": str,
    "optimizer": str, "lr": float, "beta1": float, "beta2": float,
    "alpha": float, "lambdas": tuple, "coarse_l1": bool,
    "fusion": str, "dilation": str, "compose_feedback": bool,
    "att_patch_size": int, "att_stride": int, "att_softmax_scale": float,
    "att_fuse": bool, "image_channels": int,
    "center_ratio_min": float, "center_ratio_max": float, "use_freeform": bool,
}


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is tuple:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return kind(raw)


@dataclass(frozen=True)
class RunConfig:
    """A training config plus experiment bookkeeping."""

    train: TrainConfig = field(default_factory=TrainConfig)
    label: str = "run"
    dataset: str | None = None
    out: str | None = None
    sample_every: int = 0

    @classmethod
    def parse_ini(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        known_sections = set(_TRAIN_SECTIONS) | {"experiment"}
        for section in parser.sections():
            if section not in known_sections:
                raise ConfigError(f"unknown config section [{section}]")
        train_kwargs = {}
        for section, keymap in _TRAIN_SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key, raw in parser.items(section):
                if key not in keymap:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                fieldname = keymap[key]
                train_kwargs[fieldname] = _parse_value(raw, _FIELD_TYPES[fieldname])
        run_kwargs = {}
        if parser.has_section("experiment"):
            for key, raw in parser.items("experiment"):
                if key not in _EXPERIMENT_KEYS:
                    raise ConfigError(f"unknown config key [experiment] {key}")
                if key == "sample_every":
                    run_kwargs[key] = int(raw)
                else:
                    run_kwargs[key] = raw.strip()
        return cls(train=TrainConfig(**train_kwargs), **run_kwargs)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["experiment"] = {
            "label": self.label,
            "sample_every": str(self.sample_every),
        }
        if self.dataset is not None:
            parser["experiment"]["dataset"] = self.dataset
        if self.out is not None:
            parser["experiment"]["out"] = self.out
        cfg = self.train
        for section, keymap in _TRAIN_SECTIONS.items():
            parser[section] = {}
            for key, fieldname in keymap.items():
                value = getattr(cfg, fieldname)
                if fieldname == "lambdas":
                    parser[section][key] = ", ".join(repr(float(v)) for v in value)
                else:
                    parser[section][key] = str(value)
        import io

        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write_ini(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini())


def _resolve_out(arg_out, rc_out=None) -> Path:
    out = arg_out or rc_out or os.environ.get("PYRAGEN_OUT")
    if not out:
        raise ConfigError(
            "no output directory: pass --out, set it in the config, "
            "or export PYRAGEN_OUT"
        )
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_run_config(args) -> RunConfig:
    rc = RunConfig.parse_ini(args.config)
    if getattr(args, "seed", None) is not None:
        rc = replace(rc, train=TrainConfig.from_dict({**rc.train.to_dict(), "seed": args.seed}))
    return rc


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    out = _resolve_out(args.out, rc.out)
    cfg = rc.train
    if not rc.dataset:
        raise ConfigError("config has no dataset path")
    dataset = ImageFolderDataset(rc.dataset, cfg.top_resolution)

    if args.resume:
        state = trainer.load_checkpoint(args.resume, expected_config=cfg,
                                        override=args.override_config)
    else:
        state = trainer.init_state(cfg)
    rc.write_ini(out / "config.ini")

    sample_imgs = [dataset[i] for i in range(min(3, len(dataset)))]
    with TrainLogger(out) as logger:
        while state.step < cfg.steps:
            batch = trainer.make_batch(dataset, cfg, state.data_rng)
            report = trainer.train_step(state, batch)
            logger.log(state.step, report)
            if rc.sample_every and state.step % rc.sample_every == 0:
                _write_samples(state, sample_imgs, out / "samples" / f"step{state.step:06d}.png")
    trainer.save_checkpoint(state, out / "checkpoint")
    if rc.sample_every or cfg.steps == 0:
        _write_samples(state, sample_imgs, out / "samples" / f"step{state.step:06d}.png")
    print(f"trained {state.step} steps -> {out / 'checkpoint'}")
    return 0


def _write_samples(state, images, path) -> None:
    from .generator import inpaint_image

    triplets = []
    for i, img in enumerate(images):
        mask = gen_center_mask(img.height, 0.25)
        out = inpaint_image(state.gen, img, mask)
        triplets.append((img, mask, out))
    if triplets:
        evalkit.contact_sheet(triplets, path)


def cmd_inpaint(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    cfg = state.config
    image = load_image(args.image, args.size) if args.size else _load_full(args.image)
    mask = load_mask(args.mask)
    if (mask.height, mask.width) != (image.height, image.width):
        raise ConfigError(
            f"image {image.height}x{image.width} and mask {mask.height}x{mask.width} differ"
        )
    div = 2 ** (cfg.levels - 1)
    if image.height % div or image.width % div:
        raise ConfigError(f"image size must be divisible by {div}")
    state.gen.eval()
    from .generator import inpaint_image

    out = inpaint_image(state.gen, image, mask)
    save_image(out, args.out)
    print(f"wrote {args.out}")
    return 0


def _load_full(path) -> RasterImage:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return RasterImage(arr)


def _eval_images(args, cfg, size=None):
    source = ImageFolderDataset(args.dataset, cfg.top_resolution)
    return source, source.at_resolution(size or cfg.top_resolution)


def cmd_eval(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    out = _resolve_out(args.out)
    _, images = _eval_images(args, state.config)
    row = evalkit.evaluate_model(
        state.gen, images, args.mask_mode, args.ratio, variant="checkpoint",
        mask_seed=args.seed or 0,
    )
    evalkit.rows_to_csv([row], out / "eval.csv")
    evalkit.rows_to_json([row], out / "eval.json")
    print(json.dumps(row.__dict__))
    return 0


def _parse_ratios(spec: str):
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--ratios must be start:stop:step, got {spec!r}") from exc
    if step <= 0 or not 0 < start <= stop < 1:
        raise ConfigError(f"bad ratio range {spec!r}")
    ratios = []
    r = start
    while r <= stop + 1e-9:
        ratios.append(round(r, 6))
        r += step
    return ratios


def cmd_sweep_hole(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    out = _resolve_out(args.out)
    _, images = _eval_images(args, state.config)
    rows = evalkit.hole_sweep(state.gen, images, _parse_ratios(args.ratios))
    evalkit.rows_to_csv(rows, out / "hole_sweep.csv")
    evalkit.rows_to_json(rows, out / "hole_sweep.json")
    print(f"wrote {out / 'hole_sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_sweep_res(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    out = _resolve_out(args.out)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    source = ImageFolderDataset(args.dataset, state.config.top_resolution)
    rows = evalkit.resolution_sweep(state.gen, source, sizes)
    evalkit.rows_to_csv(rows, out / "resolution_sweep.csv")
    evalkit.rows_to_json(rows, out / "resolution_sweep.json")
    print(f"wrote {out / 'resolution_sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_ablate(args) -> int:
    rc = _load_run_config(args)
    out = _resolve_out(args.out, rc.out)
    if not rc.dataset:
        raise ConfigError("config has no dataset path")
    base = rc.train
    config = evalkit.variant_config(args.variant, base)
    source = ImageFolderDataset(rc.dataset, config.top_resolution)
    state = evalkit.train_variant(config, source)
    eval_source = ImageFolderDataset(rc.dataset, base.top_resolution)
    images = eval_source.at_resolution(base.top_resolution)
    row = evalkit.evaluate_model(state.gen, images, "center", 0.25, variant=args.variant)
    evalkit.rows_to_csv([row], out / f"ablation_{args.variant}.csv")
    evalkit.rows_to_json(
        [row],
        out / f"ablation_{args.variant}.json",
        annotations={args.variant: evalkit.FULL_SCALE_REFERENCE.get(args.variant)},
    )
    trainer.save_checkpoint(state, out / f"checkpoint_{args.variant}")
    print(f"wrote {out / f'ablation_{args.variant}.csv'}")
    return 0


GRADCHECK_TOLERANCES = {
    "gated_conv": 1e-4,
    "contextual_attention": 1e-3,
    "spectral_norm_conv": 1e-4,
    "recon_loss": 1e-6,
    "gen_hinge": 1e-6,
    "disc_hinge": 1e-6,
    "weighted_total": 1e-6,
}


def build_gradcheck_suite(seed: int = 0, probes: int = 12):
    """Finite-difference checks for every differentiable block, on <=8x8
    double-precision probes positioned away from hinge/L1 kinks."""
    torch.manual_seed(seed)
    results = {}

    block = GatedConv(ConvSpec(2, 3, 3))
    x = 0.5 * torch.randn(1, 2, 6, 6, dtype=torch.float64)
    results["gated_conv"] = grad_check(block, (x,), probe_count=probes, seed=seed)

    att = ContextualAttention(AttentionSpec())
    mask = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    mask[:, :, 2:4, 2:4] = 1.0
    fg = 0.5 * torch.randn(1, 3, 6, 6, dtype=torch.float64)
    bg = 0.5 * torch.randn(1, 3, 6, 6, dtype=torch.float64)
    results["contextual_attention"] = grad_check(
        lambda f, b: att(f, b, mask), (fg, bg), probe_count=probes, seed=seed
    )

    sn = SpectralNormConv(ConvSpec(2, 3, 3))
    sn.double().power_iterate(30)
    xs = 0.5 * torch.randn(1, 2, 6, 6, dtype=torch.float64)
    results["spectral_norm_conv"] = grad_check(sn, (xs,), probe_count=probes, seed=seed)

    a = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    b = a + 0.3 + 0.2 * torch.rand_like(a)  # gap bounded away from the L1 kink
    results["recon_loss"] = grad_check(recon_loss, (a, b), probe_count=probes, seed=seed)

    scores = 0.5 * torch.randn(2, 4, 4, dtype=torch.float64)
    results["gen_hinge"] = grad_check(gen_hinge, (scores,), probe_count=probes, seed=seed)

    real = 0.5 * torch.rand(2, 4, 4, dtype=torch.float64) - 0.25
    fake = 0.5 * torch.rand(2, 4, 4, dtype=torch.float64) - 0.25
    results["disc_hinge"] = grad_check(disc_hinge, (real, fake), probe_count=probes, seed=seed)

    weights = LossWeights(alpha=1.0, lambdas=(10.0, 1.0))
    g0 = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    t0 = g0 + 0.4 + 0.1 * torch.rand_like(g0)
    g1 = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    t1 = g1 - 0.4 - 0.1 * torch.rand_like(g1)
    s0 = 0.5 * torch.randn(1, 2, 2, dtype=torch.float64)
    s1 = 0.5 * torch.randn(1, 2, 2, dtype=torch.float64)

    def weighted_total(g0, t0, s0, g1, t1, s1):
        losses = [
            layer_loss(recon_loss(g0, t0), gen_hinge(s0), weights.alpha),
            layer_loss(recon_loss(g1, t1), gen_hinge(s1), weights.alpha),
        ]
        return pyramid_loss(losses, weights)

    results["weighted_total"] = grad_check(
        weighted_total, (g0, t0, s0, g1, t1, s1), probe_count=probes, seed=seed
    )
    return results


def cmd_gradcheck(args) -> int:
    results = build_gradcheck_suite(seed=args.seed or 0)
    report = {}
    ok = True
    for name, res in results.items():
        tol = GRADCHECK_TOLERANCES[name]
        passed = res.max_rel_error < tol
        ok = ok and passed
        report[name] = {
            "max_rel_error": res.max_rel_error,
            "tolerance": tol,
            "passed": passed,
        }
        print(f"{name}: max rel err {res.max_rel_error:.3e} (tol {tol:.0e}) "
              f"{'ok' if passed else 'FAIL'}")
    if args.out:
        out = _resolve_out(args.out)
        (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pyragen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.add_argument("--override-config", action="store_true",
                   help="resume even if the checkpoint config differs")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inpaint", help="restore one image with a mask")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--size", type=int, help="resize/crop input to this size first")
    i.set_defaults(func=cmd_inpaint)

    e = sub.add_parser("eval", help="metrics for one mask condition")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--mask-mode", choices=("center", "freeform"), default="center")
    e.add_argument("--ratio", type=float, default=0.25)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    sh = sub.add_parser("sweep-hole", help="metrics across hole ratios")
    sh.add_argument("--checkpoint", required=True)
    sh.add_argument("--dataset", required=True)
    sh.add_argument("--ratios", default="0.15:0.55:0.10")
    sh.add_argument("--out")
    sh.set_defaults(func=cmd_sweep_hole)

    sr = sub.add_parser("sweep-res", help="metrics across resolutions")
    sr.add_argument("--checkpoint", required=True)
    sr.add_argument("--dataset", required=True)
    sr.add_argument("--sizes", default="64,128,256")
    sr.add_argument("--out")
    sr.set_defaults(func=cmd_sweep_res)

    a = sub.add_parser("ablate", help="train+evaluate one ablation variant")
    a.add_argument("--config", required=True)
    a.add_argument("--variant", required=True, choices=evalkit.ABLATION_VARIANTS)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference checks on all blocks")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=2), file=sys.stderr)
        return 3
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
