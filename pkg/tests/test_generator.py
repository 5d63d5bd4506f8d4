import numpy as np
import pytest
import torch

from pyragen.errors import ConfigError, ShapeError
from pyragen.generator import (
    DilationPlan,
    FusionMode,
    PyramidGenerator,
    SubGenerator,
    compose,
    count_params,
    fuse,
    inpaint_image,
    pyramid_forward,
)
from pyragen.imaging import HoleMask, RasterImage, build_pyramid, gen_center_mask
from pyragen.nnblocks import ConvSpec


def _rand_image(size, seed=0, channels=3):
    rng = np.random.default_rng(seed)
    return RasterImage(rng.uniform(-1, 1, (size, size, channels)).astype(np.float32))


def _sub(width=8, rates=(2, 4)):
    torch.manual_seed(0)
    return SubGenerator(base_width=width, dilation_rates=rates)


def _inputs(size, seed=0, batch=1):
    torch.manual_seed(seed)
    img = torch.rand(batch, 3, size, size) * 2 - 1
    mask = torch.zeros(batch, 1, size, size)
    q = size // 4
    mask[:, :, q : 3 * q, q : 3 * q] = 1.0
    return img * (1 - mask), mask


class TestDilationPlan:
    def test_adaptive(self):
        plan = DilationPlan.adaptive(3)
        assert plan.for_level(0) == (2, 4, 8, 12)
        assert plan.for_level(1) == (2, 4, 8)
        assert plan.for_level(2) == (2, 4, 8)

    def test_standard(self):
        plan = DilationPlan.standard(3)
        assert all(plan.for_level(n) == (2, 4, 8, 16) for n in range(3))

    def test_validation(self):
        with pytest.raises(ConfigError):
            DilationPlan(((8, 4, 2),))
        with pytest.raises(ConfigError):
            DilationPlan(((),))


class TestSubGenerator:
    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_shape_contract(self, size):
        sub = _sub()
        masked, mask = _inputs(size)
        out, _, _ = sub(masked, mask)
        assert out.coarse.shape == (1, 3, size, size)
        assert out.refined.shape == (1, 3, size, size)

    def test_tanh_bounded(self):
        sub = _sub()
        masked, mask = _inputs(32, seed=3)
        out, _, _ = sub(masked, mask)
        assert float(out.coarse.abs().max()) < 1.0
        assert float(out.refined.abs().max()) < 1.0

    def test_deterministic(self):
        sub = _sub()
        masked, mask = _inputs(32)
        a, _, _ = sub(masked, mask)
        b, _, _ = sub(masked, mask)
        assert torch.equal(a.refined, b.refined)

    def test_too_small_input(self):
        sub = _sub()
        masked, mask = _inputs(8)
        with pytest.raises(ShapeError):
            sub(masked, mask)

    def test_fusion_equivalence_with_zero_lower(self):
        sub = _sub()
        masked, mask = _inputs(32, seed=5)
        zero_lower = torch.zeros(1, 3, 16, 16)
        fused_run, _, _ = sub(masked, mask, lower_output=zero_lower)
        standalone, _, _ = sub(masked, mask, lower_output=None)
        assert torch.equal(fused_run.refined, standalone.refined)
        assert torch.equal(fused_run.fused_input, standalone.fused_input)


class TestFuse:
    def test_zero_lower_is_identity(self):
        coarse = torch.rand(1, 3, 32, 32) * 2 - 1
        lower = torch.zeros(1, 3, 16, 16)
        out = fuse(coarse, lower, FusionMode.IMAGE_REFINE_BOTH)
        assert torch.equal(out, coarse)

    def test_constant_lower_dominates_zero_coarse(self):
        coarse = torch.zeros(1, 3, 32, 32)
        lower = torch.full((1, 3, 16, 16), 0.4)
        out = fuse(coarse, lower, FusionMode.IMAGE_REFINE_BOTH)
        assert torch.allclose(out, torch.full_like(out, 0.4), atol=1e-6)

    def test_clamped(self):
        coarse = torch.full((1, 3, 32, 32), 0.9)
        lower = torch.full((1, 3, 16, 16), 0.9)
        out = fuse(coarse, lower, FusionMode.IMAGE_REFINE_BOTH)
        assert float(out.max()) <= 1.0
        assert torch.allclose(out, torch.ones_like(out))

    def test_feature_mode_rejected(self):
        with pytest.raises(ConfigError):
            fuse(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 16, 16),
                 FusionMode.FEATURE_COARSE)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            fuse(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 20, 20),
                 FusionMode.IMAGE_REFINE_BOTH)


class TestPyramidGenerator:
    def test_output_resolution_chain(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=3, base_width=8)
        sample = build_pyramid(_rand_image(64), gen_center_mask(64, 0.25), 3)
        outs = pyramid_forward(sample, gen)
        assert [o.refined.shape[-1] for o in outs] == [16, 32, 64]
        for n in range(1, 3):
            assert outs[n].refined.shape[-1] == 2 * outs[n - 1].refined.shape[-1]

    def test_zero_mask_composes_to_input(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=2, base_width=8)
        img = _rand_image(32, seed=2)
        mask = HoleMask(np.zeros((32, 32), np.uint8))
        out = inpaint_image(gen, img, mask)
        assert np.array_equal(out.values, img.values)

    def test_deterministic(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=2, base_width=8)
        sample = build_pyramid(_rand_image(32, seed=4), gen_center_mask(32, 0.25), 2)
        a = pyramid_forward(sample, gen)
        b = pyramid_forward(sample, gen)
        assert torch.equal(a[-1].refined, b[-1].refined)

    def test_level_count_mismatch(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=3, base_width=8)
        sample = build_pyramid(_rand_image(32), gen_center_mask(32, 0.25), 2)
        with pytest.raises(ConfigError):
            pyramid_forward(sample, gen)

    def test_known_region_identity_every_level(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=2, base_width=8)
        sample = build_pyramid(_rand_image(64, seed=6), gen_center_mask(64, 0.3), 2)
        outs = pyramid_forward(sample, gen)
        for n, out in enumerate(outs):
            img = torch.from_numpy(sample.levels[n][0].values.transpose(2, 0, 1))[None]
            mask = torch.from_numpy(
                sample.levels[n][1].values[None].astype(np.float32)
            )[None]
            comp = compose(out.refined, img, mask)
            known = (mask == 0).expand_as(img)
            assert torch.equal(comp[known], img[known])

    @pytest.mark.parametrize(
        "mode",
        [
            FusionMode.IMAGE_REFINE_ATT_ONLY,
            FusionMode.IMAGE_REFINE_NONATT_ONLY,
            FusionMode.FEATURE_COARSE,
            FusionMode.FEATURE_REFINE,
        ],
    )
    def test_fusion_variants_run(self, mode):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=2, base_width=8, fusion=mode)
        sample = build_pyramid(_rand_image(32, seed=7), gen_center_mask(32, 0.25), 2)
        outs = pyramid_forward(sample, gen)
        assert outs[-1].refined.shape == (1, 3, 32, 32)

    def test_image_modes_share_parameter_shapes(self):
        shapes = []
        for mode in (
            FusionMode.IMAGE_REFINE_BOTH,
            FusionMode.IMAGE_REFINE_ATT_ONLY,
            FusionMode.IMAGE_REFINE_NONATT_ONLY,
        ):
            torch.manual_seed(0)
            gen = PyramidGenerator(levels=2, base_width=8, fusion=mode)
            shapes.append({k: tuple(v.shape) for k, v in gen.state_dict().items()})
        assert shapes[0] == shapes[1] == shapes[2]

    def test_wiring_differs_between_image_modes(self):
        sample = build_pyramid(_rand_image(32, seed=8), gen_center_mask(32, 0.25), 2)
        outs = {}
        for mode in (FusionMode.IMAGE_REFINE_BOTH, FusionMode.IMAGE_REFINE_ATT_ONLY):
            torch.manual_seed(0)
            gen = PyramidGenerator(levels=2, base_width=8, fusion=mode)
            outs[mode] = pyramid_forward(sample, gen)[-1].refined
        assert not torch.equal(*outs.values())

    def test_min_levels(self):
        with pytest.raises(ConfigError):
            PyramidGenerator(levels=1, base_width=8)

    def test_dilation_plan_length_checked(self):
        with pytest.raises(ConfigError):
            PyramidGenerator(levels=3, base_width=8, dilation=DilationPlan.adaptive(2))


class TestCompose:
    def test_zero_mask_returns_original(self):
        img = _rand_image(16, seed=1)
        gen = _rand_image(16, seed=2)
        mask = HoleMask(np.zeros((16, 16), np.uint8))
        assert np.array_equal(compose(gen, img, mask).values, img.values)

    def test_full_mask_returns_generated(self):
        img = _rand_image(16, seed=1)
        gen = _rand_image(16, seed=2)
        mask = HoleMask(np.ones((16, 16), np.uint8))
        assert np.array_equal(compose(gen, img, mask).values, gen.values)

    def test_checkerboard_oracle(self):
        img = _rand_image(16, seed=3)
        gen = _rand_image(16, seed=4)
        board = np.indices((16, 16)).sum(axis=0) % 2
        mask = HoleMask(board.astype(np.uint8))
        out = compose(gen, img, mask)
        expect = np.where(board[:, :, None] == 1, gen.values, img.values)
        assert np.array_equal(out.values, expect)

    def test_torch_path_matches_numpy(self):
        img = _rand_image(16, seed=5)
        gen = _rand_image(16, seed=6)
        mask = gen_center_mask(16, 0.3)
        ref = compose(gen, img, mask)
        t = compose(
            torch.from_numpy(gen.values.transpose(2, 0, 1))[None],
            torch.from_numpy(img.values.transpose(2, 0, 1))[None],
            torch.from_numpy(mask.values[None].astype(np.float32))[None],
        )
        assert np.allclose(t[0].numpy().transpose(1, 2, 0), ref.values, atol=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compose(_rand_image(16), _rand_image(32), gen_center_mask(32, 0.2))


class TestCountParams:
    def test_upper_levels_equal(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=3, base_width=8)
        counts = count_params(gen)
        assert counts[1] == counts[2]

    def test_standard_plan_all_equal(self):
        torch.manual_seed(0)
        gen = PyramidGenerator(levels=3, base_width=8, dilation=DilationPlan.standard(3))
        counts = count_params(gen)
        assert counts[0] == counts[1] == counts[2]

    def test_adaptive_vs_standard_deltas(self):
        torch.manual_seed(0)
        adaptive = count_params(PyramidGenerator(levels=3, base_width=8))
        torch.manual_seed(0)
        standard = count_params(
            PyramidGenerator(levels=3, base_width=8, dilation=DilationPlan.standard(3))
        )
        # level 0: same number of dilated blocks (4), rates differ only
        assert adaptive[0] == standard[0]
        # levels 1..2: one dilated gated conv fewer in each of the two chains
        w = 8
        spec = ConvSpec(4 * w, 4 * w, 3)
        gated_params = 2 * (
            spec.in_channels * spec.out_channels * spec.kernel ** 2 + spec.out_channels
        )
        assert standard[1] - adaptive[1] == 2 * gated_params
        assert standard[2] - adaptive[2] == 2 * gated_params
