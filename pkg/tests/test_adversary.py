import pytest
import torch

from pyragen.adversary import LevelAdversary, depth_for_ladder
from pyragen.errors import ConfigError, ShapeError
from pyragen.nnblocks import SpectralNormConv


def _inputs(size, batch=1):
    torch.manual_seed(1)
    img = torch.rand(batch, 3, size, size) * 2 - 1
    mask = torch.zeros(batch, 1, size, size)
    mask[:, :, size // 4 : size // 2, size // 4 : size // 2] = 1.0
    return img, mask


class TestDepthRule:
    def test_desk_ladder(self):
        assert depth_for_ladder((32, 64, 128)) == 5

    def test_small_ladder(self):
        assert depth_for_ladder((16, 32, 64)) == 4

    def test_full_scale_ladder(self):
        assert depth_for_ladder((128, 256, 512)) == 7

    def test_score_grids_between_1_and_4(self):
        for ladder in ((16, 32, 64), (32, 64, 128), (128, 256, 512)):
            depth = depth_for_ladder(ladder)
            for res in ladder:
                grid = res // 2 ** depth
                assert 1 <= grid <= 4

    def test_bad_resolution(self):
        with pytest.raises(ConfigError):
            depth_for_ladder((48, 96))


class TestLevelAdversary:
    def test_six_blocks_on_64_gives_1x1(self):
        torch.manual_seed(0)
        adv = LevelAdversary(depth=6, base_width=8)
        img, mask = _inputs(64)
        assert adv(img, mask).shape == (1, 1, 1)

    def test_identical_topology_same_shapes(self):
        torch.manual_seed(0)
        d1 = LevelAdversary(depth=4, base_width=8)
        d2 = LevelAdversary(depth=4, base_width=8)
        img, mask = _inputs(32)
        assert d1(img, mask).shape == d2(img, mask).shape
        shapes1 = {k: tuple(v.shape) for k, v in d1.state_dict().items()}
        shapes2 = {k: tuple(v.shape) for k, v in d2.state_dict().items()}
        assert shapes1 == shapes2

    def test_deterministic_with_frozen_estimate(self):
        torch.manual_seed(0)
        adv = LevelAdversary(depth=3, base_width=8)
        img, mask = _inputs(32)
        a = adv(img, mask)
        b = adv(img, mask)
        assert torch.equal(a, b)

    def test_no_shared_parameters_across_levels(self):
        torch.manual_seed(0)
        advs = [LevelAdversary(depth=3, base_width=8) for _ in range(3)]
        ids = [set(id(p) for p in adv.parameters()) for adv in advs]
        assert not (ids[0] & ids[1]) and not (ids[1] & ids[2])
        before = advs[1](*_inputs(32)).clone()
        with torch.no_grad():
            for p in advs[0].parameters():
                p.add_(1.0)
        assert torch.equal(advs[1](*_inputs(32)), before)

    def test_too_small_input(self):
        torch.manual_seed(0)
        adv = LevelAdversary(depth=6, base_width=8)
        img, mask = _inputs(16)
        with pytest.raises(ShapeError):
            adv(img, mask)

    def test_head_is_linear_no_activation(self):
        torch.manual_seed(0)
        adv = LevelAdversary(depth=3, base_width=8)
        img, mask = _inputs(32)
        scores = adv(img, mask)
        assert float(scores.min()) < 0 or float(scores.max()) > 0

    def test_sigma_near_one_after_warmup(self):
        torch.manual_seed(0)
        adv = LevelAdversary(depth=4, base_width=8)
        adv.power_iteration_step(steps=100)
        for m in adv.modules():
            if isinstance(m, SpectralNormConv):
                with torch.no_grad():
                    w2d = (m.weight / m.sigma()).reshape(m.spec.out_channels, -1)
                    sigma = float(torch.linalg.svdvals(w2d)[0])
                assert sigma == pytest.approx(1.0, abs=1e-2)

    def test_power_iteration_only_on_request(self):
        torch.manual_seed(0)
        adv = LevelAdversary(depth=3, base_width=8)
        us = [m.u.clone() for m in adv.modules() if isinstance(m, SpectralNormConv)]
        adv(*_inputs(32))
        after = [m.u for m in adv.modules() if isinstance(m, SpectralNormConv)]
        assert all(torch.equal(a, b) for a, b in zip(us, after))
        adv.power_iteration_step()
        moved = [m.u for m in adv.modules() if isinstance(m, SpectralNormConv)]
        assert any(not torch.equal(a, b) for a, b in zip(us, moved))
