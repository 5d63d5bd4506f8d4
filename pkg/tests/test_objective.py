import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pyragen.errors import ShapeError
from pyragen.objective import (
    LossWeights,
    disc_hinge,
    gen_hinge,
    layer_loss,
    pyramid_loss,
    recon_loss,
)


class TestReconLoss:
    def test_identity(self):
        x = torch.randn(2, 3, 8, 8)
        assert float(recon_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = torch.randn(2, 3, 8, 8)
        assert float(recon_loss(x + 0.5, x)) == pytest.approx(0.5, abs=1e-6)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((3, 4, 5))
        brute = abs(a - b).sum() / a.size
        ours = float(recon_loss(torch.from_numpy(a), torch.from_numpy(b)))
        assert ours == pytest.approx(brute, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            recon_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))


class TestGenHinge:
    def test_constant_scores(self):
        assert float(gen_hinge(torch.full((4, 4), 1.5))) == pytest.approx(-1.5)

    def test_zero(self):
        assert float(gen_hinge(torch.zeros(3, 3))) == 0.0

    def test_two_values(self):
        assert float(gen_hinge(torch.tensor([2.0, -4.0]))) == pytest.approx(1.0)


class TestDiscHinge:
    def test_margins_satisfied(self):
        real = torch.full((2, 2), 2.0)
        fake = torch.full((2, 2), -3.0)
        assert float(disc_hinge(real, fake)) == 0.0

    def test_half_scores(self):
        real = torch.full((2, 2), 0.5)
        fake = torch.full((2, 2), 0.5)
        assert float(disc_hinge(real, fake)) == pytest.approx(2.0)

    def test_margin_boundary(self):
        real = torch.ones(2, 2)
        fake = -torch.ones(2, 2)
        assert float(disc_hinge(real, fake)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8),
           st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_nonnegative_and_zero_iff_margins(self, real, fake):
        r = torch.tensor(real, dtype=torch.float64)
        f = torch.tensor(fake, dtype=torch.float64)
        val = float(disc_hinge(r, f))
        assert val >= 0.0
        if all(x >= 1 for x in real) and all(x <= -1 for x in fake):
            assert val == 0.0
        if val == 0.0:
            assert all(x >= 1 for x in real) and all(x <= -1 for x in fake)


class TestLayerLoss:
    def test_examples(self):
        assert layer_loss(0.2, 0.3, 1.0) == pytest.approx(0.5)
        assert layer_loss(0.2, 0.3, 0.0) == pytest.approx(0.3)
        assert layer_loss(0.0, 0.0, 1.0) == 0.0

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            layer_loss(0.1, 0.1, -1.0)


class TestPyramidLoss:
    def test_default_weights(self):
        weights = LossWeights(lambdas=(10.0, 1.0, 1.0))
        total = pyramid_loss([0.2, 0.3, 0.1], weights)
        assert total == pytest.approx(2.4)

    def test_all_zero(self):
        weights = LossWeights(lambdas=(10.0, 1.0, 1.0))
        assert pyramid_loss([0.0, 0.0, 0.0], weights) == 0.0

    def test_unweighted_sum(self):
        weights = LossWeights(lambdas=(1.0, 1.0, 1.0))
        assert pyramid_loss([0.4, 0.5, 0.6], weights) == pytest.approx(1.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pyramid_loss([0.1, 0.2], LossWeights(lambdas=(1.0, 1.0, 1.0)))

    @settings(max_examples=100, deadline=None)
    @given(
        losses=st.lists(st.floats(0, 10), min_size=3, max_size=3),
        lam=st.floats(0, 20),
        index=st.integers(min_value=0, max_value=2),
    )
    def test_linear_in_each_lambda(self, losses, lam, index):
        base = [1.0, 1.0, 1.0]
        lams = list(base)
        lams[index] = lam
        got = pyramid_loss(losses, LossWeights(lambdas=tuple(lams)))
        ref = pyramid_loss(losses, LossWeights(lambdas=tuple(base)))
        assert got == pytest.approx(ref + (lam - 1.0) * losses[index], rel=1e-9, abs=1e-9)


class TestLossWeights:
    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)
        with pytest.raises(ValueError):
            LossWeights(lambdas=(1.0, -2.0))

    def test_for_levels(self):
        w = LossWeights.for_levels(3)
        assert w.lambdas == (10.0, 1.0, 1.0)
        assert w.alpha == 1.0
