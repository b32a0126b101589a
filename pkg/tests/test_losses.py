import math

import pytest
import torch
import torch.nn.functional as F

from pcavs.config import LossConfig
from pcavs.errors import InvalidArgumentError
from pcavs.losses import (
    DiscriminatorPyramid,
    LossWeights,
    PerceptualNet,
    feature_matching_l1,
    gan_loss,
    identity_ce,
    perceptual_loss,
    total_loss,
)


def _constant_pyramid(real_logit: float, fake_logit: float, scales: int = 1):
    """Discriminator stub: logit depends only on whether the batch is the 'real' one (mean > 0)."""

    def pyramid(x):
        value = real_logit if float(x.mean()) > 0 else fake_logit
        logits = torch.full((x.shape[0], 1, 1, 1), value, dtype=x.dtype)
        return [([x], logits) for _ in range(scales)]

    return pyramid


def _linear_pyramid(gain: float):
    def pyramid(x):
        return [([gain * x], x.mean(dim=(1, 2, 3), keepdim=True))]

    return pyramid


# --- gan_loss ---

class TestGanLoss:
    @pytest.mark.parametrize("scales", [1, 2, 3])
    def test_zero_logits(self, scales):
        real, fake = torch.ones(2, 3, 4, 4), -torch.ones(2, 3, 4, 4)
        loss = gan_loss(real, fake, _constant_pyramid(0.0, 0.0, scales), "discriminator")
        assert float(loss) == pytest.approx(scales * 2 * math.log(2), abs=1e-6)

    def test_scalar_oracle(self):
        real, fake = torch.ones(1, 3, 1, 1), -torch.ones(1, 3, 1, 1)
        pyr = _constant_pyramid(2.0, -1.0)
        d = float(gan_loss(real, fake, pyr, "discriminator"))
        sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
        assert d == pytest.approx(-(math.log(sig(2.0)) + math.log(1 - sig(-1.0))), abs=1e-6)
        g = float(gan_loss(real, fake, pyr, "generator"))
        assert g == pytest.approx(-math.log(sig(-1.0)), abs=1e-6)

    def test_generator_side_vanishes_for_confident_fake(self):
        real, fake = torch.ones(1, 3, 2, 2), -torch.ones(1, 3, 2, 2)
        assert float(gan_loss(real, fake, _constant_pyramid(0.0, 50.0), "generator")) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            gan_loss(torch.ones(1, 3, 4, 4), torch.ones(1, 3, 8, 8), _constant_pyramid(0, 0), "generator")

    def test_unknown_side(self):
        with pytest.raises(InvalidArgumentError):
            gan_loss(torch.ones(1, 3, 4, 4), torch.ones(1, 3, 4, 4), _constant_pyramid(0, 0), "critic")

    def test_real_pyramid_runs_every_scale(self):
        cfg = LossConfig(num_scales=3, disc_layers=2, disc_channels=4)
        pyr = DiscriminatorPyramid(cfg)
        out = pyr(torch.zeros(2, 3, 16, 16))
        assert len(out) == 3
        assert [logits.shape[-1] for _, logits in out] == [4, 2, 1]
        loss = gan_loss(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16), pyr, "discriminator")
        assert torch.isfinite(loss)


# --- feature_matching_l1 ---

class TestFeatureMatching:
    def test_identical_inputs(self):
        x = torch.rand(2, 3, 8, 8)
        assert float(feature_matching_l1(x, x.clone(), _linear_pyramid(2.0))) == 0.0

    @pytest.mark.parametrize("gain,c", [(2.0, 0.5), (-3.0, 0.1)])
    def test_linear_layer_closed_form(self, gain, c):
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        loss = feature_matching_l1(x, x + c, _linear_pyramid(gain))
        assert float(loss) == pytest.approx(abs(gain) * c, rel=1e-9)

    def test_non_negative_with_real_discriminator(self):
        pyr = DiscriminatorPyramid(LossConfig(num_scales=2, disc_layers=2, disc_channels=4))
        gen = torch.Generator().manual_seed(0)
        for _ in range(5):
            a = torch.rand(1, 3, 16, 16, generator=gen)
            b = torch.rand(1, 3, 16, 16, generator=gen)
            assert float(feature_matching_l1(a, b, pyr)) >= 0

    def test_no_gradient_through_real_branch(self):
        pyr = DiscriminatorPyramid(LossConfig(num_scales=1, disc_layers=2, disc_channels=4))
        real = torch.rand(1, 3, 16, 16, requires_grad=True)
        fake = torch.rand(1, 3, 16, 16, requires_grad=True)
        feature_matching_l1(real, fake, pyr).backward()
        assert real.grad is None
        assert fake.grad is not None


# --- perceptual_loss ---

class TestPerceptual:
    def test_identical_inputs(self):
        net = PerceptualNet(layers=2)
        x = torch.rand(1, 3, 16, 16)
        assert float(perceptual_loss(x, x.clone(), net)) == 0.0

    def test_more_noise_costs_more(self):
        net = PerceptualNet(layers=2)
        big, small = 0.0, 0.0
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            x = torch.rand(1, 3, 16, 16, generator=gen)
            noise = torch.randn(1, 3, 16, 16, generator=gen)
            big += float(perceptual_loss(x, x + 0.1 * noise, net))
            small += float(perceptual_loss(x, x + 0.01 * noise, net))
        assert big > small

    def test_deterministic_across_instances(self):
        x, y = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        assert float(perceptual_loss(x, y, PerceptualNet(layers=2))) == float(perceptual_loss(x, y, PerceptualNet(layers=2)))

    def test_frozen(self):
        net = PerceptualNet(layers=2)
        net.train()
        assert not net.training
        assert not any(p.requires_grad for p in net.parameters())

    def test_missing_weights_file_falls_back(self, tmp_path):
        net = PerceptualNet(layers=2, weights=str(tmp_path / "missing.pt"))
        assert len(net(torch.zeros(1, 3, 8, 8))) == 2


# --- identity_ce ---

class TestIdentityCE:
    def test_uniform_logits(self):
        assert float(identity_ce(torch.zeros(4), 2)) == pytest.approx(math.log(4), abs=1e-6)

    def test_confident_logits(self):
        expected = -math.log(math.exp(10) / (math.exp(10) + 2))
        assert float(identity_ce(torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64), 0)) == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(9.08e-5, rel=1e-2)

    def test_large_correct_logit(self):
        assert float(identity_ce(torch.tensor([1e4, 0.0, 0.0]), 0)) == 0.0

    def test_batch_matches_torch(self):
        logits = torch.randn(5, 4)
        labels = torch.tensor([0, 1, 2, 3, 0])
        torch.testing.assert_close(identity_ce(logits, labels), F.cross_entropy(logits, labels))

    @pytest.mark.parametrize("label", [-1, 4])
    def test_out_of_range_label(self, label):
        with pytest.raises(InvalidArgumentError):
            identity_ce(torch.zeros(4), label)


# --- total_loss ---

class TestTotalLoss:
    def _components(self, values):
        return dict(zip(("L_GAN", "L_L1", "L_vgg", "L_c", "L_i"), values))

    def test_all_ones(self):
        assert total_loss(self._components([1, 1, 1, 1, 1]), LossWeights()) == pytest.approx(5.0)

    def test_zero_weights_leave_gan(self):
        comps = self._components([0.7, 3, 3, 3, 3])
        assert total_loss(comps, LossWeights(0, 0, 0, 0)) == pytest.approx(0.7)

    def test_weighted(self):
        comps = self._components([0.5, 0.2, 0.1, 0.3, 0.4])
        assert total_loss(comps, LossWeights(2, 1, 1, 1)) == pytest.approx(1.7)

    def test_tensor_components_keep_graph(self):
        x = torch.tensor(2.0, requires_grad=True)
        comps = self._components([x, x, 0.0, 0.0, 0.0])
        total_loss(comps, LossWeights()).backward()
        assert float(x.grad) == 2.0

    def test_nan_component_named(self):
        comps = self._components([1, 1, float("nan"), 1, 1])
        with pytest.raises(InvalidArgumentError, match="L_vgg"):
            total_loss(comps, LossWeights())

    def test_missing_component(self):
        with pytest.raises(InvalidArgumentError, match="L_i"):
            total_loss({"L_GAN": 1, "L_L1": 1, "L_vgg": 1, "L_c": 1}, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(lambda_c=-1)

    def test_from_config(self):
        w = LossWeights.from_config(LossConfig(lambda_c=0.0))
        assert w.lambda_c == 0.0 and w.lambda_1 == 1.0
