import math
from unittest import mock

import numpy as np
import pytest
import torch

from rainfuse import fusion
from rainfuse.fusion import (
    ConfigError,
    FusionConfig,
    FusionNet,
    FusionWeights,
    RefinementNets,
    VGG16Extractor,
    adaptive_weights,
    cascaded_refine,
    fuse,
    information_measurement,
    laplacian,
    make_extractor,
    reassemble_luma,
    refine_step,
    split_luma,
)
from rainfuse.imaging import DimensionError
from rainfuse.losses import fusion_loss, refinement_loss
from rainfuse.structural import ssim
from fixtures import checkerboard, smooth_field


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))[None, None]


def force_balance(nets: RefinementNets, value: float):
    """Make B emit a constant: zero the last conv's weights and pick its bias."""
    last = nets.balance.body[-2]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.fill_(50.0 if value == 1.0 else math.log(value / (1 - value)))


class TestInformation:
    def test_constant_image_is_zero(self):
        for name in ("identity", "pyramid"):
            assert float(information_measurement(torch.full((1, 1, 16, 16), 0.3), make_extractor(name))) == 0.0

    def test_non_negative(self, rng):
        x = torch.from_numpy(rng.random((3, 1, 20, 20)))
        assert torch.all(information_measurement(x, make_extractor("pyramid")) >= 0)

    def test_laplacian_interior_by_hand(self, rng):
        x = rng.random((6, 7))
        got = laplacian(t(x))[0, 0].numpy()
        for i in range(1, 5):
            for j in range(1, 6):
                want = x[i - 1, j] + x[i + 1, j] + x[i, j - 1] + x[i, j + 1] - 4 * x[i, j]
                assert got[i, j] == pytest.approx(want, abs=1e-12)

    def test_checkerboard_with_cell_two(self):
        board = checkerboard(16, cell=2)
        pad = np.pad(board, 1, mode="edge")
        energy = 0.0
        for i in range(16):
            for j in range(16):
                v = pad[i, j + 1] + pad[i + 2, j + 1] + pad[i + 1, j] + pad[i + 1, j + 2] - 4 * pad[i + 1, j + 1]
                energy += v * v
        got = float(information_measurement(t(board), make_extractor("identity")))
        assert got == pytest.approx(energy / 256, abs=1e-6)

    def test_pyramid_averages_five_stages(self, rng):
        x = t(rng.random((32, 32)))
        feats = make_extractor("pyramid")(x)
        assert [f.shape[-1] for f in feats] == [32, 16, 8, 4, 2]
        want = np.mean([float(laplacian(f).pow(2).mean()) for f in feats])
        assert float(information_measurement(x, make_extractor("pyramid"))) == pytest.approx(want, rel=1e-12)

    def test_missing_extractor(self):
        with pytest.raises(ConfigError):
            information_measurement(torch.zeros(1, 1, 8, 8), None)

    def test_rgb_rejected(self):
        with pytest.raises(DimensionError):
            information_measurement(torch.zeros(1, 3, 8, 8), make_extractor("identity"))

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError):
            make_extractor("resnet")

    def test_vgg_needs_weights(self):
        with pytest.raises(ConfigError):
            make_extractor("vgg16")

    def test_vgg_random_weights(self, tmp_path):
        from torchvision.models.vgg import cfgs, make_layers

        path = tmp_path / "vgg.pt"
        # Key layout of a full vgg16 checkpoint; classifier keys are ignored anyway.
        trunk = make_layers(cfgs["D"])
        torch.save({f"features.{k}": v for k, v in trunk.state_dict().items()}, path)
        ext = make_extractor("vgg16", path)
        assert not any(p.requires_grad for p in ext.parameters())
        feats = ext(torch.rand(1, 1, 32, 32))
        assert [f.shape[1] for f in feats] == [64, 128, 256, 512, 512]
        assert [f.shape[-1] for f in feats] == [32, 16, 8, 4, 2]
        assert float(information_measurement(torch.rand(1, 1, 32, 32), ext)) > 0

    def test_vgg_incomplete_state(self):
        from torchvision.models.vgg import cfgs, make_layers

        sd = make_layers(cfgs["D"]).state_dict()
        sd.pop("0.weight")
        with pytest.raises(ConfigError):
            VGG16Extractor(state_dict=sd)


class TestWeights:
    def test_direct_softmax(self):
        w = adaptive_weights(1.0, 0.0)
        e = math.e
        assert w.visible == pytest.approx(e / (e + 1), abs=1e-12)
        assert w.as_tuple() == pytest.approx((0.7311, 0.2689), abs=1e-4)

    @pytest.mark.parametrize("v", [0.0, 1e-3, 7.5, 1e4])
    def test_equal(self, v):
        assert adaptive_weights(v, v).as_tuple() == (0.5, 0.5)

    def test_large_gap_stays_finite(self):
        assert adaptive_weights(1e5, 0.0).as_tuple() == (1.0, 0.0)

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            adaptive_weights(float("nan"), 0.0)

    def test_not_a_distribution(self):
        with pytest.raises(ValueError):
            FusionWeights(0.6, 0.6)


class TestFuse:
    @pytest.mark.parametrize("hw", [(64, 64), (120, 200)])
    def test_shape_and_range(self, hw):
        net = FusionNet()
        y, ir = torch.rand(1, 1, *hw), torch.rand(1, 1, *hw)
        out = fuse(y, ir, net)
        assert out.shape == y.shape
        assert 0 <= out.min() and out.max() <= 1

    def test_layer_widths(self):
        convs = [m for m in FusionNet().modules() if isinstance(m, torch.nn.Conv2d)]
        assert [(c.in_channels, c.out_channels) for c in convs] == [(2, 16), (16, 32), (32, 16), (16, 1)]

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            fuse(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 9), FusionNet())

    def test_fixed_point_training(self):
        torch.manual_seed(3)
        net = FusionNet().double()
        y = torch.from_numpy(smooth_field(32, 5))[None, None]
        opt = torch.optim.Adam(net.parameters(), lr=3e-3)
        w = FusionWeights(0.5, 0.5)
        for _ in range(400):
            opt.zero_grad()
            loss = fusion_loss(y, fuse(y, y, net), y, w).value
            loss.backward()
            opt.step()
        with torch.no_grad():
            assert float(ssim(fuse(y, y, net), y)) > 0.95


class TestRefine:
    def test_neutral_balance(self, rng):
        nets = RefinementNets().double().eval()
        force_balance(nets, 1.0)
        x, ir = t(rng.random((12, 12))), t(rng.random((12, 12)))
        out = refine_step(x, ir, nets, 1e-4)
        torch.testing.assert_close(out, x / (1 + 1e-4))

    def test_half_balance_doubles(self):
        nets = RefinementNets().double().eval()
        force_balance(nets, 0.5)
        x = torch.full((1, 1, 8, 8), 0.4, dtype=torch.float64)
        out = refine_step(x, torch.rand(1, 1, 8, 8, dtype=torch.float64), nets, 1e-4, clamp=False)
        torch.testing.assert_close(out, torch.full_like(x, 0.4 / (0.5 + 1e-4)))
        assert float(out[0, 0, 0, 0].detach()) == pytest.approx(0.8, abs=1e-3)

    def test_zero_pixels_finite(self):
        nets = RefinementNets().eval()
        force_balance(nets, 1e-12)
        out = refine_step(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), nets, 1e-4, clamp=False)
        assert torch.isfinite(out).all() and float(out.detach().abs().max()) == 0.0

    def test_precomputed_adjust_map(self, rng):
        nets = RefinementNets().double().eval()
        x, ir = t(rng.random((8, 8))), t(rng.random((8, 8)))
        torch.testing.assert_close(refine_step(x, ir, nets, adjust_map=nets.adjust(ir)), refine_step(x, ir, nets))

    def test_never_darkens(self, rng):
        # B lies in (0, 1), so dividing by B + eps can only brighten, up to the clamp.
        nets = RefinementNets().double().eval()
        x, ir = t(0.3 * rng.random((16, 16))), t(rng.random((16, 16)))
        assert torch.all(refine_step(x, ir, nets) >= x / (1 + 1e-4) - 1e-12)

    def test_trained_refinement_brightens_dim_image(self):
        torch.manual_seed(0)
        nets = RefinementNets(8).double()
        dim = torch.from_numpy(0.25 * smooth_field(32, 9))[None, None]
        ir = torch.from_numpy(smooth_field(32, 10))[None, None]
        opt = torch.optim.Adam(nets.parameters(), lr=1e-3)
        for _ in range(20):
            opt.zero_grad()
            a = nets.adjust(ir)
            refinement_loss(dim, refine_step(dim, ir, nets, adjust_map=a), a).value.backward()
            opt.step()
        nets.eval()
        with torch.no_grad():
            out = cascaded_refine(dim, ir, FusionConfig(cascaded_stages=1, adjust_iterations=3), nets)
        assert float(out.mean()) > float(dim.mean())

    def test_zero_iterations_is_identity(self, rng):
        x, ir = t(rng.random((8, 8))), t(rng.random((8, 8)))
        out = cascaded_refine(x, ir, FusionConfig(cascaded_stages=3, adjust_iterations=0), RefinementNets().double())
        assert out is x

    @pytest.mark.parametrize("k,t_", [(3, 3), (1, 1), (2, 4)])
    def test_step_count(self, k, t_):
        nets = RefinementNets().eval()
        with mock.patch.object(fusion, "refine_step", wraps=fusion.refine_step) as spy:
            cascaded_refine(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8), FusionConfig(k, t_), nets, FusionNet())
        assert spy.call_count == k * t_

    def test_refuse_between_stages(self):
        nets, net = RefinementNets().eval(), FusionNet()
        with mock.patch.object(fusion, "fuse", wraps=fusion.fuse) as spy:
            cascaded_refine(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8), FusionConfig(3, 1), nets, net)
        assert spy.call_count == 2

    def test_adjust_has_batchnorm(self):
        nets = RefinementNets()
        bns = [m for m in nets.adjust.modules() if isinstance(m, torch.nn.BatchNorm2d)]
        convs = [m for m in nets.adjust.modules() if isinstance(m, torch.nn.Conv2d)]
        assert len(bns) == 4 and len(convs) == 5

    @pytest.mark.parametrize("kw", [{"cascaded_stages": 0}, {"adjust_iterations": -1}, {"eps_div": 0.0}, {"alpha": -1}])
    def test_config_errors(self, kw):
        with pytest.raises(ConfigError):
            FusionConfig(**kw)


def test_luma_split_and_reassemble(rng):
    rgb = torch.from_numpy(rng.random((1, 3, 9, 9)))
    y, chroma = split_luma(rgb)
    torch.testing.assert_close(reassemble_luma(y, chroma), y, atol=1e-9, rtol=0)
