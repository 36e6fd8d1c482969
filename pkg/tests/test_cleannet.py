import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from rainfuse.cleannet import (
    EXPERT_KINDS,
    MDFFN,
    TSSA,
    AgMoE,
    CleanNet,
    CleanNetConfig,
    ConfigError,
    LayerNorm2d,
    TransformerBlock,
    channel_descriptor,
    expert_bank,
    num_selected,
    topk_attention,
)
from rainfuse.imaging import DimensionError


@pytest.fixture(autouse=True)
def _double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def rand(*shape):
    return torch.randn(*shape, dtype=torch.float64)


class TestConfig:
    def test_defaults(self):
        c = CleanNetConfig()
        assert (c.base_channels, c.attention_hidden, c.num_experts) == (48, 32, 8)

    @pytest.mark.parametrize(
        "kw", [{"base_channels": 0}, {"attention_hidden": 0}, {"num_experts": 0}, {"topk_fraction": 0.0}, {"topk_fraction": 1.2}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            CleanNetConfig(**kw)

    def test_expert_count_matches_layers(self):
        for s in (1, 3, 8):
            net = CleanNet(CleanNetConfig(base_channels=8, attention_hidden=4, num_experts=s, num_agmoe_blocks=1, num_transformer_blocks=0))
            assert len(net.agmoe[0].experts) == s


class TestChannelDescriptor:
    def test_constant(self):
        np.testing.assert_allclose(channel_descriptor(torch.full((1, 3, 5, 4), 0.7)), 0.7)

    def test_single_pixel(self):
        x = rand(2, 4, 1, 1)
        torch.testing.assert_close(channel_descriptor(x), x[:, :, 0, 0])

    def test_brute_force(self):
        x = rand(1, 3, 4, 4)
        want = [sum(float(x[0, c, i, j]) for i in range(4) for j in range(4)) / 16 for c in range(3)]
        np.testing.assert_allclose(channel_descriptor(x)[0].numpy(), want, rtol=1e-12)


class TestExperts:
    def test_bank_layout(self):
        bank = expert_bank(6)
        assert len(bank) == 8 and len(EXPERT_KINDS) == 8
        assert isinstance(bank[0], torch.nn.AvgPool2d)
        # Depth-wise kernels of the separable experts, then the dilations.
        assert [bank[i][0].kernel_size[0] for i in range(1, 5)] == [1, 3, 5, 7]
        assert [bank[i].dilation[0] for i in range(5, 8)] == [1, 2, 3]
        assert all(bank[i].kernel_size == (3, 3) for i in range(5, 8))

    @pytest.mark.parametrize("hw", [(8, 8), (9, 13)])
    def test_shape_preserved(self, hw):
        x = rand(2, 6, *hw)
        for e in expert_bank(6):
            assert e(x).shape == x.shape

    def test_dilated_span(self):
        # An impulse spreads exactly (span - 1) / 2 pixels either way.
        for i, span in zip(range(5, 8), (3, 5, 7)):
            e = expert_bank(1)[i]
            torch.nn.init.ones_(e.weight)
            torch.nn.init.zeros_(e.bias)
            x = torch.zeros(1, 1, 15, 15)
            x[0, 0, 7, 7] = 1
            rows = torch.nonzero(e(x)[0, 0])[:, 0]
            assert int(rows.max() - rows.min()) == span - 1


class TestAgMoE:
    def test_weights_formula(self):
        m = AgMoE(5, 7, 8)
        x = rand(3, 5, 6, 6)
        want = m.w2.weight @ torch.relu(m.w1.weight @ x.mean(dim=(2, 3)).T)
        torch.testing.assert_close(m.expert_weights(x), want.T)
        assert m.w1.weight.shape == (7, 5) and m.w2.weight.shape == (8, 7)

    def test_shape_full_size(self):
        m = AgMoE(48, 32, 8).float()
        assert m(torch.randn(1, 48, 64, 64, dtype=torch.float32)).shape == (1, 48, 64, 64)

    def test_single_identity_expert(self, monkeypatch):
        m = AgMoE(4, 3, experts=[torch.nn.Identity()])
        monkeypatch.setattr(m, "expert_weights", lambda f: torch.ones(f.shape[0], 1, dtype=f.dtype))
        x = rand(2, 4, 8, 8)
        want = F.conv2d(x, m.merge.weight, m.merge.bias) + x
        torch.testing.assert_close(m(x), want)

    def test_mixture_is_weighted_concat(self):
        m = AgMoE(3, 4, 3)
        x = rand(1, 3, 8, 8)
        a = m.expert_weights(x)[0]
        z = torch.cat([a[i] * m.experts[i](x) for i in range(3)], dim=1)
        torch.testing.assert_close(m(x), F.conv2d(z, m.merge.weight, m.merge.bias) + x)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            AgMoE(4)(rand(1, 5, 8, 8))


class TestTopK:
    @pytest.mark.parametrize("frac,n,k", [(1.0, 6, 6), (0.8, 10, 8), (0.5, 6, 3), (0.01, 6, 1), (0.34, 3, 2)])
    def test_num_selected(self, frac, n, k):
        assert num_selected(frac, n) == k

    def test_rows_sum_to_one_with_k_nonzeros(self):
        q, k, v = rand(2, 6, 5), rand(2, 6, 5), rand(2, 6, 5)
        for frac in (0.2, 0.5, 0.8, 1.0):
            _, w = topk_attention(q, k, v, frac)
            kk = num_selected(frac, 6)
            torch.testing.assert_close(w.sum(-1), torch.ones(2, 6))
            assert torch.all((w > 0).sum(-1) == kk)

    def test_selected_are_the_largest_scores(self):
        q, k, v = rand(1, 7, 4), rand(1, 7, 4), rand(1, 7, 4)
        _, w = topk_attention(q, k, v, 0.5)
        scores = (q @ k.transpose(-1, -2))[0]
        for row_s, row_w in zip(scores, w[0]):
            kept = set(torch.nonzero(row_w).flatten().tolist())
            assert kept == set(torch.argsort(row_s, descending=True)[:4].tolist())

    def test_retained_weights_are_renormalised_softmax(self):
        q, k, v = rand(1, 5, 3), rand(1, 5, 3), rand(1, 5, 3)
        _, w = topk_attention(q, k, v, 0.6)
        s = (q @ k.transpose(-1, -2) / math.sqrt(3))[0]
        dense = torch.softmax(s, -1)
        for r in range(5):
            keep = w[0, r] > 0
            torch.testing.assert_close(w[0, r, keep], dense[r, keep] / dense[r, keep].sum())

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 12), d=st.integers(1, 9), frac=st.floats(0.01, 1.0), seed=st.integers(0, 999))
    def test_sparsity_property(self, n, d, frac, seed):
        g = torch.Generator().manual_seed(seed)
        q, k, v = (torch.randn(n, d, generator=g, dtype=torch.float64) for _ in range(3))
        out, w = topk_attention(q, k, v, frac)
        assert torch.all((w > 0).sum(-1) == min(num_selected(frac, n), n))
        assert torch.allclose(w.sum(-1), torch.ones(n, dtype=torch.float64), atol=1e-6)
        assert torch.isfinite(out).all()

    @pytest.mark.parametrize("frac", [0.0, -0.5, 1.01])
    def test_bad_fraction(self, frac):
        with pytest.raises(ConfigError):
            TSSA(4, 1, frac)


def tssa_by_hand(m: TSSA, x: torch.Tensor) -> torch.Tensor:
    """Loop-level restatement: channels are tokens, each H*W long."""
    b, c, h, w = x.shape
    with torch.no_grad():
        qkv = m.qkv_dw(m.qkv(x))
    q, k, v = qkv[:, :c], qkv[:, c : 2 * c], qkv[:, 2 * c :]
    out = torch.zeros_like(x)
    d = h * w
    keep = num_selected(m.topk_fraction, c)
    for bi in range(b):
        qt, kt, vt = (t[bi].reshape(c, d) for t in (q, k, v))
        for i in range(c):
            scores = [float(qt[i] @ kt[j]) / math.sqrt(d) for j in range(c)]
            top = sorted(range(c), key=lambda j: -scores[j])[:keep]
            mx = max(scores[j] for j in top)
            e = {j: math.exp(scores[j] - mx) for j in top}
            z = sum(e.values())
            out[bi, i] = sum(e[j] / z * vt[j] for j in top).reshape(h, w)
    with torch.no_grad():
        return m.project_out(out)


class TestTSSA:
    def test_matches_loop_oracle(self):
        m = TSSA(6, 1, 0.5)
        x = rand(2, 6, 8, 8)
        with torch.no_grad():
            torch.testing.assert_close(m(x), tssa_by_hand(m, x))

    def test_shape(self):
        m = TSSA(8, 2, 0.8)
        assert m(rand(1, 8, 9, 11)).shape == (1, 8, 9, 11)


class TestMDFFN:
    def test_shape(self):
        m = MDFFN(48).float()
        assert m(torch.randn(1, 48, 32, 32, dtype=torch.float32)).shape == (1, 48, 32, 32)

    def test_zero_input_bias_only(self):
        m = MDFFN(4)
        out = m(torch.zeros(1, 4, 8, 8))
        flat = out.flatten(2)
        torch.testing.assert_close(flat, flat[..., :1].expand_as(flat))
        want = F.conv2d(torch.cat([F.gelu(m.dw3.bias), F.gelu(m.dw5.bias)]).view(1, -1, 1, 1), m.project_out.weight, m.project_out.bias)
        torch.testing.assert_close(out[..., :1, :1], want)

    def test_three_by_three_branch_alone(self):
        m = MDFFN(3)
        with torch.no_grad():
            m.dw5.weight.zero_()
            m.dw5.bias.zero_()
        x = rand(1, 3, 8, 8)
        hid = F.conv2d(x, m.project_in.weight)
        b3 = F.gelu(F.conv2d(hid, m.dw3.weight, m.dw3.bias, padding=1, groups=hid.shape[1]))
        want = F.conv2d(torch.cat([b3, torch.zeros_like(b3)], 1), m.project_out.weight, m.project_out.bias)
        torch.testing.assert_close(m(x), want)


class TestTransformerBlock:
    def test_layernorm_per_pixel(self):
        ln = LayerNorm2d(5)
        with torch.no_grad():
            ln.weight.uniform_(0.5, 2)
            ln.bias.uniform_(-1, 1)
        x = rand(2, 5, 3, 4)
        mu = x.mean(1, keepdim=True)
        var = x.var(1, unbiased=False, keepdim=True)
        want = (x - mu) / torch.sqrt(var + 1e-5) * ln.weight.view(1, -1, 1, 1) + ln.bias.view(1, -1, 1, 1)
        torch.testing.assert_close(ln(x), want)

    def test_composition(self):
        blk = TransformerBlock(6, 1, 0.8)
        x = rand(1, 6, 8, 8)
        mid = x + blk.attn(blk.norm1(x))
        torch.testing.assert_close(blk(x), mid + blk.ffn(blk.norm2(mid)))

    @pytest.mark.parametrize("hw", [(8, 8), (12, 9), (16, 31)])
    def test_shapes(self, hw):
        assert TransformerBlock(4)(rand(1, 4, *hw)).shape == (1, 4, *hw)


class TestCleanNet:
    small = CleanNetConfig(base_channels=8, attention_hidden=4, num_experts=3, num_agmoe_blocks=1, num_transformer_blocks=1)

    @pytest.mark.parametrize("hw", [(64, 64), (48, 80)])
    def test_shape(self, hw):
        net = CleanNet(self.small)
        x = torch.rand(1, 3, *hw)
        assert net(x).shape == x.shape

    def test_clamped_output(self):
        net = CleanNet(self.small)
        with torch.no_grad():
            net.reconstruct.bias.fill_(5.0)
        x = torch.rand(1, 3, 8, 8)
        assert net(x).max() <= 1.0
        assert net(x, clamp=False).min() > 1.0

    def test_too_small(self):
        with pytest.raises(DimensionError):
            CleanNet(self.small)(torch.rand(1, 3, 7, 16))

    def test_wrong_channels(self):
        with pytest.raises(DimensionError):
            CleanNet(self.small)(torch.rand(1, 1, 16, 16))

    def test_features_finite(self):
        net = CleanNet(self.small)
        x = torch.rand(2, 3, 16, 16)
        f = net.embed(x)
        for blk in [*net.agmoe, *net.transformer]:
            f = blk(f)
            assert torch.isfinite(f).all()
