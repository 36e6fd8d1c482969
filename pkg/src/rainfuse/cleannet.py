"""Stage-1 rain removal network.

Layout (single resolution)::

    x -> 3x3 embed -> AgMoE x n -> TransformerBlock x m -> 3x3 reconstruct -> + x

AgMoE runs a bank of convolutional experts in parallel and weights each one
with a scalar taken from a two-layer attention over the channel means. The
transformer blocks use transposed (channel-token) attention restricted to the
top-k scores per query, followed by a dual-branch depth-wise feed-forward.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .imaging import DimensionError

MIN_SIZE = 8


class ConfigError(ValueError):
    pass


@dataclass
class CleanNetConfig:
    base_channels: int = 48
    attention_hidden: int = 32
    num_experts: int = 8
    num_agmoe_blocks: int = 2
    num_transformer_blocks: int = 4
    topk_fraction: float = 0.8
    heads: int = 1
    ffn_expansion: float = 2.0

    def __post_init__(self):
        if min(self.base_channels, self.attention_hidden, self.num_experts, self.heads) < 1:
            raise ConfigError("channels, hidden size, experts and heads must all be >= 1")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ConfigError(f"topk_fraction must be in (0, 1], got {self.topk_fraction}")
        if self.num_experts > len(EXPERT_KINDS):
            raise ConfigError(f"at most {len(EXPERT_KINDS)} built-in experts, got {self.num_experts}")
        if self.base_channels % self.heads:
            raise ConfigError("base_channels must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


def channel_descriptor(f: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: ``(B, C, H, W) -> (B, C)``."""
    if f.numel() == 0:
        raise DimensionError("empty feature map")
    return f.mean(dim=(2, 3))


class SeparableConv(nn.Sequential):
    def __init__(self, channels: int, k: int):
        super().__init__(
            nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels),
            nn.Conv2d(channels, channels, 1),
        )


class DilatedConv(nn.Conv2d):
    """3x3 kernel dilated so its receptive field spans ``span`` pixels."""

    def __init__(self, channels: int, span: int):
        d = (span - 1) // 2
        super().__init__(channels, channels, 3, padding=d, dilation=d)


# Order matters: a config with S experts uses the first S entries.
EXPERT_KINDS = ("avgpool3", "sep1", "sep3", "sep5", "sep7", "dil3", "dil5", "dil7")


def make_expert(kind: str, channels: int) -> nn.Module:
    if kind == "avgpool3":
        return nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    if kind.startswith("sep"):
        return SeparableConv(channels, int(kind[3:]))
    if kind.startswith("dil"):
        return DilatedConv(channels, int(kind[3:]))
    raise ConfigError(f"unknown expert {kind!r}")


def expert_bank(channels: int, num_experts: int = 8) -> nn.ModuleList:
    return nn.ModuleList(make_expert(k, channels) for k in EXPERT_KINDS[:num_experts])


class AgMoE(nn.Module):
    """Attention-guided mixture of experts with a residual 1x1 merge.

    ``experts`` may be supplied to override the built-in bank; each must map
    ``(B, C, H, W)`` to the same shape.
    """

    def __init__(self, channels: int, hidden: int = 32, num_experts: int = 8, experts=None):
        super().__init__()
        self.channels = channels
        self.experts = expert_bank(channels, num_experts) if experts is None else nn.ModuleList(experts)
        n = len(self.experts)
        self.w1 = nn.Linear(channels, hidden, bias=False)
        self.w2 = nn.Linear(hidden, n, bias=False)
        self.merge = nn.Conv2d(n * channels, channels, 1)

    def expert_weights(self, f: torch.Tensor) -> torch.Tensor:
        return self.w2(F.relu(self.w1(channel_descriptor(f))))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise ConfigError(f"AgMoE built for {self.channels} channels, got {f.shape[1]}")
        a = self.expert_weights(f)
        z = torch.cat([a[:, i, None, None, None] * e(f) for i, e in enumerate(self.experts)], dim=1)
        return self.merge(z) + f


def num_selected(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"topk_fraction must be in (0, 1], got {fraction}")
    # round() guards against 0.8 * 10 = 8.000000000000002
    return max(1, min(n, math.ceil(round(fraction * n, 9))))


def topk_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, fraction: float):
    """Scaled dot-product attention keeping the top-k scores of every query row.

    ``q, k, v`` are ``(..., n, d)``. Non-selected logits are removed before the
    softmax, so they get exactly zero weight and each row still sums to one.
    Returns ``(output, weights)``.
    """
    n, d = k.shape[-2], k.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    keep = num_selected(fraction, n)
    if keep < n:
        idx = scores.topk(keep, dim=-1).indices
        mask = torch.zeros_like(scores, dtype=torch.bool).scatter_(-1, idx, True)
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = scores.softmax(dim=-1)
    return weights @ v, weights


class TSSA(nn.Module):
    """Top-selection self-attention over channel tokens (each token has H*W entries)."""

    def __init__(self, channels: int, heads: int = 1, topk_fraction: float = 0.8):
        super().__init__()
        num_selected(topk_fraction, 1)
        self.heads = heads
        self.topk_fraction = topk_fraction
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3)
        self.project_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q, k, v = (t.reshape(b, self.heads, c // self.heads, h * w) for t in (q, k, v))
        out, _ = topk_attention(q, k, v, self.topk_fraction)
        return self.project_out(out.reshape(b, c, h, w))


class MDFFN(nn.Module):
    """Feed-forward with parallel 3x3 and 5x5 depth-wise branches, concatenated."""

    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, hidden, 1, bias=False)
        self.dw3 = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.dw5 = nn.Conv2d(hidden, hidden, 5, padding=2, groups=hidden)
        self.project_out = nn.Conv2d(2 * hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.project_in(x)
        return self.project_out(torch.cat([F.gelu(self.dw3(x)), F.gelu(self.dw5(x))], dim=1))


class LayerNorm2d(nn.Module):
    """LayerNorm over channels at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 1, topk_fraction: float = 0.8, ffn_expansion: float = 2.0):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.attn = TSSA(channels, heads, topk_fraction)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = MDFFN(channels, ffn_expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class CleanNet(nn.Module):
    def __init__(self, config: CleanNetConfig | None = None):
        super().__init__()
        self.config = config = config or CleanNetConfig()
        c = config.base_channels
        self.embed = nn.Conv2d(3, c, 3, padding=1)
        self.agmoe = nn.Sequential(
            *(AgMoE(c, config.attention_hidden, config.num_experts) for _ in range(config.num_agmoe_blocks))
        )
        self.transformer = nn.Sequential(
            *(
                TransformerBlock(c, config.heads, config.topk_fraction, config.ffn_expansion)
                for _ in range(config.num_transformer_blocks)
            )
        )
        self.reconstruct = nn.Conv2d(c, 3, 3, padding=1)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(self.transformer(self.agmoe(self.embed(x))))

    def forward(self, x: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_SIZE:
            raise DimensionError(f"image {tuple(x.shape[-2:])} is smaller than {MIN_SIZE}x{MIN_SIZE}")
        out = self.residual(x) + x
        return out.clamp(0.0, 1.0) if clamp else out
