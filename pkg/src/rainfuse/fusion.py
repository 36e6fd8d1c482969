"""Stage-2 infrared/visible fusion and cascaded contrast refinement.

Information measurement scores how much structure a single-channel image
carries: the mean squared Laplacian response of frozen backbone features,
averaged over the backbone's stages. The two scores pass through a softmax to
give the weights that steer the fusion loss.

Refinement repeatedly divides the fused luminance by a learned contrast map::

    y <- y / (B(cat(y + A(ir), ir)) + eps)

``A`` and ``B`` end in a Sigmoid, so the denominator stays in ``(eps, 1 + eps)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .imaging import DimensionError, rgb_to_ycbcr_tensor, ycbcr_to_rgb_tensor


class ConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    cascaded_stages: int = 3
    adjust_iterations: int = 3
    alpha: float = 20.0
    beta: float = 1.5
    eps_div: float = 1e-4

    def __post_init__(self):
        if self.cascaded_stages < 1 or self.adjust_iterations < 0:
            raise ConfigError("cascaded_stages must be >= 1 and adjust_iterations >= 0")
        if self.alpha <= 0 or self.beta <= 0 or self.eps_div <= 0:
            raise ConfigError("alpha, beta and eps_div must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FusionWeights:
    visible: float
    infrared: float

    def __post_init__(self):
        if abs(self.visible + self.infrared - 1.0) > 1e-6 or min(self.visible, self.infrared) < 0:
            raise ValueError(f"weights must form a distribution, got ({self.visible}, {self.infrared})")

    def as_tuple(self) -> tuple[float, float]:
        return self.visible, self.infrared


# -- feature extractors ------------------------------------------------------

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
# Indices of the ReLU outputs that feed each of VGG-16's five max-pool layers.
_VGG16_TAPS = (3, 8, 15, 22, 29)


class FeatureExtractor(nn.Module):
    """Frozen multi-stage feature extractor; ``forward`` returns a list of maps."""

    num_stages: int

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        return super().train(False)


class IdentityExtractor(FeatureExtractor):
    """Single stage that returns its input unchanged (test mode)."""

    num_stages = 1

    def forward(self, x):
        return [x]


class PyramidExtractor(FeatureExtractor):
    """Five average-pooled copies of the input at strides 1..16 (checkpoint-free)."""

    num_stages = 5

    def forward(self, x):
        feats = [x]
        for _ in range(4):
            x = F.avg_pool2d(x, 2, ceil_mode=True)
            feats.append(x)
        return feats


class VGG16Extractor(FeatureExtractor):
    """Pre-pooling activations of a VGG-16 ``features`` trunk.

    Single-channel input is replicated to three channels and normalised with
    the ImageNet statistics the backbone was trained on.
    """

    num_stages = 5

    def __init__(self, checkpoint: str | Path | None = None, state_dict: dict | None = None):
        super().__init__()
        from torchvision.models.vgg import cfgs, make_layers

        if state_dict is None:
            if checkpoint is None:
                raise ConfigError("VGG16Extractor needs a checkpoint path or a state dict")
            state_dict = torch.load(checkpoint, map_location="cpu", weights_only=True)
        # Same layer layout as torchvision's vgg16().features, without the classifier.
        trunk = make_layers(cfgs["D"])[: _VGG16_TAPS[-1] + 1]
        state_dict = {k.removeprefix("features."): v for k, v in state_dict.items() if not k.startswith("classifier")}
        trunk.load_state_dict(state_dict, strict=False)
        missing = {k for k, _ in trunk.state_dict().items()} - set(state_dict)
        if missing:
            raise ConfigError(f"backbone checkpoint lacks {sorted(missing)[:3]}...")
        self.trunk = trunk
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.trunk):
            x = layer(x)
            if i in _VGG16_TAPS:
                feats.append(x)
        return feats


def make_extractor(name: str = "pyramid", checkpoint: str | Path | None = None) -> FeatureExtractor:
    if name == "identity":
        return IdentityExtractor().freeze()
    if name == "pyramid":
        return PyramidExtractor().freeze()
    if name == "vgg16":
        return VGG16Extractor(checkpoint)
    raise ConfigError(f"unknown backbone {name!r}; choose vgg16, pyramid or identity")


# -- information measurement and weights --------------------------------------

_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def laplacian(x: torch.Tensor) -> torch.Tensor:
    """4-neighbour Laplacian per channel with replicate padding."""
    c = x.shape[1]
    k = _LAPLACIAN.to(x.dtype).to(x.device).expand(c, 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k, groups=c)


def information_measurement(img: torch.Tensor, extractor: FeatureExtractor | None) -> torch.Tensor:
    """Per-sample Laplacian feature energy, ``(B, 1, H, W) -> (B,)``.

    Each stage contributes ``sum_n ||lap(feat_n)||_F^2 / (H_k W_k D_k)``; the
    stage terms are averaged.
    """
    if extractor is None:
        raise ConfigError("information_measurement needs a loaded feature extractor")
    if img.dim() != 4 or img.shape[1] != 1:
        raise DimensionError(f"expected (B, 1, H, W), got {tuple(img.shape)}")
    with torch.no_grad():
        feats = extractor(img)
        terms = [laplacian(f).pow(2).mean(dim=(1, 2, 3)) for f in feats]
    return torch.stack(terms).mean(dim=0)


def adaptive_weights(w_c: float, w_ir: float) -> FusionWeights:
    if not (math.isfinite(w_c) and math.isfinite(w_ir)):
        raise FloatingPointError(f"non-finite information measure ({w_c}, {w_ir})")
    m = max(w_c, w_ir)
    a, b = math.exp(w_c - m), math.exp(w_ir - m)
    return FusionWeights(a / (a + b), b / (a + b))


# -- networks -------------------------------------------------------------------


class FusionNet(nn.Module):
    """Maps concatenated (visible Y, infrared) to a fused Y in (0, 1)."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 16)):
        super().__init__()
        layers, c_in = [], 2
        for c in widths:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(inplace=True)]
            c_in = c
        layers += [nn.Conv2d(c_in, 1, 3, padding=1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
        return fuse(y, ir, self)


def fuse(y: torch.Tensor, ir: torch.Tensor, net: FusionNet) -> torch.Tensor:
    if y.shape != ir.shape:
        raise DimensionError(f"visible {tuple(y.shape)} and infrared {tuple(ir.shape)} differ")
    return net.body(torch.cat([y, ir], dim=1))


class ContentAdjust(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        layers, c_in = [], 1
        for _ in range(4):
            layers += [nn.Conv2d(c_in, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
            c_in = width
        layers += [nn.Conv2d(width, 1, 3, padding=1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)

    def forward(self, ir):
        return self.body(ir)


class ContrastBalance(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(2, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.body(x)


class RefinementNets(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.adjust = ContentAdjust(width)
        self.balance = ContrastBalance(width)


def refine_step(
    fused: torch.Tensor,
    ir: torch.Tensor,
    nets: RefinementNets,
    eps_div: float = 1e-4,
    clamp: bool = True,
    adjust_map: torch.Tensor | None = None,
):
    """One refinement iteration. ``adjust_map`` may carry a precomputed ``A(ir)``."""
    if fused.shape != ir.shape:
        raise DimensionError(f"fused {tuple(fused.shape)} and infrared {tuple(ir.shape)} differ")
    if adjust_map is None:
        adjust_map = nets.adjust(ir)
    denom = nets.balance(torch.cat([fused + adjust_map, ir], dim=1)) + eps_div
    out = fused / denom
    return out.clamp(0.0, 1.0) if clamp else out


def cascaded_refine(
    fused_y: torch.Tensor,
    ir: torch.Tensor,
    config: FusionConfig,
    nets: RefinementNets,
    fusion: FusionNet | None = None,
    chroma: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run ``K`` stages of ``T`` refinement steps and return the final Y.

    Between stages the refined Y is recombined with ``chroma`` (the clean
    image's Cb/Cr) and, when ``fusion`` is given, its luminance is fused with
    the infrared image again to seed the next stage.
    """
    y = fused_y
    for stage in range(config.cascaded_stages):
        if stage > 0 and fusion is not None:
            vis_y = y if chroma is None else reassemble_luma(y, chroma)
            y = fuse(vis_y, ir, fusion)
        for _ in range(config.adjust_iterations):
            y = refine_step(y, ir, nets, config.eps_div)
    return y


def reassemble_luma(y: torch.Tensor, chroma: torch.Tensor) -> torch.Tensor:
    """Y of the clamped RGB image built from ``y`` and ``chroma``."""
    rgb = ycbcr_to_rgb_tensor(torch.cat([y, chroma], dim=1))
    return rgb_to_ycbcr_tensor(rgb)[:, :1]


def split_luma(rgb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ycc = rgb_to_ycbcr_tensor(rgb)
    return ycc[:, :1], ycc[:, 1:]
