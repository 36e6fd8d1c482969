"""Training objectives for both stages.

All norms are divided by the element count. Fusion weights may be a
:class:`FusionWeights` (shared by the batch) or a ``(B, 2)`` tensor of
per-sample ``(visible, infrared)`` weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .fusion import FusionWeights
from .structural import ssim


@dataclass
class LossValue:
    value: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())

    def floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        return out


def _check(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch {tuple(shape)} vs {tuple(t.shape)}")


def _weights(weights, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(weights, FusionWeights):
        w = torch.tensor(weights.as_tuple(), dtype=like.dtype, device=like.device).expand(like.shape[0], 2)
    else:
        w = torch.as_tensor(weights, dtype=like.dtype, device=like.device).reshape(-1, 2)
    return w[:, 0], w[:, 1]


def clean_loss(clean: torch.Tensor, target: torch.Tensor) -> LossValue:
    _check(clean, target)
    l1 = (clean - target).abs().mean()
    return LossValue(l1, {"clean": l1})


def ssim_loss(y_c, y_fused, ir, weights) -> LossValue:
    _check(y_c, y_fused, ir)
    w_c, w_ir = _weights(weights, y_fused)
    v = (w_c * (1 - ssim(y_c, y_fused)) + w_ir * (1 - ssim(ir, y_fused))).mean()
    return LossValue(v, {"ssim": v})


def _mse_per_sample(a, b):
    return (a - b).pow(2).flatten(1).mean(dim=1)


def mse_loss(y_c, y_fused, ir, weights) -> LossValue:
    _check(y_c, y_fused, ir)
    w_c, w_ir = _weights(weights, y_fused)
    v = (w_c * _mse_per_sample(y_c, y_fused) + w_ir * _mse_per_sample(ir, y_fused)).mean()
    return LossValue(v, {"mse": v})


def fusion_loss(y_c, y_fused, ir, weights, alpha: float = 20.0) -> LossValue:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    s = ssim_loss(y_c, y_fused, ir, weights).value
    m = mse_loss(y_c, y_fused, ir, weights).value
    return LossValue(s + alpha * m, {"ssim": s, "mse": m})


def smoothness_loss(adjust_map: torch.Tensor) -> torch.Tensor:
    """Mean squared vertical plus mean squared horizontal difference."""
    dy = adjust_map[..., 1:, :] - adjust_map[..., :-1, :]
    dx = adjust_map[..., :, 1:] - adjust_map[..., :, :-1]
    total = adjust_map.new_zeros(())
    if dy.numel():
        total = total + dy.pow(2).mean()
    if dx.numel():
        total = total + dx.pow(2).mean()
    return total


def consistency_loss(fused: torch.Tensor, refined: torch.Tensor, region: int = 4) -> torch.Tensor:
    """Spatial consistency of 4x4 region means.

    Differences between neighbouring region means of ``refined`` should match
    those of ``fused``; a uniform offset costs nothing, a change in local
    contrast does.
    """
    _check(fused, refined)
    p = F.avg_pool2d(fused.mean(1, keepdim=True), region)
    q = F.avg_pool2d(refined.mean(1, keepdim=True), region)
    total = p.new_zeros(())
    for dim in (-2, -1):
        if p.shape[dim] > 1:
            dp, dq = torch.diff(p, dim=dim), torch.diff(q, dim=dim)
            total = total + (dp - dq).pow(2).mean()
    return total


def refinement_loss(fused, refined, adjust_map, beta: float = 1.5) -> LossValue:
    if beta <= 0:
        raise ValueError("beta must be positive")
    smo = smoothness_loss(adjust_map)
    con = consistency_loss(fused, refined)
    return LossValue(smo + beta * con, {"smoothness": smo, "consistency": con})
