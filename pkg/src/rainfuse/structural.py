"""SSIM and MS-SSIM shared by the fusion loss and the evaluation metrics.

Gaussian window 11x11 with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.
Statistics are computed with a 'valid' convolution, so no padding enters the
mean. Images narrower than the window use the largest odd window that fits
(same sigma); this only matters for toy inputs below 11 pixels.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

WIN_SIZE = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 1.0
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def gaussian_window(size: int = WIN_SIZE, sigma: float = SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _window_for(h: int, w: int) -> int:
    size = min(WIN_SIZE, h, w)
    return size if size % 2 else size - 1


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    return F.conv2d(x, win.expand(c, 1, *win.shape), groups=c)


def ssim_maps(a: torch.Tensor, b: torch.Tensor, win_size: int | None = None):
    """Per-pixel SSIM and contrast-structure maps over the valid region."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    win_size = win_size or _window_for(*a.shape[-2:])
    win = gaussian_window(win_size, SIGMA, a.dtype).to(a.device)
    c1, c2 = (K1 * DATA_RANGE) ** 2, (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    var_a = _filter(a * a, win) - mu_a**2
    var_b = _filter(b * b, win) - mu_b**2
    cov = _filter(a * b, win) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return lum * cs, cs


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM per batch element, ``(B, C, H, W) -> (B,)``."""
    s, _ = ssim_maps(a, b)
    return s.flatten(1).mean(dim=1)


def max_ms_scales(h: int, w: int) -> int:
    """Number of dyadic scales whose coarsest level still fits an 11x11 window."""
    n = 1
    while n < len(MS_WEIGHTS) and min(h, w) > (WIN_SIZE - 1) * 2**n:
        n += 1
    return n


def ms_ssim(a: torch.Tensor, b: torch.Tensor, scales: int = 5) -> torch.Tensor:
    """Multi-scale SSIM over ``scales`` dyadic levels, ``(B, C, H, W) -> (B,)``.

    Needs ``min(H, W) > 10 * 2**(scales - 1)`` (161 px for five scales). With
    fewer scales the leading standard weights are renormalised to sum to one.
    Negative contrast-structure means are clipped at zero before the power.
    """
    if not 1 <= scales <= len(MS_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MS_WEIGHTS)}")
    h, w = a.shape[-2:]
    if min(h, w) <= (WIN_SIZE - 1) * 2 ** (scales - 1):
        raise ValueError(f"{h}x{w} image too small for {scales} MS-SSIM scales")
    weights = torch.tensor(MS_WEIGHTS[:scales], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    terms = []
    for i in range(scales):
        s, cs = ssim_maps(a, b, WIN_SIZE)
        if i == scales - 1:
            terms.append(F.relu(s.flatten(1).mean(dim=1)))
        else:
            terms.append(F.relu(cs.flatten(1).mean(dim=1)))
            pad = (0, a.shape[-1] % 2, 0, a.shape[-2] % 2)
            a = F.avg_pool2d(F.pad(a, pad, mode="replicate"), 2)
            b = F.avg_pool2d(F.pad(b, pad, mode="replicate"), 2)
    stack = torch.stack(terms, dim=1)
    return torch.prod(stack ** weights, dim=1)
