"""Parametric rain-streak and low-light degradation.

A stand-in for a dedicated raindrop renderer: sparse seed points are smeared
into line segments along one shared direction, softened by a Gaussian, and
added on top of a globally dimmed copy of the clean image::

    rainy = clip(dim_factor * clean + intensity * streaks)

The matching training target is the dimmed clean image without streaks, so the
cleaning stage learns to remove rain, not to relight the scene.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import (
    ColorSpace,
    Image,
    IngestionError,
    ManifestEntry,
    derive_seed,
    load_pair,
    read_manifest_entries,
    write_manifest,
    write_png,
)


@dataclass(frozen=True)
class RainParams:
    streak_count: int = 120
    streak_length: int = 11
    angle: float = 15.0  # degrees from vertical
    intensity: float = 0.6
    blur_sigma: float = 0.7
    dim_factor: float = 0.45
    seed: int = 0
    angle_jitter: float = 0.0  # one uniform draw per image, not per streak

    def __post_init__(self):
        if self.streak_count < 0:
            raise ValueError("streak_count must be >= 0")
        if self.streak_length < 1:
            raise ValueError("streak_length must be >= 1")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")
        if not 0.0 <= self.dim_factor <= 1.0:
            raise ValueError("dim_factor must lie in [0, 1]")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")


def line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Anti-aliased line of unit peak, ``length`` pixels long, tilted from vertical."""
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    theta = math.radians(angle_deg)
    dy, dx = math.cos(theta), math.sin(theta)
    # Quarter-pixel steps, so axis-aligned lines land exactly on pixel centres.
    for t in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * (length - 1) + 1):
        y, x = c + t * dy, c + t * dx
        y0, x0 = math.floor(y), math.floor(x)
        fy, fx = y - y0, x - x0
        for yy, xx, wgt in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0 + 1, x0, fy * (1 - fx)),
            (y0, x0 + 1, (1 - fy) * fx),
            (y0 + 1, x0 + 1, fy * fx),
        ):
            if 0 <= yy < size and 0 <= xx < size:
                k[yy, xx] = max(k[yy, xx], wgt)
    return k


def render_streaks(height: int, width: int, params: RainParams) -> np.ndarray:
    """Rain layer in ``[0, intensity]`` for an ``height x width`` frame."""
    rng = np.random.default_rng(params.seed)
    layer = np.zeros((height, width))
    if params.streak_count == 0 or params.intensity == 0:
        return layer
    angle = params.angle
    if params.angle_jitter:
        angle += rng.uniform(-params.angle_jitter, params.angle_jitter)
    rows = rng.integers(0, height, size=params.streak_count)
    cols = rng.integers(0, width, size=params.streak_count)
    np.maximum.at(layer, (rows, cols), rng.uniform(0.6, 1.0, size=params.streak_count))
    layer = ndimage.convolve(layer, line_kernel(params.streak_length, angle), mode="constant")
    if params.blur_sigma > 0:
        layer = ndimage.gaussian_filter(layer, params.blur_sigma, mode="constant")
    return np.clip(layer, 0.0, 1.0) * params.intensity


def streak_mask(height: int, width: int, params: RainParams) -> np.ndarray:
    return render_streaks(height, width, params) > 0


def synthesize_rain(clean: Image, params: RainParams) -> Image:
    if clean.color_space is not ColorSpace.RGB:
        raise TypeError(f"synthesize_rain expects an RGB image, got {clean.color_space.value}")
    layer = render_streaks(clean.height, clean.width, params)
    return Image(params.dim_factor * clean.data + layer[:, :, None], ColorSpace.RGB)


def build_dataset(manifest_in: str | Path, params: RainParams, manifest_out: str | Path) -> int:
    """Write rainy/target/infrared triples for every pair plus a new manifest.

    Images land next to ``manifest_out`` under ``rainy/``, ``target/`` and
    ``infrared/``. Each pair gets its own seed derived from ``params.seed`` and
    the pair id, so output does not depend on manifest order.
    """
    manifest_out = Path(manifest_out)
    root = manifest_out.parent
    entries = read_manifest_entries(manifest_in)
    written = []
    for entry in entries:
        pair = load_pair(entry)
        p = dataclasses.replace(params, seed=derive_seed(params.seed, pair.id) % 2**32)
        rainy = synthesize_rain(pair.visible, p)
        target = Image(params.dim_factor * pair.visible.data, ColorSpace.RGB)
        paths = {k: root / k / f"{pair.id}.png" for k in ("rainy", "target", "infrared")}
        try:
            write_png(rainy, paths["rainy"])
            write_png(target, paths["target"])
            write_png(pair.infrared, paths["infrared"])
        except OSError as exc:
            raise IngestionError(f"pair {pair.id}: cannot write output ({exc})") from exc
        written.append(ManifestEntry(pair.id, paths["rainy"], paths["infrared"], pair.split, paths["target"]))
    write_manifest(manifest_out, written)
    return len(written)
