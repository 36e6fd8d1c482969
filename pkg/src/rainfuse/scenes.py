"""Procedural visible/infrared street scenes for desk-scale runs.

The visible frame carries colour and fine texture (lit windows, lane marks);
the infrared frame carries warm bodies that are nearly invisible in the
visible frame, plus a smooth temperature gradient. Each modality therefore
holds structure the other lacks, which is what fusion has to merge.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import ColorSpace, Image, ManifestEntry, assign_splits, write_manifest, write_png


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_scene(size: int = 64, seed: int = 0) -> tuple[Image, Image]:
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)

    sky = np.stack([0.15 + 0.2 * yy, 0.18 + 0.2 * yy, 0.3 + 0.15 * yy], axis=-1)
    rgb = sky.copy()
    ir = 0.25 + 0.15 * yy + 0.05 * xx

    horizon = int(h * rng.uniform(0.55, 0.7))
    rgb[horizon:] = [0.22, 0.22, 0.24]
    ir[horizon:] = 0.35
    for c in range(0, w, max(size // 6, 4)):
        rgb[horizon + (h - horizon) // 2, c : c + size // 12] = [0.85, 0.85, 0.7]

    for _ in range(rng.integers(2, 5)):
        bw, bh = rng.integers(size // 8, size // 3), rng.integers(size // 5, size // 2)
        x0 = int(rng.integers(0, w - bw))
        y0 = max(horizon - bh, 0)
        colour = rng.uniform(0.25, 0.6, size=3)
        rgb[y0:horizon, x0 : x0 + bw] = colour
        ir[y0:horizon, x0 : x0 + bw] = 0.3 + 0.1 * rng.random()
        step = max(size // 16, 2)
        for wy in range(y0 + 1, horizon - 1, step):
            for wx in range(x0 + 1, x0 + bw - 1, step):
                if rng.random() < 0.5:
                    rgb[wy, wx] = [0.95, 0.9, 0.6]

    for _ in range(rng.integers(2, 4)):
        cy = rng.uniform(horizon - size * 0.1, h - size * 0.1)
        cx = rng.uniform(size * 0.1, w - size * 0.1)
        body = _ellipse(h, w, cy, cx, size * rng.uniform(0.08, 0.14), size * rng.uniform(0.04, 0.07))
        rgb[body] = rgb[body] * 0.9 + 0.02
        ir[body] = rng.uniform(0.8, 0.95)

    rgb = ndimage.gaussian_filter(rgb, (0.6, 0.6, 0)) + rng.normal(0, 0.01, rgb.shape)
    ir = ndimage.gaussian_filter(ir, 1.0) + rng.normal(0, 0.01, ir.shape)
    return Image(np.clip(rgb, 0, 1), ColorSpace.RGB), Image(np.clip(ir, 0, 1), ColorSpace.GRAY)


def write_desk_dataset(out_dir: str | Path, n_pairs: int = 6, size: int = 64, n_test: int = 2, seed: int = 0) -> Path:
    """Write ``visible/``, ``infrared/`` PNGs and ``manifest.csv``; return the manifest path."""
    out = Path(out_dir)
    ids = [f"scene{i:03d}" for i in range(n_pairs)]
    splits = assign_splits(ids, n_test, seed)
    entries = []
    for i, pid in enumerate(ids):
        rgb, ir = make_scene(size, seed * 100_003 + i)
        vis_path, ir_path = out / "visible" / f"{pid}.png", out / "infrared" / f"{pid}.png"
        write_png(rgb, vis_path)
        write_png(ir, ir_path)
        entries.append(ManifestEntry(pid, vis_path, ir_path, splits[pid]))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest
