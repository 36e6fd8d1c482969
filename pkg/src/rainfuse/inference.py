"""Inference and batch evaluation with trained checkpoints."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from . import fusion
from .cleannet import CleanNet
from .imaging import ColorSpace, DimensionError, Image, ImagePair, from_tensor, load_manifest, to_tensor, write_png
from .metrics import MetricReport, evaluate_pair, write_table
from .training import FusionModels, load_cleannet, load_fusion


@dataclass
class Models:
    cleannet: CleanNet
    fusion: FusionModels

    @classmethod
    def load(cls, stage1: str | Path, stage2: str | Path) -> Models:
        return cls(load_cleannet(stage1), load_fusion(stage2))


@torch.no_grad()
def fuse_clean(clean: torch.Tensor, ir: torch.Tensor, models: FusionModels) -> torch.Tensor:
    """Fused RGB from a cleaned RGB tensor and an infrared tensor."""
    models.eval()
    y, chroma = fusion.split_luma(clean)
    fused_y = fusion.fuse(y, ir, models.fusion)
    final_y = fusion.cascaded_refine(fused_y, ir, models.config.fusion_config(), models.refine, models.fusion, chroma)
    return fusion.ycbcr_to_rgb_tensor(torch.cat([final_y, chroma], dim=1))


@torch.no_grad()
def infer(pair: ImagePair, models: Models, out_dir: str | Path | None = None) -> dict[str, Image]:
    """Run both stages on one pair; optionally write ``clean/`` and ``fused/`` PNGs."""
    if pair.visible.height < 8 or pair.visible.width < 8:
        raise DimensionError(f"pair {pair.id}: image smaller than 8x8")
    models.cleannet.eval()
    clean = models.cleannet(to_tensor(pair.visible))
    fused = fuse_clean(clean, to_tensor(pair.infrared), models.fusion)
    result = {"clean": from_tensor(clean, ColorSpace.RGB), "fused": from_tensor(fused, ColorSpace.RGB)}
    if out_dir is not None:
        for name, img in result.items():
            write_png(img, Path(out_dir) / name / f"{pair.id}.png")
    return result


def evaluate(
    manifest: str | Path | list[ImagePair],
    models: Models,
    out_path: str | Path,
    image_dir: str | Path | None = None,
    with_scd: bool = False,
) -> list[MetricReport]:
    """Score every test pair and write the metric table (plus a mean row).

    The visible source is the pair's rain-free target when the manifest has one,
    otherwise the cleaned image; the infrared image is the other source.
    Nothing is written if the test split is empty.
    """
    pairs = load_manifest(manifest) if not isinstance(manifest, list) else manifest
    test = [p for p in pairs if p.split == "test"]
    if not test:
        raise ValueError("empty test split; nothing to evaluate")
    reports = []
    for pair in test:
        out = infer(pair, models, image_dir)
        vis = pair.target if pair.target is not None else out["clean"]
        reports.append(evaluate_pair(vis, pair.infrared, out["fused"], pair.id, with_scd))
    write_table(reports, out_path)
    return reports
