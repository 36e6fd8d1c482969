"""Two-stage training loops.

Stage 1 fits CleanNet to (rainy, target) patches with AdamW. Stage 2 freezes
CleanNet, cleans every training image once, and then alternates two Adam
optimizers per image and cascade stage: one step on the fusion loss for
FusionNet, then ``T`` steps on the refinement loss for the refinement nets
with FusionNet's output held fixed.

Logs are JSON lines, one record per stage-1 step or per stage-2 epoch::

    {"stage": 1, "step": 12, "losses": {"clean": 0.03}, "lr": 0.0001, "wall_time": 1.9}
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import fusion
from .checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from .cleannet import CleanNet, CleanNetConfig
from .config import Stage2Config, TrainingConfig
from .fusion import FusionNet, RefinementNets, adaptive_weights, information_measurement, make_extractor
from .imaging import ImagePair, derive_seed, load_manifest, to_tensor
from .losses import clean_loss, fusion_loss, refinement_loss

STAGE1_FINAL = "cleannet.pt"
STAGE1_LAST = "cleannet_last.pt"
STAGE2_FINAL = "fusion.pt"
STAGE2_LAST = "fusion_last.pt"
STAGE1_LOG = "stage1.jsonl"
STAGE2_LOG = "stage2.jsonl"


class TrainingError(RuntimeError):
    pass


class JsonlLog:
    """Append-only JSON-lines log with strictly increasing ``step``."""

    def __init__(self, path: Path, resume_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_step is None:
            self.path.write_text("")
        else:
            # Drop records written after the checkpoint we resume from.
            kept = [r for r in read_log(self.path) if r["step"] <= resume_step] if self.path.exists() else []
            self.path.write_text("".join(json.dumps(r) + "\n" for r in kept))
        self.last_step = resume_step or 0
        self.t0 = time.perf_counter()

    def write(self, stage: int, step: int, losses: dict[str, float], lr: float, **extra) -> None:
        if step <= self.last_step:
            raise TrainingError(f"log step {step} does not follow {self.last_step}")
        rec = {"stage": stage, "step": step, "losses": losses, "lr": lr, **extra}
        rec["wall_time"] = round(time.perf_counter() - self.t0, 6)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        self.last_step = step


def read_log(path: str | Path) -> list[dict]:
    """Parse a JSON-lines log; a malformed line raises ``ValueError`` naming it."""
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "step" not in rec or not isinstance(rec.get("losses"), dict):
                    raise ValueError("missing step or losses")
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: unparseable log record ({exc})") from exc
            records.append(rec)
    return records


def _require_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"non-finite {what}: {float(value.detach())}")


def _train_pairs(config: TrainingConfig, pairs: list[ImagePair] | None) -> list[ImagePair]:
    if pairs is None:
        if config.manifest_path is None:
            raise TrainingError("no manifest_path configured")
        pairs = load_manifest(config.manifest_path)
    train = [p for p in pairs if p.split == "train"]
    if not train:
        raise TrainingError("empty train split")
    return train


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# -- stage 1 ------------------------------------------------------------------------


def build_cleannet(config: CleanNetConfig, seed: int) -> CleanNet:
    torch.manual_seed(derive_seed(seed, "cleannet") % 2**63)
    return CleanNet(config)


def _sample_batch(pairs: list[ImagePair], rng: np.random.Generator, batch: int, patch: int):
    xs, ys = [], []
    for _ in range(batch):
        pair = pairs[int(rng.integers(len(pairs)))]
        target = pair.target if pair.target is not None else pair.visible
        h, w = pair.visible.shape[:2]
        size = min(patch, h, w)
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        xs.append(pair.visible.data[r : r + size, c : c + size])
        ys.append(target.data[r : r + size, c : c + size])
    x = torch.from_numpy(np.stack(xs).transpose(0, 3, 1, 2).astype(np.float32))
    y = torch.from_numpy(np.stack(ys).transpose(0, 3, 1, 2).astype(np.float32))
    return x, y


def train_stage1(config: TrainingConfig, pairs: list[ImagePair] | None = None, resume: str | Path | None = None) -> Path:
    """Train CleanNet and return the path of the final checkpoint.

    Pairs without a ``target`` use their visible image as the target. With
    ``resume`` the model, optimizer, sampler state and step counter continue
    from that checkpoint.
    """
    s1 = config.stage1
    out = Path(config.checkpoint_dir)
    train = _train_pairs(config, pairs)
    if any(min(p.visible.shape[:2]) < 8 for p in train):
        raise TrainingError("stage 1 needs images of at least 8x8")

    model = build_cleannet(config.cleannet, config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=s1.lr, weight_decay=s1.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "stage1-sampler"))
    step = 0
    if resume is not None:
        bundle = load_checkpoint(resume, "cleannet")
        model.load_state_dict(bundle["modules"]["cleannet"])
        opt.load_state_dict(bundle["optimizers"]["cleannet"])
        rng = _restore_rng(bundle["rng"])
        step = bundle["step"]
    log = JsonlLog(out / STAGE1_LOG, resume_step=step if resume is not None else None)

    def save(name: str) -> Path:
        return save_checkpoint(
            out / name, "cleannet", config.to_dict(), {"cleannet": model}, step, {"cleannet": opt}, _rng_state(rng)
        )

    model.train()
    while step < s1.iterations:
        x, y = _sample_batch(train, rng, s1.batch, s1.patch)
        loss = clean_loss(model(x, clamp=False), y)
        _require_finite(loss.value, f"clean loss at step {step + 1}")
        opt.zero_grad(set_to_none=True)
        loss.value.backward()
        opt.step()
        step += 1
        log.write(1, step, loss.floats(), s1.lr)
        if step % s1.checkpoint_every == 0:
            save(STAGE1_LAST)
    return save(STAGE1_FINAL)


def load_cleannet(path: str | Path) -> CleanNet:
    bundle = load_checkpoint(path, "cleannet")
    model = CleanNet(CleanNetConfig(**bundle["config"]["cleannet"]))
    model.load_state_dict(bundle["modules"]["cleannet"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# -- stage 2 ------------------------------------------------------------------------


@dataclass
class FusionModels:
    fusion: FusionNet
    refine: RefinementNets
    config: Stage2Config

    def eval(self) -> FusionModels:
        self.fusion.eval()
        self.refine.eval()
        return self


def build_fusion_models(config: Stage2Config, seed: int) -> FusionModels:
    torch.manual_seed(derive_seed(seed, "fusion") % 2**63)
    return FusionModels(FusionNet(), RefinementNets(config.refine_width), config)


def load_fusion(path: str | Path) -> FusionModels:
    bundle = load_checkpoint(path, "fusion")
    cfg = Stage2Config(**bundle["config"]["stage2"])
    models = FusionModels(FusionNet(), RefinementNets(cfg.refine_width), cfg)
    models.fusion.load_state_dict(bundle["modules"]["fusion"])
    models.refine.load_state_dict(bundle["modules"]["refine"])
    return models.eval()


@torch.no_grad()
def clean_images(model: CleanNet, pairs: list[ImagePair]) -> list[torch.Tensor]:
    return [model(to_tensor(p.visible)) for p in pairs]


def train_stage2(
    config: TrainingConfig,
    stage1_checkpoint: str | Path,
    pairs: list[ImagePair] | None = None,
) -> Path:
    """Train FusionNet and the refinement nets; return the final checkpoint path."""
    s2 = config.stage2
    fcfg = s2.fusion_config()
    out = Path(config.checkpoint_dir)
    train = _train_pairs(config, pairs)
    cleaner = load_cleannet(stage1_checkpoint)
    frozen = parameter_hash(cleaner)
    extractor = make_extractor(s2.backbone, s2.backbone_checkpoint)

    models = build_fusion_models(s2, config.seed)
    net, nets = models.fusion, models.refine
    opt_f = torch.optim.Adam(net.parameters(), lr=s2.lr_fusion, weight_decay=s2.weight_decay)
    opt_r = torch.optim.Adam(nets.parameters(), lr=s2.lr_refine, weight_decay=s2.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "stage2-order"))
    log = JsonlLog(out / STAGE2_LOG)

    # CleanNet is frozen, so the cleaned images are the same every epoch.
    cleaned = clean_images(cleaner, train)
    irs = [to_tensor(p.infrared) for p in train]

    def save(name: str, epoch: int) -> Path:
        return save_checkpoint(
            out / name,
            "fusion",
            config.to_dict(),
            {"fusion": net, "refine": nets},
            epoch,
            {"fusion": opt_f, "refine": opt_r},
            _rng_state(rng),
            {"stage1_checkpoint": str(stage1_checkpoint)},
        )

    net.train()
    nets.train()
    for epoch in range(1, s2.epochs + 1):
        sums: dict[str, float] = {}
        counts = {"fusion_updates": 0, "refine_steps": 0}
        for i in rng.permutation(len(train)):
            y, chroma = fusion.split_luma(cleaned[i])
            ir = irs[i]
            for _ in range(fcfg.cascaded_stages):
                w = adaptive_weights(
                    float(information_measurement(y, extractor)[0]), float(information_measurement(ir, extractor)[0])
                )
                fused = fusion.fuse(y, ir, net)
                lf = fusion_loss(y, fused, ir, w, fcfg.alpha)
                _require_finite(lf.value, f"fusion loss in epoch {epoch}")
                opt_f.zero_grad(set_to_none=True)
                lf.value.backward()
                opt_f.step()
                _accumulate(sums, {"fusion": lf.item(), **lf.floats()})
                counts["fusion_updates"] += 1

                fused = fused.detach()
                refined = fused
                for _ in range(fcfg.adjust_iterations):
                    adjust = nets.adjust(ir)
                    step_out = fusion.refine_step(refined, ir, nets, fcfg.eps_div, adjust_map=adjust)
                    lr_ = refinement_loss(fused, step_out, adjust, fcfg.beta)
                    _require_finite(lr_.value, f"refinement loss in epoch {epoch}")
                    opt_r.zero_grad(set_to_none=True)
                    lr_.value.backward()
                    opt_r.step()
                    _accumulate(sums, {"refinement": lr_.item(), **lr_.floats()})
                    counts["refine_steps"] += 1
                    refined = step_out.detach()
                y = fusion.reassemble_luma(refined, chroma)

        means = {k: v / (counts["fusion_updates"] if k in ("fusion", "ssim", "mse") else counts["refine_steps"])
                 for k, v in sums.items()}
        log.write(2, epoch, means, s2.lr_fusion, lr_refine=s2.lr_refine, **counts)
        if epoch % s2.checkpoint_every == 0:
            save(STAGE2_LAST, epoch)

    if parameter_hash(cleaner) != frozen:
        raise TrainingError("stage-1 parameters changed during stage 2")
    return save(STAGE2_FINAL, s2.epochs)


def _accumulate(sums: dict[str, float], values: dict[str, float]) -> None:
    for k, v in values.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {k}")
        sums[k] = sums.get(k, 0.0) + v
