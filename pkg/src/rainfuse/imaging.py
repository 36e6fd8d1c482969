"""Image containers, colour conversion, manifests and patch sampling.

Every raster handled by the package is an ``Image``: an ``H x W x C`` float
array in ``[0, 1]`` tagged with its colour space. Networks see the same data as
``(B, C, H, W)`` tensors; :func:`to_tensor` and :func:`from_tensor` move between
the two layouts.

YCbCr follows ITU-R BT.601 full range with chroma offset 0.5. The forward
matrix lives in ``_RGB_TO_YCBCR`` and is the only definition used anywhere
(numpy and torch paths both read it).
"""
from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    YCBCR = "YCbCr"
    GRAY = "GRAY"


class ColorSpaceError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


_CHANNELS = {ColorSpace.RGB: 3, ColorSpace.YCBCR: 3, ColorSpace.GRAY: 1}

_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    color_space: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionError(f"expected H x W x C array, got shape {data.shape}")
        cs = ColorSpace(self.color_space)
        if data.shape[2] != _CHANNELS[cs]:
            raise DimensionError(f"{cs.value} image needs {_CHANNELS[cs]} channels, got {data.shape[2]}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"empty image of shape {data.shape}")
        data = np.clip(data, 0.0, 1.0)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "color_space", cs)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, i: int) -> Image:
        return Image(self.data[:, :, i], ColorSpace.GRAY)


@dataclass(frozen=True)
class ImagePair:
    """Pixel-aligned visible/infrared pair, optionally with a rain-free target."""

    visible: Image
    infrared: Image
    id: str
    split: str = "train"
    target: Image | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"pair {self.id}: unknown split {self.split!r}")
        if self.visible.color_space is not ColorSpace.RGB:
            raise ColorSpaceError(f"pair {self.id}: visible image must be RGB")
        if self.infrared.color_space is not ColorSpace.GRAY:
            raise ColorSpaceError(f"pair {self.id}: infrared image must be GRAY")
        hw = self.visible.shape[:2]
        if self.infrared.shape[:2] != hw:
            raise DimensionError(f"pair {self.id}: visible {hw} vs infrared {self.infrared.shape[:2]}")
        if self.target is not None and self.target.shape != self.visible.shape:
            raise DimensionError(f"pair {self.id}: target {self.target.shape} vs visible {self.visible.shape}")


@dataclass(frozen=True)
class PatchSpec:
    size: int = 64
    count_per_image: int = 1
    seed: int = 0


@dataclass(frozen=True)
class PatchPair:
    visible: Image
    infrared: Image
    row: int
    col: int
    target: Image | None = field(default=None)


def rgb_to_ycbcr(img: Image) -> Image:
    if img.color_space is not ColorSpace.RGB:
        raise ColorSpaceError(f"rgb_to_ycbcr expects RGB, got {img.color_space.value}")
    out = img.data @ _RGB_TO_YCBCR.T + _YCBCR_OFFSET
    return Image(out, ColorSpace.YCBCR)


def ycbcr_to_rgb(img: Image) -> Image:
    if img.color_space is not ColorSpace.YCBCR:
        raise ColorSpaceError(f"ycbcr_to_rgb expects YCbCr, got {img.color_space.value}")
    out = (img.data - _YCBCR_OFFSET) @ _YCBCR_TO_RGB.T
    return Image(out, ColorSpace.RGB)


def rgb_to_ycbcr_tensor(x: torch.Tensor) -> torch.Tensor:
    """Batched ``(B, 3, H, W)`` RGB to YCbCr with the same matrix as :func:`rgb_to_ycbcr`."""
    m = torch.as_tensor(_RGB_TO_YCBCR, dtype=x.dtype, device=x.device)
    off = torch.as_tensor(_YCBCR_OFFSET, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return torch.einsum("ij,bjhw->bihw", m, x) + off


def ycbcr_to_rgb_tensor(x: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(_YCBCR_TO_RGB, dtype=x.dtype, device=x.device)
    off = torch.as_tensor(_YCBCR_OFFSET, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return torch.einsum("ij,bjhw->bihw", m, x - off).clamp(0.0, 1.0)


def luminance(img: Image) -> Image:
    """Y channel of an RGB image; GRAY images pass through."""
    if img.color_space is ColorSpace.GRAY:
        return img
    if img.color_space is ColorSpace.RGB:
        img = rgb_to_ycbcr(img)
    return img.channel(0)


def to_tensor(img: Image, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(img.data.transpose(2, 0, 1).copy()).to(dtype).unsqueeze(0)


def from_tensor(x: torch.Tensor, color_space: ColorSpace | str | None = None) -> Image:
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise DimensionError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    arr = x.detach().cpu().double().numpy().transpose(1, 2, 0)
    if color_space is None:
        color_space = ColorSpace.GRAY if arr.shape[2] == 1 else ColorSpace.RGB
    return Image(arr, color_space)


def read_png(path: str | Path, color_space: ColorSpace | str = ColorSpace.RGB) -> Image:
    cs = ColorSpace(color_space)
    with PILImage.open(path) as im:
        im = im.convert("L" if cs is ColorSpace.GRAY else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr, cs)


def write_png(img: Image, path: str | Path) -> None:
    if img.color_space is ColorSpace.YCBCR:
        img = ycbcr_to_rgb(img)
    arr = np.round(img.data * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[2] == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(arr, mode="RGB").save(path)


def derive_seed(seed: int, key: str) -> int:
    """Stable per-item seed from a global seed and a string key."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def extract_patches(pair: ImagePair | PatchPair, spec: PatchSpec) -> list[PatchPair]:
    h, w = pair.visible.shape[:2]
    if spec.size > min(h, w):
        raise DimensionError(f"patch size {spec.size} exceeds image {h}x{w}")
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.count_per_image):
        r = int(rng.integers(0, h - spec.size + 1))
        c = int(rng.integers(0, w - spec.size + 1))
        out.append(crop_pair(pair, r, c, spec.size))
    return out


def crop_pair(pair, row: int, col: int, size: int) -> PatchPair:
    sl = (slice(row, row + size), slice(col, col + size))
    target = pair.target
    return PatchPair(
        visible=Image(pair.visible.data[sl], pair.visible.color_space),
        infrared=Image(pair.infrared.data[sl], pair.infrared.color_space),
        row=row,
        col=col,
        target=None if target is None else Image(target.data[sl], target.color_space),
    )


# Manifest: UTF-8 CSV with header ``id,visible,infrared,split[,target]``.
# Paths are relative to the manifest's directory unless absolute.
MANIFEST_FIELDS = ("id", "visible", "infrared", "split")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    visible: Path
    infrared: Path
    split: str
    target: Path | None = None


def read_manifest_entries(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return []
        missing = [k for k in MANIFEST_FIELDS if k not in reader.fieldnames]
        if missing:
            raise IngestionError(f"manifest {path} lacks columns {missing}")
        for row in reader:
            target = row.get("target") or None
            entries.append(
                ManifestEntry(
                    id=row["id"],
                    visible=base / row["visible"],
                    infrared=base / row["infrared"],
                    split=row["split"],
                    target=None if target is None else base / target,
                )
            )
    return entries


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with_target = any(e.target is not None for e in entries)
    fields = list(MANIFEST_FIELDS) + (["target"] if with_target else [])

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for e in entries:
            row = {"id": e.id, "visible": rel(e.visible), "infrared": rel(e.infrared), "split": e.split}
            if with_target:
                row["target"] = rel(e.target) if e.target is not None else ""
            writer.writerow(row)


def load_pair(entry: ManifestEntry) -> ImagePair:
    try:
        for p in (entry.visible, entry.infrared, entry.target):
            if p is not None and not Path(p).is_file():
                raise IngestionError(f"pair {entry.id}: missing file {p}")
        visible = read_png(entry.visible, ColorSpace.RGB)
        infrared = read_png(entry.infrared, ColorSpace.GRAY)
        target = None if entry.target is None else read_png(entry.target, ColorSpace.RGB)
        return ImagePair(visible, infrared, entry.id, entry.split, target)
    except IngestionError:
        raise
    except (ValueError, OSError) as exc:
        raise IngestionError(f"pair {entry.id}: {exc}") from exc


def load_manifest(path: str | Path) -> list[ImagePair]:
    return [load_pair(e) for e in read_manifest_entries(path)]


def assign_splits(ids: list[str], n_test: int, seed: int = 0) -> dict[str, str]:
    """Randomly reserve ``n_test`` ids for testing; the rest train."""
    if n_test > len(ids):
        raise ValueError(f"cannot reserve {n_test} test pairs out of {len(ids)}")
    rng = np.random.default_rng(seed)
    test = set(rng.choice(len(ids), size=n_test, replace=False).tolist()) if n_test else set()
    return {i: ("test" if k in test else "train") for k, i in enumerate(ids)}
