"""Fusion-quality metric battery.

Every metric scores the luminance plane: RGB inputs are converted to Y
(BT.601) and single-channel inputs are used as they are. Values are in
``[0, 1]``.

Two-source conventions used by :func:`evaluate_pair` (``vis``, ``ir`` are the
sources, ``f`` the fused image):

=========  =============================================================
psnr       ``10 log10(1 / mse)`` with mse the fusion MSE below, capped
mse        mean of ``mse(vis, f)`` and ``mse(ir, f)``
mi         sum of ``mi(vis, f)`` and ``mi(ir, f)``, in bits
ssim,      mean over the two sources
ms_ssim,
vif, cc
fmi_*      mean over the two sources (inside :func:`fmi`)
qabf       joint score of both sources (inside :func:`qabf`)
scd        optional; ``cc(f - ir, vis) + cc(f - vis, ir)``
=========  =============================================================
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, signal

from . import structural
from .imaging import ColorSpace, DimensionError, Image, luminance

PSNR_CAP = 100.0
HIST_BINS = 256

# Qabf sigmoid constants (Xydeas and Petrovic).
QABF_TG, QABF_KG, QABF_DG = 0.9994, -15.0, 0.5
QABF_TA, QABF_KA, QABF_DA = 0.9879, -22.0, 0.8
# Score of a perfect edge match (equal strength and orientation everywhere).
# The orientation sigmoid tops out at 0.9759, so no input reaches 0.98.
QABF_MAX = (QABF_TG / (1 + math.exp(QABF_KG * (1 - QABF_DG)))) * (QABF_TA / (1 + math.exp(QABF_KA * (1 - QABF_DA))))

VIF_SIGMA_NSQ = 2.0
VIF_MAX_SCALES = 4
FMI_FEATURES = ("pixel", "dct", "wavelet")


class UndefinedCorrelationError(ValueError):
    pass


def _plane(x) -> np.ndarray:
    if isinstance(x, Image):
        return luminance(x).data[:, :, 0]
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return luminance(Image(arr, ColorSpace.RGB)).data[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DimensionError(f"cannot score an array of shape {arr.shape}")
    return arr


def _planes(*xs) -> list[np.ndarray]:
    out = [_plane(x) for x in xs]
    for p in out[1:]:
        if p.shape != out[0].shape:
            raise DimensionError(f"shape mismatch {out[0].shape} vs {p.shape}")
    return out


# -- pixel statistics -----------------------------------------------------------


def mse(a, b) -> float:
    a, b = _planes(a, b)
    return float(np.mean((a - b) ** 2))


def _psnr_from_mse(m: float) -> float:
    if m <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def psnr(a, b) -> float:
    """Peak SNR in dB for unit dynamic range; identical inputs give ``PSNR_CAP``."""
    return _psnr_from_mse(mse(a, b))


def correlation_coefficient(a, b) -> float:
    a, b = _planes(a, b)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance input")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


def _torch(p: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(p, dtype=np.float64))[None, None]


def ssim_metric(a, b) -> float:
    a, b = _planes(a, b)
    return float(structural.ssim(_torch(a), _torch(b))[0])


def ms_ssim(a, b, scales: int | None = None) -> float:
    """MS-SSIM; ``scales=None`` uses as many of the five scales as the size allows."""
    a, b = _planes(a, b)
    if scales is None:
        scales = structural.max_ms_scales(*a.shape)
    return float(structural.ms_ssim(_torch(a), _torch(b), scales)[0])


# -- information measures ----------------------------------------------------------


def _entropy_of(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def entropy(a, bins: int = HIST_BINS) -> float:
    (a,) = _planes(a)
    hist, _ = np.histogram(a, bins=bins, range=(0.0, 1.0))
    return _entropy_of(hist / hist.sum())


def mutual_information(a, b, bins: int = HIST_BINS) -> float:
    """MI in bits from the joint histogram over ``bins`` equal bins of ``[0, 1]``."""
    a, b = _planes(a, b)
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log2(joint[nz] / np.outer(pa, pb)[nz]))
    return max(0.0, float(mi))


# -- VIF ------------------------------------------------------------------------------


def _gaussian(n: int) -> np.ndarray:
    sigma = n / 5.0
    r = np.arange(n) - (n - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    g[g < np.finfo(float).eps * g.max()] = 0
    return g / g.sum()


def _vif_window(scale: int) -> int:
    return 2 ** (VIF_MAX_SCALES - scale + 1) + 1


def max_vif_scales(h: int, w: int) -> int:
    """How many pyramid scales fit; each needs room for its own 'valid' window."""
    n, size = 0, min(h, w)
    for scale in range(1, VIF_MAX_SCALES + 1):
        win = _vif_window(scale)
        if scale > 1:
            size = math.ceil((size - win + 1) / 2)
        if size < win:
            break
        n = scale
    return n


def vif(ref, dist, scales: int | None = None) -> float:
    """Pixel-domain multi-scale VIF with visual noise variance 2 on a 0..255 scale.

    Scale ``s`` uses a Gaussian window of ``2**(5-s) + 1`` taps (sigma = size/5);
    coarser scales are filtered and decimated by two. ``scales=None`` uses the
    largest count (up to four) that fits; four need at least 41 px.
    """
    ref, dist = _planes(ref, dist)
    fit = max_vif_scales(*ref.shape)
    if scales is None:
        scales = fit
    if scales < 1 or scales > fit:
        raise DimensionError(f"{ref.shape[0]}x{ref.shape[1]} image fits {fit} VIF scales, asked for {scales}")
    eps = 1e-10
    x, y = ref * 255.0, dist * 255.0
    num = den = 0.0
    for scale in range(1, scales + 1):
        win = _gaussian(_vif_window(scale))
        if scale > 1:
            x = signal.convolve2d(x, win, mode="valid")[::2, ::2]
            y = signal.convolve2d(y, win, mode="valid")[::2, ::2]
        mx, my = signal.convolve2d(x, win, mode="valid"), signal.convolve2d(y, win, mode="valid")
        sxx = np.maximum(signal.convolve2d(x * x, win, mode="valid") - mx * mx, 0)
        syy = np.maximum(signal.convolve2d(y * y, win, mode="valid") - my * my, 0)
        sxy = signal.convolve2d(x * y, win, mode="valid") - mx * my

        g = sxy / (sxx + eps)
        sv = syy - g * sxy
        flat_x = sxx < eps
        g[flat_x], sv[flat_x], sxx[flat_x] = 0, syy[flat_x], 0
        flat_y = syy < eps
        g[flat_y], sv[flat_y] = 0, 0
        neg = g < 0
        sv[neg], g[neg] = syy[neg], 0
        sv = np.maximum(sv, eps)

        num += np.sum(np.log10(1 + g * g * sxx / (sv + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1 + sxx / VIF_SIGMA_NSQ))
    # A flat reference carries no information to lose.
    return 1.0 if den == 0 else float(num / den)


# -- FMI -------------------------------------------------------------------------------


def dct_feature(x: np.ndarray, block: int = 8) -> np.ndarray:
    """Orthonormal 2-D DCT-II of each ``block x block`` tile (edge-padded, cropped back)."""
    h, w = x.shape
    ph, pw = -h % block, -w % block
    p = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    tiles = p.reshape(p.shape[0] // block, block, p.shape[1] // block, block)
    coef = fft.dctn(tiles, type=2, norm="ortho", axes=(1, 3))
    return coef.reshape(p.shape)[:h, :w]


def haar_detail(x: np.ndarray) -> np.ndarray:
    """Magnitude of the one-level Haar detail bands, ``sqrt(H^2 + V^2 + D^2)``.

    Odd sizes are padded by symmetric reflection; the result has half resolution.
    """
    h, w = x.shape
    x = np.pad(x, ((0, h % 2), (0, w % 2)), mode="symmetric")
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    horiz = (a + b - c - d) / 2
    vert = (a - b + c - d) / 2
    diag = (a - b - c + d) / 2
    return np.sqrt(horiz**2 + vert**2 + diag**2)


def _features(x: np.ndarray, feature: str) -> np.ndarray:
    if feature == "pixel":
        return x
    if feature == "dct":
        return dct_feature(x)
    if feature == "wavelet":
        return haar_detail(x)
    raise ValueError(f"unknown FMI feature {feature!r}; choose from {FMI_FEATURES}")


def _window_pdfs(feat: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-window normalised pdfs (column-major pixel order) and a 'constant' flag."""
    win = sliding_window_view(feat, (w, w))
    win = win.swapaxes(-1, -2).reshape(*win.shape[:2], w * w)
    lo, hi = win.min(axis=-1, keepdims=True), win.max(axis=-1, keepdims=True)
    flat = (hi == lo)[..., 0]
    norm = np.where(hi > lo, (win - lo) / np.where(hi > lo, hi - lo, 1.0), 1.0)
    return norm / norm.sum(axis=-1, keepdims=True), flat


def _bits(p: np.ndarray) -> np.ndarray:
    return -np.sum(np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def _fmi_pair(src: np.ndarray, fused: np.ndarray, w: int) -> float:
    p, p_flat = _window_pdfs(src, w)
    q, q_flat = _window_pdfs(fused, w)
    n = p.shape[-1]

    dp, dq = p - p.mean(-1, keepdims=True), q - q.mean(-1, keepdims=True)
    denom = np.sqrt(np.sum(dp * dp, -1) * np.sum(dq * dq, -1))
    c = np.where(denom > 0, np.sum(dp * dq, -1) / np.where(denom > 0, denom, 1.0), 0.0)
    c = np.where(p_flat & q_flat, 1.0, np.clip(c, -1.0, 1.0))[..., None, None]

    # Joint CDF: correlation-weighted mix of a Frechet bound and the product copula.
    fp, fq = np.cumsum(p, -1)[..., :, None], np.cumsum(q, -1)[..., None, :]
    prod = fp * fq
    upper = np.minimum(fp, fq)
    lower = np.maximum(fp + fq - 1.0, 0.0)
    cdf = np.where(c >= 0, c * upper + (1 - c) * prod, -c * lower + (1 + c) * prod)
    cdf = np.pad(cdf, [(0, 0)] * (cdf.ndim - 2) + [(1, 0), (1, 0)])
    joint = np.maximum(np.diff(np.diff(cdf, axis=-1), axis=-2), 0.0)

    hp, hq = _bits(p), _bits(q)
    hj = _bits(joint.reshape(*joint.shape[:-2], n * n))
    total = hp + hq
    nmi = np.where(total > 0, 2.0 * (total - hj) / np.where(total > 0, total, 1.0), 1.0)
    return float(np.mean(np.clip(nmi, 0.0, 1.0)))


def fmi(a, b, fused, feature: str = "pixel", window: int = 3) -> float:
    """Feature mutual information, averaged over the two sources.

    Features are compared in sliding ``window x window`` regions. Each region is
    min-max normalised into a pdf (constant regions become uniform); the joint
    distribution comes from a copula mix driven by the Pearson correlation of
    the two pdfs, and the region score is ``2 MI / (H_src + H_fused)`` (1 when
    both entropies vanish). The maximum, reached at ``fused = a = b``, is 1.
    """
    a, b, fused = _planes(a, b, fused)
    fa, fb, ff = (_features(x, feature) for x in (a, b, fused))
    if min(ff.shape) < window:
        raise DimensionError(f"feature map {ff.shape} smaller than the {window}x{window} window")
    return 0.5 * (_fmi_pair(fa, ff, window) + _fmi_pair(fb, ff, window))


# -- Qabf ---------------------------------------------------------------------------------

_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _edges(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Mirrored borders: zero padding would invent edges along the frame.
    gx = signal.convolve2d(x, _SOBEL_X, mode="same", boundary="symm")
    gy = signal.convolve2d(x, _SOBEL_Y, mode="same", boundary="symm")
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.where(gx == 0, math.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return np.hypot(gx, gy), angle


def _preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    hi = np.maximum(g_src, g_f)
    strength = np.where(hi > 0, np.minimum(g_src, g_f) / np.where(hi > 0, hi, 1.0), 0.0)
    orient = 1 - np.abs(a_src - a_f) / (math.pi / 2)
    qg = QABF_TG / (1 + np.exp(QABF_KG * (strength - QABF_DG)))
    qa = QABF_TA / (1 + np.exp(QABF_KA * (orient - QABF_DA)))
    return qg * qa


def qabf(a, b, fused) -> float:
    """Edge-preservation index weighted by source gradient strength.

    Relative strength is ``min/max`` of the two Sobel magnitudes, so the score
    does not depend on intensity scale. Highest possible value is ``QABF_MAX``;
    sources without any edges score 0.
    """
    a, b, fused = _planes(a, b, fused)
    ga, aa = _edges(a)
    gb, ab = _edges(b)
    gf, af = _edges(fused)
    # Sobel on a constant plane leaves rounding residue around 1e-16.
    if max(ga.max(), gb.max()) < 1e-9:
        return 0.0
    weight = np.sum(ga + gb)
    q = np.sum(_preservation(ga, aa, gf, af) * ga + _preservation(gb, ab, gf, af) * gb) / weight
    return float(np.clip(q, 0.0, 1.0))


def scd(a, b, fused) -> float:
    """Sum of correlations of differences; NaN where a difference image is constant."""
    a, b, fused = _planes(a, b, fused)
    try:
        return correlation_coefficient(fused - b, a) + correlation_coefficient(fused - a, b)
    except UndefinedCorrelationError:
        return float("nan")


# -- reports --------------------------------------------------------------------------------

METRIC_NAMES = ("psnr", "ssim", "ms_ssim", "mi", "vif", "cc", "fmi_pixel", "fmi_dct", "fmi_w", "mse", "qabf")


@dataclass(frozen=True)
class MetricReport:
    pair_id: str
    psnr: float
    ssim: float
    ms_ssim: float
    mi: float
    vif: float
    cc: float
    fmi_pixel: float
    fmi_dct: float
    fmi_w: float
    mse: float
    qabf: float
    scd: float | None = None

    def metrics(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in METRIC_NAMES}
        if self.scd is not None:
            out["scd"] = self.scd
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_pair(vis, ir, fused, pair_id: str = "", with_scd: bool = False) -> MetricReport:
    vis, ir, fused = _planes(vis, ir, fused)
    fusion_mse = 0.5 * (mse(vis, fused) + mse(ir, fused))
    return MetricReport(
        pair_id=pair_id,
        psnr=_psnr_from_mse(fusion_mse),
        ssim=0.5 * (ssim_metric(vis, fused) + ssim_metric(ir, fused)),
        ms_ssim=0.5 * (ms_ssim(vis, fused) + ms_ssim(ir, fused)),
        mi=mutual_information(vis, fused) + mutual_information(ir, fused),
        vif=0.5 * (vif(vis, fused) + vif(ir, fused)),
        cc=0.5 * (correlation_coefficient(vis, fused) + correlation_coefficient(ir, fused)),
        fmi_pixel=fmi(vis, ir, fused, "pixel"),
        fmi_dct=fmi(vis, ir, fused, "dct"),
        fmi_w=fmi(vis, ir, fused, "wavelet"),
        mse=fusion_mse,
        qabf=qabf(vis, ir, fused),
        scd=scd(vis, ir, fused) if with_scd else None,
    )


def mean_report(reports: list[MetricReport], pair_id: str = "mean") -> MetricReport:
    if not reports:
        raise ValueError("cannot average an empty list of reports")
    values = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    scds = [r.scd for r in reports]
    scd_mean = None if any(s is None for s in scds) else float(np.mean(scds))
    return MetricReport(pair_id=pair_id, scd=scd_mean, **values)


def _columns(reports: list[MetricReport]) -> list[str]:
    cols = ["pair_id", *METRIC_NAMES]
    if all(r.scd is not None for r in reports):
        cols.append("scd")
    return cols


def write_table(reports: list[MetricReport], path: str | Path) -> MetricReport:
    """Write one CSV row per report plus a final ``mean`` row; returns the mean."""
    mean = mean_report(reports)
    rows = [*reports, mean]
    cols = _columns(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r.pair_id, *(repr(float(getattr(r, c))) for c in cols[1:])])
    tmp.replace(path)
    return mean


def read_table(path: str | Path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = {f.name for f in fields(MetricReport)}
    return [
        MetricReport(**{k: (v if k == "pair_id" else float(v)) for k, v in row.items() if k in names}) for row in rows
    ]


def write_json(reports: list[MetricReport], path: str | Path) -> None:
    payload = {"pairs": [r.to_dict() for r in reports], "mean": mean_report(reports).to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2))
