"""Full-reference image quality metrics and ASR-versus-quality curves.

All metrics take images in [0, 1], either a single (C, H, W) image or a batch
(N, C, H, W). Batched calls return one value per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import NoResults, ShapeMismatch, TooSmallImage

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
AXES = ("psnr", "ms_ssim", "mdsi")


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return a[None], b[None], True
    if a.ndim != 4:
        raise ShapeMismatch(f"expected (C, H, W) or (N, C, H, W), got {a.shape}")
    return a, b, False


def _out(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


# --------------------------------------------------------------------- PSNR


def psnr(x, x_adv):
    """Peak signal-to-noise ratio in dB with peak 1; identical images give the 100 dB cap."""
    a, b, single = _pair(x, x_adv)
    mse = np.mean((a - b) ** 2, axis=(1, 2, 3))
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(1.0 / mse)
    return _out(np.minimum(db, PSNR_CAP), single)


# ------------------------------------------------------------------ MS-SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def ms_ssim_scales(h: int, w: int) -> int:
    """Number of scales used for an h x w image (5 at >= 128 px, 3 at 32 px)."""
    side = min(h, w)
    if side < 8:
        raise TooSmallImage(f"MS-SSIM needs images of at least 8x8, got {h}x{w}")
    return int(min(len(MS_SSIM_WEIGHTS), 1 + np.floor(np.log2(side / 8.0))))


def _blur(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(x, window, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, window, axis=-2, mode="reflect")


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image channel-averaged SSIM and contrast-structure means at one scale."""
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _blur(a, window), _blur(b, window)
    saa = _blur(a * a, window) - mu_a**2
    sbb = _blur(b * b, window) - mu_b**2
    sab = _blur(a * b, window) - mu_a * mu_b
    cs = (2.0 * sab + c2) / (saa + sbb + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return (lum * cs).mean(axis=(1, 2, 3)), cs.mean(axis=(1, 2, 3))


def _downsample(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def ms_ssim(x, x_adv, scales: int = None):
    """Multi-scale SSIM (Gaussian window 11, sigma 1.5, reflect padding).

    The scale count defaults to :func:`ms_ssim_scales` and the standard
    five weights are truncated and renormalized to it.
    """
    a, b, single = _pair(x, x_adv)
    h, w = a.shape[-2:]
    n_scales = max_scales = ms_ssim_scales(h, w)
    if scales is not None:
        if not 1 <= scales <= max_scales:
            raise TooSmallImage(f"{scales} scales need a larger image than {h}x{w}")
        n_scales = scales
    weights = np.asarray(MS_SSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    window = gaussian_window()
    score = np.ones(len(a))
    for s in range(n_scales):
        ssim, cs = _ssim_terms(a, b, window)
        term = ssim if s == n_scales - 1 else cs
        score = score * np.maximum(term, 0.0) ** weights[s]
        if s < n_scales - 1:
            a, b = _downsample(a), _downsample(b)
    return _out(np.clip(score, 0.0, 1.0), single)


# --------------------------------------------------------------------- MDSI

MDSI_C1, MDSI_C2, MDSI_C3 = 140.0, 55.0, 550.0
MDSI_ALPHA, MDSI_Q, MDSI_RHO, MDSI_O = 0.6, 0.25, 1.0, 0.25
_PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
_LHM = np.array(
    [
        [0.2989, 0.5870, 0.1140],
        [0.30, 0.04, -0.35],
        [0.34, -0.60, 0.17],
    ]
)


def _gradient_magnitude(lum: np.ndarray) -> np.ndarray:
    gx = ndimage.correlate(lum, _PREWITT_X[None], mode="nearest")
    gy = ndimage.correlate(lum, _PREWITT_X.T[None], mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def _similarity(a: np.ndarray, b: np.ndarray, c: float) -> np.ndarray:
    return (2.0 * a * b + c) / (a * a + b * b + c)


def mdsi(x, x_adv):
    """Mean deviation similarity index; 0 for identical images, larger is worse.

    Grayscale inputs are replicated to three channels.
    """
    a, b, single = _pair(x, x_adv)
    if a.shape[1] == 1:
        a, b = np.repeat(a, 3, axis=1), np.repeat(b, 3, axis=1)
    elif a.shape[1] != 3:
        raise ShapeMismatch(f"MDSI needs RGB or grayscale images, got {a.shape[1]} channels")
    ref = np.einsum("kc,nchw->nkhw", _LHM, a * 255.0)
    dist = np.einsum("kc,nchw->nkhw", _LHM, b * 255.0)
    g_ref = _gradient_magnitude(ref[:, 0])
    g_dist = _gradient_magnitude(dist[:, 0])
    g_fused = _gradient_magnitude(0.5 * (ref[:, 0] + dist[:, 0]))
    gs = (
        _similarity(g_ref, g_dist, MDSI_C1)
        + _similarity(g_dist, g_fused, MDSI_C2)
        - _similarity(g_ref, g_fused, MDSI_C2)
    )
    chroma_num = 2.0 * (ref[:, 1] * dist[:, 1] + ref[:, 2] * dist[:, 2]) + MDSI_C3
    chroma_den = ref[:, 1] ** 2 + dist[:, 1] ** 2 + ref[:, 2] ** 2 + dist[:, 2] ** 2 + MDSI_C3
    cs = chroma_num / chroma_den
    gcs = np.maximum(MDSI_ALPHA * gs + (1.0 - MDSI_ALPHA) * cs, 0.0) ** MDSI_Q
    dev = np.abs(gcs - gcs.mean(axis=(1, 2), keepdims=True)) ** MDSI_RHO
    return _out(dev.mean(axis=(1, 2)) ** (MDSI_O / MDSI_RHO), single)


# ------------------------------------------------------------ quality bundle


@dataclass(frozen=True)
class QualityScore:
    psnr: float
    ms_ssim: float
    mdsi: float

    def get(self, axis: str) -> float:
        if axis not in AXES:
            raise ValueError(f"unknown quality axis {axis!r}")
        return getattr(self, axis)


def quality_scores(x, x_adv) -> List[QualityScore]:
    """All three metrics for a batch, one :class:`QualityScore` per image."""
    a, b, _ = _pair(x, x_adv)
    p, m, d = psnr(a, b), ms_ssim(a, b), mdsi(a, b)
    return [QualityScore(float(p[i]), float(m[i]), float(d[i])) for i in range(len(a))]


# ----------------------------------------------------------------- ASR curve


@dataclass(frozen=True)
class AsrBin:
    low: float
    high: float
    mean_quality: float
    asr: float
    count: int


@dataclass(frozen=True)
class AsrCurve:
    """Fixed-width bins over a quality axis; empty bins are omitted."""

    axis: str
    bins: Tuple[AsrBin, ...]

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def as_rows(self) -> List[dict]:
        return [dict(axis=self.axis, **b.__dict__) for b in self.bins]


def _quality_and_success(results: Iterable, axis: str) -> Tuple[np.ndarray, np.ndarray]:
    qs, ok = [], []
    for r in results:
        if hasattr(r, "quality"):
            qs.append(r.quality.get(axis))
            ok.append(bool(r.success))
        else:
            q, s = r
            qs.append(float(q))
            ok.append(bool(s))
    return np.asarray(qs, dtype=np.float64), np.asarray(ok, dtype=bool)


def build_asr_curve(results: Sequence, axis: str = "psnr", bins: int = 10) -> AsrCurve:
    """ASR per fixed-width bin of the observed quality range.

    ``results`` holds attack results (with ``quality`` and ``success``) or
    plain ``(quality, success)`` pairs.
    """
    if axis not in AXES:
        raise ValueError(f"unknown quality axis {axis!r}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    q, ok = _quality_and_success(results, axis)
    if len(q) == 0:
        raise NoResults("cannot build an ASR curve from zero results")
    lo, hi = float(q.min()), float(q.max())
    if hi == lo:
        edges = np.array([lo, hi])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    # right-closed last bin so the maximum is counted
    which = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, len(edges) - 2)
    out = []
    for k in range(len(edges) - 1):
        sel = which == k
        count = int(sel.sum())
        if count:
            out.append(AsrBin(float(edges[k]), float(edges[k + 1]), float(q[sel].mean()), float(ok[sel].mean()), count))
    return AsrCurve(axis, tuple(out))
