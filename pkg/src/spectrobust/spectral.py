"""2D discrete Fourier analysis of image channels.

All transforms act on the last two axes and are written as products with
dense DFT matrices, so the same code runs on numpy arrays and, when given a
:class:`~spectrobust.diffcore.Tensor`, records a differentiable graph.
Spectra use the unshifted layout (DC at index ``[0, 0]``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from . import diffcore as F
from .diffcore import Tensor
from .errors import EmptyBand, NonSymmetricSpectrum, ShapeMismatch

Array = Union[np.ndarray, Tensor]

N_REGIONS = 10
IMAG_TOLERANCE = 1e-6


def _ops(x):
    return F if isinstance(x, Tensor) else np


def _const(a: np.ndarray, like) -> np.ndarray:
    dtype = like.data.dtype if isinstance(like, Tensor) else np.result_type(like, np.float32)
    return a.astype(dtype, copy=False)


@lru_cache(maxsize=32)
def dft_matrices(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cosine and sine parts of the n-point DFT matrix, exp(-2j*pi*k*m/n) = C - iS."""
    k = np.arange(n)
    # reduce k*m modulo n before scaling to keep the angles exact-ish for large n
    angle = 2.0 * np.pi * (np.outer(k, k) % n) / n
    c, s = np.cos(angle), np.sin(angle)
    # entries that are exactly zero in theory (multiples of pi/2)
    c[np.abs(c) < 1e-14] = 0.0
    s[np.abs(s) < 1e-14] = 0.0
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def dft2(x: Array) -> Tuple[Array, Array]:
    """Real and imaginary parts of the unnormalized 2D DFT over the last two axes."""
    h, w = x.shape[-2:]
    ch, sh = (_const(m, x) for m in dft_matrices(h))
    cw, sw = (_const(m, x) for m in dft_matrices(w))
    xc = x @ cw
    xs = x @ sw
    real = ch @ xc - sh @ xs
    imag = -(ch @ xs + sh @ xc)
    return real, imag


def idft2(real: Array, imag: Array) -> Tuple[Array, Array]:
    """Inverse of :func:`dft2`; returns real and imaginary parts of the image."""
    h, w = real.shape[-2:]
    like = real if isinstance(real, Tensor) else imag
    ch, sh = (_const(m, like) for m in dft_matrices(h))
    cw, sw = (_const(m, like) for m in dft_matrices(w))
    scale = 1.0 / (h * w)
    tr = ch @ real - sh @ imag
    ti = ch @ imag + sh @ real
    out_r = (tr @ cw - ti @ sw) * scale
    out_i = (tr @ sw + ti @ cw) * scale
    return out_r, out_i


def idft2_real(real: Array, imag: Array) -> Array:
    """Real part of the inverse DFT only (skips the imaginary products)."""
    h, w = real.shape[-2:]
    like = real if isinstance(real, Tensor) else imag
    ch, sh = (_const(m, like) for m in dft_matrices(h))
    cw, sw = (_const(m, like) for m in dft_matrices(w))
    tr = ch @ real - sh @ imag
    ti = ch @ imag + sh @ real
    return (tr @ cw - ti @ sw) * (1.0 / (h * w))


# ------------------------------------------------------------ symmetry maps


@lru_cache(maxsize=32)
def conjugate_index(h: int, w: int) -> np.ndarray:
    """Flat index of the conjugate partner (-u mod h, -v mod w) of every bin."""
    u = (-np.arange(h)) % h
    v = (-np.arange(w)) % w
    idx = (u[:, None] * w + v[None, :]).reshape(-1)
    idx.setflags(write=False)
    return idx


@dataclass(frozen=True)
class HalfPlane:
    """Non-redundant parametrization of conjugate-symmetric maps on an h x w grid.

    ``representatives`` lists the flat bins carrying free parameters (the lower
    flat index of each conjugate pair, self-conjugate bins included).
    ``expand_index`` maps every bin to its parameter slot and ``odd_sign`` is
    +1 on representatives, -1 on their partners and 0 on self-conjugate bins.
    """

    h: int
    w: int
    representatives: np.ndarray
    expand_index: np.ndarray
    odd_sign: np.ndarray
    self_conjugate: np.ndarray

    @property
    def size(self) -> int:
        return len(self.representatives)


@lru_cache(maxsize=32)
def half_plane(h: int, w: int) -> HalfPlane:
    flat = np.arange(h * w)
    partner = conjugate_index(h, w)
    canonical = np.minimum(flat, partner)
    reps = np.flatnonzero(flat <= partner)
    slot = np.full(h * w, -1, dtype=np.intp)
    slot[reps] = np.arange(len(reps))
    expand = slot[canonical]
    self_conj = flat == partner
    sign = np.where(self_conj, 0.0, np.where(flat < partner, 1.0, -1.0))
    return HalfPlane(h, w, reps, expand, sign, self_conj)


def symmetrize(free: Array, kind: str, shape: Tuple[int, int]) -> Array:
    """Expand half-plane parameters (..., P) into a full (..., h, w) symmetric map.

    ``kind="magnitude"`` mirrors values evenly; ``kind="phase"`` mirrors them
    oddly and forces self-conjugate bins to zero.
    """
    h, w = shape
    hp = half_plane(h, w)
    if free.shape[-1] != hp.size:
        raise ShapeMismatch(f"expected {hp.size} free parameters for a {h}x{w} grid, got {free.shape[-1]}")
    ops = _ops(free)
    full = ops.take(free, hp.expand_index, axis=-1)
    if kind == "phase":
        full = full * _const(hp.odd_sign, free)
    elif kind != "magnitude":
        raise ValueError(f"kind must be 'magnitude' or 'phase', got {kind!r}")
    return full.reshape(tuple(free.shape[:-1]) + (h, w))


def free_parameters(full: np.ndarray) -> np.ndarray:
    """Read the half-plane parameters out of a full symmetric (..., h, w) map."""
    h, w = full.shape[-2:]
    flat = np.asarray(full).reshape(full.shape[:-2] + (h * w,))
    return flat[..., half_plane(h, w).representatives].copy()


def _hermitian_part(real: Array, imag: Array) -> Tuple[Array, Array]:
    h, w = real.shape[-2:]
    partner = conjugate_index(h, w)
    ops = _ops(real)
    lead = tuple(real.shape[:-2])
    rf = real.reshape(lead + (h * w,))
    im = imag.reshape(lead + (h * w,))
    rs = (rf + ops.take(rf, partner, axis=-1)) * 0.5
    ims = (im - ops.take(im, partner, axis=-1)) * 0.5
    return rs.reshape(lead + (h, w)), ims.reshape(lead + (h, w))


# ------------------------------------------------------------------ spectra


@dataclass
class Spectrum:
    """Polar form of a per-channel spectrum: magnitude >= 0 and phase in (-pi, pi]."""

    magnitude: Array
    phase: Array

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.magnitude.shape)


def decompose(x: Array) -> Spectrum:
    """Magnitude and phase of the DFT of a real image.

    The transform is projected onto its exactly Hermitian part first, so the
    returned magnitude is exactly even and the phase exactly odd. Phase is 0
    wherever the magnitude vanishes, with zero gradient there.
    """
    ops = _ops(x)
    real, imag = _hermitian_part(*dft2(x))
    mag = ops.sqrt(real * real + imag * imag)
    phase = ops.atan2(imag, real)
    mag_data = mag.data if isinstance(mag, Tensor) else mag
    zero = mag_data == 0
    if np.any(zero):
        phase = phase * _const((~zero).astype(np.float64), x)
    return Spectrum(mag, phase)


def recompose(spec: Spectrum, strict: bool = True) -> Array:
    """Inverse transform of ``magnitude * exp(i * phase)`` as a real image.

    With ``strict`` the imaginary residual must stay below 1e-6 of the peak
    real value, otherwise :class:`NonSymmetricSpectrum` is raised. With
    ``strict=False`` the imaginary part is discarded unchecked.
    """
    ops = _ops(spec.magnitude)
    real = spec.magnitude * ops.cos(spec.phase)
    imag = spec.magnitude * ops.sin(spec.phase)
    if not strict:
        return idft2_real(real, imag)
    out_r, out_i = idft2(real, imag)
    check_real(out_r, out_i)
    return out_r


def check_real(out_r: Array, out_i: Array, reference: Optional[Array] = None) -> None:
    """Raise :class:`NonSymmetricSpectrum` if |imag| exceeds 1e-6 of the peak.

    The peak is taken over ``out_r`` and, when given, ``reference`` (useful
    when ``out_r`` is a small difference image).
    """
    r = out_r.data if isinstance(out_r, Tensor) else np.asarray(out_r)
    i = out_i.data if isinstance(out_i, Tensor) else np.asarray(out_i)
    peak = float(np.max(np.abs(r))) if r.size else 0.0
    if reference is not None:
        ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
        peak = max(peak, float(np.max(np.abs(ref))) if ref.size else 0.0)
    resid = float(np.max(np.abs(i))) if i.size else 0.0
    if resid > IMAG_TOLERANCE * max(peak, np.finfo(np.float64).tiny):
        raise NonSymmetricSpectrum(f"imaginary residual {resid:.3g} exceeds tolerance (peak {peak:.3g})")


# ---------------------------------------------------------- frequency regions


@dataclass(frozen=True)
class RegionPartition:
    """Assignment of every frequency bin (unshifted layout) to one of 10 rings."""

    region_index: np.ndarray
    counts: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.region_index.shape)


def normalized_radius(h: int, w: int) -> np.ndarray:
    """Euclidean distance of each bin from DC, scaled so the farthest corner is 1."""
    fu = np.fft.fftfreq(h) * h
    fv = np.fft.fftfreq(w) * w
    r = np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)
    return r / r.max()


def make_region_partition(h: int, w: int) -> RegionPartition:
    """Ten annuli of equal radial width around DC; region 1 holds DC."""
    if h < 4 or w < 4:
        raise ShapeMismatch(f"region partition needs h, w >= 4, got {(h, w)}")
    r = normalized_radius(h, w)
    idx = np.minimum(np.floor(N_REGIONS * r).astype(int) + 1, N_REGIONS)
    counts = np.bincount(idx.ravel(), minlength=N_REGIONS + 1)[1:]
    idx.setflags(write=False)
    return RegionPartition(idx, counts)


@dataclass(frozen=True)
class BandMask:
    mask: np.ndarray
    regions: Tuple[int, ...]

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.mask.shape)


LOW_BAND = (1, 2)
HIGH_BAND = (10,)
MIDDLE_BAND = tuple(range(3, 10))


def make_band_mask(partition: RegionPartition, regions: Iterable[int]) -> BandMask:
    regions = tuple(sorted(set(int(r) for r in regions)))
    bad = [r for r in regions if not 1 <= r <= N_REGIONS]
    if bad:
        raise ValueError(f"regions must lie in 1..{N_REGIONS}, got {bad}")
    mask = np.isin(partition.region_index, regions)
    if not mask.any():
        raise EmptyBand(f"no frequency bin falls in regions {regions}")
    mask.setflags(write=False)
    return BandMask(mask, regions)


def is_conjugate_symmetric(mask: np.ndarray) -> bool:
    h, w = mask.shape[-2:]
    flat = mask.reshape(mask.shape[:-2] + (h * w,))
    return bool(np.array_equal(flat, flat[..., conjugate_index(h, w)]))
