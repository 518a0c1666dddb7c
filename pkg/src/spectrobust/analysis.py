"""Diagnostics: frequency-region distortion, linearity probe, spectrum
reduction, magnitude-phase recombination and attention rollout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import diffcore as F
from .diffcore import Tensor
from .errors import ConstantMap, DegenerateShift, EmptyTrace, NoResults, ShapeMismatch, ZeroDistortion
from .spectral import N_REGIONS, RegionPartition, Spectrum, decompose, dft2, make_region_partition, recompose
from .validation import check_images, check_labels, check_same_shape

LINEARITY_GRID = np.linspace(0.0, 1.0, 101)
LINEARITY_STEP = 1e-3
REDUCTION_GRID = np.round(np.linspace(0.0, 1.0, 11), 10)
SHIFT_FLOOR = 1e-12


# --------------------------------------------------------- region histograms


@dataclass(frozen=True)
class RegionHistogram:
    """Share of distortion magnitude per frequency region (index 0 is region 1)."""

    fractions: np.ndarray
    n_images: int = 1

    @property
    def regions(self) -> np.ndarray:
        return np.arange(1, len(self.fractions) + 1)


def region_magnitudes(diff: np.ndarray, partition: RegionPartition) -> np.ndarray:
    """Per-image (N, 10) sums of |F{diff}| over each region, channels summed."""
    real, imag = dft2(diff)
    mag = np.hypot(real, imag).sum(axis=1).reshape(len(diff), -1)
    idx = partition.region_index.reshape(-1) - 1
    out = np.zeros((len(diff), N_REGIONS))
    for k in range(N_REGIONS):
        out[:, k] = mag[:, idx == k].sum(axis=1)
    return out


def region_distortion_histogram(X, X_adv, partition: Optional[RegionPartition] = None) -> RegionHistogram:
    """Distribution of |F{X' - X}| over the ten frequency regions.

    For a batch, per-image distributions are averaged over the images with
    nonzero distortion. Raises :class:`ZeroDistortion` when there is none.
    """
    X = check_images(X, dtype=np.float64)
    X_adv = check_images(X_adv, dtype=np.float64)
    check_same_shape(X, X_adv)
    partition = partition or make_region_partition(*X.shape[-2:])
    if partition.shape != X.shape[-2:]:
        raise ShapeMismatch(f"partition {partition.shape} does not match images {X.shape[-2:]}")
    sums = region_magnitudes(X_adv - X, partition)
    totals = sums.sum(axis=1)
    keep = totals > 0
    if not keep.any():
        raise ZeroDistortion("attacked images equal the originals")
    fractions = (sums[keep] / totals[keep, None]).mean(axis=0)
    return RegionHistogram(fractions, int(keep.sum()))


# ------------------------------------------------------------ linearity probe


@dataclass(frozen=True)
class LinearityProfile:
    eps: np.ndarray
    theta: np.ndarray
    d_eps: float


FeatureMap = Callable[[np.ndarray], np.ndarray]


def _feature_fn(model) -> FeatureMap:
    if callable(model) and not hasattr(model, "features_tensor"):
        return lambda x: np.asarray(model(x), dtype=np.float64).reshape(len(x), -1)

    def g(x: np.ndarray) -> np.ndarray:
        with F.no_grad(), F.default_dtype(np.float64):
            return model.features_tensor(Tensor(x)).data.reshape(len(x), -1)

    return g


def linearity_theta(
    model: Union[FeatureMap, object],
    X,
    delta,
    eps: Sequence[float] = LINEARITY_GRID,
    d_eps: float = LINEARITY_STEP,
) -> LinearityProfile:
    """theta_eps = pi - arccos(g_hat(eps-) . g_hat(eps+)) along X + eps * delta.

    ``model`` is either a classifier (penultimate features, evaluated in
    float64) or a callable mapping a batch of inputs to feature vectors.
    0 means the feature path is locally straight; pi means it folds back.
    Shifts with norm below 1e-12 raise :class:`DegenerateShift`.
    """
    if not d_eps > 0:
        raise ValueError("d_eps must be positive")
    X = np.asarray(X, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if X.shape != delta.shape:
        raise ShapeMismatch(f"X {X.shape} and delta {delta.shape} differ in shape")
    g = _feature_fn(model)
    eps = np.asarray(eps, dtype=np.float64)
    # rows: X_{eps - d}, X_eps, X_{eps + d} for every eps
    steps = np.stack([eps - d_eps, eps, eps + d_eps], axis=1).reshape(-1)
    inputs = X[None] + steps.reshape((-1,) + (1,) * X.ndim) * delta[None]
    feats = g(inputs).reshape(len(eps), 3, -1)
    back = feats[:, 0] - feats[:, 1]
    fwd = feats[:, 2] - feats[:, 1]
    nb = np.linalg.norm(back, axis=1)
    nf = np.linalg.norm(fwd, axis=1)
    if np.any(nb < SHIFT_FLOOR) or np.any(nf < SHIFT_FLOOR):
        bad = eps[(nb < SHIFT_FLOOR) | (nf < SHIFT_FLOOR)]
        raise DegenerateShift(f"feature shift vanishes at eps = {bad[:5]}")
    u = back / nb[:, None]
    v = fwd / nf[:, None]
    # pi - arccos(u.v) written as 2 arcsin(|u + v| / 2): same angle, but
    # well conditioned when the shifts are nearly antiparallel
    half = np.clip(np.linalg.norm(u + v, axis=1) / 2.0, 0.0, 1.0)
    return LinearityProfile(eps, 2.0 * np.arcsin(half), float(d_eps))


# --------------------------------------------------------- spectrum reduction


@dataclass(frozen=True)
class ReductionSweep:
    target: str
    r: np.ndarray
    accuracy: np.ndarray


def reduce_spectrum(X, target: str, r: float) -> np.ndarray:
    """Images rebuilt with M(1 - r) or phi(1 - r), clipped to [0, 1].

    Scaling the phase breaks realness at self-conjugate bins whose phase is
    pi, so the imaginary part of the reconstruction is dropped.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [0, 1], got {r}")
    X = check_images(X, dtype=np.float64)
    spec = decompose(X)
    if target == "magnitude":
        out = recompose(Spectrum(spec.magnitude * (1.0 - r), spec.phase), strict=False)
    elif target == "phase":
        out = recompose(Spectrum(spec.magnitude, spec.phase * (1.0 - r)), strict=False)
    else:
        raise ValueError(f"target must be 'magnitude' or 'phase', got {target!r}")
    return np.clip(out, 0.0, 1.0)


class SpectrumReducer(TransformerMixin, BaseEstimator):
    """Stateless transformer form of :func:`reduce_spectrum`."""

    def __init__(self, target: str = "magnitude", r: float = 0.0):
        self.target = target
        self.r = r

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        return reduce_spectrum(X, self.target, self.r)


def spectrum_reduction_sweep(model, X, y, target: str, r_grid: Sequence[float] = REDUCTION_GRID) -> ReductionSweep:
    """Accuracy of ``model`` on images with the magnitude or phase scaled by 1 - r."""
    X = check_images(X, dtype=np.float64)
    y = check_labels(y, len(X))
    r_grid = np.asarray(r_grid, dtype=np.float64)
    acc = np.array([np.mean(model.predict(reduce_spectrum(X, target, float(r))) == y) for r in r_grid])
    return ReductionSweep(target, r_grid, acc)


# ------------------------------------------------------------- recombination


@dataclass(frozen=True)
class RecombinationTable:
    """Percentages of recombined images predicted as the phase source's class,
    the magnitude source's class, or neither."""

    phase: float
    magnitude: float
    other: float
    n_pairs: int


def recombine(mag_source, phase_source) -> np.ndarray:
    """Image with the magnitude of ``mag_source`` and the phase of ``phase_source``."""
    a = check_images(mag_source, dtype=np.float64)
    b = check_images(phase_source, dtype=np.float64)
    check_same_shape(a, b)
    out = np.clip(recompose(Spectrum(decompose(a).magnitude, decompose(b).phase)), 0.0, 1.0)
    return out[0] if np.ndim(mag_source) == 3 else out


def recombination_pairs(y: np.ndarray, max_pairs: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Ordered (magnitude index, phase index) pairs with distinct labels."""
    i, j = np.nonzero(y[:, None] != y[None, :])
    pairs = np.stack([i, j], axis=1)
    if max_pairs is not None and len(pairs) > max_pairs:
        pick = np.sort(np.random.default_rng(seed).choice(len(pairs), max_pairs, replace=False))
        pairs = pairs[pick]
    return pairs


def recombination_study(
    model, X, y, max_pairs: Optional[int] = None, seed: int = 0, batch_size: int = 512
) -> RecombinationTable:
    """Classify magnitude/phase swaps over ordered image pairs with distinct labels."""
    X = check_images(X, dtype=np.float64)
    y = check_labels(y, len(X))
    pairs = recombination_pairs(y, max_pairs, seed)
    if len(pairs) == 0:
        raise NoResults("no ordered image pairs with distinct labels")
    spec = decompose(X)
    counts = np.zeros(3, dtype=np.int64)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        mixed = recompose(Spectrum(spec.magnitude[chunk[:, 0]], spec.phase[chunk[:, 1]]))
        pred = model.predict(np.clip(mixed, 0.0, 1.0))
        is_phase = pred == y[chunk[:, 1]]
        is_mag = pred == y[chunk[:, 0]]
        counts += [int(is_phase.sum()), int(is_mag.sum()), int((~is_phase & ~is_mag).sum())]
    pct = 100.0 * counts / len(pairs)
    return RecombinationTable(float(pct[0]), float(pct[1]), float(pct[2]), int(len(pairs)))


# ---------------------------------------------------------- attention rollout


def attention_rollout(trace, grid: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Class-token rollout over patch tokens, reshaped to the patch grid.

    ``trace`` is an AttentionTrace or a list of per-layer attention arrays
    shaped (heads, T, T) or (N, heads, T, T); token 0 is the class token.
    Returns (gh, gw) or (N, gh, gw).
    """
    layers = list(getattr(trace, "layers", trace))
    if not layers:
        raise EmptyTrace("attention trace has no layers")
    single = np.ndim(layers[0]) == 3
    mats = [np.asarray(a, dtype=np.float64) for a in layers]
    if single:
        mats = [a[None] for a in mats]
    n, _, t, _ = mats[0].shape
    eye = np.eye(t)
    roll = np.broadcast_to(eye, (n, t, t)).copy()
    for a in mats:
        if a.shape[0] != n or a.shape[-2:] != (t, t):
            raise ShapeMismatch("attention layers disagree in shape")
        step = a.mean(axis=1) + eye
        step = step / step.sum(axis=-1, keepdims=True)
        roll = step @ roll
    cls_row = roll[:, 0, 1:]
    if grid is None:
        side = int(round(np.sqrt(t - 1)))
        if side * side != t - 1:
            raise ShapeMismatch(f"{t - 1} patch tokens do not form a square grid; pass grid")
        grid = (side, side)
    maps = cls_row.reshape((n,) + tuple(grid))
    return maps[0] if single else maps


def attention_correlation(map_a, map_b) -> float:
    """Pearson correlation between two attention maps of the same shape."""
    a = np.asarray(map_a, dtype=np.float64).ravel()
    b = np.asarray(map_b, dtype=np.float64).ravel()
    if np.shape(map_a) != np.shape(map_b):
        raise ShapeMismatch(f"map shapes differ: {np.shape(map_a)} vs {np.shape(map_b)}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ConstantMap("attention map has zero variance")
    a = a - a.mean()
    b = b - b.mean()
    return float(np.clip(a @ b / np.sqrt((a @ a) * (b @ b)), -1.0, 1.0))
