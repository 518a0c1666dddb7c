"""Magnitude, phase and pixel attacks plus FGSM/PGD baselines.

An attacked image is built as

    S    = M * exp(i phi)                      (clean spectrum)
    S'   = clip(M * d_mag, 0, inf) * exp(i (phi + d_phase))
    X~'  = X + F^-1{S' - S} + d_pixel
    X'   = clip(X~', 0, 1)

which equals reconstructing from S' directly, since F^-1{S} = X. Taking the
inverse transform of the spectral difference keeps frozen or unperturbed
bins at exactly zero, so the identity perturbation reproduces X bit for bit
and band-restricted attacks leave no energy outside their band.

``d_mag`` and ``d_phase`` are stored as half-plane parameters, so their
expanded maps are even and odd symmetric by construction. ``d_mag`` is kept
as ``1 + u`` and weight decay acts on ``u``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import diffcore as F
from .diffcore import Tensor
from .errors import ShapeMismatch
from .metrics import QualityScore, quality_scores
from .spectral import BandMask, check_real, decompose, half_plane, idft2, idft2_real, symmetrize
from .validation import check_images, check_labels

COMPONENTS = ("mag", "phase", "pixel")
LAMBDA_GRID = (1.0, 1e3, 5e3, 1e4, 5e4, 1e5, 5e5, 1e6)
EPSILON_GRID = (0.1 / 255, 0.5 / 255, 1 / 255, 4 / 255, 8 / 255)
IMPROVEMENT_TOL = 1e-12
DISTANCES = ("l2", "squared", "mse")


def _components(components: Iterable[str]) -> FrozenSet[str]:
    comps = frozenset(components)
    if not comps:
        raise ValueError("at least one attack component is required")
    unknown = comps - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown attack components {sorted(unknown)}")
    return comps


# ---------------------------------------------------------------- data types


@dataclass
class PerturbationSet:
    """Perturbation parameters for a batch of N images of shape (C, H, W).

    ``mag_offset`` and ``phase`` have shape (N, C, P) with P half-plane
    parameters per channel; ``pixel`` has shape (N, C, H, W).
    """

    mag_offset: np.ndarray
    phase: np.ndarray
    pixel: np.ndarray
    components: FrozenSet[str]

    @classmethod
    def identity(cls, n: int, shape: Tuple[int, int, int], components=COMPONENTS, dtype=np.float64) -> "PerturbationSet":
        c, h, w = shape
        p = half_plane(h, w).size
        return cls(
            mag_offset=np.zeros((n, c, p), dtype=dtype),
            phase=np.zeros((n, c, p), dtype=dtype),
            pixel=np.zeros((n, c, h, w), dtype=dtype),
            components=_components(components),
        )

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixel.shape[1:])

    @property
    def delta_mag(self) -> np.ndarray:
        """Expanded multiplicative magnitude map (N, C, H, W), even symmetric."""
        return symmetrize(1.0 + self.mag_offset, "magnitude", self.image_shape[1:])

    @property
    def delta_phase(self) -> np.ndarray:
        """Expanded additive phase map (N, C, H, W), odd symmetric."""
        return symmetrize(self.phase, "phase", self.image_shape[1:])

    @property
    def delta_pixel(self) -> np.ndarray:
        return self.pixel

    def rows(self, idx) -> "PerturbationSet":
        return PerturbationSet(self.mag_offset[idx], self.phase[idx], self.pixel[idx], self.components)


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 1.0
    components: Tuple[str, ...] = ("pixel",)
    band: Optional[BandMask] = None
    learning_rate: float = 5e-3
    weight_decay: float = 5e-6
    max_iter: int = 1000
    patience: int = 5
    seed: int = 0
    distance: str = "l2"
    dtype: str = "float32"

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        _components(self.components)
        if self.max_iter < 0 or self.patience < 1:
            raise ValueError("max_iter must be >= 0 and patience >= 1")


@dataclass
class AttackResult:
    image: np.ndarray
    success: bool
    original_class: int
    adversarial_class: int
    label: int
    iterations: int
    l2: float
    cross_entropy: float
    quality: QualityScore
    lam: float = float("nan")
    components: Tuple[str, ...] = field(default_factory=tuple)
    unclipped: Optional[np.ndarray] = field(default=None, repr=False)
    perturbation: Optional[PerturbationSet] = field(default=None, repr=False)


# -------------------------------------------------------------- construction


class _Base:
    """Constant spectral data of the clean images, shared across iterations."""

    def __init__(self, X: np.ndarray, spectral: bool, dtype):
        self.X = np.asarray(X, dtype=dtype)
        self.spectral = spectral
        if spectral:
            spec = decompose(self.X.astype(np.float64))
            self.magnitude = spec.magnitude.astype(dtype)
            self.phase = spec.phase.astype(dtype)
            # clean spectrum through the same Tensor ops used in the loop
            with F.no_grad():
                mag, ph = Tensor(self.magnitude), Tensor(self.phase)
                self.real = (mag * F.cos(ph)).data
                self.imag = (mag * F.sin(ph)).data

    def rows(self, idx) -> "_Base":
        out = object.__new__(_Base)
        out.X = self.X[idx]
        out.spectral = self.spectral
        if self.spectral:
            out.magnitude = self.magnitude[idx]
            out.phase = self.phase[idx]
            out.real = self.real[idx]
            out.imag = self.imag[idx]
        return out


def _build(base: _Base, comps: FrozenSet[str], mag_offset, phase, pixel, strict: bool) -> Tuple[Tensor, Tensor]:
    """Return (pre-clip X~', clipped X') as tensors."""
    hw = base.X.shape[-2:]
    out = Tensor(base.X)
    if base.spectral and ({"mag", "phase"} & comps):
        mag = Tensor(base.magnitude)
        ph = Tensor(base.phase)
        if "mag" in comps:
            mag = F.clip(mag * symmetrize(1.0 + mag_offset, "magnitude", hw), 0.0, None)
        if "phase" in comps:
            ph = ph + symmetrize(phase, "phase", hw)
        real = mag * F.cos(ph) - base.real
        imag = mag * F.sin(ph) - base.imag
        if strict:
            delta, resid = idft2(real, imag)
            check_real(delta, resid, reference=base.X)
        else:
            delta = idft2_real(real, imag)
        out = out + delta
    if "pixel" in comps:
        out = out + pixel
    return out, F.clip(out, 0.0, 1.0)


def apply_perturbations(X, p: PerturbationSet, strict: bool = True, return_unclipped: bool = False):
    """Attacked images X' (numpy) for a perturbation set.

    Raises :class:`NonSymmetricSpectrum` from the reconstruction when
    ``strict`` and the spectrum fails the realness check.
    """
    X = check_images(X, dtype=np.float64)
    if X.shape[1:] != p.image_shape or len(X) != len(p.pixel):
        raise ShapeMismatch(f"perturbations for {p.pixel.shape} do not fit images {X.shape}")
    with F.default_dtype(np.float64), F.no_grad():
        base = _Base(X, spectral=bool({"mag", "phase"} & p.components), dtype=np.float64)
        pre, post = _build(base, p.components, Tensor(p.mag_offset), Tensor(p.phase), Tensor(p.pixel), strict)
    if return_unclipped:
        return post.data, pre.data
    return post.data


def perturb_tensor(X, components, mag_offset=None, phase=None, pixel=None, unclipped: bool = False) -> Tensor:
    """Differentiable X' as a Tensor of the parameter Tensors (or arrays) given.

    Uses the current default dtype; parameters of absent components may be None.
    """
    comps = _components(components)
    X = check_images(X, dtype=F.get_default_dtype())
    base = _Base(X, spectral=bool({"mag", "phase"} & comps), dtype=F.get_default_dtype())
    pre, post = _build(base, comps, mag_offset, phase, pixel, strict=False)
    return pre if unclipped else post


def perturbation_spectrum(X, p: PerturbationSet) -> Tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of S' - S, the spectral change made by ``d_mag`` and ``d_phase``."""
    X = check_images(X, dtype=np.float64)
    with F.default_dtype(np.float64), F.no_grad():
        base = _Base(X, spectral=True, dtype=np.float64)
        mag, ph = Tensor(base.magnitude), Tensor(base.phase)
        hw = X.shape[-2:]
        if "mag" in p.components:
            mag = F.clip(mag * symmetrize(1.0 + Tensor(p.mag_offset), "magnitude", hw), 0.0, None)
        if "phase" in p.components:
            ph = ph + symmetrize(Tensor(p.phase), "phase", hw)
        return (mag * F.cos(ph)).data - base.real, (mag * F.sin(ph)).data - base.imag


def _distance(diff, kind: str):
    """Per-image distance: Euclidean norm, its square, or the mean squared error."""
    ops = F if isinstance(diff, Tensor) else np
    axes = tuple(range(1, diff.ndim))
    if kind == "mse":
        return ops.mean(diff * diff, axis=axes)
    sq = ops.sum(diff * diff, axis=axes)
    if kind == "squared":
        return sq
    if kind == "l2":
        return ops.sqrt(sq)
    raise ValueError(f"unknown distance {kind!r}")


def attack_loss(x_adv, X, y, model, lam, distance: str = "l2", per_image: bool = False):
    """lam * ||X' - X||_2 - CE(f(X'), y), summed over the batch.

    ``distance`` swaps the unsquared norm for its square ("squared") or for
    the mean squared error ("mse").
    ``x_adv`` may be a Tensor (to differentiate through it) or an array.
    ``lam`` is a scalar or one value per image. With ``per_image`` the
    unsummed (N,) loss tensor is returned.
    """
    x_adv = x_adv if isinstance(x_adv, Tensor) else Tensor(x_adv)
    X = np.asarray(X, dtype=x_adv.data.dtype)
    if x_adv.shape != X.shape:
        raise ShapeMismatch(f"attacked {x_adv.shape} and clean {X.shape} images differ in shape")
    dist = _distance(x_adv - X, distance)
    ce = F.cross_entropy(model.forward_tensor(x_adv), np.asarray(y), reduction="none")
    lam = np.broadcast_to(np.asarray(lam, dtype=x_adv.data.dtype), (len(X),))
    loss = dist * lam - ce
    return loss if per_image else F.sum(loss)


# -------------------------------------------------------------- optimization


def _band_masks(band: Optional[BandMask], shape, n: int, dtype):
    if band is None:
        return None
    c, h, w = shape
    if band.shape != (h, w):
        raise ShapeMismatch(f"band mask {band.shape} does not match image size {(h, w)}")
    free = band.mask.reshape(-1)[half_plane(h, w).representatives].astype(dtype)
    return np.broadcast_to(free, (n, c, len(free))).copy()


def _optimize_batch(X, y, model, cfg: AttackConfig, lam: np.ndarray) -> Tuple[PerturbationSet, np.ndarray]:
    """Run the attack on every row independently; returns parameters and iterations used."""
    comps = _components(cfg.components)
    dtype = np.dtype(cfg.dtype)
    n = len(X)
    pset = PerturbationSet.identity(n, X.shape[1:], comps, dtype=dtype)
    with F.default_dtype(dtype):
        base = _Base(X, spectral=bool({"mag", "phase"} & comps), dtype=dtype)
    names = [k for k, c in (("mag_offset", "mag"), ("phase", "phase"), ("pixel", "pixel")) if c in comps]
    arrays = [getattr(pset, k) for k in names]
    band = _band_masks(cfg.band, X.shape[1:], n, dtype)
    masks = [band if k in ("mag_offset", "phase") else None for k in names]
    opt = F.Adam(arrays, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, masks=masks, rows=n)

    best = np.full(n, np.inf)
    stale = np.zeros(n, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    lam = lam.astype(dtype)

    with F.default_dtype(dtype):
        for _ in range(cfg.max_iter):
            if len(active) == 0:
                break
            sub = base.rows(active)
            leaves = {k: Tensor(getattr(pset, k)[active], requires_grad=True) for k in names}
            zero = {k: None for k in ("mag_offset", "phase", "pixel")}
            zero.update(leaves)
            _, x_adv = _build(sub, comps, zero["mag_offset"], zero["phase"], zero["pixel"], strict=False)
            losses = attack_loss(x_adv, sub.X, y[active], model, lam[active], cfg.distance, per_image=True)
            values = losses.data.astype(np.float64)
            improved = values < best[active] - IMPROVEMENT_TOL
            best[active] = np.where(improved, values, best[active])
            stale[active] = np.where(improved, 0, stale[active] + 1)
            iters[active] += 1
            # rows that exhausted patience stop at the iterate just evaluated
            keep = stale[active] < cfg.patience
            if keep.any():
                grads = F.backpropagate(F.sum(losses))
                opt.step([grads[leaves[k]][keep] for k in names], active=active[keep])
            active = active[keep]
    return pset, iters


def _finalize(X, y, model, cfg: AttackConfig, lam, pset: PerturbationSet, iters) -> List[AttackResult]:
    x_adv, x_pre = apply_perturbations(X, pset, strict=True, return_unclipped=True)
    orig = model.predict(X)
    adv = model.predict(x_adv)
    with F.default_dtype(np.float64), F.no_grad():
        l2 = np.sqrt(np.sum((x_adv - X) ** 2, axis=(1, 2, 3)))
        logits = model.decision_function(x_adv)
        ce = F.cross_entropy(Tensor(logits), y, reduction="none").data
    quality = quality_scores(X, x_adv)
    comps = tuple(c for c in COMPONENTS if c in cfg.components)
    return [
        AttackResult(
            image=x_adv[i],
            success=bool(adv[i] != y[i]),
            original_class=int(orig[i]),
            adversarial_class=int(adv[i]),
            label=int(y[i]),
            iterations=int(iters[i]),
            l2=float(l2[i]),
            cross_entropy=float(ce[i]),
            quality=quality[i],
            lam=float(lam[i]),
            components=comps,
            unclipped=x_pre[i],
            perturbation=pset.rows(slice(i, i + 1)),
        )
        for i in range(len(X))
    ]


def optimize_attack(X, y, model, cfg: AttackConfig) -> Union[AttackResult, List[AttackResult]]:
    """Minimize the attack loss with Adam for one image or a batch of images.

    Every image is an independent problem with its own Adam state and early
    stop: the run ends after ``max_iter`` steps or once the loss has failed
    to improve on its best value for ``patience`` consecutive evaluations.
    The final iterate is returned. A single (C, H, W) image gives one result,
    a batch gives a list.
    """
    single = np.ndim(X) == 3
    X = check_images(X, dtype=np.float64)
    y = check_labels(np.atleast_1d(y), len(X), getattr(model, "n_classes_", None))
    lam = np.full(len(X), float(cfg.lam))
    if len(X) == 0:
        return []
    pset, iters = _optimize_batch(X, y, model, cfg, lam)
    results = _finalize(X, y, model, cfg, lam, pset, iters)
    return results[0] if single else results


def run_attacks(X, y, model, cfg: AttackConfig, chunk_size: int = 50, workers: int = 1) -> List[AttackResult]:
    """Batched :func:`optimize_attack` over fixed chunks, optionally on a thread pool.

    Chunk boundaries depend only on ``chunk_size``, so results do not depend
    on ``workers``.
    """
    X = check_images(X, dtype=np.float64)
    y = check_labels(y, len(X), getattr(model, "n_classes_", None))
    if len(X) == 0:
        return []
    spans = [(s, min(s + chunk_size, len(X))) for s in range(0, len(X), chunk_size)]

    def job(span):
        a, b = span
        return optimize_attack(X[a:b], y[a:b], model, cfg)

    if workers <= 1:
        parts = [job(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, spans))
    return [r for part in parts for r in part]


def sweep_lambda(
    X,
    y,
    model,
    lams: Sequence[float] = LAMBDA_GRID,
    components: Sequence[str] = ("pixel",),
    base_config: Optional[AttackConfig] = None,
    chunk_size: int = 50,
    workers: int = 1,
    callback=None,
) -> List[Tuple[float, List[AttackResult]]]:
    """One attack per (image, lambda). ``callback(lam, results)`` streams each lambda's results."""
    lams = list(lams)
    if not lams:
        raise ValueError("lambda list is empty")
    cfg0 = base_config or AttackConfig()
    out = []
    for lam in lams:
        cfg = replace(cfg0, lam=float(lam), components=tuple(components))
        res = run_attacks(X, y, model, cfg, chunk_size=chunk_size, workers=workers)
        if callback is not None:
            callback(float(lam), res)
        out.append((float(lam), res))
    return out


# ------------------------------------------------------------ gradient sign


def _input_gradient(X: np.ndarray, y: np.ndarray, model) -> np.ndarray:
    with F.default_dtype(np.float64):
        x = Tensor(X, requires_grad=True)
        loss = F.cross_entropy(model.forward_tensor(x), y, reduction="sum")
        return F.backpropagate(loss)[x]


def fgsm(X, y, model, eps: float) -> np.ndarray:
    """X' = clip(X + eps * sign(grad_X CE), 0, 1)."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    X = check_images(X, dtype=np.float64)
    y = check_labels(y, len(X))
    if eps == 0 or len(X) == 0:
        return X.copy()
    return np.clip(X + eps * np.sign(_input_gradient(X, y, model)), 0.0, 1.0)


def pgd(X, y, model, eps: float, step: Optional[float] = None, iters: int = 10) -> np.ndarray:
    """Signed-gradient ascent projected onto the l_inf ball of radius eps and onto [0, 1].

    Starts at X (no random start); the default step is 2.5 * eps / iters.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    X = check_images(X, dtype=np.float64)
    y = check_labels(y, len(X))
    if eps == 0 or len(X) == 0:
        return X.copy()
    step = 2.5 * eps / iters if step is None else step
    x_adv = X.copy()
    for _ in range(iters):
        x_adv = x_adv + step * np.sign(_input_gradient(x_adv, y, model))
        x_adv = np.clip(np.clip(x_adv, X - eps, X + eps), 0.0, 1.0)
    return x_adv


# ------------------------------------------------------------ estimator API


class FrequencyAttack(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`run_attacks`.

    ``fit`` is a no-op apart from validation; ``transform(X, y=None)`` attacks
    the given labels, or the model's own predictions when ``y`` is omitted.
    Results of the last call are kept in ``results_``.
    """

    def __init__(
        self,
        model=None,
        lam: float = 1.0,
        components: Tuple[str, ...] = ("pixel",),
        band: Optional[BandMask] = None,
        learning_rate: float = 5e-3,
        weight_decay: float = 5e-6,
        max_iter: int = 1000,
        patience: int = 5,
        distance: str = "l2",
        dtype: str = "float32",
        chunk_size: int = 50,
    ):
        self.model = model
        self.lam = lam
        self.components = components
        self.band = band
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_iter = max_iter
        self.patience = patience
        self.distance = distance
        self.dtype = dtype
        self.chunk_size = chunk_size

    def config(self) -> AttackConfig:
        return AttackConfig(
            lam=self.lam,
            components=tuple(self.components),
            band=self.band,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            max_iter=self.max_iter,
            patience=self.patience,
            distance=self.distance,
            dtype=self.dtype,
        )

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("FrequencyAttack needs a trained model")
        self.config()
        self.fitted_ = True
        return self

    def transform(self, X, y=None) -> np.ndarray:
        X = check_images(X, dtype=np.float64)
        labels = self.model.predict(X) if y is None else y
        self.results_ = run_attacks(X, labels, self.model, self.config(), chunk_size=self.chunk_size)
        if not self.results_:
            return X.copy()
        return np.stack([r.image for r in self.results_])

    def fit_transform(self, X, y=None, **fit_params) -> np.ndarray:
        return self.fit(X, y).transform(X, y)
