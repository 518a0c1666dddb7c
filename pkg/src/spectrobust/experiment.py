"""Config-driven experiment runner writing CSV tables and a checksummed manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .analysis import (
    attention_correlation,
    attention_rollout,
    linearity_theta,
    recombination_study,
    region_distortion_histogram,
    spectrum_reduction_sweep,
)
from .attacks import AttackConfig, AttackResult, fgsm, pgd, run_attacks
from .config import ExperimentConfig, dump_config
from .data import Dataset, SyntheticSpec, load_idx_dataset, make_synthetic, split
from .errors import ConstantMap, CorruptCheckpoint, DegenerateShift, SpectrobustError, ZeroDistortion
from .metrics import AXES, build_asr_curve, quality_scores
from .models import NetClassifier, ResidualCNNClassifier, TrainConfig, VisionTransformerClassifier
from .models import load_checkpoint, save_checkpoint, train
from .spectral import make_band_mask, make_region_partition

logger = logging.getLogger(__name__)

WORKERS_ENV = "SPECTROBUST_WORKERS"
MANIFEST_NAME = "manifest.json"
_ARCHES = {"cnn": ResidualCNNClassifier, "vit": VisionTransformerClassifier}

SUBCOMMAND_STAGES = {
    "train": ("models",),
    "attack": ("models", "attack"),
    "sweep": ("models", "sweep", "baselines"),
    "analyze": ("models", "analyze"),
    "report": ("report",),
    "run": ("models", "attack", "sweep", "baselines", "report", "analyze"),
}


class StageError(SpectrobustError, RuntimeError):
    pass


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise StageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


# ------------------------------------------------------------------ dataset


def ingest_dataset(cfg) -> Dataset:
    """Synthetic gratings or an IDX image/label pair, with pixels in [0, 1]."""
    if cfg.source == "synthetic":
        return make_synthetic(
            SyntheticSpec(
                n_classes=cfg.n_classes,
                per_class=cfg.per_class,
                size=cfg.size,
                channels=cfg.channels,
                seed=cfg.seed,
                noise=cfg.noise,
                contrast=tuple(cfg.contrast),
            )
        )
    return load_idx_dataset(cfg.images_path, cfg.labels_path, cfg.n_classes)


# ------------------------------------------------------------------ manifest


@dataclass
class StageRecord:
    name: str
    status: str = "pending"
    error: Optional[str] = None
    seconds: float = 0.0


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    command: str
    started: str
    finished: Optional[str] = None
    stages: List[StageRecord] = field(default_factory=list)
    files: Dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.stages)

    def stage(self, name: str) -> StageRecord:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        data = dict(data)
        data["stages"] = [StageRecord(**s) for s in data.get("stages", [])]
        return cls(**data)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_manifest(out_dir) -> RunManifest:
    return RunManifest.from_dict(json.loads((Path(out_dir) / MANIFEST_NAME).read_text()))


def verify_manifest(out_dir) -> List[str]:
    """Files whose current checksum differs from the manifest (or that vanished)."""
    out_dir = Path(out_dir)
    manifest = load_manifest(out_dir)
    bad = []
    for rel, digest in sorted(manifest.files.items()):
        path = out_dir / rel
        if not path.exists() or sha256_file(path) != digest:
            bad.append(rel)
    return bad


# ----------------------------------------------------------------- CSV utils


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "" if value is None else str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def attack_name(components: Sequence[str]) -> str:
    order = ("mag", "phase", "pixel")
    return "+".join(c for c in order if c in components)


def band_name(band: Optional[Sequence[int]]) -> str:
    return "full" if not band else "regions-" + "-".join(str(int(r)) for r in sorted(band))


# ------------------------------------------------------------------- context


RESULT_HEADER = (
    "model", "attack", "band", "lam", "image_index", "label", "original_class", "adversarial_class",
    "success", "iterations", "l2", "cross_entropy", "psnr", "ms_ssim", "mdsi",
)  # fmt: skip


class Context:
    """Mutable state shared by the stages of one invocation."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.workers = worker_count()
        self.written: List[Path] = []
        self._data: Optional[Tuple[Dataset, Dataset, Dataset]] = None
        self.models: Dict[str, NetClassifier] = {}
        self._targets: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._attacks: Dict[tuple, List[AttackResult]] = {}

    def emit(self, rel: str, header, rows) -> Path:
        path = write_csv(self.out / rel, header, rows)
        self.written.append(path)
        return path

    @property
    def data(self) -> Tuple[Dataset, Dataset, Dataset]:
        if self._data is None:
            full = ingest_dataset(self.cfg.dataset)
            self._data = split(full, tuple(self.cfg.dataset.split), seed=self.cfg.seed)
        return self._data

    def checkpoint_path(self, entry) -> Path:
        if entry.checkpoint:
            return Path(entry.checkpoint)
        return self.out / "checkpoints" / f"{entry.name}.ckpt"

    def targets(self, name: str, n: Optional[int] = None):
        """First n correctly classified test images: (images, labels, test indices)."""
        if name not in self._targets:
            test = self.data[2]
            model = self.models[name]
            correct = np.flatnonzero(model.predict(test.images) == test.labels)
            self._targets[name] = (test.images[correct], test.labels[correct], correct)
        X, y, idx = self._targets[name]
        n = self.cfg.attack.n_images if n is None else n
        return X[:n], y[:n], idx[:n]

    def attack_config(self, components, band, lam: float) -> AttackConfig:
        a = self.cfg.attack
        mask = None
        if band:
            h, w = self.data[0].images.shape[-2:]
            mask = make_band_mask(make_region_partition(h, w), band)
        return AttackConfig(
            lam=float(lam),
            components=tuple(components),
            band=mask,
            learning_rate=a.learning_rate,
            weight_decay=a.weight_decay,
            max_iter=a.max_iter,
            patience=a.patience,
            seed=self.cfg.seed,
            distance=a.distance,
            dtype=a.dtype,
        )

    def attack(self, name: str, components, band, lam: float, n: Optional[int] = None) -> List[AttackResult]:
        X, y, _ = self.targets(name, n)
        key = (name, attack_name(components), band_name(band), float(lam), len(X))
        if key not in self._attacks:
            cfg = self.attack_config(components, band, lam)
            t = time.time()
            self._attacks[key] = run_attacks(
                X, y, self.models[name], cfg, chunk_size=self.cfg.attack.chunk_size, workers=self.workers
            )
            logger.info("attack %s %s %s lam=%g: %d images in %.1fs", *key[:4], len(X), time.time() - t)
        return self._attacks[key]

    def result_rows(self, name, components, band, lam, results) -> List[tuple]:
        _, _, idx = self.targets(name, len(results))
        return [
            (
                name, attack_name(components), band_name(band), float(lam), int(idx[i]), r.label,
                r.original_class, r.adversarial_class, r.success, r.iterations, r.l2, r.cross_entropy,
                r.quality.psnr, r.quality.ms_ssim, r.quality.mdsi,
            )  # fmt: skip
            for i, r in enumerate(results)
        ]


# -------------------------------------------------------------------- stages


def stage_models(ctx: Context, force_train: bool = False) -> None:
    cfg = ctx.cfg
    train_set, val_set, test_set = ctx.data
    history_rows, summary_rows = [], []
    for k, entry in enumerate(cfg.models):
        path = ctx.checkpoint_path(entry)
        if path.exists() and not force_train:
            model = load_checkpoint(path)
            if model.arch != entry.arch:
                raise CorruptCheckpoint(f"checkpoint {path} holds a {model.arch} model, config says {entry.arch}")
        elif not cfg.training.enabled:
            raise StageError(f"checkpoint {path} for model {entry.name!r} is missing and training is disabled")
        else:
            params = {"random_state": cfg.seed + k, **entry.params}
            if "widths" in params:
                params["widths"] = tuple(params["widths"])
            model = _ARCHES[entry.arch](**params)
            tcfg = TrainConfig(
                epochs=model.epochs if cfg.training.epochs is None else cfg.training.epochs,
                batch_size=cfg.training.batch_size,
                learning_rate=cfg.training.learning_rate,
                label_smoothing=cfg.training.label_smoothing,
                seed=cfg.seed + k,
            )
            model.initialize(train_set.images.shape[1:], train_set.n_classes)
            _, hist = train(model, train_set, tcfg, validation=val_set)
            for e, (loss, tr_acc, va_acc) in enumerate(zip(hist.train_loss, hist.train_accuracy, hist.val_accuracy)):
                history_rows.append((entry.name, e + 1, loss, tr_acc, va_acc))
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path)
            if ctx.out.resolve() in path.resolve().parents:
                ctx.written.append(path)
        ctx.models[entry.name] = model
        summary_rows.append(
            (
                entry.name,
                entry.arch,
                model.n_parameters,
                float(model.score(val_set.images, val_set.labels)),
                float(model.score(test_set.images, test_set.labels)),
            )
        )
    if history_rows:
        ctx.emit("training_history.csv", ("model", "epoch", "train_loss", "train_accuracy", "val_accuracy"), history_rows)
    ctx.emit("models.csv", ("model", "arch", "n_parameters", "val_accuracy", "test_accuracy"), summary_rows)


def _grid(ctx: Context):
    for entry in ctx.cfg.models:
        for comps in ctx.cfg.attack.components:
            for band in ctx.cfg.attack.bands:
                yield entry.name, comps, band


def stage_attack(ctx: Context) -> None:
    lam = ctx.cfg.attack.lam
    rows = []
    for name, comps, band in _grid(ctx):
        rows += ctx.result_rows(name, comps, band, lam, ctx.attack(name, comps, band, lam))
    ctx.emit("attack_results.csv", RESULT_HEADER, _canonical(rows))


def _canonical(rows: List[tuple]) -> List[tuple]:
    # model, attack, band, image index, lambda
    return sorted(rows, key=lambda r: (r[0], r[1], r[2], r[4], r[3]))


def stage_sweep(ctx: Context) -> None:
    rows = []
    for name, comps, band in _grid(ctx):
        for lam in ctx.cfg.attack.lambdas:
            rows += ctx.result_rows(name, comps, band, lam, ctx.attack(name, comps, band, lam))
    ctx.emit("sweep_results.csv", RESULT_HEADER, _canonical(rows))


def stage_baselines(ctx: Context) -> None:
    b = ctx.cfg.baselines
    if not b.enabled:
        return
    header = ("model", "attack", "eps", "image_index", "label", "adversarial_class", "success", "linf", "psnr", "ms_ssim", "mdsi")
    rows = []
    for entry in ctx.cfg.models:
        X, y, idx = ctx.targets(entry.name)
        model = ctx.models[entry.name]
        for method in ("fgsm", "pgd"):
            for eps in b.epsilons:
                if method == "fgsm":
                    adv = fgsm(X, y, model, eps)
                else:
                    adv = pgd(X, y, model, eps, iters=b.pgd_iters)
                pred = model.predict(adv) if len(adv) else np.zeros(0, dtype=int)
                qs = quality_scores(X, adv) if len(adv) else []
                for i in range(len(X)):
                    rows.append(
                        (
                            entry.name, method, float(eps), int(idx[i]), int(y[i]), int(pred[i]),
                            bool(pred[i] != y[i]), float(np.abs(adv[i] - X[i]).max()),
                            qs[i].psnr, qs[i].ms_ssim, qs[i].mdsi,
                        )  # fmt: skip
                    )
    ctx.emit("baseline_results.csv", header, sorted(rows, key=lambda r: (r[0], r[1], r[3], r[2])))


def _spearman(lams: List[float], values: List[float]) -> float:
    if len(lams) < 2 or len(set(values)) < 2:
        return float("nan")
    return float(spearmanr(lams, values).statistic)


def sweep_statistics(rows: List[Dict[str, str]]) -> Tuple[List[tuple], List[tuple]]:
    """Per-lambda summaries and the lambda/PSNR Spearman correlation per attack."""
    groups: Dict[tuple, Dict[float, List[Dict[str, str]]]] = {}
    for r in rows:
        groups.setdefault((r["model"], r["attack"], r["band"]), {}).setdefault(float(r["lam"]), []).append(r)
    summary, spearman = [], []
    for key in sorted(groups):
        lams, psnrs = [], []
        for lam in sorted(groups[key]):
            rs = groups[key][lam]
            ok = [r for r in rs if r["success"] == "true"]
            means = [float(np.mean([float(r[a]) for r in ok])) if ok else float("nan") for a in AXES]
            summary.append(key + (lam, len(rs), len(ok) / len(rs)) + tuple(means))
            if ok:
                lams.append(lam)
                psnrs.append(means[0])
        spearman.append(key + (_spearman(lams, psnrs), len(lams)))
    return summary, spearman


def stage_report(ctx: Context) -> None:
    bins = ctx.cfg.curves.bins
    curve_rows = []
    sweep_path = ctx.out / "sweep_results.csv"
    if not sweep_path.exists():
        raise StageError(f"{sweep_path} not found; run the sweep first")
    sweep = read_csv(sweep_path)
    groups: Dict[tuple, List[Tuple[dict, bool]]] = {}
    for r in sweep:
        groups.setdefault((r["model"], r["attack"], r["band"]), []).append(r)
    base_path = ctx.out / "baseline_results.csv"
    if base_path.exists():
        for r in read_csv(base_path):
            groups.setdefault((r["model"], r["attack"], "full"), []).append(r)
    for key in sorted(groups):
        for axis in ctx.cfg.metrics:
            pairs = [(float(r[axis]), r["success"] == "true") for r in groups[key]]
            curve = build_asr_curve(pairs, axis, bins)
            for b in curve.bins:
                curve_rows.append(key + (axis, b.low, b.high, b.mean_quality, b.asr, b.count))
    ctx.emit(
        "asr_curves.csv",
        ("model", "attack", "band", "axis", "low", "high", "mean_quality", "asr", "count"),
        curve_rows,
    )
    summary, spearman = sweep_statistics(sweep)
    ctx.emit(
        "sweep_summary.csv",
        ("model", "attack", "band", "lam", "n", "asr", "mean_psnr_success", "mean_ms_ssim_success", "mean_mdsi_success"),
        summary,
    )
    ctx.emit("sweep_spearman.csv", ("model", "attack", "band", "spearman_lam_psnr", "n_lambdas_with_success"), spearman)


def stage_analyze(ctx: Context) -> None:
    an = ctx.cfg.analysis
    single_comps = [c for c in ctx.cfg.attack.components]
    if an.region_histograms:
        rows = []
        for name, comps, band in _grid(ctx):
            res = ctx.attack(name, comps, band, ctx.cfg.attack.lam)
            if not res:
                continue
            X, _, _ = ctx.targets(name, len(res))
            try:
                hist = region_distortion_histogram(X, np.stack([r.image for r in res]))
            except ZeroDistortion:
                continue
            for k, frac in enumerate(hist.fractions):
                rows.append((name, attack_name(comps), band_name(band), ctx.cfg.attack.lam, k + 1, frac, hist.n_images))
        ctx.emit("region_histograms.csv", ("model", "attack", "band", "lam", "region", "fraction", "n_images"), rows)

    if an.linearity.enabled:
        rows = []
        for entry in ctx.cfg.models:
            for comps in single_comps:
                res = ctx.attack(entry.name, comps, None, an.linearity.lam, an.linearity.n_images)
                X, _, idx = ctx.targets(entry.name, len(res))
                for i, r in enumerate(res):
                    try:
                        prof = linearity_theta(ctx.models[entry.name], X[i], r.image - X[i])
                    except DegenerateShift:
                        continue
                    rows += [(entry.name, attack_name(comps), int(idx[i]), e, t) for e, t in zip(prof.eps, prof.theta)]
        ctx.emit("linearity.csv", ("model", "attack", "image_index", "eps", "theta"), rows)

    if an.reduction.enabled:
        rows = []
        test = ctx.data[2]
        X, y = test.images[: an.reduction.n_images], test.labels[: an.reduction.n_images]
        for entry in ctx.cfg.models:
            for target in ("magnitude", "phase"):
                sw = spectrum_reduction_sweep(ctx.models[entry.name], X, y, target)
                rows += [(entry.name, target, r, a) for r, a in zip(sw.r, sw.accuracy)]
        ctx.emit("reduction.csv", ("model", "target", "r", "accuracy"), rows)

    if an.recombination.enabled:
        rows = []
        test = ctx.data[2]
        X, y = test.images[: an.recombination.n_images], test.labels[: an.recombination.n_images]
        for entry in ctx.cfg.models:
            tab = recombination_study(ctx.models[entry.name], X, y, an.recombination.max_pairs, seed=ctx.cfg.seed)
            rows.append((entry.name, tab.phase, tab.magnitude, tab.other, tab.n_pairs))
        ctx.emit("recombination.csv", ("model", "phase_class_pct", "magnitude_class_pct", "other_pct", "n_pairs"), rows)

    if an.attention.enabled:
        rows, hist_rows = [], []
        edges = np.linspace(-1.0, 1.0, an.attention.bins + 1)
        for entry in ctx.cfg.models:
            model = ctx.models[entry.name]
            if entry.arch != "vit":
                continue
            for comps in single_comps:
                res = ctx.attack(entry.name, comps, None, an.attention.lam, an.attention.n_images)
                if not res:
                    continue
                X, _, idx = ctx.targets(entry.name, len(res))
                clean = attention_rollout(model.attention_trace(X))
                adv = attention_rollout(model.attention_trace(np.stack([r.image for r in res])))
                corr = []
                for i in range(len(res)):
                    try:
                        c = attention_correlation(clean[i], adv[i])
                    except ConstantMap:
                        continue
                    corr.append(c)
                    rows.append((entry.name, attack_name(comps), int(idx[i]), c))
                counts, _ = np.histogram(corr, bins=edges)
                hist_rows += [
                    (entry.name, attack_name(comps), edges[k], edges[k + 1], int(counts[k])) for k in range(len(counts))
                ]
        ctx.emit("attention_correlation.csv", ("model", "attack", "image_index", "pearson_r"), rows)
        ctx.emit("attention_histogram.csv", ("model", "attack", "low", "high", "count"), hist_rows)


STAGES: Dict[str, Callable[[Context], None]] = {
    "models": stage_models,
    "attack": stage_attack,
    "sweep": stage_sweep,
    "baselines": stage_baselines,
    "report": stage_report,
    "analyze": stage_analyze,
}


def run_experiment(
    cfg: ExperimentConfig,
    command: str = "run",
    out_dir=None,
) -> RunManifest:
    """Run the stages of ``command`` and write ``manifest.json`` into the output directory.

    A failing stage is recorded with its error and every later stage is
    marked skipped; the function itself does not raise.
    """
    if command not in SUBCOMMAND_STAGES:
        raise ValueError(f"unknown command {command!r}")
    out = Path(out_dir or cfg.output_dir)
    ctx = Context(cfg, out)
    manifest = RunManifest(
        config_hash=cfg.config_hash(),
        tool_version=__version__,
        command=command,
        started=datetime.now(timezone.utc).isoformat(),
    )
    dump_config(cfg, out / "config.yaml", include_output_dir=False)
    ctx.written.append(out / "config.yaml")
    failed = False
    for name in SUBCOMMAND_STAGES[command]:
        rec = StageRecord(name)
        manifest.stages.append(rec)
        if failed:
            rec.status = "skipped"
            continue
        t = time.time()
        try:
            if name == "models":
                stage_models(ctx, force_train=(command == "train"))
            else:
                STAGES[name](ctx)
            rec.status = "ok"
        except Exception as exc:  # recorded in the manifest, surfaced via exit code
            rec.status = "error"
            rec.error = f"{type(exc).__name__}: {exc}"
            logger.error("stage %s failed: %s", name, rec.error)
            logger.debug("%s", traceback.format_exc())
            failed = True
        rec.seconds = round(time.time() - t, 3)
    manifest.finished = datetime.now(timezone.utc).isoformat()
    root = out.resolve()
    for path in ctx.written:
        manifest.files[path.resolve().relative_to(root).as_posix()] = sha256_file(path)
    manifest.write(out)
    return manifest
