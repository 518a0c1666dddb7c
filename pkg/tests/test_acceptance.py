"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The desk-scale runs go through :func:`spectrobust.experiment.run_experiment`,
the same path as the CLI. Environment knobs:

``SPECTROBUST_ACCEPTANCE_OUT``        keep run directories here (default: pytest tmp)
``SPECTROBUST_ACCEPTANCE_MSE_IMAGES`` images per model for the mean-squared-error
                                      sweep used by the informational line of
                                      criterion 7 and by criterion 12 (default 40)

Run standalone with ``python3 tests/test_acceptance.py`` or through pytest.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, LinearSoftmax
from spectrobust import analysis as An
from spectrobust import attacks as A
from spectrobust import diffcore as F
from spectrobust import metrics as M
from spectrobust import spectral as S
from spectrobust.config import config_from_dict, load_config
from spectrobust.data import split
from spectrobust.diffcore import finite_difference_check
from spectrobust.errors import NonSymmetricSpectrum
from spectrobust.experiment import ingest_dataset, load_manifest, read_csv, run_experiment
from spectrobust.models import build_cnn, build_vit, load_checkpoint
from test_diffcore import UNARY_CASES

ROOT = Path(__file__).resolve().parents[1]
SINGLE = [["mag"], ["phase"], ["pixel"]]
COMBOS = [["mag", "phase"], ["mag", "phase", "pixel"]]
MSE_IMAGES = int(os.environ.get("SPECTROBUST_ACCEPTANCE_MSE_IMAGES", "40"))


def report(criterion, ok, detail, gate=True):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    if gate:
        assert ok, line


@pytest.fixture(scope="session")
def out_root(tmp_path_factory):
    env = os.environ.get("SPECTROBUST_ACCEPTANCE_OUT")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def desk_run(out_root):
    """Default configuration: both models trained, 200 images, 8-value lambda sweep."""
    out = out_root / "desk_l2"
    cfg = config_from_dict({"output_dir": str(out)})
    t = time.time()
    manifest = run_experiment(cfg, "sweep", out)
    report_manifest = run_experiment(cfg, "report", out)
    assert manifest.ok and report_manifest.ok, [s.error for s in manifest.stages + report_manifest.stages if s.error]
    return out, time.time() - t, manifest


@pytest.fixture(scope="session")
def trained(desk_run):
    out = desk_run[0]
    return {name: load_checkpoint(out / "checkpoints" / f"{name}.ckpt") for name in ("cnn", "vit")}


@pytest.fixture(scope="session")
def test_split():
    cfg = load_config(None)
    return split(ingest_dataset(cfg.dataset), tuple(cfg.dataset.split), seed=cfg.seed)[2]


@pytest.fixture(scope="session")
def mse_run(desk_run, out_root):
    """Same models and grid with the mean-squared-error distance, plus the combined attacks."""
    src = desk_run[0] / "checkpoints"
    out = out_root / "desk_mse"
    cfg = config_from_dict(
        {
            "output_dir": str(out),
            "models": [
                {"name": "cnn", "arch": "cnn", "checkpoint": str(src / "cnn.ckpt")},
                {"name": "vit", "arch": "vit", "checkpoint": str(src / "vit.ckpt")},
            ],
            "attack": {"n_images": MSE_IMAGES, "distance": "mse", "components": SINGLE + COMBOS},
        }
    )
    assert run_experiment(cfg, "sweep", out).ok
    assert run_experiment(cfg, "report", out).ok
    return out


def _lambda1_and_spearman(out):
    summary = read_csv(out / "sweep_summary.csv")
    spear = read_csv(out / "sweep_spearman.csv")
    asr = {(r["model"], r["attack"]): float(r["asr"]) for r in summary if float(r["lam"]) == 1.0}
    rho = {(r["model"], r["attack"]): (float(r["spearman_lam_psnr"]), int(r["n_lambdas_with_success"])) for r in spear}
    return asr, rho


# ------------------------------------------------------------------ criteria


def test_criterion_01_spectral_correctness():
    r = np.random.default_rng(1)
    t = time.time()
    worst = np.zeros(3)
    for _ in range(100):
        x = r.uniform(size=(3, 32, 32))
        re, im = S.dft2(x)
        br, bi = S.idft2(re, im)
        worst[0] = max(worst[0], np.max(np.abs(br - x)), np.max(np.abs(bi)))
        energy = np.sum(x * x)
        worst[1] = max(worst[1], abs(np.sum(re * re + im * im) / x[0].size - energy) / energy)
        worst[2] = max(worst[2], np.max(np.abs(S.recompose(S.decompose(x)) - x)))
    secs = time.time() - t
    ok = bool(np.all(worst < 1e-9) and secs < 10)
    report(" 1", ok, f"roundtrip {worst[0]:.1e}, Parseval rel {worst[1]:.1e}, polar roundtrip {worst[2]:.1e}, {secs:.2f}s")


def _op_gradient_errors():
    errs = {name: finite_difference_check(fn, x) for name, fn, x in UNARY_CASES}
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.5, 1.5, (3, 4)), rng.uniform(0.5, 1.5, (1, 4))
    w = rng.normal(size=(3, 4))
    for op in ("add", "sub", "mul", "div", "atan2"):
        fn = getattr(F, op)
        errs[op] = max(
            finite_difference_check(lambda t: F.sum(fn(t, b) * w), a),
            finite_difference_check(lambda t: F.sum(fn(a, t) * w), b),
        )
    x = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    wc = rng.normal(size=(2, 4, 3, 3))
    errs["conv2d"] = max(
        finite_difference_check(lambda t: F.sum(F.conv2d(t, k, stride=2, padding=1) * wc), x),
        finite_difference_check(lambda t: F.sum(F.conv2d(x, t, stride=2, padding=1) * wc), k),
    )
    lw, lb = rng.normal(size=(5, 4)), rng.normal(size=5)
    xl = rng.normal(size=(2, 4))
    errs["linear"] = max(
        finite_difference_check(lambda t: F.sum(F.linear(t, lw, lb) ** 2), xl),
        finite_difference_check(lambda t: F.sum(F.linear(xl, t, lb) ** 2), lw),
    )
    g = rng.normal(size=4)
    errs["layer_norm"] = finite_difference_check(lambda t: F.sum(F.layer_norm(t, g, g) * xl), xl)
    errs["concat"] = finite_difference_check(lambda t: F.sum(F.concat([t, xl], axis=0) ** 2), xl)
    return errs


def test_criterion_02_differentiability():
    ops = _op_gradient_errors()
    shape = (3, 16, 16)
    small = {
        "cnn": build_cnn(shape, 4, widths=(4, 6, 8), activation="gelu", random_state=1),
        "vit": build_vit(shape, 4, patch_size=4, embed_dim=8, depth=2, n_heads=2, random_state=2),
    }
    X = np.random.default_rng(3).uniform(0.3, 0.7, (2,) + shape)
    y = np.array([1, 2])
    start = A.PerturbationSet.identity(2, shape)
    r = np.random.default_rng(4)
    values = {"mag": r.normal(0, 0.02, start.mag_offset.shape), "phase": r.normal(0, 0.02, start.phase.shape),
              "pixel": r.normal(0, 0.002, start.pixel.shape)}  # fmt: skip
    keys = {"mag": "mag_offset", "phase": "phase", "pixel": "pixel"}
    loss_errs = {}
    for name, model in small.items():
        for comp, v in values.items():
            fn = lambda t: A.attack_loss(A.perturb_tensor(X, (comp,), **{keys[comp]: t}), X, y, model, 2.0)
            idx = r.choice(v.size, 30, replace=False)
            loss_errs[f"{name}/{comp}"] = finite_difference_check(fn, v, indices=idx)
    # input gradients of the full-size default architectures
    full = {"cnn": build_cnn(random_state=5), "vit": build_vit(random_state=6)}
    x32 = np.random.default_rng(7).uniform(size=(2, 3, 32, 32))
    input_errs = {}
    for name, model in full.items():
        fn = lambda t: F.cross_entropy(model.forward_tensor(t), np.array([0, 3]))
        input_errs[name] = finite_difference_check(fn, x32, indices=r.choice(x32.size, 40, replace=False))
    worst = max(max(ops.values()), max(loss_errs.values()), max(input_errs.values()))
    ok = worst < 1e-4
    report(
        " 2",
        ok,
        f"{len(ops)} op checks max {max(ops.values()):.1e}; attack_loss per component max {max(loss_errs.values()):.1e}; "
        f"model input gradients cnn {input_errs['cnn']:.1e} vit {input_errs['vit']:.1e}",
    )


def test_criterion_03_identity():
    X = np.random.default_rng(8).uniform(size=(10, 3, 32, 32))
    p = A.PerturbationSet.identity(10, (3, 32, 32))
    post, pre = A.apply_perturbations(X, p, return_unclipped=True)
    dev = float(np.max(np.abs(pre - X)))
    exact = bool(np.array_equal(post, X))
    # the float32 attack path starts from the same fixed point
    res = A.optimize_attack(X[:2], np.zeros(2, dtype=int), LinearSoftmax((3, 32, 32), 4),
                            A.AttackConfig(components=A.COMPONENTS, max_iter=0))  # fmt: skip
    exact32 = all(np.array_equal(r.image, x) for r, x in zip(res, X[:2]))
    report(" 3", dev < 1e-9 and exact and exact32, f"pre-clip max deviation {dev:.1e}; post-clip exact: {exact and exact32}")


def test_criterion_04_symmetry():
    r = np.random.default_rng(9)
    worst, raised, draws = 0.0, 0, 0
    hp = S.half_plane(32, 32)
    for _ in range(10):
        X = r.uniform(size=(100, 3, 32, 32))
        p = A.PerturbationSet.identity(100, (3, 32, 32))
        p.mag_offset[:] = r.uniform(-1.0, 1.0, p.mag_offset.shape)
        p.phase[:] = r.uniform(-np.pi, np.pi, p.phase.shape)
        p.pixel[:] = r.normal(0, 0.05, p.pixel.shape)
        spec = S.decompose(X)
        mag = np.clip(spec.magnitude * S.symmetrize(1.0 + p.mag_offset, "magnitude", (32, 32)), 0, None)
        ph = spec.phase + S.symmetrize(p.phase, "phase", (32, 32))
        out_r, out_i = S.idft2(mag * np.cos(ph), mag * np.sin(ph))
        peak = np.max(np.abs(out_r), axis=(1, 2, 3))
        worst = max(worst, float(np.max(np.max(np.abs(out_i), axis=(1, 2, 3)) / peak)))
        try:
            A.apply_perturbations(X, p, strict=True)
        except NonSymmetricSpectrum:
            raised += 1
        draws += len(X)
    assert hp.size == 514
    report(" 4", worst < 1e-6 and raised == 0, f"{draws} draws, max |imag|/peak {worst:.1e}, NonSymmetricSpectrum raised {raised}x")


def test_criterion_05_linearity_oracle():
    r = np.random.default_rng(10)
    Wm = r.normal(size=(16, 3 * 32 * 32))
    b = r.normal(size=16)
    feat = lambda x: x.reshape(len(x), -1) @ Wm.T + b
    X = r.uniform(size=(3, 32, 32))
    prof = An.linearity_theta(feat, X, r.normal(0, 0.05, X.shape))
    worst = float(np.max(prof.theta))
    report(" 5", len(prof.theta) == 101 and worst < 1e-6, f"max theta over {len(prof.theta)} grid points {worst:.1e}")


def test_criterion_06_metric_oracles():
    X = np.random.default_rng(11).uniform(0.1, 0.9, (3, 32, 32))
    p = M.psnr(X, X + 1 / 255)
    noise = np.random.default_rng(12).normal(size=X.shape)
    seq = [M.psnr(X, X + a * noise) for a in (0.01, 0.02, 0.04, 0.08, 0.16)]
    ok = abs(p - 48.13) <= 0.01 and M.ms_ssim(X, X) == 1.0 and M.mdsi(X, X) == 0.0 and bool(np.all(np.diff(seq) < 0))
    report(" 6", ok, f"PSNR(1/255) {p:.4f} dB; ms_ssim(X,X) {M.ms_ssim(X, X)}; mdsi(X,X) {M.mdsi(X, X)}; PSNR sequence {np.round(seq, 2).tolist()}")


def test_criterion_07_end_to_end(desk_run):
    out, secs, manifest = desk_run
    models = {r["model"]: r for r in read_csv(out / "models.csv")}
    train_secs = manifest.stage("models").seconds
    acc = {k: float(v["val_accuracy"]) for k, v in models.items()}
    asr, rho = _lambda1_and_spearman(out)
    acc_ok = all(a >= 0.95 for a in acc.values()) and train_secs <= 600
    asr_ok = all(asr[(m, a)] >= 0.90 for m in ("cnn", "vit") for a in ("mag", "phase", "pixel"))
    rho_ok = all(rho[(m, a)][0] > 0 for m in ("cnn", "vit") for a in ("mag", "phase", "pixel"))
    detail = (
        f"val acc cnn {acc['cnn']:.3f} vit {acc['vit']:.3f} (training {train_secs:.0f}s for both); "
        "ASR@lam=1 " + " ".join(f"{m}/{a} {asr[(m, a)]:.2f}" for m in ("cnn", "vit") for a in ("mag", "phase", "pixel"))
        + "; Spearman " + " ".join(f"{m}/{a} {rho[(m, a)][0]:.2f}" for m in ("cnn", "vit") for a in ("mag", "phase", "pixel"))
        + " [distance=l2]"
    )
    report(" 7", acc_ok and asr_ok and rho_ok, detail)


def test_criterion_07_mse_information(mse_run):
    asr, rho = _lambda1_and_spearman(mse_run)
    pairs = [(m, a) for m in ("cnn", "vit") for a in ("mag", "phase", "pixel")]
    ok = all(asr[k] >= 0.90 for k in pairs) and all(rho[k][0] > 0 for k in pairs)
    detail = (
        f"informational, {MSE_IMAGES} images: ASR@lam=1 " + " ".join(f"{m}/{a} {asr[(m, a)]:.2f}" for m, a in pairs)
        + "; Spearman " + " ".join(f"{m}/{a} {rho[(m, a)][0]:.2f}(n={rho[(m, a)][1]})" for m, a in pairs)
    )
    report(" 7 [distance=mse]", ok, detail, gate=False)


def test_criterion_08_band_restriction(trained, test_split):
    part = S.make_region_partition(32, 32)
    outside_max, pre_leak, post_leak, inside_moved, checked = 0.0, 0.0, 0.0, True, 0
    for name, model in trained.items():
        correct = np.flatnonzero(model.predict(test_split.images) == test_split.labels)[:10]
        X, y = test_split.images[correct], test_split.labels[correct]
        for regions in ([1, 2], [10]):
            band = S.make_band_mask(part, regions)
            for comp in ("mag", "phase"):
                cfg = A.AttackConfig(lam=1.0, components=(comp,), band=band, max_iter=60, distance="mse")
                for r, x in zip(A.optimize_attack(X, y, model, cfg), X):
                    re, im = A.perturbation_spectrum(x[None], r.perturbation)
                    outside_max = max(outside_max, float(np.max(np.abs(re[..., ~band.mask]))), float(np.max(np.abs(im[..., ~band.mask]))))
                    inside_moved &= bool(np.any(re[..., band.mask] != 0) or np.any(im[..., band.mask] != 0))
                    dr, di = S.dft2(r.unclipped - x)
                    mag = np.hypot(dr, di)
                    pre_leak = max(pre_leak, float(np.max(mag[..., ~band.mask]) / max(np.max(mag), 1e-300)))
                    pr, pi = S.dft2(r.image - x)
                    pm = np.hypot(pr, pi)
                    post_leak = max(post_leak, float(pm[..., ~band.mask].sum() / max(pm.sum(), 1e-300)))
                    checked += 1
    ok = outside_max == 0.0 and pre_leak < 1e-9 and inside_moved
    report(
        " 8",
        ok,
        f"{checked} attacks; S'-S outside band max {outside_max:.1e} (exact zeros); pre-clip measured leak {pre_leak:.1e} of peak; "
        f"in-band change present: {inside_moved}; post-clip out-of-band energy share up to {post_leak:.2%} (clipping, not gated)",
    )


def test_criterion_09_region_histograms(trained, test_split):
    counts = S.make_region_partition(32, 32).counts
    X = np.full((1, 3, 32, 32), 0.5)
    imp = X.copy()
    imp[0, 2, 7, 19] += 0.25
    impulse_err = float(np.max(np.abs(An.region_distortion_histogram(X, imp).fractions - counts / counts.sum())))
    model = trained["cnn"]
    correct = np.flatnonzero(model.predict(test_split.images) == test_split.labels)[:20]
    Xs, ys = test_split.images[correct], test_split.labels[correct]
    sums = []
    for comp in ("mag", "phase", "pixel"):
        res = A.optimize_attack(Xs, ys, model, A.AttackConfig(lam=1.0, components=(comp,), max_iter=30, distance="mse"))
        h = An.region_distortion_histogram(Xs, np.stack([r.image for r in res]))
        sums.append(abs(h.fractions.sum() - 1.0))
    ok = impulse_err < 1e-6 and max(sums) < 1e-9
    report(" 9", ok, f"impulse vs bin-count fractions {impulse_err:.1e}; |sum - 1| max {max(sums):.1e} over mag/phase/pixel attacks")


def test_criterion_10_recombination(trained, test_split):
    X = test_split.images[:100]
    y = test_split.labels[:100]
    ident = float(np.max(np.abs(An.recombine(X, X) - X)))
    totals = {}
    for name, model in trained.items():
        t = An.recombination_study(model, X, y)
        totals[name] = (t.phase + t.magnitude + t.other, t)
    ok = ident < 1e-6 and all(abs(s - 100.0) < 1e-6 for s, _ in totals.values())
    detail = f"recombine(X,X) deviation {ident:.1e}; " + "; ".join(
        f"{n}: phase {t.phase:.1f}% magnitude {t.magnitude:.1f}% other {t.other:.1f}% (sum {s:.6f}, {t.n_pairs} pairs)"
        for n, (s, t) in totals.items()
    )
    report("10", ok, detail)


def test_criterion_11_determinism(out_root, monkeypatch):
    cfg = load_config(ROOT / "configs" / "tiny.yaml")
    hashes = []
    for k, workers in enumerate(("1", "1", "3")):
        monkeypatch.setenv("SPECTROBUST_WORKERS", workers)
        out = out_root / f"tiny_{k}"
        m = run_experiment(cfg, "run", out)
        assert m.ok
        hashes.append(load_manifest(out).files)
    same = hashes[0] == hashes[1]
    same_workers = hashes[0] == hashes[2]
    report("11", same and same_workers, f"{len(hashes[0])} output files; identical across reruns: {same}; with 3 workers: {same_workers}")


def psnr_at_half_asr(rows, strength_key):
    """PSNR at which ASR crosses 50% along a strength sweep (higher = more efficient attack).

    Each strength setting (lambda or eps) gives one point (mean PSNR over all
    attacked images, ASR); the crossing is linearly interpolated. NaN when
    ASR never crosses 50%.
    """
    groups = {}
    for r in rows:
        groups.setdefault(float(r[strength_key]), []).append(r)
    pts = sorted(
        (float(np.mean([float(r["psnr"]) for r in g])), float(np.mean([r["success"] == "true" for r in g])))
        for g in groups.values()
    )
    for (q0, a0), (q1, a1) in zip(pts, pts[1:]):
        if a0 >= 0.5 > a1:
            return q0 + (a0 - 0.5) / (a0 - a1) * (q1 - q0)
    return float("nan")


def test_criterion_12_exploratory_curves(mse_run):
    curves = read_csv(mse_run / "asr_curves.csv")
    sweep = read_csv(mse_run / "sweep_results.csv")
    base = read_csv(mse_run / "baseline_results.csv")
    attacks = ["mag", "phase", "pixel", "mag+phase", "mag+phase+pixel"]
    lines, best = [], {}
    for model in ("cnn", "vit"):
        score = {a: psnr_at_half_asr([r for r in sweep if r["model"] == model and r["attack"] == a], "lam") for a in attacks}
        for a in ("fgsm", "pgd"):
            score[a] = psnr_at_half_asr([r for r in base if r["model"] == model and r["attack"] == a], "eps")
        singles = sorted(SINGLE, key=lambda c: -np.nan_to_num(score[c[0]], nan=-np.inf))
        best[model] = singles[0][0]
        lines.append(
            f"{model}: PSNR at 50% ASR " + ", ".join(f"{a} {v:.2f}dB" if v == v else f"{a} <50%" for a, v in score.items())
            + " (single-component order " + " > ".join(c[0] for c in singles) + ")"
        )
    emitted = all(
        any(c["model"] == m and c["attack"] == a and c["axis"] == ax for c in curves)
        for m in ("cnn", "vit") for a in attacks + ["fgsm", "pgd"] for ax in ("psnr", "ms_ssim", "mdsi")
    )  # fmt: skip
    transfers = best["vit"] == "phase" and best["cnn"] == "pixel"
    for line in lines:
        print(line)
    report(
        "12",
        emitted,
        f"ASR curves on 3 quality axes in {mse_run / 'asr_curves.csv'}; "
        f"strongest single component cnn={best['cnn']} vit={best['vit']}; "
        f"reference ordering (phase for the transformer, pixel for the CNN) reproduced: {transfers} "
        "(reported, not gated) | " + " | ".join(lines),
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
