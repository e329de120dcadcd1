"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary and on
stdout with ``-s``) before asserting. Criteria 9 and 10 need a CAMUS-layout
directory named by the ``ECHOSR_CAMUS_ROOT`` environment variable and are
skipped otherwise. Criterion 10 is a soft check: an unmet ordering emits a
warning instead of failing.

Run only these checks with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import math
import os
import time
import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from echosr.classifier import ClassifierConfig, ResNetClassifier, fit_arrays, predict_arrays
from echosr.cli import main as cli_main
from echosr.dataset import (CELLS, Phase, Quality, Task, View, build_classification_split, load_camus,
                            stratify_by_quality, synthesize_dataset)
from echosr.degradation import bicubic_downsample, bicubic_upsample, make_sr_pairs
from echosr.experiments import Mode, load_results, run_cross_quality
from echosr.metrics import absolute_improvement, accuracy, psnr, relative_improvement, ssim
from echosr.sr_models import (Generator, SRConfig, enhance_subset, evaluate_pairs, train_srgan,
                              train_srresnet)

from acceptance_log import record
from gradcheck import check_gradients, pass_fraction

CAMUS_ROOT = os.environ.get("ECHOSR_CAMUS_ROOT")

# desk-scale SR setup shared by criteria 3 and 4
SR_CFG = dict(n_res_blocks=4, base_channels=32, patch_size=16, batch=8, lr_rate=1e-4, seed=0)


def verdict(ok):
    return "PASS" if ok else "FAIL"


@pytest.fixture(scope="module")
def sr_pairs():
    ds = synthesize_dataset(24, image_size=64, seed=5)
    return make_sr_pairs(list(ds.filter(quality=Quality.GOOD))[:8], 4)


def loop_mse(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += (a[i, j] - b[i, j]) ** 2
    return total / a.size


def test_criterion_01_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    a = rng.integers(0, 246, size=(64, 64)).astype(float)
    b = a + 10.0
    value = psnr(a, b, data_range=255.0)
    oracle = 10 * math.log10(255.0**2 / loop_mse(a, b))
    x = rng.random((48, 48))
    ident = ssim(x, x.copy())
    const = ssim(np.full((32, 32), 0.25), np.full((32, 32), 0.75))
    elapsed = time.perf_counter() - start
    ok = (abs(value - 28.13) <= 0.01 and abs(value - oracle) <= 1e-9
          and abs(ident - 1.0) <= 1e-9 and abs(const - 0.6) <= 1e-3 and elapsed < 1.0)
    record(1, verdict(ok), f"psnr={value:.4f} dB (loop oracle {oracle:.4f}), ssim(a,a)={ident:.12f}, "
                           f"ssim(0.25,0.75)={const:.5f}, {elapsed:.3f} s")
    assert ok


def test_criterion_02_degradation_contract():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    shape_ok, checked = True, 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(8, 160, size=2))
        for r in (2, 4):
            pair = make_sr_pairs([rng.random((h, w))], r)[0]
            shape_ok &= pair.hr.shape == (r * pair.lr.shape[0], r * pair.lr.shape[1])
            shape_ok &= pair.lr.shape == (h // r, w // r)
            checked += 1
    worst = 0.0
    for value in (0.0, 0.37, 0.5, 1.0):
        for r in (2, 4):
            img = np.full((48, 40), value)
            down = bicubic_downsample(img, r)
            up = bicubic_upsample(down, r)
            worst = max(worst, np.abs(down - value).max(), np.abs(up - value).max())
    elapsed = time.perf_counter() - start
    ok = shape_ok and worst <= 1e-6 and elapsed < 5.0
    record(2, verdict(ok), f"{checked} size/scale cases shape-exact={shape_ok}, constant max error {worst:.2e}, "
                           f"{elapsed:.2f} s")
    assert ok


@pytest.mark.slow
def test_criterion_03_srresnet_overfit(sr_pairs):
    start = time.perf_counter()
    params, hist = train_srresnet(sr_pairs, SRConfig(**SR_CFG, steps=2000))
    elapsed = time.perf_counter() - start
    sr = evaluate_pairs(params, sr_pairs)["psnr"]
    bicubic = float(np.mean([psnr(bicubic_upsample(p.lr, 4), p.hr) for p in sr_pairs]))
    ok = sr >= bicubic + 1.0 and elapsed < 600
    record(3, verdict(ok), f"train-set PSNR {sr:.2f} dB vs bicubic {bicubic:.2f} dB "
                           f"(+{sr - bicubic:.2f} dB, need +1), {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_04_srgan_stability(sr_pairs):
    cfg = SRConfig(**SR_CFG, steps=400)
    params, hist = train_srgan(sr_pairs, cfg)
    finite = all(math.isfinite(v) for k in ("generator_loss", "discriminator_loss") for v in hist.series(k))
    poor = synthesize_dataset(6, image_size=64, seed=9).filter(quality=Quality.POOR)
    enhanced = enhance_subset(poor, params)
    shapes = all(e.image.shape == (4 * f.image.shape[0], 4 * f.image.shape[1]) for f, e in zip(poor, enhanced))
    shapes &= len(enhanced) == len(poor) > 0

    zero = SRConfig(**SR_CFG, steps=400, perceptual_weight=0.0, adversarial_weight=0.0)
    _, h_gan = train_srgan(sr_pairs, zero)
    _, h_res = train_srresnet(sr_pairs, zero)
    gan_loss, res_loss = h_gan.final_eval["pixel_loss"], h_res.final_eval["pixel_loss"]
    gap = abs(gan_loss - res_loss) / res_loss
    ok = finite and shapes and gap <= 0.10
    record(4, verdict(ok), f"finite losses={finite}, enhanced shapes ok={shapes}, zero-weight pixel loss "
                           f"{gan_loss:.6f} vs SRResNet {res_loss:.6f} (gap {100 * gap:.2f}%)")
    assert ok


def test_criterion_05_gradient_checks():
    start = time.perf_counter()
    torch.manual_seed(0)
    gen = Generator(n_res_blocks=1, channels=4, scale=4).double()
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    target = torch.rand(1, 1, 32, 32, dtype=torch.float64)
    gen_frac = pass_fraction(check_gradients(gen, lambda: F.mse_loss(gen(x), target), n_per_tensor=16))

    cls = ResNetClassifier(widths=(4, 8), stage_blocks=(1, 1)).double().train()
    n_params = sum(p.numel() for p in cls.parameters())
    xc = torch.rand(4, 1, 16, 16, dtype=torch.float64)
    yc = torch.tensor([0, 1, 0, 1])
    cls_frac = pass_fraction(check_gradients(cls, lambda: F.cross_entropy(cls(xc), yc), n_per_tensor=16))
    elapsed = time.perf_counter() - start
    ok = gen_frac >= 0.99 and cls_frac >= 0.99 and n_params <= 5000 and elapsed < 120
    record(5, verdict(ok), f"generator {100 * gen_frac:.1f}% / classifier ({n_params} params) "
                           f"{100 * cls_frac:.1f}% of sampled entries within 1e-3, {elapsed:.1f} s")
    assert ok


def separable_task(seed, n_per_class=20, size=64):
    rng = np.random.default_rng(100 + seed)
    images, labels = [], []
    for label, level in ((0, 0.3), (1, 0.7)):
        for _ in range(n_per_class):
            images.append(np.clip(level + 0.1 * rng.standard_normal((size, size)), 0, 1))
            labels.append(label)
    return images, np.array(labels)


def threshold_accuracy(images, labels):
    means = np.array([img.mean() for img in images])
    best = 0.0
    for t in np.unique(means):
        best = max(best, np.mean((means >= t) == labels), np.mean((means < t) == labels))
    return best


def test_criterion_06_classifier_sanity():
    rows, ok = [], True
    for seed in range(3):
        images, labels = separable_task(seed)
        oracle = threshold_accuracy(images, labels)
        rng = np.random.default_rng(seed)
        train_idx, test_idx = [], []
        for c in (0, 1):
            idx = rng.permutation(np.flatnonzero(labels == c))
            n_train = math.floor(0.8 * len(idx))
            train_idx += idx[:n_train].tolist()
            test_idx += idx[n_train:].tolist()
        params, _ = fit_arrays([images[i] for i in train_idx], labels[train_idx], ClassifierConfig(seed=seed))
        tr = accuracy(predict_arrays(params, [images[i] for i in train_idx])[0].tolist(), labels[train_idx].tolist())
        te = accuracy(predict_arrays(params, [images[i] for i in test_idx])[0].tolist(), labels[test_idx].tolist())
        ok &= oracle == 1.0 and tr >= 0.95 and te >= 0.90
        rows.append(f"seed {seed}: oracle {oracle:.2f} train {tr:.3f} test {te:.3f}")
    record(6, verdict(ok), "; ".join(rows))
    assert ok


def pipeline(workdir):
    """ingest -> pairs -> SRResNet -> warm-started SRGAN -> every experiment, via the CLI.

    Paths are relative to ``workdir`` so two runs embed identical inputs.
    """
    sr = ["--steps", "20", "--blocks", "1", "--channels", "8", "--patch-size", "8", "--batch", "4"]
    steps = [
        ["ingest", "--synthetic", "patients=12", "seed=4", "--out", "b"],
        ["make-pairs", "--dataset", "b/dataset.npz", "--out", "b"],
        ["train-sr", "--arch", "srresnet", "--pairs", "b/pairs.npz", "--seed", "3", "--out", "b"] + sr,
        ["train-sr", "--arch", "srgan", "--pairs", "b/pairs.npz", "--seed", "3",
         "--init", "b/srresnet.npz", "--out", "b"] + sr,
        ["experiment", "--task", "both", "--mode", "all", "--dataset", "b/dataset.npz",
         "--srresnet", "b/srresnet.npz", "--srgan", "b/srgan.npz",
         "--width", "0.125", "--input-size", "32", "--epochs", "3", "--seeds", "0", "1", "--out", "exp"],
    ]
    workdir.mkdir()
    with pytest.MonkeyPatch.context() as mp:
        mp.chdir(workdir)
        for argv in steps:
            assert cli_main(argv) == 0, argv
    return workdir / "exp"


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("ECHOSR_CACHE", str(base / "cache"))
        return pipeline(base / "run1"), pipeline(base / "run2")


def test_criterion_07_pipeline_determinism(pipeline_runs):
    a, b = pipeline_runs
    same_results = (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    for m in (ma, mb):
        m.pop("timestamp")
    same_manifest = ma == mb
    same_csv = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("matrix_view.csv", "matrix_phase.csv"))
    ok = same_results and same_manifest and same_csv
    record(7, verdict(ok), f"results.json identical={same_results}, matrix CSVs identical={same_csv}, "
                           f"manifest identical except timestamp={same_manifest}")
    assert ok


def test_criterion_08_experiment_shape(pipeline_runs):
    matrices, records, _ = load_results(pipeline_runs[0] / "results.json")
    grid_ok = sorted(m.task.value for m in matrices) == ["phase", "view"] and all(
        len(m.cells) == 9 and all(0 <= v <= 1 for v in m.cells.values()) for m in matrices)
    expected = {
        (task, mode, model, q)
        for task in Task for model in ("SRGAN", "SRRESNET")
        for mode, tiers in ((Mode.TRAIN_ON_SR, list(Quality)), (Mode.TEST_ON_SR, [Quality.GOOD, Quality.MEDIUM]))
        for q in tiers
    }
    got = [(r.task, r.mode, r.sr_model, r.counterpart_quality) for r in records]
    records_ok = sorted(got) == sorted(expected) and len(got) == len(set(got))
    raw = json.loads((pipeline_runs[0] / "results.json").read_text())["records"]
    deltas_ok = all(
        r["rel_delta_pct"] == relative_improvement(r["baseline_acc"], r["enhanced_acc"])
        and r["abs_delta_pp"] == absolute_improvement(r["baseline_acc"], r["enhanced_acc"])
        for r in raw
    )
    ok = grid_ok and records_ok and deltas_ok
    record(8, verdict(ok), f"{len(matrices)} full 3x3 matrices={grid_ok}, {len(got)} records, one per "
                           f"(task, mode, model, tier)={records_ok}, deltas exact={deltas_ok}")
    assert ok


# published tier counts: per view, the same count for ED and for ES
TABLE_COUNTS = {
    View.CH2: {Quality.GOOD: 217, Quality.MEDIUM: 214, Quality.POOR: 69},
    View.CH4: {Quality.GOOD: 288, Quality.MEDIUM: 165, Quality.POOR: 47},
}


@pytest.fixture(scope="module")
def camus():
    if not CAMUS_ROOT:
        return None
    return load_camus(CAMUS_ROOT)


def test_criterion_09_camus_counts(camus):
    if camus is None:
        record(9, "SKIP", "set ECHOSR_CAMUS_ROOT to a CAMUS-layout directory to run")
        pytest.skip("CAMUS dataset not available")
    counts = camus.cell_counts()
    cells_ok = all(counts[(v, p, q)] == TABLE_COUNTS[v][q] for v, p in CELLS for q in Quality)
    sizes = {q: len(s) for q, s in stratify_by_quality(camus).items()}
    totals_ok = sizes == {Quality.GOOD: 1010, Quality.MEDIUM: 758, Quality.POOR: 232} and len(camus) == 2000
    view = build_classification_split(camus, Task.VIEW, Quality.POOR, seed=0)
    phase = build_classification_split(camus, Task.PHASE, Quality.POOR, seed=0)
    vp, pp = view.train + view.test, phase.train + phase.test
    pools = (sum(f.view is View.CH2 for f in vp), sum(f.view is View.CH4 for f in vp),
             sum(f.phase is Phase.ED for f in pp), sum(f.phase is Phase.ES for f in pp))
    ok = cells_ok and totals_ok and pools == (138, 94, 116, 116)
    record(9, verdict(ok), f"cells match={cells_ok}, tiers {[sizes[q] for q in Quality]}, "
                           f"poor pools 2CH/4CH/ED/ES={pools}")
    assert ok


def test_criterion_10_camus_direction(camus):
    if camus is None:
        record(10, "SKIP", "set ECHOSR_CAMUS_ROOT to a CAMUS-layout directory to run")
        pytest.skip("CAMUS dataset not available")
    matrix = run_cross_quality(camus, Task.VIEW, ClassifierConfig.reference(), seeds=(0, 1, 2))
    good = matrix.cells[(Quality.GOOD, Quality.GOOD)]
    poor = matrix.cells[(Quality.GOOD, Quality.POOR)]
    detail = f"train Good: test Good {good:.3f} vs test Poor {poor:.3f} over 3 seeds"
    if good > poor:
        record(10, "PASS", detail)
    else:
        record(10, "SOFT-WARN", detail + " (ordering not reproduced)")
        warnings.warn(f"degradation ordering not reproduced: {detail}")
