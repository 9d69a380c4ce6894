"""Acceptance criteria, each printing one PASS/FAIL line.

The training criteria share one protocol: the default U-Net (levels 3,
base 8, crop 128) trained for 20 epochs on frames 0..499 of the seed-42
synthetic generator and evaluated on frames 500..599. Images pass through
the 8-bit graymap encoding exactly as they would on disk.
"""

import time

import numpy as np
import pytest

import oracles
from aerodepth import io as aio
from aerodepth import numcore as nc
from aerodepth.datagen import AnnotatedFrame, BBox, SynthParams, bin_distance, build_mask, synth_dataset
from aerodepth.losses import LossWeights, berhu_loss, l1_loss
from aerodepth.metrics import AGGREGATORS, SlidingWindowCfg, aggregate, kernel_means, sliding_window_class, \
    threshold_accuracy
from aerodepth.optim import WarmupSchedule, warmup_multiplier
from aerodepth.pipeline import TrainConfig, evaluate_samples, predict, prepare_sample, train
from aerodepth.verify import run_suite

SEED = 42
N_TRAIN = 500
N_TEST = 100
EPOCHS = 20


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def split():
    samples = []
    for img, frame in synth_dataset(SynthParams(seed=SEED), N_TRAIN + N_TEST):
        img = aio.decode_pnm(aio.encode_pnm(img))[0]
        samples.append(prepare_sample(img, frame, crop=128))
    return samples[:N_TRAIN], samples[N_TRAIN:]


def run_protocol(split, losses):
    train_set, test_set = split
    cfg = TrainConfig(epochs=EPOCHS, seed=SEED, weights=LossWeights.from_selection(losses))
    start = time.perf_counter()
    model, state, _ = train(train_set, cfg)
    report = evaluate_samples(predict(model, [s.image for s in test_set]), test_set)
    seconds = time.perf_counter() - start
    return {"ckpt": aio.encode_checkpoint(model, state), "csv": aio.report_csv(report), "report": report,
            "seconds": seconds}


@pytest.fixture(scope="module")
def runs(split):
    cache = {}

    def get(*losses):
        if losses not in cache:
            cache[losses] = run_protocol(split, list(losses))
        return cache[losses]
    return get


def reference_bin(d):
    if d < 200:
        return 0
    if d < 400:
        return 1
    if d < 600:
        return 2
    if d <= 700:
        return 3
    return 4


def test_criterion_1_gradient_correctness(verdict):
    start = time.perf_counter()
    results = run_suite(seed=1, trials=10)
    seconds = time.perf_counter() - start
    failed = [r.line() for r in results if not r.passed]
    prim = max(r.error for r in results if not r.name.startswith("unet"))
    unet = next(r.error for r in results if r.name.startswith("unet"))
    ok = not failed and seconds < 60
    verdict(1, "gradient correctness", ok,
            f"{len(results)} checks, worst primitive/loss {prim:.2e} (< 1e-3), unet {unet:.2e} (< 1e-2), "
            f"{seconds:.1f}s (< 60s)" + (f"; failed: {failed}" if failed else ""))
    assert not failed
    assert seconds < 60


def test_criterion_2_bin_fidelity(verdict):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(10_000):
        d = float(rng.choice([rng.uniform(0, 1000), rng.choice([200.0, 400.0, 600.0, 700.0])]))
        x, y = (int(v) for v in rng.integers(-8, 40, size=2))
        w, h = (int(v) for v in rng.integers(1, 24, size=2))
        box = BBox(x, y, w, h)
        clipped = box.clip(40, 40)
        if clipped is None:
            x, y = 0, 0
            box = clipped = BBox(0, 0, w, h)
        mask = build_mask(AnnotatedFrame("", box, d, "p"), (40, 40))
        inner = mask[clipped.y : clipped.y + clipped.h, clipped.x : clipped.x + clipped.w]
        expected = reference_bin(d)
        mismatches += int(bin_distance(d) != expected or not np.all(inner == expected))
    boundaries = (bin_distance(200.0), bin_distance(400.0), bin_distance(700.0))
    ok = mismatches == 0 and boundaries == (1, 2, 3)
    verdict(2, "distance binning", ok, f"{mismatches} mismatches in 10000 pairs; 200/400/700 -> {boundaries}")
    assert mismatches == 0
    assert boundaries == (1, 2, 3)


def test_criterion_3_warmup_fidelity(verdict):
    problems = []
    for length in (50, 500, 1001, 5000):
        sched = WarmupSchedule.for_dataset(length)
        warm = sched.warmup_iters
        assert warm == min(1000, length - 1)
        if warmup_multiplier(0, sched) != 0.001:
            problems.append(f"length {length}: m(0) = {warmup_multiplier(0, sched)}")
        if warmup_multiplier(warm, sched) != 1.0:
            problems.append(f"length {length}: m(warmup) = {warmup_multiplier(warm, sched)}")
        xs = np.sort(np.random.default_rng(length).integers(0, warm + 1, size=1000))
        vals = [warmup_multiplier(int(x), sched) for x in xs]
        if any(b < a for a, b in zip(vals, vals[1:])):
            problems.append(f"length {length}: not monotone")
    ok = not problems
    verdict(3, "warmup schedule", ok, "m(0)=0.001, m(warmup)=1.0, monotone on 1000 points" if ok else problems)
    assert not problems


def test_criterion_4_metric_oracles(verdict):
    rng = np.random.default_rng(4)
    mismatches = []
    order_ok = True
    for case in range(20):
        pred = rng.uniform(-0.5, 4.5, size=(32, 32))
        gt = rng.integers(0, 5, size=(32, 32)).astype(float)
        x, y = (int(v) for v in rng.integers(0, 31, size=2))
        box = BBox(x, y, int(rng.integers(1, 33 - x)), int(rng.integers(1, 33 - y)))
        for agg in AGGREGATORS:
            got = sliding_window_class(pred, box, SlidingWindowCfg(aggregator=agg))
            want = oracles.window_class(pred.tolist(), (box.x, box.y, box.w, box.h), agg)
            if got != want:
                mismatches.append((case, agg, got, want))
        if threshold_accuracy(pred, gt) != oracles.threshold_accuracy(pred.tolist(), gt.tolist()):
            mismatches.append((case, "threshold"))
        means = kernel_means(pred, box)
        order_ok &= aggregate(means, "min") <= aggregate(means, "mean") <= aggregate(means, "max")
    ok = not mismatches and order_ok
    verdict(4, "metric oracle equivalence", ok,
            f"20 cases x (3 aggregators + threshold): {len(mismatches)} mismatches; min<=mean<=max {order_ok}")
    assert not mismatches
    assert order_ok


def test_criterion_5_training_proxy(runs, verdict):
    res = runs("edge", "ssim", "l1", "berhu")
    r = res["report"]
    checks = {"sw_min >= 0.80": r.sw_acc_min >= 0.80, "thr_acc >= 0.85": r.threshold_acc >= 0.85,
              "mae <= 0.30": r.mae <= 0.30, "runtime <= 20 min": res["seconds"] <= 1200}
    ok = all(checks.values())
    verdict(5, "synthetic training proxy", ok,
            f"sw_min {r.sw_acc_min:.3f}, thr_acc {r.threshold_acc:.3f}, mae {r.mae:.4f} "
            f"(sw_mean {r.sw_acc_mean:.3f}, sw_max {r.sw_acc_max:.3f}, rmse {r.rmse:.4f}), "
            f"{res['seconds'] / 60:.1f} min; " + ", ".join(f"{k}: {v}" for k, v in checks.items()))
    assert all(checks.values()), checks


def test_criterion_6_loss_ablation(runs, verdict):
    edge = runs("edge")["report"].mae
    berhu = runs("berhu")["report"].mae
    ok = edge >= 2 * berhu
    verdict(6, "edge-only vs berhu-only", ok, f"edge MAE {edge:.4f}, berhu MAE {berhu:.4f}, ratio {edge / berhu:.2f} "
                                              f"(>= 2)")
    assert ok


def test_criterion_7_berhu_dominates_l1(verdict):
    rng = np.random.default_rng(7)
    below = 0
    unequal = 0
    with nc.float64_mode():
        for _ in range(1000):
            a = rng.uniform(0, 4, size=(1, 1, 16, 16))
            b = rng.uniform(0, 4, size=(1, 1, 16, 16))
            bh = float(berhu_loss(a, b).data)
            l1 = float(l1_loss(a, b).data)
            below += bh < l1
            # c_frac 1 puts every |e| at or under c: the linear branch only
            unequal += float(berhu_loss(a, b, 1.0).data) != l1
    ok = below == 0 and unequal == 0
    verdict(7, "berhu >= l1", ok, f"{below} of 1000 pairs below L1; {unequal} unequal in the all-linear case")
    assert below == 0
    assert unequal == 0


def test_criterion_8_determinism(runs, split, verdict):
    first = runs("edge", "ssim", "l1", "berhu")
    second = run_protocol(split, ["edge", "ssim", "l1", "berhu"])
    same_ckpt = first["ckpt"] == second["ckpt"]
    same_csv = first["csv"] == second["csv"]
    ok = same_ckpt and same_csv
    verdict(8, "determinism", ok, f"checkpoint bytes identical {same_ckpt} ({len(first['ckpt'])} bytes), "
                                  f"metric CSV identical {same_csv}")
    assert same_ckpt
    assert same_csv
