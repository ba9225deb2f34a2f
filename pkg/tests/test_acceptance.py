"""Acceptance criteria 1-10; each test prints one PASS/FAIL line with its measurements.

Run on its own with ``pytest -s tests/test_acceptance.py`` (the lines are also
printed without ``-s``).  Criterion 8 trains the toy networks and takes roughly
15-25 minutes on one core.
"""

import json
import os
import time

import numpy as np
import pytest

from oracles import contiguous_ms_minimum, otsu_brute, potts_brute
from tumorseg import autograd as ag
from tumorseg import harness as h
from tumorseg.cli import main
from tumorseg.cms import Histogram, minimize_cartoon, ms_energy, otsu_index, otsu_threshold
from tumorseg.gradsuite import TOLERANCE, format_table, run_suite
from tumorseg.graphcut import potts_energy
from tumorseg.octnet import (OctConvWeights, OctPair, ToyUNetConfig, build_toy_unet, octave_conv3d,
                             split_channels)
from tumorseg.postprocess import PotentialField, densify, minimize_partition, partition_problem
from tumorseg.swa import LrSchedule, SwaState, lr_at, swa_update
from tumorseg.volume import COMPLETE, region_dice


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_criterion_01_otsu(report):
    rng = np.random.default_rng(1)
    dt = 0.0   # implementation time only; the exact-fraction oracle is slow by design
    mismatches = 0
    for _ in range(200):
        nb = int(rng.integers(2, 257))
        counts = rng.integers(0, 50, nb) * (rng.random(nb) < rng.uniform(0.1, 1.0))
        if np.count_nonzero(counts) < 2:
            counts[[0, -1]] = 1
        hist = Histogram(counts, 0.0, 1.0)
        t = time.perf_counter()
        got, thr = otsu_index(hist), otsu_threshold(hist)
        dt += time.perf_counter() - t
        k = otsu_brute(counts)
        mismatches += got != k or thr != hist.edge(k)
    report(1, mismatches == 0 and dt < 5,
           f"Otsu vs brute force: {mismatches}/200 mismatches; {dt:.2f} s (< 5 s)")


def test_criterion_02_mumford_shah_1d(report):
    rng = np.random.default_rng(2)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        sig = rng.random(n)
        nu = float(rng.uniform(0.01, 1.0))
        best = contiguous_ms_minimum(sig, nu)
        worst = max(worst, ms_energy(minimize_cartoon(sig, nu=nu), nu=nu) / best - 1)
    exact_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        n_cuts = int(rng.integers(0, min(3, n - 1) + 1))
        cuts = np.sort(rng.choice(np.arange(1, n), size=n_cuts, replace=False))
        sig = np.concatenate([np.full(len(s), v) for s, v in
                              zip(np.split(np.arange(n), cuts), rng.random(n_cuts + 1))])
        nu = float(rng.uniform(1e-3, 1e-2))
        got = ms_energy(minimize_cartoon(sig, nu=nu), nu=nu)
        exact_err = max(exact_err, abs(got - contiguous_ms_minimum(sig, nu)))
    dt = time.perf_counter() - t
    ok = worst <= 0.05 and exact_err <= 1e-12 and dt < 30
    report(2, ok, f"random: worst excess {100 * worst:.2f}% (<= 5%); piecewise-constant: "
                  f"max |dE| {exact_err:.1e} (exact); {dt:.1f} s (< 30 s)")


def test_criterion_03_partition(report):
    rng = np.random.default_rng(3)
    t = time.perf_counter()
    worst = 0.0
    shapes = [(2, 2, 1), (3, 2, 1), (2, 2, 2), (3, 3, 1), (5, 2, 1), (3, 2, 2)]
    for i in range(100):
        shape = shapes[i % len(shapes)]
        h_ = rng.random((2,) + shape) * 2
        field = PotentialField((1, 2), h_, np.exp(-h_))
        g = rng.random(shape)
        lam = float(rng.uniform(0.1, 2))
        mask = np.ones(shape, bool)
        out = minimize_partition(field, g, (1.0, 1.0, 1.0), lam, mask)
        unary, edges, w = partition_problem(field, g, (1.0, 1.0, 1.0), lam, mask)
        e = potts_energy((out.ravel() == 2).astype(int), unary, edges, w)
        worst = max(worst, abs(e - potts_brute(unary, edges, w)))
    rises = 0
    for _ in range(30):
        labels = (0, 1, 2, 4)[:int(rng.integers(3, 5))]
        shape = (4, 4, 3)
        h_ = rng.random((len(labels),) + shape)
        hist = []
        minimize_partition(PotentialField(labels, h_, np.exp(-h_)), rng.random(shape),
                           lambda_perim=float(rng.uniform(0.1, 1)), history=hist)
        rises += any(b > a + 1e-12 for a, b in zip(hist, hist[1:]))
    dt = time.perf_counter() - t
    ok = worst <= 1e-9 and rises == 0 and dt < 60
    report(3, ok, f"2-label max |E - E*| {worst:.1e} over 100 instances (exact); "
                  f"multi-label energy increases in {rises}/30 runs; {dt:.1f} s (< 60 s)")


def test_criterion_04_gradients(report):
    t = time.perf_counter()
    errors = run_suite(0)
    dt = time.perf_counter() - t
    worst = max(errors, key=errors.get)
    ok = all(v < TOLERANCE for v in errors.values()) and dt < 120
    print(format_table(errors))
    report(4, ok, f"{len(errors)} checks, worst {worst} at {errors[worst]:.2e} (< {TOLERANCE:g}); "
                  f"{dt:.1f} s (< 120 s)")


def test_criterion_05_octave(report):
    rng = np.random.default_rng(5)
    w = OctConvWeights.init(8, 8, 0.0, 0.0, 3, rng)
    w.b_hh.data = rng.standard_normal(8)
    x = ag.Tensor(rng.standard_normal((1, 8, 8, 8, 8)))
    diff = np.abs(octave_conv3d(OctPair(x, None, 0.0), w, 0.0).high.data
                  - ag.conv3d(x, w.w_hh, w.b_hh).data).max()
    pair = OctPair.from_tensor(ag.Tensor(rng.standard_normal((1, 8, 16, 16, 16))), 0.75)
    split_ok = (split_channels(8, 0.75) == (2, 6) and pair.high.shape == (1, 2, 16, 16, 16)
                and pair.low.shape == (1, 6, 8, 8, 8))
    a0 = build_toy_unet(ToyUNetConfig(alpha=0.0))
    a75 = build_toy_unet(ToyUNetConfig(alpha=0.75))
    mac0, mac75 = a0.mac_count((32, 32, 32)), a75.mac_count((32, 32, 32))
    p0, p75 = a0.n_parameters(), a75.n_parameters()
    ok = diff <= 1e-12 and split_ok and mac75 < mac0 and p75 < p0
    report(5, ok, f"alpha=0 vs conv max diff {diff:.1e} (<= 1e-12); split 2/6 {split_ok}; "
                  f"MACs {mac75:,} < {mac0:,} {mac75 < mac0}; params {p75:,} < {p0:,} {p75 < p0}")


def test_criterion_06_swa(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(1, 17):
        snaps = rng.standard_normal((k, 200))
        state = SwaState(np.zeros(200), 0)
        for w in snaps:
            state = swa_update(state, w)
        worst = max(worst, np.abs(state.w_swa - snaps.mean(axis=0)).max())
    sched = LrSchedule(total_epochs=80, lr0=0.01, cycle_len=10, lr_cycle_max=0.005)
    phase1 = all(lr_at(sched, e) == 0.01 for e in range(60))
    starts = all(lr_at(sched, e) == 0.005 for e in range(60, 80, 10))
    ok = worst <= 1e-12 and phase1 and starts
    report(6, ok, f"k<=16 running mean vs mean max diff {worst:.1e} (<= 1e-12); lr0 over phase 1 "
                  f"{phase1}; cycle max at cycle starts {starts}")


def test_criterion_07_cms_phantoms(report):
    t = time.perf_counter()
    cases = h.make_cases(8, (64, 64, 64), 0)
    rep = h.robustness_sweep({"cms": h.CmsMethod()}, cases, [0.0, 0.02], [0])
    dt = time.perf_counter() - t
    clean, noisy = rep.mean("cms", 0.0), rep.mean("cms", 0.02)
    ok = clean >= 0.85 and clean - noisy <= 0.05 and dt < 600
    report(7, ok, f"Complete Dice clean {clean:.3f} (>= 0.85), drop at sigma=0.02 "
                  f"{clean - noisy:+.3f} (<= 0.05); 8 phantoms at 64^3; {dt:.0f} s (< 600 s)")


# toy-scale trend experiment; the same values are the train-toy / evaluate defaults
TREND_TRAIN = dict(n=8, seed0=100, dims=(32, 32, 32), epochs=40)
TREND_EVAL = dict(n=8, seed0=0, seeds=(0, 1))


def test_criterion_08_trend(report, tmp_path):
    t = time.perf_counter()
    train = h.make_cases(TREND_TRAIN["n"], TREND_TRAIN["dims"], TREND_TRAIN["seed0"], "train")
    family = h.train_toy_family(train, epochs=TREND_TRAIN["epochs"], ckpt_dir=str(tmp_path))
    t_train = time.perf_counter() - t
    val = h.make_cases(TREND_EVAL["n"], TREND_TRAIN["dims"], TREND_EVAL["seed0"])
    rep = h.robustness_sweep(family.methods, val, [0.0, 0.02, 0.04], TREND_EVAL["seeds"])
    result = h.trend_check(rep)
    print(rep.table())
    print(result.summary())
    dt = time.perf_counter() - t
    cells = ", ".join(f"{m} {rep.mean(m, 0.02):.3f}/{rep.mean(m, 0.04):.3f}" for m in h.TREND_ORDER)
    ok = result.passed and t_train <= 3600
    detail = (f"Complete Dice at sigma 0.02/0.04: {cells}; training {t_train / 60:.1f} min "
              f"(<= 60), total {dt / 60:.1f} min")
    if not result.passed:
        detail += "; violations: " + "; ".join(result.violations)
    report(8, ok, detail)


def test_criterion_09_densify_repair(report):
    improved, total, gains = 0, 0, []
    for seed in range(10):
        case = h.make_cases(1, (32, 32, 32), seed)[0]
        rng = np.random.default_rng(1000 + seed)
        noisy = case.labels.copy()
        flip = case.mask & (rng.random(noisy.shape) < 0.3)
        noisy[flip] = rng.choice([0, 1, 2, 4], flip.sum())
        before = region_dice(noisy, case.labels, COMPLETE)
        after = region_dice(densify(noisy, case.volume, mask=case.mask), case.labels, COMPLETE)
        improved += after > before
        total += 1
        gains.append(after - before)
    ok = improved >= 0.9 * total
    report(9, ok, f"Complete Dice strictly improved in {improved}/{total} corrupted phantoms "
                  f"(>= 90%); mean gain {np.mean(gains):+.3f}")


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_criterion_10_manifest_rerun(report, tmp_path):
    d = str(tmp_path)
    p = lambda name: os.path.join(d, name)
    runs = [
        ["phantom", "--seed", "2", "--dims", "32,32,32", "--out", p("ph.mmv")],
        ["preprocess", "--in", p("ph.mmv"), "--out", p("norm.mmv")],
        ["perturb", "--in", p("norm.mmv"), "--out", p("noisy.mmv"), "--sigma", "0.04", "--seed", "7"],
        ["segment-cms", "--in", p("noisy.mmv"), "--out", p("cms.mml")],
        ["postprocess", "--in", p("cms.mml"), "--vol", p("noisy.mmv"), "--out", p("post.mml")],
        ["train-toy", "--phantoms", "2", "--dims", "16,16,16", "--epochs", "4", "--base-channels", "4",
         "--out", p("ck")],
        ["predict", "--ckpt", p("ck/model"), "--in", p("norm.mmv"), "--out", p("pred.mml")],
        ["train-toy", "--family", "on", "--phantoms", "2", "--dims", "16,16,16", "--epochs", "4",
         "--base-channels", "4", "--out", p("fam")],
        ["evaluate", "--methods", "cms,baseline,octconv,octconv+swa,octconv+swa+post", "--ckpt", p("fam"),
         "--phantoms", "1", "--dims", "24,24,24", "--seeds", "1", "--sigmas", "0,0.02",
         "--trend", "off", "--jobs", "1", "--out", p("eval.json")],
        ["gradcheck", "--out", p("grad.json")],
    ]
    checked, differing = 0, []
    for argv in runs:
        assert main(argv) == 0, argv
        cmd = argv[0]
        out = argv[argv.index("--out") + 1]
        manifest = os.path.join(out, "manifest.json") if cmd == "train-toy" else out + ".manifest.json"
        with open(manifest) as fh:
            outputs = json.load(fh)["outputs"]
        first = {o: _read(o) for o in outputs}
        for o in outputs:
            os.remove(o)
        assert main([cmd, "--config", manifest]) == 0, cmd
        for o in outputs:
            checked += 1
            if _read(o) != first[o]:
                differing.append(o)
    ok = not differing and checked > 0
    report(10, ok, f"{len(runs)} subcommands rerun from their manifests; {checked} output files, "
                   f"{len(differing)} differ" + (f": {differing}" if differing else ""))
