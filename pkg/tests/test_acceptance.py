"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line (printed in the terminal summary) and then
asserts. The end-to-end criteria (7-12) run at the reduced test scale defined in
``ACC`` below; set ``LGDETECT_ACCEPTANCE_CACHE`` to a directory to reuse trained
models between runs (entries are keyed by configuration and source hash).
"""

from __future__ import annotations

import hashlib
import math
import os
import pickle
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import lgdetect
from lgdetect import detectors as det
from lgdetect import experiments as ex
from lgdetect.channel import ChannelConfig, draw_channel, generate_dataset, make_task
from lgdetect.config import RunConfig
from lgdetect.learngene import extract_learngene, train_collective
from lgdetect.neuralnet import count_flops, count_params
from lgdetect.numerics import complex_to_real_channel, realify, rng_stream
from lgdetect.pipeline import run_pipeline
from lgdetect.sdnet import build_sdnet, build_upsampled_sdnet

from conftest import ACCEPTANCE_RESULTS
from test_neuralnet import _fd_check, _toy_spec

pytestmark = pytest.mark.acceptance

# Test-scale settings for the end-to-end criteria. K = 8 collective tasks is kept;
# geometry, data size and epochs are reduced to fit a single CPU core.
ACC = RunConfig(
    master_seed=0,
    nt=4,
    nr=8,
    snr_db=15.0,
    n_collective_tasks=8,
    n_target_tasks=1,
    samples_per_task=3000,
    n_conv_collective=12,
    n_conv_individual=8,
    collective_epochs=10,
    individual_epochs=20,
    batch_size=16,
)
MATRIX_TASKS = [8, 9, 10, 11]  # held out from collective training
TARGET_TASK = 8
SCALABILITY_TASK = 20
SEEDS_7 = [0, 1, 2]
SEEDS_9 = [0, 1, 2, 3, 4]


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# --- caching helpers ------------------------------------------------------------

_SRC_HASH = hashlib.sha256(
    b"".join(p.read_bytes() for p in sorted(Path(lgdetect.__file__).parent.glob("*.py")))
).hexdigest()[:12]
_MEMO: dict = {}


def _cached(key: tuple, fn):
    if key in _MEMO:
        return _MEMO[key]
    root = os.environ.get("LGDETECT_ACCEPTANCE_CACHE")
    path = None
    if root:
        digest = hashlib.sha256(repr((key, ACC.config_hash(), _SRC_HASH)).encode()).hexdigest()[:20]
        path = Path(root) / f"{key[0]}-{digest}.pkl"
        if path.exists():
            _MEMO[key] = pickle.loads(path.read_bytes())
            return _MEMO[key]
    value = fn()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(pickle.dumps(value))
    _MEMO[key] = value
    return value


def task(tid: int, cfg: ChannelConfig | None = None):
    cfg = cfg or ACC.channel()
    return _cached(
        ("task", tid, cfg.nt, cfg.nr),
        lambda: generate_dataset(make_task(ACC.master_seed, tid, cfg), ACC.samples_per_task, ACC.snr_db, cfg, seed=ACC.master_seed),
    )


def collective():
    def build():
        tasks = [task(t) for t in ACC.collective_ids()]
        res = train_collective(tasks, ACC.collective_train(), ACC.n_conv_collective, ACC.tau, ACC.master_seed)
        return res, extract_learngene(res.model, res.gradsig, ACC.policy())

    return _cached(("collective",), build)


def scheme_run(scheme: str, tid: int, seed: int):
    def build():
        needs_unit = scheme.startswith("learngene")
        col, unit = collective() if needs_unit else (None, None)
        return ex.run_scheme(
            ex.Scheme.parse(scheme),
            task(tid),
            ACC.individual_train(),
            seed=seed,
            n_conv=ACC.n_conv_individual,
            unit=unit,
            collective=col.model if col else None,
        )

    return _cached(("scheme", scheme, tid, seed), build)


# --- 1-6: exact and property criteria -------------------------------------------


def test_criterion_01_parameter_accounting():
    t0 = time.perf_counter()
    ind = count_params(build_sdnet(8, 8, 32))["total"]
    col_counts = count_params(build_sdnet(12, 8, 32))
    unit = sum(col_counts[f"conv{i}"] for i in range(9, 13))
    ratio = round(100 * unit / ind, 1)
    elapsed = time.perf_counter() - t0
    ok = (ind, col_counts["total"], unit) == (21_627, 24_027, 2_336) and abs(ratio - 10.8) <= 0.05 and elapsed < 1
    record(1, ok, f"individual {ind}, collective {col_counts['total']}, unit {unit}, ratio {ratio}% ({elapsed:.3f}s)")
    assert ok


def test_criterion_02_flop_accounting():
    t0 = time.perf_counter()
    ind = count_flops(build_sdnet(8, 8, 32))["total"]
    col = count_flops(build_sdnet(12, 8, 32))
    unit = sum(col[f"conv{i}"] for i in range(9, 13))
    elapsed = time.perf_counter() - t0
    ok = (ind, col["total"], unit) == (9_917_440, 14_709_760, 4_792_320) and elapsed < 1
    record(2, ok, f"individual {ind:,}, collective {col['total']:,}, unit {unit:,} ({elapsed:.3f}s)")
    assert ok


def test_criterion_03_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    from lgdetect.neuralnet import Model

    for seed in range(20):
        for mode in ("train", "infer"):
            rng = np.random.default_rng(1000 + seed)
            model = Model.initialize(_toy_spec(), rng)
            for k in model.buffers:
                model.buffers[k] = rng.uniform(0.5, 1.5, model.buffers[k].shape)
            for k in model.params:
                if k.endswith(("gamma", "beta", "bias")):
                    model.params[k] = rng.normal(0.5, 0.3, model.params[k].shape)
            x = rng.standard_normal((3, 5, 3, 1))
            worst = max(worst, _fd_check(model, x, rng.standard_normal((3, 4)), mode, seed=seed))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    record(3, ok, f"max relative FD error {worst:.2e} over 20 seeds x 2 BN modes, all layer kinds ({elapsed:.1f}s)")
    assert ok


def test_criterion_04_classical_detector_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        hc = (rng.standard_normal((6, 3)) + 1j * rng.standard_normal((6, 3))) / math.sqrt(2)
        h = complex_to_real_channel(hc)
        y = rng.standard_normal(12)
        zf = np.linalg.solve(h.T @ h, h.T @ y)
        mm = np.linalg.solve(h.T @ h + 0.1 * np.eye(6), h.T @ y)
        worst = max(worst, np.linalg.norm(det.zf_detect(h, y) - zf) / np.linalg.norm(zf))
        worst = max(worst, np.linalg.norm(det.mmse_detect(h, y, 0.1) - mm) / np.linalg.norm(mm))
    cands = realify(det.qpsk_candidates(2))
    mismatches = 0
    for _ in range(1000):
        hc = (rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))) / math.sqrt(2)
        h = complex_to_real_channel(hc)
        y = h @ cands[rng.integers(16)] + 0.7 * rng.standard_normal(8)
        dists = [float(np.sum((y - h @ c) ** 2)) for c in cands]
        mismatches += not np.array_equal(det.ml_detect(h, y), cands[int(np.argmin(dists))])
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and mismatches == 0 and elapsed < 60
    record(4, ok, f"ZF/MMSE max rel err {worst:.1e}; ML mismatches {mismatches}/1000 ({elapsed:.1f}s)")
    assert ok


def test_criterion_05_zf_noise_analysis():
    t0 = time.perf_counter()
    cfg = ChannelConfig()
    rng = rng_stream(5, "criterion-5")
    cov_err, tot_err = [], []
    for i in range(5):
        h = draw_channel(make_task(5, i, cfg), rng, cfg.nt, cfg.nr)
        stats = det.zf_noise_stats(h, 0.1, 100_000, rng)
        cov_err.append(stats.cov_rel_error)
        tot_err.append(stats.total_rel_error)
    elapsed = time.perf_counter() - t0
    ok = max(cov_err) < 0.05 and max(tot_err) < 0.05 and elapsed < 120
    record(5, ok, f"max cov rel err {max(cov_err):.4f}, max total rel err {max(tot_err):.4f} over 5 channels ({elapsed:.1f}s)")
    assert ok


def test_criterion_06_detector_ordering():
    t0 = time.perf_counter()
    cfg = ChannelConfig(nt=4, nr=8)
    ds = generate_dataset(make_task(6, 0, cfg), 10_000, 25.0, cfg, seed=6)
    h = complex_to_real_channel(ds.h)  # perfect CSI
    y = realify(ds.y)
    n = ds.x.size
    sers = {
        "ml": det.ser(det.hard_decision(det.ml_detect_batch(h, y)), ds.x),
        "mmse": det.ser(det.hard_decision(det.mmse_detect_batch(h, y, ds.sigma2)), ds.x),
        "zf": det.ser(det.hard_decision(det.zf_detect_batch(h, y)), ds.x),
    }
    se = {k: det.ser_stderr(v, n) for k, v in sers.items()}
    ok = sers["ml"] <= sers["mmse"] + se["mmse"] and sers["mmse"] <= sers["zf"] + se["zf"]
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 300
    detail = ", ".join(f"{k} {v:.4f}+-{se[k]:.4f}" for k, v in sers.items())
    record(6, ok, f"{detail} ({elapsed:.1f}s)")
    assert ok


# --- 7-12: end-to-end criteria at test scale ------------------------------------


def _matrices():
    mats = []
    for seed in SEEDS_7:
        models = {t: scheme_run("scratch", t, seed)[1] for t in MATRIX_TASKS}
        mats.append(ex.generalization_matrix(models, [task(t) for t in MATRIX_TASKS]))
    return mats


def test_criterion_07_generalization_matrix():
    mats = _matrices()
    matched = np.median([m.mean_matched for m in mats])
    mismatched = np.median([m.mean_mismatched for m in mats])
    diag = np.median([np.diag(m.ser) for m in mats], axis=0)
    zf = mats[0].zf_ser
    beats = diag < zf
    ok = mismatched > matched and bool(np.all(beats))
    per_task = ", ".join(f"task {t}: {d:.4f} vs ZF {z:.4f}" for t, d, z in zip(MATRIX_TASKS, diag, zf))
    record(7, ok, f"mean mismatched {mismatched:.4f} > matched {matched:.4f}: {mismatched > matched}; {per_task}")
    assert ok


def test_criterion_08_pcc():
    mats = _matrices()
    tasks = [task(t) for t in MATRIX_TASKS]
    median_ser = np.median([m.ser for m in mats], axis=0)
    gm = ex.GenMatrix(MATRIX_TASKS, median_ser, np.full_like(median_ser, np.nan), mats[0].zf_ser)
    for m in range(len(tasks)):
        for n in range(len(tasks)):
            if m != n:
                try:
                    gm.gen_error[m, n] = ex.gen_error_db(median_ser[m, n], median_ser[n, n])
                except ex.DegenerateSER:
                    pass
    dist = ex.distance_matrix(tasks, 200, ACC.master_seed)
    value, used, excluded = ex.pcc_from_matrix(gm, dist)
    ok = value > 0
    record(8, ok, f"pcc(distance, gen error) = {value:.4f} over {used} entries ({excluded} excluded)")
    assert ok


def test_criterion_09_learngene_benefit():
    schemes = ["scratch", "learngene:bottom", "learngene:embedding-top", "learngene:embedding-middle"]
    final = {s: [scheme_run(s, TARGET_TASK, seed)[0].final_val_ser for seed in SEEDS_9] for s in schemes}
    med = {s: float(np.median(v)) for s, v in final.items()}
    bottom = med["learngene:bottom"]
    ok_scratch = bottom <= med["scratch"]
    ok_pos = bottom <= med["learngene:embedding-top"] and bottom <= med["learngene:embedding-middle"]
    ok = ok_scratch and ok_pos
    detail = ", ".join(f"{s} {v:.4f}" for s, v in med.items())
    record(9, ok, f"median final val SER over 5 seeds: {detail}")
    assert ok


def test_criterion_10_extraction_shape():
    t0 = time.perf_counter()
    from lgdetect.learngene import GradSigLog
    from lgdetect.neuralnet import Model

    rho = np.array([[0.01 if layer >= 9 else 0.9] * 8 for layer in range(1, 13)])
    synthetic = GradSigLog(rho, 1e-4, 30, list(range(8)))
    model = Model.initialize(build_sdnet(12, 8, 32), rng_stream(0, "init"))
    syn_ids = extract_learngene(model, synthetic).layer_ids
    synthetic_time = time.perf_counter() - t0

    res, unit = collective()
    again = extract_learngene(res.model, res.gradsig, ACC.policy())
    ids = unit.layer_ids
    contiguous_suffix = ids == list(range(ids[0], ids[0] + len(ids))) and ids[-1] == ACC.n_conv_collective
    deterministic = again.layer_ids == ids and all(np.array_equal(a, b) for a, b in zip(again.kernels, unit.kernels))
    ok = syn_ids == [9, 10, 11, 12] and contiguous_suffix and deterministic and synthetic_time < 60
    note = "; fallback used" if unit.warnings else ""
    record(10, ok, f"synthetic -> {syn_ids}; collective run -> {ids} (suffix {contiguous_suffix}, deterministic {deterministic}{note})")
    assert ok


def test_criterion_11_scalability():
    # the unit holds conv kernels only, so a unit extracted at Nt=4 loads into the
    # Nt=4 individual model whose conv stack runs at the doubled (native Nt=8) width
    nt_native = 2 * ACC.nt
    target = task(SCALABILITY_TASK)
    _, unit = collective()
    spec = build_upsampled_sdnet(ACC.n_conv_individual, ACC.nt, ACC.nr, nt_native=nt_native)

    def run(seed):
        return ex.scalability_run(unit, target, ACC.individual_train(), seed=seed, n_conv=ACC.n_conv_individual, nt_native=nt_native)

    pairs = [_cached(("scalability", seed), lambda s=seed: run(s)) for seed in SEEDS_9]
    scratch = float(np.median([p[0].final_val_ser for p in pairs]))
    lg = float(np.median([p[1].final_val_ser for p in pairs]))
    equal_logs = all(len(p[0].epochs) == len(p[1].epochs) == ACC.individual_epochs for p in pairs)
    ok = lg <= scratch and equal_logs and spec.meta["feature_width"] == 2 * nt_native
    zf = ex.baseline_ser(target.split("val"), target.sigma2)["zf"]
    record(11, ok, f"Nt={ACC.nt} upsampled to Nt={nt_native}: learngene {lg:.4f} vs scratch {scratch:.4f} (val ZF {zf:.4f})")
    assert ok


def test_criterion_12_reproducibility(tmp_path):
    small = replace(
        ACC,
        n_collective_tasks=3,
        n_target_tasks=1,
        samples_per_task=200,
        collective_epochs=2,
        individual_epochs=2,
        snr_grid=[15.0, 20.0],
        schemes=["scratch", "transfer", "learngene:bottom", "learngene:inheriting-top"],
        seeds=[0, 1],
    )
    run_pipeline(small, tmp_path / "a", workers=1)
    run_pipeline(small, tmp_path / "b", workers=1)
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes() for name in ("gradsig.csv", "summary.csv")}
    ok = all(same.values())
    record(12, ok, "byte-identical: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok
