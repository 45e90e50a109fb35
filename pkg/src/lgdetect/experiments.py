"""Comparative studies: schemes, generalization matrix, PCC, SNR sweeps, scalability, complexity."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import detectors
from .channel import ChannelConfig, Split, TaskDataset, dataset_distance, generate_dataset
from .errors import DegenerateSER, LengthMismatch, MissingSource, MissingUnit, ZeroVariance
from .learngene import (
    ExpansionStrategy,
    LearngeneUnit,
    adapt_individual,
    expand,
)
from .neuralnet import Model, ModelSpec, count_flops, count_params
from .numerics import complex_to_real_channel, eigen_spectrum, realify, rng_stream
from .sdnet import TrainConfig, build_sdnet, build_upsampled_sdnet, evaluate_ser, train_on_task

log = logging.getLogger(__name__)

SNR_GRID = (20.0, 22.5, 25.0, 27.5, 30.0)
WORKERS_ENV = "LGDETECT_WORKERS"


@dataclass(frozen=True)
class Scheme:
    kind: str  # scratch | transfer | learngene
    strategy: ExpansionStrategy | None = None

    def __post_init__(self):
        if self.kind not in ("scratch", "transfer", "learngene"):
            raise ValueError(f"unknown scheme {self.kind!r}")
        if self.kind == "learngene" and self.strategy is None:
            object.__setattr__(self, "strategy", ExpansionStrategy("embedding", "bottom"))

    @property
    def label(self) -> str:
        return f"learngene:{self.strategy.label}" if self.kind == "learngene" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        kind, _, strat = text.partition(":")
        if kind == "learngene":
            return cls(kind, ExpansionStrategy.parse(strat) if strat else None)
        return cls(kind)


@dataclass
class MetricsRecord:
    scheme: str
    target_task: int
    seed: int
    epochs: list[dict] = field(default_factory=list)
    test_ser: dict[float, float] = field(default_factory=dict)
    n_symbols: dict[float, int] = field(default_factory=dict)
    wall_s: float = 0.0
    transferred_ratio: float = 0.0
    dataset_hash: str = ""
    model_hash: str = ""

    @property
    def final_val_ser(self) -> float:
        return self.epochs[-1]["val_ser"] if self.epochs else math.nan

    def stderr(self, snr: float) -> float:
        return detectors.ser_stderr(self.test_ser[snr], self.n_symbols[snr])


def eval_sets(target: TaskDataset, snr_list: Iterable[float], n_samples: int | None = None) -> dict[float, Split]:
    """Target test splits regenerated per SNR: same channels and symbols, fresh noise."""
    n = n_samples or len(target)
    out = {}
    for snr in snr_list:
        snr = float(snr)
        if snr == target.snr_db and n == len(target):
            out[snr] = target.split("test")
        else:
            ds = generate_dataset(target.config, n, snr, target.channel_cfg, seed=target.seed, noise_tag=":eval")
            out[snr] = ds.split("test")
    return out


def _initial_model(spec: ModelSpec, seed: int, target: TaskDataset) -> np.random.Generator:
    # one init stream per (seed, target) so every scheme starts from the same non-copied weights
    return rng_stream(seed, "init-individual", target.task_id)


def run_scheme(
    scheme: Scheme,
    target: TaskDataset,
    cfg: TrainConfig,
    *,
    seed: int = 0,
    spec: ModelSpec | None = None,
    n_conv: int = 8,
    source: TaskDataset | None = None,
    unit: LearngeneUnit | None = None,
    collective: Model | None = None,
    evals: dict[float, Split] | None = None,
) -> tuple[MetricsRecord, Model]:
    """Train one individual model on ``target`` under ``scheme`` and evaluate it.

    ``evals`` maps SNR to evaluation split; the target's own test split is used
    when omitted.
    """
    t0 = time.perf_counter()
    cfg = replace(cfg, seed=seed)
    spec = spec or build_sdnet(n_conv, target.channel_cfg.nt, target.channel_cfg.nr)
    total = count_params(spec)["total"]
    rng = _initial_model(spec, seed, target)
    if scheme.kind == "scratch":
        result = train_on_task(Model.initialize(spec, rng), target, cfg, scheme=scheme.label)
        ratio = 0.0
    elif scheme.kind == "transfer":
        if source is None:
            raise MissingSource("transfer scheme needs a source task")
        pre = train_on_task(Model.initialize(spec, rng), source, cfg, scheme="transfer-pretrain")
        result = train_on_task(pre.model, target, cfg, scheme=scheme.label)
        ratio = total / total
    else:
        if unit is None:
            raise MissingUnit("learngene scheme needs a learngene unit")
        expansion = expand(spec, collective, unit, scheme.strategy, rng)
        result = adapt_individual(expansion, target, cfg, scheme=scheme.label)
        ratio = expansion.transferred_ratio
    evals = evals or {float(target.snr_db): target.split("test")}
    record = MetricsRecord(
        scheme=scheme.label,
        target_task=target.task_id,
        seed=seed,
        epochs=result.log,
        transferred_ratio=ratio,
        dataset_hash=target.content_hash(),
        model_hash=result.model.content_hash(),
    )
    for snr, split in sorted(evals.items()):
        record.test_ser[snr] = evaluate_ser(result.model, split)
        record.n_symbols[snr] = split.x.size
    record.wall_s = time.perf_counter() - t0
    return record, result.model


def baseline_ser(split: Split, sigma2: float) -> dict[str, float]:
    """ZF (stored estimate) and MMSE SER on the LS channel estimate."""
    zf = detectors.ser(detectors.hard_decision(split.x_zf), split.x)
    mmse_soft = detectors.mmse_detect_batch(complex_to_real_channel(split.h_ls), realify(split.y), sigma2)
    return {"zf": zf, "mmse": detectors.ser(detectors.hard_decision(mmse_soft), split.x)}


# --- generalization ---------------------------------------------------------------


def gen_error_db(ser_mn: float, ser_n: float) -> float:
    """``10 log10 |(SER_mn - SER_n) / SER_n|``; raises :class:`DegenerateSER` when undefined."""
    if ser_n == 0:
        raise DegenerateSER("reference SER is zero")
    rel = abs((ser_mn - ser_n) / ser_n)
    if rel == 0:
        raise DegenerateSER("test SER equals reference SER")
    return 10.0 * math.log10(rel)


@dataclass
class GenMatrix:
    task_ids: list[int]
    ser: np.ndarray  # ser[m, n]: model trained on task m, tested on task n
    gen_error: np.ndarray  # NaN where undefined (always on the diagonal)
    zf_ser: np.ndarray

    @property
    def n_excluded(self) -> int:
        off = ~np.eye(len(self.task_ids), dtype=bool)
        return int(np.sum(np.isnan(self.gen_error) & off))

    @property
    def mean_matched(self) -> float:
        return float(np.mean(np.diag(self.ser)))

    @property
    def mean_mismatched(self) -> float:
        off = ~np.eye(len(self.task_ids), dtype=bool)
        return float(np.mean(self.ser[off]))


def generalization_matrix(models: dict[int, Model], tasks: list[TaskDataset]) -> GenMatrix:
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    ids = [t.task_id for t in tasks]
    missing = [i for i in ids if i not in models]
    if missing:
        raise ValueError(f"no matched model for tasks {missing}")
    tests = [t.split("test") for t in tasks]
    n = len(tasks)
    ser = np.array([[evaluate_ser(models[ids[m]], tests[k]) for k in range(n)] for m in range(n)])
    gen = np.full((n, n), np.nan)
    for m in range(n):
        for k in range(n):
            if m == k:
                continue
            try:
                gen[m, k] = gen_error_db(ser[m, k], ser[k, k])
            except DegenerateSER:
                pass
    zf = np.array([detectors.ser(detectors.hard_decision(s.x_zf), s.x) for s in tests])
    return GenMatrix(ids, ser, gen, zf)


def distance_matrix(tasks: list[TaskDataset], k: int, seed: int = 0) -> np.ndarray:
    """``d[m, n]``: distance between task m's training channels and task n's test channels."""
    n = len(tasks)
    out = np.zeros((n, n))
    for m in range(n):
        for j in range(n):
            a, b = tasks[m].split("train"), tasks[j].split("test")
            out[m, j] = dataset_distance(a, b, min(k, len(a), len(b)), seed)
    return out


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"{x.shape} vs {y.shape}")
    if x.size < 3:
        raise ValueError("need at least three points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ZeroVariance("input has zero variance")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def pcc_from_matrix(gm: GenMatrix, distances: np.ndarray) -> tuple[float, int, int]:
    """PCC over defined off-diagonal entries; returns (pcc, n_used, n_excluded)."""
    mask = ~np.isnan(gm.gen_error)
    return pcc(distances[mask], gm.gen_error[mask]), int(mask.sum()), gm.n_excluded


# --- sweeps, scalability, complexity ----------------------------------------------


@dataclass
class SweepRow:
    label: str
    snr_db: float
    ser: float
    stderr: float
    n_symbols: int


def snr_sweep(
    models: dict[str, Model],
    target: TaskDataset,
    snr_list: Iterable[float] = SNR_GRID,
    n_samples: int | None = None,
) -> tuple[list[SweepRow], dict[str, bool]]:
    """SER per model and per SNR plus ZF/MMSE baselines; second value flags monotone curves."""
    rows: list[SweepRow] = []
    snrs = [float(s) for s in snr_list]
    for snr in snrs:
        n = n_samples or len(target)
        ds = generate_dataset(target.config, n, snr, target.channel_cfg, seed=target.seed, noise_tag=":eval")
        split = ds.split("test")
        sym = split.x.size
        for label, value in baseline_ser(split, ds.sigma2).items():
            rows.append(SweepRow(label, snr, value, detectors.ser_stderr(value, sym), sym))
        for label, model in models.items():
            value = evaluate_ser(model, split)
            rows.append(SweepRow(label, snr, value, detectors.ser_stderr(value, sym), sym))
    monotone = {}
    for label in dict.fromkeys(r.label for r in rows):
        curve = [r for r in rows if r.label == label]
        bad = sum(b.ser > a.ser + a.stderr + b.stderr for a, b in zip(curve, curve[1:]))
        monotone[label] = bad <= 1
    return rows, monotone


def scalability_run(
    unit: LearngeneUnit,
    target: TaskDataset,
    cfg: TrainConfig,
    seed: int = 0,
    n_conv: int = 8,
    nt_native: int = 8,
) -> tuple[MetricsRecord, MetricsRecord]:
    """Scratch vs bottom learngene on a smaller-Nt task via the upsampled individual model."""
    spec = build_upsampled_sdnet(n_conv, target.channel_cfg.nt, target.channel_cfg.nr, nt_native)
    scratch, _ = run_scheme(Scheme("scratch"), target, cfg, seed=seed, spec=spec)
    lg, _ = run_scheme(Scheme("learngene"), target, cfg, seed=seed, spec=spec, unit=unit)
    return scratch, lg


def complexity_report(nt: int = 8, nr: int = 32, n_ind: int = 8, n_col: int = 12, unit_layers: int = 4) -> list[dict]:
    ind, col = build_sdnet(n_ind, nt, nr), build_sdnet(n_col, nt, nr)
    p_ind, f_ind = count_params(ind), count_flops(ind)
    p_col, f_col = count_params(col), count_flops(col)
    unit_names = [f"conv{i}" for i in range(n_col - unit_layers + 1, n_col + 1)]
    unit_params = sum(p_col[n] for n in unit_names)
    unit_flops = sum(f_col[n] for n in unit_names)
    n_conv_ind, n_conv_col = len(ind.conv_layers()), len(col.conv_layers())
    rows = [
        {"model": "scratch", "conv_layers": n_conv_ind, "params": p_ind["total"], "flops": f_ind["total"], "ratio": 0.0},
        {"model": "transfer", "conv_layers": n_conv_ind, "params": p_ind["total"], "flops": f_ind["total"], "ratio": 1.0},
        {
            "model": "learngene",
            "conv_layers": n_conv_ind,
            "params": p_ind["total"],
            "flops": f_ind["total"],
            "ratio": unit_params / p_ind["total"],
        },
        {"model": "collective", "conv_layers": n_conv_col, "params": p_col["total"], "flops": f_col["total"], "ratio": None},
        {"model": "learngene-unit", "conv_layers": unit_layers, "params": unit_params, "flops": unit_flops, "ratio": None},
    ]
    return rows


def format_complexity(rows: list[dict]) -> str:
    lines = [f"{'model':<16}{'conv layers':>12}{'params':>10}{'FLOPs':>14}{'transferred':>13}"]
    for r in rows:
        ratio = "-" if r["ratio"] is None else f"{100 * r['ratio']:.1f}%"
        lines.append(f"{r['model']:<16}{r['conv_layers']:>12}{r['params']:>10,}{r['flops']:>14,}{ratio:>13}")
    return "\n".join(lines)


# --- output writers ---------------------------------------------------------------


def csv_text(header: list[str], rows: Iterable[Iterable], meta: dict | None = None) -> str:
    buf = io.StringIO()
    for key, value in (meta or {}).items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


SUMMARY_HEADER = ["scheme", "target_task", "seed", "snr_db", "ser", "stderr", "n_symbols", "transferred_ratio", "params", "flops"]


def summary_rows(records: list[MetricsRecord], params: int, flops: int) -> list[list]:
    rows = []
    for r in records:
        for snr in sorted(r.test_ser):
            rows.append([r.scheme, r.target_task, r.seed, snr, r.test_ser[snr], r.stderr(snr), r.n_symbols[snr], r.transferred_ratio, params, flops])
    return rows


def metrics_lines(records: list[MetricsRecord], meta: dict) -> str:
    out = []
    for r in records:
        for e in r.epochs:
            out.append(json.dumps({**meta, **e, "seed": r.seed, "target_task": r.target_task}, sort_keys=True))
        out.append(
            json.dumps(
                {
                    **meta,
                    "scheme": r.scheme,
                    "target_task": r.target_task,
                    "seed": r.seed,
                    "final": True,
                    "test_ser": {repr(k): v for k, v in r.test_ser.items()},
                    "n_symbols": {repr(k): v for k, v in r.n_symbols.items()},
                    "transferred_ratio": r.transferred_ratio,
                    "dataset_hash": r.dataset_hash,
                    "model_hash": r.model_hash,
                    "wall_s": round(r.wall_s, 3),
                },
                sort_keys=True,
            )
        )
    return "".join(line + "\n" for line in out)


def spectra_rows(tasks: list[TaskDataset]) -> list[list]:
    """Mean sorted eigenvalues of ``H^H H`` per task plus the mean ZF noise gain ``Tr((H^H H)^-1)``."""
    rows = []
    for t in tasks:
        eig = np.array([eigen_spectrum(h) for h in t.h])
        gain = np.mean(np.sum(1.0 / np.maximum(eig, 1e-300), axis=1))
        for i, v in enumerate(eig.mean(axis=0)):
            rows.append([t.task_id, i, float(v), float(gain)])
    return rows


def write_svg(path: str | Path, series: dict[str, tuple[list, list]], title: str, xlabel: str, ylabel: str, logy: bool = False) -> bool:
    """Best-effort line chart; returns False when plotting is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # pragma: no cover
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


# --- job pool ---------------------------------------------------------------------


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_jobs(fn: Callable, jobs: list[tuple], workers: int | None = None) -> list:
    """Run ``fn(*args)`` for every job; results come back in job order regardless of workers."""
    workers = workers or default_workers()
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*args) for args in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in jobs]
        return [f.result() for f in futures]


def _scheme_job(scheme_text, target, cfg, seed, n_conv, source, unit, collective, evals):
    record, _ = run_scheme(
        Scheme.parse(scheme_text), target, cfg, seed=seed, n_conv=n_conv, source=source, unit=unit, collective=collective, evals=evals
    )
    return record


def run_scheme_grid(
    schemes: list[str],
    targets: list[TaskDataset],
    seeds: list[int],
    cfg: TrainConfig,
    *,
    n_conv: int = 8,
    source: TaskDataset | None = None,
    unit: LearngeneUnit | None = None,
    collective: Model | None = None,
    snr_list: Iterable[float] | None = None,
    workers: int | None = None,
) -> list[MetricsRecord]:
    evals = {t.task_id: eval_sets(t, snr_list) if snr_list else None for t in targets}
    jobs = [
        (s, t, cfg, seed, n_conv, source if s == "transfer" else None, unit, collective, evals[t.task_id])
        for t in targets
        for seed in seeds
        for s in schemes
    ]
    records = run_jobs(_scheme_job, jobs, workers)
    for t in targets:
        hashes = {r.dataset_hash for r in records if r.target_task == t.task_id}
        assert len(hashes) <= 1, "schemes saw different target data"
    return records


def channel_config_from(cfg_dict: dict) -> ChannelConfig:
    keys = ChannelConfig.__dataclass_fields__.keys()
    return ChannelConfig(**{k: (tuple(v) if k == "split" else v) for k, v in cfg_dict.items() if k in keys})


def record_to_json(r: MetricsRecord) -> dict:
    d = asdict(r)
    d["test_ser"] = {repr(k): v for k, v in r.test_ser.items()}
    d["n_symbols"] = {repr(k): v for k, v in r.n_symbols.items()}
    return d
