"""End-to-end run: tasks -> collective -> learngene -> schemes on held-out targets -> reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments as ex
from .channel import TaskDataset, generate_dataset, load_dataset, make_task, save_dataset
from .config import RunConfig
from .learngene import CollectiveResult, LearngeneUnit, extract_learngene, save_unit, train_collective
from .neuralnet import count_flops, count_params, save_checkpoint
from .sdnet import build_sdnet

log = logging.getLogger(__name__)


def generate_tasks(cfg: RunConfig, task_ids: list[int]) -> list[TaskDataset]:
    ccfg = cfg.channel()
    return [
        generate_dataset(make_task(cfg.master_seed, tid, ccfg), cfg.samples_per_task, cfg.snr_db, ccfg, seed=cfg.master_seed)
        for tid in task_ids
    ]


def dataset_path(data_dir: str | Path, task_id: int) -> Path:
    return Path(data_dir) / f"task_{task_id:03d}.ds"


def write_tasks(cfg: RunConfig, tasks: list[TaskDataset], data_dir: str | Path) -> list[Path]:
    Path(data_dir).mkdir(parents=True, exist_ok=True)
    paths = []
    for t in tasks:
        p = dataset_path(data_dir, t.task_id)
        save_dataset(t, p, extra=cfg.header())
        paths.append(p)
    return paths


def load_tasks(data_dir: str | Path, task_ids: list[int]) -> list[TaskDataset]:
    return [load_dataset(dataset_path(data_dir, tid)) for tid in task_ids]


def tasks_for(cfg: RunConfig, task_ids: list[int]) -> list[TaskDataset]:
    """Load from ``cfg.data_dir`` when the files exist, otherwise generate in memory."""
    if cfg.data_dir and all(dataset_path(cfg.data_dir, t).exists() for t in task_ids):
        return load_tasks(cfg.data_dir, task_ids)
    return generate_tasks(cfg, task_ids)


@dataclass
class PipelineResult:
    collective: CollectiveResult
    unit: LearngeneUnit
    records: list[ex.MetricsRecord]
    out_dir: Path


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None, workers: int | None = None) -> PipelineResult:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = cfg.header()
    log.info("generating %d collective + %d target tasks", cfg.n_collective_tasks, cfg.n_target_tasks)
    collective_tasks = tasks_for(cfg, cfg.collective_ids())
    targets = tasks_for(cfg, cfg.target_ids())

    col = train_collective(collective_tasks, cfg.collective_train(), cfg.n_conv_collective, cfg.tau, cfg.master_seed)
    save_checkpoint(col.model, out / "collective.ckpt", extra={**header, "role": "collective"})
    (out / "gradsig.csv").write_text(col.gradsig.to_csv(header))

    unit = extract_learngene(col.model, col.gradsig, cfg.policy())
    save_unit(unit, out / "unit.lg", extra=header)

    src_id = cfg.transfer_source if cfg.transfer_source is not None else cfg.collective_ids()[0]
    source = next((t for t in collective_tasks if t.task_id == src_id), None)
    if source is None:
        source = tasks_for(cfg, [src_id])[0]
    records = ex.run_scheme_grid(
        cfg.schemes,
        targets,
        cfg.seeds,
        cfg.individual_train(),
        n_conv=cfg.n_conv_individual,
        source=source,
        unit=unit,
        collective=col.model,
        snr_list=cfg.snr_grid,
        workers=workers if workers is not None else cfg.workers,
    )
    write_reports(cfg, out, records, collective_tasks + targets, targets)
    return PipelineResult(col, unit, records, out)


def write_reports(cfg: RunConfig, out: Path, records: list[ex.MetricsRecord], all_tasks: list[TaskDataset], targets: list[TaskDataset]) -> None:
    header = cfg.header()
    spec = build_sdnet(cfg.n_conv_individual, cfg.nt, cfg.nr)
    params, flops = count_params(spec)["total"], count_flops(spec)["total"]
    rows = ex.summary_rows(records, params, flops)
    # classical baselines on the same evaluation sets
    for t in targets:
        for snr, split in ex.eval_sets(t, cfg.snr_grid).items():
            sigma2 = t.sigma2 if snr == t.snr_db else _sigma2_for(t, snr)
            for label, value in ex.baseline_ser(split, sigma2).items():
                n = split.x.size
                rows.append([label, t.task_id, -1, snr, value, ex.detectors.ser_stderr(value, n), n, 0.0, 0, 0])
    (out / "summary.csv").write_text(ex.csv_text(ex.SUMMARY_HEADER, rows, header))
    (out / "metrics.jsonl").write_text(ex.metrics_lines(records, header))
    (out / "spectra.csv").write_text(
        ex.csv_text(["task_id", "index", "mean_eigenvalue", "mean_zf_noise_gain"], ex.spectra_rows(all_tasks), header)
    )
    try:
        _charts(out, records)
    except Exception as exc:  # plotting is best effort
        log.warning("chart rendering failed: %s", exc)


def _sigma2_for(t: TaskDataset, snr: float) -> float:
    from .channel import calibrate_noise

    return calibrate_noise(t.config, t.channel_cfg, t.seed, snr)


def _charts(out: Path, records: list[ex.MetricsRecord]) -> None:
    curves = {}
    for r in records:
        key = f"{r.scheme} (task {r.target_task})"
        snrs = sorted(r.test_ser)
        curves.setdefault(key, []).append([r.test_ser[s] for s in snrs])
        xs = snrs
    if curves:
        ex.write_svg(
            out / "ser_vs_snr.svg",
            {k: (xs, list(np.mean(v, axis=0))) for k, v in curves.items()},
            "Test SER vs SNR",
            "SNR (dB)",
            "SER",
        )
    conv = {}
    for r in records:
        conv.setdefault(f"{r.scheme} (task {r.target_task})", []).append([e["val_ser"] for e in r.epochs])
    if conv:
        ex.write_svg(
            out / "val_ser.svg",
            {k: (list(range(1, len(v[0]) + 1)), list(np.mean(v, axis=0))) for k, v in conv.items()},
            "Validation SER per epoch",
            "epoch",
            "SER",
        )
