"""Command-line entry point (``lgdetect``).

Manufacturer side: ``gen-data``, ``train-collective``, ``extract``. Device side:
``train-individual``, ``evaluate``. Plus ``analyze`` reports and ``run`` for the
whole pipeline. Errors are written to stderr as one JSON object; exit code 2
means a configuration or usage problem, 3 a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .channel import calibrate_noise, draw_channel, load_dataset, make_task
from .config import RunConfig
from .detectors import zf_noise_stats
from .errors import ConfigError, LgdetectError
from .learngene import GradSigLog, extract_learngene, load_unit, save_unit, train_collective
from .neuralnet import load_checkpoint, save_checkpoint
from .numerics import rng_stream
from .pipeline import dataset_path, generate_tasks, load_tasks, run_pipeline, write_tasks
from .sdnet import check_geometry

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("lgdetect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _config(args, **extra) -> RunConfig:
    overrides = {"master_seed": getattr(args, "seed", None), **extra}
    return RunConfig.load(getattr(args, "config", None), overrides)


def _header(cfg: RunConfig) -> dict:
    return cfg.header()


def _write(path: str | Path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ids = cfg.collective_ids() + cfg.target_ids()
    tasks = generate_tasks(cfg, ids)
    paths = write_tasks(cfg, tasks, args.out)
    index = {**_header(cfg), "collective": cfg.collective_ids(), "targets": cfg.target_ids(), "files": [p.name for p in paths]}
    _write(Path(args.out) / "tasks.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(paths)} datasets to {args.out}")
    return 0


def cmd_train_collective(args) -> int:
    cfg = _config(args)
    tasks = load_tasks(args.data, cfg.collective_ids())
    res = train_collective(tasks, cfg.collective_train(), cfg.n_conv_collective, cfg.tau, cfg.master_seed)
    save_checkpoint(res.model, args.out, extra={**_header(cfg), "role": "collective", "tasks": cfg.collective_ids()})
    _write(args.gradsig, res.gradsig.to_csv(_header(cfg)))
    if args.log:
        _write(args.log, "".join(json.dumps({**_header(cfg), **e}, sort_keys=True) + "\n" for e in res.logs))
    print(f"collective model -> {args.out}; gradient significance -> {args.gradsig}")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(
        args, tau=args.tau, rho_sel=args.rho_sel, window=args.window, m_max=args.m_max
    )
    model, manifest = load_checkpoint(args.model)
    gradsig = GradSigLog.from_csv(Path(args.gradsig).read_text())
    unit = extract_learngene(model, gradsig, cfg.policy())
    full = save_unit(unit, args.out, extra=_header(cfg))
    for w in unit.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"learngene unit: layers {unit.layer_ids}, {full['n_params']} parameters -> {args.out}")
    return 0


def cmd_train_individual(args) -> int:
    cfg = _config(args)
    target = load_dataset(dataset_path(args.data, args.task))
    scheme = ex.Scheme.parse(args.scheme if args.scheme != "learngene" else f"learngene:{args.strategy}")
    unit = load_unit(args.unit) if args.unit else None
    collective = load_checkpoint(args.collective)[0] if args.collective else None
    source = None
    if scheme.kind == "transfer":
        src = args.source_task if args.source_task is not None else (cfg.transfer_source or cfg.collective_ids()[0])
        source = load_dataset(dataset_path(args.data, src))
    seed = args.run_seed if args.run_seed is not None else cfg.master_seed
    record, model = ex.run_scheme(
        scheme, target, cfg.individual_train(), seed=seed, n_conv=cfg.n_conv_individual, source=source, unit=unit, collective=collective
    )
    save_checkpoint(
        model,
        args.out,
        extra={**_header(cfg), "role": "individual", "scheme": record.scheme, "task_id": target.task_id, "seed": seed},
    )
    if args.log:
        _write(args.log, ex.metrics_lines([record], _header(cfg)))
    snr = next(iter(record.test_ser))
    print(f"{record.scheme} on task {target.task_id}: test SER {record.test_ser[snr]:.4g} at {snr} dB -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, manifest = load_checkpoint(args.model)
    target = load_dataset(dataset_path(args.data, args.task))
    check_geometry(model, target)
    grid = args.snr_grid or cfg.snr_grid
    rows = []
    label = manifest.get("scheme", "model")
    for snr, split in ex.eval_sets(target, grid).items():
        ser = ex.evaluate_ser(model, split)
        n = split.x.size
        rows.append([label, target.task_id, manifest.get("seed", -1), snr, ser, ex.detectors.ser_stderr(ser, n), n])
    text = ex.csv_text(["scheme", "target_task", "seed", "snr_db", "ser", "stderr", "n_symbols"], rows, _header(cfg))
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    header = _header(cfg)
    if args.what == "complexity":
        rows = ex.complexity_report(cfg.nt, cfg.nr, cfg.n_conv_individual, cfg.n_conv_collective, cfg.m_max)
        print(ex.format_complexity(rows))
        if args.out:
            _write(
                args.out,
                ex.csv_text(["model", "conv_layers", "params", "flops", "ratio"], [list(r.values()) for r in rows], header),
            )
    elif args.what == "spectra":
        tasks = load_tasks(args.data, _task_ids(args, cfg))
        _emit(args, ex.csv_text(["task_id", "index", "mean_eigenvalue", "mean_zf_noise_gain"], ex.spectra_rows(tasks), header))
    elif args.what == "zf-noise":
        ccfg = cfg.channel()
        rng = rng_stream(cfg.master_seed, "zf-noise")
        rows = []
        for i in range(args.channels):
            task = make_task(cfg.master_seed, i, ccfg)
            h = draw_channel(task, rng, ccfg.nt, ccfg.nr)
            sigma2 = calibrate_noise(task, ccfg, cfg.master_seed, cfg.snr_db)
            st = zf_noise_stats(h, sigma2, args.trials, rng)
            rows.append([i, sigma2, st.empirical_total, st.analytic_total, st.total_rel_error, st.cov_rel_error])
        _emit(args, ex.csv_text(["channel", "sigma2", "empirical_total", "analytic_total", "total_rel_error", "cov_rel_error"], rows, header))
    elif args.what == "pcc":
        models = {}
        for path in args.models:
            model, manifest = load_checkpoint(path)
            models[int(manifest["task_id"])] = model
        tasks = load_tasks(args.data, sorted(models))
        gm = ex.generalization_matrix(models, tasks)
        dist = ex.distance_matrix(tasks, args.k, cfg.master_seed)
        value, used, excluded = ex.pcc_from_matrix(gm, dist)
        rows = []
        for m, tm in enumerate(gm.task_ids):
            for n, tn in enumerate(gm.task_ids):
                rows.append([tm, tn, float(gm.ser[m, n]), float(gm.gen_error[m, n]), float(dist[m, n])])
        meta = {**header, "pcc": repr(value), "entries_used": used, "entries_excluded": excluded}
        _emit(args, ex.csv_text(["train_task", "test_task", "ser", "gen_error_db", "distance"], rows, meta))
        print(f"pcc = {value:.4f} over {used} entries ({excluded} excluded)", file=sys.stderr)
    return 0


def _task_ids(args, cfg: RunConfig) -> list[int]:
    return args.tasks or (cfg.collective_ids() + cfg.target_ids())


def _emit(args, text: str) -> None:
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_pipeline(cfg, args.out, args.workers)
    print(f"unit layers {res.unit.layer_ids}; {len(res.records)} scheme runs; outputs in {res.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgdetect", description="SDNet MIMO detection with learngene transfer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults are used for missing keys)")
        sp.add_argument("--seed", type=int, help="override master_seed")

    sp = sub.add_parser("gen-data", help="generate per-task datasets")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory for task_NNN.ds files")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-collective", help="sequentially train the collective model")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory from gen-data")
    sp.add_argument("--out", required=True, help="collective checkpoint path")
    sp.add_argument("--gradsig", required=True, help="gradient-significance CSV path")
    sp.add_argument("--log", help="optional per-epoch JSONL log")
    sp.set_defaults(func=cmd_train_collective)

    sp = sub.add_parser("extract", help="extract the learngene unit from a collective model")
    common(sp)
    sp.add_argument("--model", required=True, help="collective checkpoint")
    sp.add_argument("--gradsig", required=True, help="gradient-significance CSV")
    sp.add_argument("--out", required=True, help="unit file path")
    sp.add_argument("--tau", type=float, help="significance threshold (recorded only)")
    sp.add_argument("--rho-sel", type=float, help="max final significance for eligibility")
    sp.add_argument("--window", type=int, help="trend window in tasks")
    sp.add_argument("--m-max", type=int, help="max unit length")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train-individual", help="train an individual model on a target task")
    common(sp)
    sp.add_argument("--scheme", required=True, choices=["scratch", "transfer", "learngene"])
    sp.add_argument("--strategy", default="bottom", help="expansion strategy, e.g. bottom, embedding-top, inheriting-middle")
    sp.add_argument("--unit", help="learngene unit file (learngene scheme)")
    sp.add_argument("--collective", help="collective checkpoint (inheriting top/middle)")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--task", type=int, required=True, help="target task id")
    sp.add_argument("--source-task", type=int, help="transfer source task id")
    sp.add_argument("--run-seed", type=int, help="per-run seed (init and shuffling)")
    sp.add_argument("--out", required=True, help="individual checkpoint path")
    sp.add_argument("--log", help="per-epoch JSONL log")
    sp.set_defaults(func=cmd_train_individual)

    sp = sub.add_parser("evaluate", help="test SER of a model over an SNR grid")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--snr-grid", type=float, nargs="+", help="SNRs in dB")
    sp.add_argument("--out", help="CSV path (stdout if omitted)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="reports: pcc, zf-noise, spectra, complexity")
    common(sp)
    sp.add_argument("what", choices=["pcc", "zf-noise", "spectra", "complexity"])
    sp.add_argument("--data", help="dataset directory (pcc, spectra)")
    sp.add_argument("--models", nargs="+", default=[], help="matched individual checkpoints (pcc)")
    sp.add_argument("--tasks", type=int, nargs="+", help="task ids (spectra)")
    sp.add_argument("--k", type=int, default=100, help="channel pairs per distance (pcc)")
    sp.add_argument("--channels", type=int, default=5, help="random channels (zf-noise)")
    sp.add_argument("--trials", type=int, default=100000, help="noise trials per channel (zf-noise)")
    sp.add_argument("--out", help="CSV path (stdout if omitted)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("run", help="full pipeline into one output directory")
    common(sp)
    sp.add_argument("--out", help="output directory (config out_dir if omitted)")
    sp.add_argument("--workers", type=int, help="parallel scheme runs (default from LGDETECT_WORKERS)")
    sp.set_defaults(func=cmd_run)
    return p


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if args.command == "analyze" and args.what in ("pcc", "spectra") and not args.data:
            raise ConfigError("analyze pcc/spectra needs --data")
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except (LgdetectError, OSError, ValueError, KeyError) as exc:
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
