"""Command-line entry point.

    amtc3l gen-data --config F --out PATH
    amtc3l train    --config F --out DIR [--key value ...]
    amtc3l eval     --checkpoint FILE --data FILE
    amtc3l sweep    --config F --lambda 0.01,0.1 --nss ms,ns,mm --out DIR
    amtc3l ablate   --config F --out DIR

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional

from . import io
from .config import FIELD_KEYS, RunConfig, parse_config, render_config
from .data import DataError, Dataset, gen_blobs, load_csv, save_csv, split
from .numeric import Rng
from .trainer import ConfigError, evaluate, fit, kfold

log = logging.getLogger("amtc3l")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_LAMBDAS = (0.01, 0.05, 0.1, 0.5, 1.0)
SUMMARY_HEADER = ["nss", "lambda", "margin_mode", "overall_acc", "mean_per_class_acc"]
_SPLIT_STREAM = 9


class RunFailure(RuntimeError):
    pass


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and test sets for a run, per the data keys of ``cfg``."""
    k = cfg.k_classes
    if cfg.data_path is not None:
        full = load_csv(cfg.data_path, k)
    else:
        full = gen_blobs(cfg.data_config())
    if full.d_in != cfg.d_in:
        raise ConfigError(f"data has {full.d_in} features but d_in = {cfg.d_in}")
    if cfg.test_path is not None:
        test = load_csv(cfg.test_path, k)
        return full, test
    return split(full, cfg.train_fraction, Rng(cfg.resolved_data_seed).split(_SPLIT_STREAM))


def run_training(cfg: RunConfig, out_dir) -> dict:
    """Train, evaluate and write every artifact of one run into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(render_config(cfg))
    except OSError as exc:
        raise RunFailure(f"cannot write to {out}: {exc}") from None
    train_ds, test_ds = load_datasets(cfg)
    mc, tc = cfg.model_config(), cfg.train_config()

    stats_dir = out / "stats"
    dump = cfg.dump_stats and tc.nss in ("ns", "mm")
    if dump:
        stats_dir.mkdir(exist_ok=True)

    def on_epoch(epoch, er):
        if dump:
            io.write_matrix_csv(er.stats, stats_dir / f"epoch_{epoch:03d}.csv")

    result = fit(mc, tc, train_ds, on_epoch=on_epoch)
    report = evaluate(result.state, test_ds)
    io.write_curve(result.records, out / "curve.csv")
    io.write_metrics(report, out / "metrics.json")
    io.write_checkpoint(io.checkpoint_from_state(result.state, tc.attention_reduction), out / "checkpoint.bin")
    io.write_matrix_csv(result.state.centers.matrix, out / "centers.csv")
    io.write_matrix_csv(report.confusion, out / "confusion.csv")
    if cfg.folds >= 2:
        reports, mean = kfold(train_ds, cfg.folds, mc, tc)
        payload = {"folds": [r.to_json_dict() for r in reports], "mean": mean.to_json_dict()}
        (out / "kfold.json").write_text(json.dumps(io._json_float(payload), indent=2) + "\n")
    return {
        "overall_acc": report.overall_accuracy,
        "mean_per_class_acc": report.mean_per_class_accuracy,
    }


def cmd_gen_data(cfg: RunConfig, out_path) -> int:
    ds = gen_blobs(cfg.data_config())
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out_dir) -> int:
    run_training(cfg, out_dir)
    return EXIT_OK


def cmd_eval(checkpoint, data_path, out_path=None) -> int:
    ck = io.read_checkpoint(checkpoint)
    ds = load_csv(data_path, ck.model_cfg.k_classes)
    report = evaluate(io.state_from_checkpoint(ck), ds)
    text = json.dumps(io._json_float(report.to_json_dict()), indent=2) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TC3L_THREADS", "1")))
    except ValueError:
        return 1


def _run_one(args):
    cfg, out_dir = args
    try:
        return run_training(cfg, out_dir), None
    except Exception as exc:  # a failed run is recorded, the sweep goes on
        return None, f"{type(exc).__name__}: {exc}"


def _run_many(jobs):
    n = _threads()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def _write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow(r)


def _summary_row(cfg: RunConfig, res):
    if res is None:
        acc = ("nan", "nan")
    else:
        acc = (io.fmt(res["overall_acc"]), io.fmt(res["mean_per_class_acc"]))
    return [cfg.nss, io.fmt(cfg.lam), cfg.margin_mode, *acc]


def run_dir_name(nss: str, lam: float) -> str:
    return f"nss-{nss}_lambda-{lam:g}"


def cmd_sweep(cfg: RunConfig, lambdas, nss_modes, out_dir) -> int:
    if not lambdas or not nss_modes:
        raise ConfigError("sweep needs at least one lambda and one nss mode")
    out = Path(out_dir)
    jobs = []
    for nss in nss_modes:
        for lam in lambdas:
            run_cfg = cfg.with_overrides(nss=nss, lam=float(lam)).validate()
            jobs.append((run_cfg, out / run_dir_name(nss, float(lam))))
    results = _run_many(jobs)
    rows = []
    failed = 0
    for (run_cfg, d), (res, err) in zip(jobs, results):
        if err is not None:
            failed += 1
            log.error("run %s failed: %s", d.name, err)
        rows.append(_summary_row(run_cfg, res))
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(rows, out / "summary.csv")
    return EXIT_RUNTIME if failed else EXIT_OK


ABLATION_MODES = ("ms", "ns", "mm")


def ablation_runs(cfg: RunConfig) -> list[tuple[str, str, RunConfig]]:
    """The seven runs of the ablation grid as (pipeline, nss column, config).

    The baseline (cross-entropy only) is shared by every column; pipeline a
    uses the fixed-margin hinge loss without attention, pipeline b the
    adaptive-margin loss with the configured attention.
    """
    attention_b = cfg.attention if cfg.attention != "none" else "element"
    runs = [("baseline", "none", cfg.with_overrides(lam=0.0, nss="none", attention="none"))]
    for nss in ABLATION_MODES:
        runs.append(("pipeline_a", nss, cfg.with_overrides(nss=nss, margin_mode="fixed", attention="none")))
    for nss in ABLATION_MODES:
        runs.append(("pipeline_b", nss, cfg.with_overrides(nss=nss, margin_mode="adaptive", attention=attention_b)))
    return [(p, n, c.validate()) for p, n, c in runs]


def cmd_ablate(cfg: RunConfig, out_dir) -> int:
    out = Path(out_dir)
    runs = ablation_runs(cfg)
    jobs = [(c, out / (p if p == "baseline" else f"{p}_{n}")) for p, n, c in runs]
    results = _run_many(jobs)
    failed = 0
    acc = {}
    rows = []
    for (pipe, nss, c), (res, err) in zip(runs, results):
        if err is not None:
            failed += 1
            log.error("ablation run %s/%s failed: %s", pipe, nss, err)
        acc[(pipe, nss)] = res
        rows.append(_summary_row(c, res))
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(rows, out / "summary.csv")

    def cell(res, key):
        return "nan" if res is None else io.fmt(res[key])

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pipeline", "metric", *ABLATION_MODES])
        for pipe in ("baseline", "pipeline_a", "pipeline_b"):
            for key in ("overall_acc", "mean_per_class_acc"):
                if pipe == "baseline":
                    vals = [cell(acc[("baseline", "none")], key)] * len(ABLATION_MODES)
                else:
                    vals = [cell(acc[(pipe, n)], key) for n in ABLATION_MODES]
                w.writerow([pipe, key, *vals])
    return EXIT_RUNTIME if failed else EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    for f in fields(RunConfig):
        key = FIELD_KEYS.get(f.name, f.name)
        if key in skip:
            continue
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        p.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def _collect_overrides(ns) -> dict:
    out = {}
    for k, v in vars(ns).items():
        if k.startswith("cfg_") and v is not None:
            out[k[4:]] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amtc3l", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the metrics JSON here instead of stdout")

    p = sub.add_parser("sweep", help="grid over lambda and negative selection")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lambdas", default=",".join(f"{x:g}" for x in DEFAULT_LAMBDAS))
    p.add_argument("--nss", dest="nss_list", default="ms,ns,mm")
    _add_config_flags(p, skip=("lambda", "nss"))

    p = sub.add_parser("ablate", help="baseline / fixed margin / adaptive margin grid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        if ns.command == "eval":
            return cmd_eval(ns.checkpoint, ns.data, ns.out)
        cfg = parse_config(ns.config, _collect_overrides(ns))
        if ns.command == "gen-data":
            return cmd_gen_data(cfg, ns.out)
        if ns.command == "train":
            return cmd_train(cfg, ns.out)
        if ns.command == "sweep":
            try:
                lambdas = [float(x) for x in ns.lambdas.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"--lambda: cannot parse {ns.lambdas!r}") from None
            modes = [x.strip() for x in ns.nss_list.split(",") if x.strip()]
            return cmd_sweep(cfg, lambdas, modes, ns.out)
        if ns.command == "ablate":
            return cmd_ablate(cfg, ns.out)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunFailure, io.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
