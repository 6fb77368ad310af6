"""Command line entry point: ``dce gen | train | report``.

Configuration precedence: flags > ``--config`` JSON file > defaults.  Exit
codes: 0 success, 1 validation error, 2 runtime or data error; failures
print one ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import DataError, GenConfig, gen_config_dict, generate_synthetic, load_benchmark, write_benchmark
from .engine import METHODS, DceConfig, EngineError, run_method
from .metrics import accuracy_matrix_csv, dump_report
from .model import ModelError, TrainConfig, save_checkpoint
from .stats import save_repo

log = logging.getLogger("dce")

GEN_KEYS = {f.name for f in fields(GenConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RUN_KEYS = {"method", "alphas", "K", "cov_min_samples"}
PATH_KEYS = {"data", "out", "checkpoint", "csv"}
CONFIG_KEYS = GEN_KEYS | TRAIN_KEYS | RUN_KEYS | PATH_KEYS

REPORT_METRICS = ("A_bar", "A_B", "A_many", "A_med", "A_few")
REQUIRED_REPORT_KEYS = {"method", "seed", "stages", "cpd", *REPORT_METRICS}


class ValidationError(Exception):
    pass


class RuntimeDataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dce", description="Train and evaluate expert pools on streams of class-imbalanced feature domains.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate a synthetic imbalanced benchmark")
    gen.add_argument("--config")
    gen.add_argument("--out")
    gen.add_argument("--domains", dest="num_domains", type=int)
    gen.add_argument("--classes", dest="num_classes", type=int)
    gen.add_argument("--dim", dest="d", type=int)
    gen.add_argument("--rho", type=float)
    gen.add_argument("--n-max", dest="n_max", type=int)
    gen.add_argument("--test-per-class", dest="test_per_class", type=int)
    gen.add_argument("--noise", dest="noise_sigma", type=float)
    gen.add_argument("--drift", dest="drift_strength", type=float)
    gen.add_argument("--no-permute", dest="permute_frequencies", action="store_const", const=False)
    gen.add_argument("--thresholds", type=_ints)
    gen.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="run one method over a benchmark and write a report")
    train.add_argument("--config")
    train.add_argument("--data")
    train.add_argument("--method", choices=METHODS)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.add_argument("--alphas", type=_floats)
    train.add_argument("--K", "--k", dest="K", type=int)
    train.add_argument("--cov-min-samples", dest="cov_min_samples", type=int)
    train.add_argument("--lr0", "--lr", dest="lr0", type=float)
    train.add_argument("--momentum", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
    train.add_argument("--epochs-stage2", dest="epochs_stage2", type=int)
    train.add_argument("--selector-weighting", dest="selector_weighting", choices=("softmax", "raw"))
    train.add_argument("--checkpoint")
    train.add_argument("--csv", help="also write the per-(domain, class) accuracy/CPD table")

    report = sub.add_parser("report", help="aggregate run reports into a comparison table")
    report.add_argument("reports", nargs="+")
    report.add_argument("--format", choices=("text", "csv"), default="text")
    report.add_argument("--out")
    return parser


def _effective(args, allowed: set[str]) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = sorted(set(cfg) - CONFIG_KEYS)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in vars(args).items():
        if key in allowed and value is not None:
            cfg[key] = value
    return {k: v for k, v in cfg.items() if k in allowed}


def cmd_gen(args) -> int:
    cfg = _effective(args, GEN_KEYS | {"out"})
    out = cfg.pop("out", None)
    if not out:
        raise ValidationError("--out is required")
    if "thresholds" in cfg:
        cfg["thresholds"] = tuple(cfg["thresholds"])
    try:
        gen_cfg = GenConfig(**cfg)
        gen_cfg.validate()
    except (DataError, TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    stream = generate_synthetic(gen_cfg)
    try:
        write_benchmark(stream, out, extra={"generator": gen_config_dict(gen_cfg)})
    except OSError as exc:
        raise RuntimeDataError(f"cannot write benchmark: {exc}") from None
    print(f"wrote {len(stream)} domains to {out} (d={stream.d}, C={stream.num_classes})")
    for task in stream.tasks:
        counts = task.class_counts
        nz = counts[counts > 0]
        print(
            f"  {task.name}: train={len(task.train)} test={len(task.test)} "
            f"n_max={nz.max()} n_min={nz.min()} rho={nz.max() / nz.min():.2f}"
        )
    return 0


def _dce_config(cfg: dict) -> DceConfig:
    train_kw = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    run_kw = {k: cfg[k] for k in ("K", "cov_min_samples") if k in cfg}
    if "alphas" in cfg:
        run_kw["alphas"] = tuple(float(a) for a in cfg["alphas"])
    try:
        dce_cfg = DceConfig(train=TrainConfig(**train_kw), **run_kw)
        dce_cfg.validate()
    except (EngineError, ModelError, TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    return dce_cfg


def cmd_train(args) -> int:
    cfg = _effective(args, TRAIN_KEYS | RUN_KEYS | PATH_KEYS)
    for key in ("data", "out"):
        if not cfg.get(key):
            raise ValidationError(f"--{key} is required")
    method = cfg.get("method", "dce")
    if method not in METHODS:
        raise ValidationError(f"unknown method '{method}'")
    if cfg.get("checkpoint") and method != "dce":
        raise ValidationError("--checkpoint is only supported with --method dce")
    dce_cfg = _dce_config(cfg)
    try:
        stream = load_benchmark(cfg["data"])
        result = run_method(method, stream, dce_cfg)
    except (ValueError, OSError) as exc:
        raise RuntimeDataError(str(exc)) from None
    config_echo = {"method": method, "data": cfg["data"], **dce_cfg.as_dict()}
    report = result.report()
    report["config"] = config_echo
    try:
        Path(cfg["out"]).write_text(dump_report(report))
        if cfg.get("csv"):
            Path(cfg["csv"]).write_text(accuracy_matrix_csv(result.ledger))
        if cfg.get("checkpoint"):
            ckpt = Path(cfg["checkpoint"])
            ckpt.mkdir(parents=True, exist_ok=True)
            model = result.model
            save_checkpoint(ckpt / "model.json", model.expert_pool, model.selector)
            save_repo(model.repo, ckpt / "stats.json")
    except OSError as exc:
        raise RuntimeDataError(f"cannot write outputs: {exc}") from None
    log.info("%s: A_bar=%.4f A_B=%.4f", method, report["A_bar"], report["A_B"])
    return 0


def _load_reports(paths) -> list[dict]:
    reports = []
    for path in paths:
        try:
            with open(path) as fh:
                rep = json.load(fh)
        except FileNotFoundError:
            raise RuntimeDataError(f"report not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        missing = REQUIRED_REPORT_KEYS - set(rep) if isinstance(rep, dict) else REQUIRED_REPORT_KEYS
        if missing:
            raise ValidationError(f"{path}: report schema mismatch, missing {', '.join(sorted(missing))}")
        reports.append(rep)
    return reports


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize_reports(reports) -> list[dict]:
    """One row per method: run count and mean/std (population) of every metric."""
    rows = []
    for method in sorted({r["method"] for r in reports}):
        runs = [r for r in reports if r["method"] == method]
        row = {"method": method, "runs": len(runs)}
        for metric in REPORT_METRICS:
            row[metric] = _mean_std([r[metric] for r in runs])
        row["CPD_all"] = _mean_std([r["cpd"]["all"]["mean"] for r in runs])
        rows.append(row)
    return rows


def format_rows(rows, fmt: str) -> str:
    metrics = list(REPORT_METRICS) + ["CPD_all"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "runs"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for row in rows:
            cells = [row["method"], row["runs"]]
            for m in metrics:
                cells += ["" if v is None else repr(v) for v in row[m]]
            writer.writerow(cells)
        return buf.getvalue()
    header = ["method", "runs"] + metrics
    table = [header]
    for row in rows:
        cells = [row["method"], str(row["runs"])]
        for m in metrics:
            mean, std = row[m]
            cells.append("-" if mean is None else f"{100 * mean:.1f} ± {100 * std:.1f}")
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n" for r in table)


def cmd_report(args) -> int:
    reports = _load_reports(args.reports)
    text = format_rows(summarize_reports(reports), args.format)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise RuntimeDataError(f"cannot write {args.out}: {exc}") from None
    else:
        sys.stdout.write(text)
    return 0


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DIL_LOG", "quiet").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "report": cmd_report}


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except RuntimeDataError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
