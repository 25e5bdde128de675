"""Command-line entry point: ``oslo-lab <subcommand> [--config c.toml] [--seed n] [--out dir] [--jobs n]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .config import BASELINES, ConfigError, ExperimentConfig, load_config, parse_config
from .pipeline import PipelineError, run_pipeline
from .svg import line_chart

REPORT_FPR_CAPS = (0.001, 0.01)


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", default=d, help="override the output directory")
    p.add_argument("--jobs", type=int, default=d, help="worker processes for per-sample work (OSLO_LAB_JOBS wins)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oslo-lab", description="One-shot label-only membership inference lab")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _common(p, suppress=True)
        return p

    add("gen-data", "generate the dataset and split")
    add("train", "train target, source and validation models")
    atk = add("attack", "run an attack")
    atk_sub = atk.add_subparsers(dest="attack", required=True, metavar="ATTACK")
    o = atk_sub.add_parser("oslo", help="OSLO tau sweep on the evaluation panel")
    _common(o, suppress=True)
    b = atk_sub.add_parser("baseline", help="one label-only baseline")
    _common(b, suppress=True)
    b.add_argument("name", choices=BASELINES)
    add("defend", "train defended targets and attack each")
    add("evaluate", "print TPR at 0.1%% and 1%% FPR for a finished run")
    sw = add("sweep-tau", "OSLO sweep with an explicit tau list")
    sw.add_argument("--taus", required=True, help="comma-separated, strictly decreasing")
    add("analyze", "matched-fraction, ablation, stopping-rule and multi-shot analyses")
    add("report", "comparison tables at fixed FPR caps plus plot-ready CSV")
    add("run", "all configured stages")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("pipeline.jobs", "jobs must be >= 1")
        cfg = replace(cfg, pipeline=replace(cfg.pipeline, jobs=args.jobs))
    return cfg


def _load_summary(out: Path) -> dict:
    p = out / "summary.json"
    if not p.exists():
        raise FileNotFoundError(f"{p} not found; run the pipeline first")
    return json.loads(p.read_text())


def _fmt(v) -> str:
    return "null" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)


def evaluate_table(summary: dict) -> str:
    lines = [f"{'attack':<18} {'TPR@0.1%FPR':>12} {'TPR@1%FPR':>10} {'queries':>9}"]
    for name, m in sorted(summary["metrics"].items()):
        lines.append(f"{name:<18} {_fmt(m['tpr_at_fpr_0001']):>12} {_fmt(m['tpr_at_fpr_001']):>10} "
                     f"{_fmt(m['queries']):>9}")
    return "\n".join(lines)


def _read_curve(path: Path) -> List[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["fpr"]), float(r["tpr"])) for r in rows if r["fpr"] != "null" and r["tpr"] != "null"]


def write_report(out: Path) -> str:
    """Markdown table at fixed FPR caps plus ``report/roc_points.csv`` (attack, fpr, tpr)."""
    summary = _load_summary(out)
    caps = " | ".join(f"TPR@{c * 100:g}%FPR" for c in REPORT_FPR_CAPS)
    lines = ["# Attack comparison", "", f"| attack | {caps} | max precision (recall >= 1%) | queries |",
             "|---|" + "---|" * (len(REPORT_FPR_CAPS) + 2)]
    for name, m in sorted(summary["metrics"].items()):
        lines.append(f"| {name} | {_fmt(m['tpr_at_fpr_0001'])} | {_fmt(m['tpr_at_fpr_001'])} | "
                     f"{_fmt(m['max_precision_recall_ge_001'])} | {_fmt(m['queries'])} |")
    curves = {}
    if (out / "oslo" / "curve.csv").exists():
        curves["oslo"] = _read_curve(out / "oslo" / "curve.csv")
    for p in sorted((out / "baselines").glob("*_roc.csv")) if (out / "baselines").exists() else []:
        curves[p.name[:-len("_roc.csv")]] = _read_curve(p)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "fpr", "tpr"])
    for name, pts in curves.items():
        for f, t in sorted(pts):
            w.writerow([name, repr(f), repr(t)])
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    (rep / "roc_points.csv").write_text(buf.getvalue())
    series = {k: ([p[0] for p in sorted(v)], [p[1] for p in sorted(v)]) for k, v in curves.items()}
    (rep / "roc.svg").write_text(line_chart(series, "Attack comparison", "FPR", "TPR"))
    text = "\n".join(lines) + "\n"
    (rep / "report.md").write_text(text)
    return text


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "sweep-tau":
            try:
                taus = [float(t) for t in args.taus.split(",") if t.strip()]
            except ValueError:
                raise ConfigError("attack.taus", f"not a list of numbers: {args.taus!r}") from None
            section = replace(cfg.attack, taus=taus)
            try:
                section.check()
            except ValueError as e:
                raise ConfigError("attack.taus", str(e)) from None
            cfg = replace(cfg, attack=section)
    except FileNotFoundError as e:
        print(f"error: config file not found: {e.filename}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    out = Path(cfg.out)
    stages = {
        "gen-data": ["data"],
        "train": ["data", "train"],
        "defend": ["defend"],
        "sweep-tau": ["attack"],
        "analyze": ["analysis"],
        "run": None,
    }
    try:
        if args.command == "attack":
            if args.attack == "oslo":
                run_pipeline(cfg, ["attack"])
            else:
                if args.name == "global-threshold":
                    run_pipeline(cfg, ["attack", "baselines:global-threshold"])
                else:
                    run_pipeline(cfg, [f"baselines:{args.name}"])
        elif args.command == "evaluate":
            print(evaluate_table(_load_summary(out)))
            return 0
        elif args.command == "report":
            print(write_report(out), end="")
            return 0
        else:
            run_pipeline(cfg, stages[args.command])
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.command in ("run", "sweep-tau") or args.command == "attack":
        s = out / "summary.json"
        if s.exists():
            print(evaluate_table(json.loads(s.read_text())))
    return 0


if __name__ == "__main__":
    sys.exit(main())
