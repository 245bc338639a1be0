"""Command line front end.

Three subcommands cover the usual loop:

    extendova generate --config cfg.json --out stream.json
    extendova train    --config cfg.json --out runs/exp1
    extendova report   runs/exp1 --format json

``train`` resumes automatically when the output directory already holds
checkpoints; ``--fresh`` wipes them first.  Exit codes: 0 on success, 2
for configuration problems (bad files, unknown keys, impossible stream
shapes), 3 when training aborts on a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys

from .config import ExperimentConfig, load_experiment_config
from .driver import collect_metrics, run_experiment
from .errors import ConfigError, NumericalFailure
from .metrics import format_metric_rows, read_metrics_csv
from .synthstream import generate_stream, save_stream

OUT_ROOT_ENV = "EXTENDOVA_OUT_ROOT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extendova",
        description="Camera-incremental identity learning on synthetic "
                    "streams.")
    parser.add_argument("-q", "--quiet", action="store_true",
                        help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a stream file")
    gen.add_argument("--config", required=True, help="experiment config JSON")
    gen.add_argument("--out", required=True, help="stream file to write")
    gen.add_argument("--seed", type=int, default=None,
                     help="override the stream seed from the config")

    tr = sub.add_parser("train", help="run every configured method and seed")
    tr.add_argument("--config", required=True, help="experiment config JSON")
    tr.add_argument("--out", default=None,
                    help="output directory (default: config output_dir, "
                         f"then ${OUT_ROOT_ENV})")
    tr.add_argument("--resume", default=None, metavar="DIR",
                    help="continue a previous run in DIR (same as --out DIR; "
                         "resuming is automatic when checkpoints exist)")
    tr.add_argument("--stream", default=None,
                    help="train on this stream file instead of generating")
    tr.add_argument("--stop-after-step", type=int, default=None,
                    help="halt each run after this step (resumable later)")
    tr.add_argument("--fresh", action="store_true",
                    help="ignore existing checkpoints and restart")

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("dir", help="output directory of a training run")
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _resolve_out_dir(args, cfg: ExperimentConfig) -> str:
    if args.out and args.resume and args.out != args.resume:
        raise ConfigError("--out and --resume point at different directories")
    out = args.out or args.resume or cfg.output_dir
    if out:
        return out
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return os.path.join(root, "default")
    raise ConfigError("no output directory: pass --out, set output_dir in "
                      f"the config, or export {OUT_ROOT_ENV}")


def cmd_generate(args) -> int:
    cfg = load_experiment_config(args.config)
    scfg = cfg.stream
    if args.seed is not None:
        import dataclasses
        scfg = dataclasses.replace(scfg, seed=args.seed)
    stream = generate_stream(scfg)
    save_stream(stream, args.out)
    for t in range(1, scfg.num_steps + 1):
        ds = stream.step(t)
        seen = sum(1 for s, _ in ds.overlap_truth.values() if s)
        print(f"step {t}: seen {seen} / unseen {ds.n_local_classes - seen} "
              f"classes, {ds.n_train()} train samples")
    n_train = sum(stream.step(t).n_train() for t in range(1, scfg.num_steps + 1))
    logging.getLogger("extendova").info(
        "wrote %s: %d steps, %d train samples", args.out, scfg.num_steps,
        n_train)
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    if args.stream:
        import dataclasses
        cfg = dataclasses.replace(cfg, stream_path=args.stream)
    out = _resolve_out_dir(args, cfg)
    run_experiment(cfg, out, resume=not args.fresh,
                   stop_after_step=args.stop_after_step)
    return 0


def _summarize(rows, final_step: int) -> dict:
    methods = sorted({r.method for r in rows})
    seeds = sorted({r.seed for r in rows})
    out = {"final_step": final_step, "seeds": seeds, "methods": {}}
    for m in methods:
        entry = {}
        for metric, split in (("map", "all"),
                              ("rank1", "all"),
                              ("map", f"step{final_step}"),
                              ("rank1", f"step{final_step}"),
                              ("map", "step1")):
            per_seed = {r.seed: r.value for r in rows
                        if r.method == m and r.metric == metric
                        and r.split == split and r.step == final_step}
            if not per_seed:
                continue
            key = f"{metric}_{split}_at_final"
            values = [per_seed[s] for s in sorted(per_seed)]
            entry[key] = {"mean": statistics.fmean(values),
                          "stddev": statistics.stdev(values)
                          if len(values) > 1 else 0.0,
                          "per_seed": {str(s): per_seed[s]
                                       for s in sorted(per_seed)}}
        curve = {}
        for r in rows:
            if r.method == m and r.metric == "map" and r.split == "step1":
                curve.setdefault(r.step, []).append(r.value)
        if len(curve) > 1:
            entry["step1_map_curve"] = {
                str(t): statistics.fmean(v) for t, v in sorted(curve.items())}
        first = {r.seed: r.value for r in rows
                 if r.method == m and r.metric == "map"
                 and r.split == "step1" and r.step == 1}
        if first and "map_step1_at_final" in entry:
            drops = {s: first[s] - entry["map_step1_at_final"]["per_seed"][str(s)]
                     for s in sorted(first)
                     if str(s) in entry["map_step1_at_final"]["per_seed"]}
            if drops:
                entry["step1_map_drop"] = {
                    "mean": statistics.fmean(drops.values()),
                    "per_seed": {str(s): v for s, v in drops.items()}}
        for ident in ("ident_precision_raw", "ident_recall_raw",
                      "ident_precision_refined", "ident_recall_refined"):
            vals = [r.value for r in rows if r.method == m
                    and r.metric == ident]
            if vals:
                entry[ident + "_mean"] = statistics.fmean(vals)
        out["methods"][m] = entry
    return out


def cmd_report(args) -> int:
    path = os.path.join(args.dir, "metrics.csv")
    if os.path.exists(path):
        rows = read_metrics_csv(path)
    else:
        cfg_path = os.path.join(args.dir, "config.json")
        if not os.path.exists(cfg_path):
            raise ConfigError(f"{args.dir} has neither metrics.csv nor "
                              "config.json")
        rows = collect_metrics(args.dir, load_experiment_config(cfg_path))
    if not rows:
        raise ConfigError(f"no metric rows found under {args.dir}")
    if args.format == "csv":
        sys.stdout.write(format_metric_rows(rows))
    else:
        final_step = max(r.step for r in rows)
        json.dump(_summarize(rows, final_step), sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "train":
            return cmd_train(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
