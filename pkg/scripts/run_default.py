#!/usr/bin/env python3
"""Run the default incremental-camera battery and print the summary tables.

Four methods, five seeds, three steps.  Takes a few minutes on a laptop
core.  Results land under --out (default ./runs_default) and the tables
printed at the end are regenerable later with `extendova report <out>`.
"""
import argparse
import statistics
import sys

from extendova.config import ExperimentConfig
from extendova.driver import collect_metrics, run_experiment


def fmt_pm(values):
    m = statistics.fmean(values)
    s = statistics.stdev(values) if len(values) > 1 else 0.0
    return f"{100 * m:5.2f} +- {100 * s:4.2f}"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs_default")
    ap.add_argument("--seeds", default=None,
                    help="comma list, default 0,1,2,3,4")
    args = ap.parse_args()

    cfg = ExperimentConfig()
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    cfg.validate()
    run_experiment(cfg, args.out)
    rows = collect_metrics(args.out, cfg)

    final = cfg.stream.num_steps

    def vals(method, metric, split, step):
        return [r.value for r in rows
                if r.method == method and r.metric == metric
                and r.split == split and r.step == step]

    print(f"\nfinal-step results, all cameras, {len(cfg.seeds)} seeds "
          "(mAP / rank-1, percent, mean +- stddev)")
    for m in cfg.methods:
        print(f"  {m:10s}  mAP {fmt_pm(vals(m, 'map', 'all', final))}   "
              f"R-1 {fmt_pm(vals(m, 'rank1', 'all', final))}")

    print("\nretention: mAP on the first step's test split per training step")
    for m in cfg.methods:
        pts = "  ".join(
            f"step{t} {100 * statistics.fmean(vals(m, 'map', 'step1', t)):.2f}"
            for t in range(1, final + 1))
        print(f"  {m:10s}  {pts}")

    print("\nidentification at the final step "
          "(class precision / recall, mean over seeds)")
    for m in cfg.methods:
        for stage in ("raw", "refined"):
            p = vals(m, f"ident_precision_{stage}", "train", final)
            r = vals(m, f"ident_recall_{stage}", "train", final)
            if p and r:
                print(f"  {m:10s} {stage:8s}  P {100 * statistics.fmean(p):.1f}"
                      f"  R {100 * statistics.fmean(r):.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
