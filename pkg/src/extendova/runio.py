"""Run directory layout, checkpoints, and event logs.

A run directory holds one (method, seed) trajectory:

    <out>/runs/<method>/seed<k>/
        checkpoint_step<t>.json   full state after step t
        events.jsonl              one JSON object per training event
        metrics.csv               metric rows for completed steps
        scores_step<t>.json       detection scores for histogram analysis

Checkpoints are JSON with floats encoded by ``repr``, which round-trips
float64 exactly, so save/load/save is byte-stable.
"""

from __future__ import annotations

import json
import os

from .errors import ConfigError
from .metrics import MetricRow, read_metrics_csv, write_metrics_csv

CHECKPOINT_VERSION = 1


def run_dir(out_root: str, method: str, seed: int) -> str:
    return os.path.join(out_root, "runs", method, f"seed{seed}")


def checkpoint_path(rdir: str, step: int) -> str:
    return os.path.join(rdir, f"checkpoint_step{step}.json")


def save_checkpoint(rdir: str, step: int, payload: dict) -> None:
    payload = dict(payload)
    payload["format"] = "checkpoint"
    payload["version"] = CHECKPOINT_VERSION
    payload["step"] = step
    tmp = checkpoint_path(rdir, step) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    os.replace(tmp, checkpoint_path(rdir, step))


def load_checkpoint(rdir: str, step: int) -> dict:
    path = checkpoint_path(rdir, step)
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != "checkpoint" or d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path} is not a readable checkpoint")
    if d.get("step") != step:
        raise ConfigError(f"{path} claims step {d.get('step')}, expected {step}")
    return d


def last_completed_step(rdir: str, max_steps: int) -> int:
    """Highest step with a checkpoint on disk, scanning from the top."""
    for t in range(max_steps, 0, -1):
        if os.path.exists(checkpoint_path(rdir, t)):
            return t
    return 0


class EventLog:
    """Append-only JSON lines, pruned to completed steps on resume."""

    def __init__(self, rdir: str, keep_through_step: int | None = None):
        self.path = os.path.join(rdir, "events.jsonl")
        if keep_through_step is not None and os.path.exists(self.path):
            kept = []
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    if rec.get("step", 0) <= keep_through_step:
                        kept.append(line)
            with open(self.path, "w") as fh:
                for line in kept:
                    fh.write(line + "\n")

    def emit(self, **record) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_run_metrics(rdir: str, through_step: int) -> list:
    """Metric rows for already-completed steps, from the per-run CSV."""
    path = os.path.join(rdir, "metrics.csv")
    if not os.path.exists(path):
        return []
    return [r for r in read_metrics_csv(path) if r.step <= through_step]


def save_run_metrics(rdir: str, rows: list) -> None:
    write_metrics_csv(rows, os.path.join(rdir, "metrics.csv"))


def save_scores(rdir: str, step: int, payload: dict) -> None:
    with open(os.path.join(rdir, f"scores_step{step}.json"), "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_scores(rdir: str, step: int) -> dict:
    with open(os.path.join(rdir, f"scores_step{step}.json")) as fh:
        return json.load(fh)
