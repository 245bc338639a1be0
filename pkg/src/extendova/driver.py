"""Run orchestration: streams, methods, seeds, checkpoints, metrics.

A (method, seed) run lives in ``<out>/runs/<method>/seed<k>/`` and leaves
behind a checkpoint per completed step, an append-only event log, the
per-run metrics CSV, and per-step score dumps.  Everything an interrupted
run needs is reconstructed from the last checkpoint, and because the rng
streams are keyed by (seed, step) the resumed run is indistinguishable
from an uninterrupted one, down to the bytes of the metrics CSV.
"""

from __future__ import annotations

import copy
import glob
import json
import logging
import os
import time
from dataclasses import asdict, replace

import numpy as np

from . import pipeline as P
from .config import ExperimentConfig, save_experiment_config
from .errors import ConfigError
from .metrics import MetricRow, evaluate_retrieval, identification_metrics
from .numerics import Rng
from .runio import (EventLog, last_completed_step, load_checkpoint,
                    load_run_metrics, run_dir, save_checkpoint,
                    save_run_metrics, save_scores)
from .synthstream import Stream, generate_stream, load_stream

log = logging.getLogger("extendova")

__all__ = ["stream_for_seed", "run_method_seed", "run_experiment",
           "collect_metrics", "final_map_by_method", "relabel_accuracy_probe",
           "WarmstartCache"]


def stream_for_seed(cfg: ExperimentConfig, seed: int) -> Stream:
    """The data a given training seed runs on.

    With an explicit stream file every seed shares that exact data and
    only the training randomness varies.  Without one, each seed gets its
    own independently drawn stream, so seed-to-seed agreement also covers
    data variation.
    """
    if cfg.stream_path:
        return load_stream(cfg.stream_path)
    derived = replace(cfg.stream, seed=cfg.stream.seed + 10007 * seed)
    return generate_stream(derived)


def _reset_run_dir(rdir: str) -> None:
    for pattern in ("checkpoint_step*.json", "scores_step*.json",
                    "events.jsonl", "metrics.csv"):
        for path in glob.glob(os.path.join(rdir, pattern)):
            os.remove(path)


def _warmstart_fingerprint(stream: Stream, plan, mcfg, seed: int) -> str:
    """Identity of a first-step training run, as the warm start sees it.

    Detector settings are dropped from the plan part: rejection heads are
    fitted after the shared loop, so per-method detector overrides must
    not defeat sharing.
    """
    plan_d = asdict(plan)
    plan_d.pop("detector", None)
    return json.dumps([seed, asdict(stream.config), plan_d, asdict(mcfg)],
                      sort_keys=True)


class WarmstartCache:
    """Shares the method-blind first-step training across methods.

    ``run_experiment`` walks methods inside seeds and every method starts
    from the same bytes, so retraining the warm start per method buys
    nothing but wall time.  ``core`` returns a private deep copy plus a
    replay of the recorded epoch losses into the caller's log.
    """

    def __init__(self):
        self._store: dict[str, tuple] = {}

    def core(self, stream: Stream, plan, mcfg, seed: int,
             log: P.StepLog | None = None) -> P.RunState:
        key = _warmstart_fingerprint(stream, plan, mcfg, seed)
        hit = self._store.get(key)
        if hit is None:
            slog = P.StepLog()
            state = P.warmstart_core(stream.step(1), plan, mcfg, seed,
                                     Rng(seed).split("warmstart"), log=slog)
            hit = (state, slog.losses_per_epoch)
            self._store[key] = hit
        state, entries = hit
        if log is not None:
            log.losses_per_epoch.extend(copy.deepcopy(entries))
        return copy.deepcopy(state)


def _retrieval_rows(stream: Stream, state: P.RunState, t: int,
                    seed: int) -> list:
    """mAP and rank-1 of the consumer encoder on every test split so far.

    Besides the per-step splits there is a pooled ``all`` split: every test
    identity from steps 1..t in one retrieval problem, so old identities
    must survive among current-step distractors and vice versa.  Splits are
    the same size, which keeps the pool balanced between retention and
    adaptation.
    """
    enc = state.eval_encoder()
    rows = []
    pooled = []
    for j in range(1, t + 1):
        ds = stream.step(j)
        feats = enc.encode_np(ds.test_x)
        pooled.append((feats, ds.test_global, ds.test_camera))
        res = evaluate_retrieval(feats, ds.test_global, ds.test_camera,
                                 feats, ds.test_global, ds.test_camera)
        split = f"step{j}"
        rows.append(MetricRow(method=state.method, step=t, split=split,
                              metric="map", value=res.map, seed=seed))
        rows.append(MetricRow(method=state.method, step=t, split=split,
                              metric="rank1", value=res.rank1, seed=seed))
    if t > 1:
        feats = np.concatenate([p[0] for p in pooled])
        gids = np.concatenate([p[1] for p in pooled])
        cams = np.concatenate([p[2] for p in pooled])
        res = evaluate_retrieval(feats, gids, cams, feats, gids, cams)
    # at step 1 the pool IS the single split; res already holds it
    rows.append(MetricRow(method=state.method, step=t, split="all",
                          metric="map", value=res.map, seed=seed))
    rows.append(MetricRow(method=state.method, step=t, split="all",
                          metric="rank1", value=res.rank1, seed=seed))
    return rows


def _ident_rows(report, stage: str, method: str, t: int, seed: int) -> list:
    rows = []
    for name, value in (("precision", report.precision),
                        ("recall", report.recall),
                        ("accuracy", report.accuracy)):
        if value is not None:
            rows.append(MetricRow(method=method, step=t, split="train",
                                  metric=f"ident_{name}_{stage}",
                                  value=value, seed=seed))
    return rows


def _step_rows(stream: Stream, state: P.RunState, steplog: P.StepLog,
               t: int, seed: int) -> list:
    rows = _retrieval_rows(stream, state, t, seed)
    ds = stream.step(t)
    gid_map = state.class_gid if state.method == "baseline" else state.proto_gid
    for stage, ident in (("raw", steplog.ident_raw),
                         ("refined", steplog.ident_refined)):
        if ident is None:
            continue
        report = identification_metrics(ident["seen"], ident["assigned"],
                                        ds.overlap_truth, gid_map)
        rows.extend(_ident_rows(report, stage, state.method, t, seed))
    n_classes = (state.classifier.n_classes if state.method == "baseline"
                 else int(state.bank.active_ids().size))
    rows.append(MetricRow(method=state.method, step=t, split="bank",
                          metric="n_classes", value=float(n_classes),
                          seed=seed))
    return rows


def _scores_payload(ds, steplog: P.StepLog) -> dict | None:
    if not steplog.scores:
        return None
    truth_seen = [bool(ds.overlap_truth[int(c)][0]) for c in ds.train_class]
    payload = {"class": [int(c) for c in ds.train_class],
               "truth_seen": truth_seen}
    for key, values in steplog.scores.items():
        payload[key] = [float(v) for v in values]
    return payload


def _emit_step_events(events: EventLog, state: P.RunState,
                      steplog: P.StepLog, pls, t: int, elapsed: float) -> None:
    for entry in steplog.losses_per_epoch:
        events.emit(kind="epoch", method=state.method, seed=state.seed,
                    **entry)
    summary = {"kind": "step_done", "method": state.method,
               "seed": state.seed, "step": t,
               "elapsed_sec": round(elapsed, 3)}
    if pls is not None:
        summary.update(n_seen=len(pls.seen), n_new=len(pls.new_order),
                       n_flips=len(pls.refine_flips),
                       n_removed=len(pls.removed_protos))
    events.emit(**summary)


def run_method_seed(stream: Stream, cfg: ExperimentConfig, method: str,
                    seed: int, out_root: str, resume: bool = True,
                    stop_after_step: int | None = None,
                    detector_override=None,
                    warmstart: WarmstartCache | None = None) -> list:
    """Walk the stream with one method and seed; returns all metric rows.

    Picks up after the last checkpointed step when ``resume`` is set and
    checkpoints exist, otherwise starts clean.  ``stop_after_step``
    leaves a resumable run behind (used to exercise interruption).
    """
    nsteps = stream.config.num_steps
    target = min(stop_after_step or nsteps, nsteps)
    rdir = run_dir(out_root, method, seed)
    os.makedirs(rdir, exist_ok=True)
    plan = cfg.plan_for(method)
    d_in = stream.step(1).train_x.shape[1]

    last = last_completed_step(rdir, nsteps) if resume else 0
    last = min(last, target)
    if last == 0:
        _reset_run_dir(rdir)
        rows, state = [], None
        events = EventLog(rdir)
    else:
        payload = load_checkpoint(rdir, last)
        state = P.state_from_dict(payload["state"], cfg.model, d_in)
        rows = load_run_metrics(rdir, last)
        events = EventLog(rdir, keep_through_step=last)

    for t in range(last + 1, target + 1):
        t0 = time.time()
        steplog = P.StepLog()
        if t == 1:
            # the warm start precedes method divergence, so it always
            # follows the base plan; per-method overrides only shape the
            # incremental steps (and the detector fit below)
            if warmstart is not None:
                core = warmstart.core(stream, cfg.plan, cfg.model, seed,
                                      log=steplog)
            else:
                core = P.warmstart_core(stream.step(1), cfg.plan, cfg.model,
                                        seed, Rng(seed).split("warmstart"),
                                        log=steplog)
            state = P.train_initial_step(
                stream.step(1), plan, cfg.model, method, seed,
                Rng(seed).split("warmstart"), log=steplog, core=core)
            pls = None
        else:
            pls = P.run_step(stream, t, state, plan,
                             Rng(seed).split("run", method, "step", t),
                             detector_override=detector_override, log=steplog)
        rows.extend(_step_rows(stream, state, steplog, t, seed))
        payload = _scores_payload(stream.step(t), steplog)
        if payload is not None:
            save_scores(rdir, t, payload)
        _emit_step_events(events, state, steplog, pls, t, time.time() - t0)
        save_run_metrics(rdir, rows)
        save_checkpoint(rdir, t, {"state": P.state_to_dict(state),
                                  "d_in": d_in})
        final = next((r.value for r in reversed(rows)
                      if r.step == t and r.split == f"step{t}"
                      and r.metric == "map"), float("nan"))
        log.info("%s seed=%d step %d/%d map=%.4f (%.1fs)",
                 method, seed, t, nsteps, final, time.time() - t0)
    return rows


def run_experiment(cfg: ExperimentConfig, out_root: str | None = None,
                   resume: bool = True,
                   stop_after_step: int | None = None) -> list:
    """All (method, seed) runs of an experiment plus the aggregate CSV."""
    out_root = out_root or cfg.output_dir
    if not out_root:
        raise ConfigError("no output directory configured")
    os.makedirs(out_root, exist_ok=True)
    save_experiment_config(cfg, os.path.join(out_root, "config.json"))

    all_rows = []
    warmstart = WarmstartCache()
    for seed in cfg.seeds:
        stream = stream_for_seed(cfg, seed)
        for method in cfg.methods:
            all_rows.extend(run_method_seed(
                stream, cfg, method, seed, out_root, resume=resume,
                stop_after_step=stop_after_step, warmstart=warmstart))
    from .metrics import write_metrics_csv
    write_metrics_csv(all_rows, os.path.join(out_root, "metrics.csv"))
    return all_rows


def collect_metrics(out_root: str, cfg: ExperimentConfig) -> list:
    """Re-read every per-run CSV under ``out_root`` (completed or not)."""
    rows = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            rdir = run_dir(out_root, method, seed)
            rows.extend(load_run_metrics(rdir, cfg.stream.num_steps))
    return rows


def final_map_by_method(rows, step: int) -> dict:
    """{(method, seed): final-step all-camera mAP} from aggregate rows."""
    out = {}
    for r in rows:
        if r.step == step and r.split == "all" and r.metric == "map":
            out[(r.method, r.seed)] = r.value
    return out


def relabel_accuracy_probe(cfg: ExperimentConfig, seed: int, aux_on: bool,
                           warmstart: WarmstartCache | None = None) -> float:
    """Seen-class relabelling quality at the refinement point of the first
    extension step: recall times election accuracy, i.e. the fraction of
    truly repeated classes that carry their correct earlier identity when
    the early window closes.

    ``aux_on`` toggles the old-class pull and nothing else; the warm start
    and the step's rng stream are the same either way, so a pair of calls
    isolates that one term.  The run stops right after relabelling.
    """
    stream = stream_for_seed(cfg, seed)
    plan = cfg.plan_for("extendova")
    if not aux_on:
        plan = replace(plan, weights=replace(plan.weights, aux=0.0))
    if warmstart is not None:
        core = warmstart.core(stream, cfg.plan, cfg.model, seed)
    else:
        core = P.warmstart_core(stream.step(1), cfg.plan, cfg.model, seed,
                                Rng(seed).split("warmstart"))
    state = P.train_initial_step(stream.step(1), cfg.plan_for("extendova"),
                                 cfg.model, "extendova", seed,
                                 Rng(seed).split("warmstart"), core=core)
    ds = stream.step(2)
    slog = P.StepLog()
    P.run_incremental_step(ds, state, plan,
                           Rng(seed).split("run", "extendova", "step", 2),
                           log=slog, stop_after_refine=True)
    rep = identification_metrics(slog.ident_refined["seen"],
                                 slog.ident_refined["assigned"],
                                 ds.overlap_truth, state.proto_gid)
    return (rep.recall or 0.0) * (rep.accuracy or 0.0)
