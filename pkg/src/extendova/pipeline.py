"""Training recipes for the incremental camera stream.

One (method, seed) run walks the stream step by step.  Step 1 is fully
annotated within itself; from step 2 on the methods differ in how they
deal with label-space overlap:

  extendova  decide per sample whether its class was seen before using
             per-class rejection heads, elect the old identity of fully
             flagged classes by majority vote, create prototypes only
             for the rest, pull provisionally-new samples toward old
             classes during the first epochs, then repeat the detection
             once the representation has settled and withdraw prototypes
             that turned out to be duplicates.  Old prototypes stay
             frozen for the whole step, distillation against synthesized
             old-class features preserves cross-camera geometry, and an
             EMA twin of the encoder is what downstream consumers see.
  baseline   classify each sample with the previous parametric
             classifier and accept the argmax when the softmax
             confidence clears a threshold; classes with any rejected
             sample get a fresh column.  Old-logit distillation tempers
             forgetting.
  finetune   every arriving class is new; no transfer machinery at all.
  lwf        finetune plus old-logit distillation over the frozen old
             prototypes.
  joint      oracle upper bound: retrains on all data so far with true
             identities (the one method allowed to read the class-level
             truth table).

RNG streams are derived per (seed, step) plus method-specific tags, so a
run resumed from a step checkpoint reproduces the uninterrupted run bit
for bit.  No training path reads per-sample ground truth except the
joint oracle; the ``*_gid`` maps kept on the run state exist only so the
evaluation stage can score decisions after the fact.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .config import ModelConfig, StepPlan
from .errors import InvariantViolation, StateError
from .model import (BaselineClassifier, Encoder, MemoryBank, ModelPair,
                    OvaDetector, ema_update, nearest_prototype)
from .numerics import Adam, Rng, Tensor
from .numerics import tensor as TT
from .synthstream import StepDataset, Stream, pk_sample_indices

__all__ = [
    "RunState",
    "PseudoLabels",
    "StepLog",
    "warmstart_core",
    "train_initial_step",
    "identify_seen_samples",
    "assign_pseudo_labels",
    "generate_pseudo_labels",
    "refine_pseudo_labels",
    "sample_surrogates",
    "run_incremental_step",
    "run_finetune_step",
    "run_baseline_step",
    "run_joint_step",
    "run_step",
    "state_to_dict",
    "state_from_dict",
]


@dataclass
class RunState:
    """Everything one method carries from step to step."""

    method: str
    seed: int
    mcfg: ModelConfig
    pair: ModelPair
    bank: MemoryBank
    detector: OvaDetector | None = None
    classifier: BaselineClassifier | None = None
    proto_gid: dict = field(default_factory=dict)   # prototype -> identity, eval only
    class_gid: dict = field(default_factory=dict)   # classifier col -> identity, eval only
    gid_proto: dict = field(default_factory=dict)   # joint oracle: identity -> prototype
    step: int = 0
    n_old_mark: int = 0   # class-id watermark at the start of the running step

    def eval_encoder(self) -> Encoder:
        """The encoder downstream consumers see for this method."""
        return self.pair.ema if self.method == "extendova" else self.pair.online

    def old_model(self) -> Encoder:
        """Frozen copy of the consumer encoder, for distillation targets."""
        return self.eval_encoder().copy()


@dataclass
class PseudoLabels:
    """Outcome of the labelling stage of one incremental step."""

    n_old: int
    seen: set                 # step classes declared previously seen
    assigned: dict            # step class -> global pseudo id
    votes: dict               # step class -> winning vote count (seen only)
    sample_labels: np.ndarray
    sample_flags: np.ndarray
    sample_votes: np.ndarray
    new_order: list = field(default_factory=list)   # unseen classes, id order
    refine_flips: list = field(default_factory=list)
    removed_protos: list = field(default_factory=list)


@dataclass
class StepLog:
    """Optional sink for per-step diagnostics the driver wants to keep."""

    losses_per_epoch: list = field(default_factory=list)
    ident_raw: dict | None = None
    ident_refined: dict | None = None
    scores: dict = field(default_factory=dict)


# --- shared helpers -----------------------------------------------------


def _class_means(features: np.ndarray, per_class, classes=None) -> np.ndarray:
    classes = range(len(per_class)) if classes is None else classes
    rows = []
    for c in classes:
        idx = per_class[int(c)]
        if idx.size == 0:
            raise InvariantViolation(f"class {int(c)} has no samples")
        rows.append(features[idx].mean(axis=0))
    return np.stack(rows)


def _update_prototypes(bank: MemoryBank, feats: np.ndarray,
                       labels: np.ndarray, momentum: float,
                       frozen_below: int = 0) -> None:
    """Moving-average update of the prototypes present in a batch; ids
    below ``frozen_below`` are left untouched."""
    for c in np.unique(labels):
        c = int(c)
        if c < frozen_below or not bank.active[c]:
            continue
        bank.update(c, feats[labels == c].mean(axis=0), momentum)


def _batch_iters(n_samples: int, batch: int) -> int:
    return max(1, math.ceil(n_samples / batch))


def _epoch_entry(step, epoch, phase, counters, iters):
    return {"step": step, "epoch": epoch, "phase": phase,
            **{k: v / iters for k, v in sorted(counters.items())}}


def _ce_rows(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    return TT.mean_all(TT.take_per_row(log_probs, targets)) * -1.0


# --- step 1 -------------------------------------------------------------


def warmstart_core(ds: StepDataset, plan: StepPlan, mcfg: ModelConfig,
                   seed: int, rng: Rng, log: StepLog | None = None) -> RunState:
    """Method-blind part of the supervised warm start.

    Prototypes fit jointly with the encoder; the shadow copy is tracked
    unconditionally so the trajectory never depends on who consumes the
    result.  Callers that run several methods over one seed can train
    this once and hand deep copies to ``train_initial_step``.
    """
    if ds.index != 1:
        raise StateError("the warm start expects the first stream step")
    enc = Encoder(ds.train_x.shape[1], mcfg, rng.split("init"))
    pair = ModelPair(enc)
    bank = MemoryBank(mcfg.feature_dim)
    bank.set_step(1)
    state = RunState(method="", seed=seed, mcfg=mcfg, pair=pair, bank=bank)

    labels = ds.train_class
    per_class = ds.class_indices()
    means = _class_means(enc.encode_np(ds.train_x), per_class)
    bank.extend(means, origin=MemoryBank.ORIGIN_INITIAL)
    for c in range(ds.n_local_classes):
        gid = ds.overlap_truth[c][1]
        state.proto_gid[c] = gid
        state.gid_proto[gid] = c

    opt = Adam([(p, plan.lr) for p in enc.params()])

    iters = _batch_iters(ds.n_train(), plan.p * plan.k)
    srng = rng.split("epochs")
    for epoch in range(1, plan.epochs + 1):
        erng = srng.split(epoch)
        counters = Counter()
        for it in range(iters):
            idx = pk_sample_indices(per_class, plan.p, plan.k,
                                    erng.split("batch", it))
            x, y = ds.train_x[idx], labels[idx]
            f = enc.forward_graph(x)
            id_loss = L.prototype_id_loss(f, y, bank, mcfg.temperature)
            trip, _ = L.triplet_loss(f, y, plan.weights.triplet_margin)
            (id_loss + trip).backward()
            opt.step()
            pf = (pair.ema.encode_np(x)
                  if mcfg.prototype_update_source == "ema" else f.data)
            _update_prototypes(bank, pf, y, mcfg.prototype_momentum)
            ema_update(pair, mcfg.ema_alpha)
            counters.update({"id": id_loss.item(), "triplet": trip.item()})
        if log is not None:
            log.losses_per_epoch.append(
                _epoch_entry(1, epoch, "train", counters, iters))

    state.step = 1
    state.n_old_mark = len(bank)
    return state


def train_initial_step(ds: StepDataset, plan: StepPlan, mcfg: ModelConfig,
                       method: str, seed: int, rng: Rng,
                       log: StepLog | None = None,
                       core: RunState | None = None) -> RunState:
    """Fully supervised warm start on the first camera group.

    One recipe for every method: class prototypes fit jointly with the
    encoder.  Method-specific extras appear only after training, on
    frozen weights: rejection heads for the detection pipeline, the
    imprinted parametric head for the threshold baseline.  All methods
    sharing the recipe and the rng stream produce bitwise-identical
    step-1 encoders, which keeps later comparisons about the incremental
    machinery only.

    ``core`` accepts a precomputed ``warmstart_core`` result (ownership
    transfers; pass a copy if it is reused).  When it is given the loop
    is skipped and nothing is appended to ``log``.
    """
    if core is None:
        core = warmstart_core(ds, plan, mcfg, seed, rng, log=log)
    state = core
    state.method = method
    if method != "extendova":
        ema_update(state.pair, 0.0)
    if method == "baseline":
        # every method leaves the warm start with literally the same
        # encoder; the threshold method's parametric head is imprinted
        # from the final prototypes and only diverges from step 2 on
        clf = BaselineClassifier(mcfg.feature_dim,
                                 scale=1.0 / mcfg.temperature)
        clf.extend(state.bank.weights)
        state.classifier = clf
        state.class_gid = dict(state.proto_gid)
    if method == "extendova":
        det = OvaDetector(mcfg.feature_dim)
        _train_detector_heads(det, state.pair.ema.encode_np(ds.train_x),
                              ds.train_class,
                              np.arange(ds.n_local_classes), step=1,
                              plan=plan, rng=rng.split("detector"))
        state.detector = det
    state.bank.check_invariants()
    return state


def _train_detector_heads(det: OvaDetector, feats: np.ndarray,
                          labels: np.ndarray, train_classes: np.ndarray,
                          step: int, plan: StepPlan, rng: Rng) -> None:
    """Fit rejection heads for ``train_classes`` on frozen features.

    Samples of classes outside the set act as pure negatives.  Heads that
    already exist are never touched; a bitwise snapshot enforces that.
    The detector can end up with untrained heads at ids whose prototypes
    were withdrawn mid-step, which is harmless because nothing queries an
    inactive class.
    """
    train_classes = np.asarray(sorted(int(c) for c in train_classes),
                               dtype=np.intp)
    if train_classes.size == 0:
        return
    train_set = set(train_classes.tolist())
    frozen_ids = np.asarray([i for i in range(len(det)) if i not in train_set],
                            dtype=np.intp)
    before = det.snapshot(frozen_ids)
    det.extend(int(train_classes.max()) + 1 - len(det), step, rng.split("init"))

    col_of = {int(c): j for j, c in enumerate(train_classes)}
    labels_col = np.asarray([col_of.get(int(y), -1) for y in labels],
                            dtype=np.intp)
    heads = {
        "pos_w": Tensor(det.pos_w[train_classes], requires_grad=True),
        "pos_b": Tensor(det.pos_b[train_classes], requires_grad=True),
        "neg_w": Tensor(det.neg_w[train_classes], requires_grad=True),
        "neg_b": Tensor(det.neg_b[train_classes], requires_grad=True),
    }
    opt = Adam([(t, plan.detector.lr) for t in heads.values()])
    n = feats.shape[0]
    batch = plan.detector.batch or n
    brng = rng.split("batches")
    for it in range(plan.detector.iters):
        idx = (np.arange(n) if batch >= n
               else brng.split(it).choice(n, size=batch, replace=False))
        L.ova_loss(feats[idx], heads, labels_col[idx]).backward()
        opt.step()

    det.pos_w[train_classes] = heads["pos_w"].data
    det.pos_b[train_classes] = heads["pos_b"].data
    det.neg_w[train_classes] = heads["neg_w"].data
    det.neg_b[train_classes] = heads["neg_b"].data
    for c in train_classes:
        det.trained[int(c)] = True
    after = det.snapshot(frozen_ids)
    for key in before:
        if not np.array_equal(before[key], after[key]):
            raise InvariantViolation("frozen detector heads were modified")


# --- identification and pseudo-labels -----------------------------------


def identify_seen_samples(ds: StepDataset, state: RunState,
                          detector=None) -> tuple:
    """Per-sample seen/unseen decision against the old class set.

    Features come from the current EMA encoder; each sample votes for its
    nearest old prototype and the vote's rejection head decides whether
    the sample really belongs there.  ``detector`` substitutes the run's
    own heads (tests use stubs exposing either the same ``scores`` API or
    a ``score_samples(feats, votes)`` shortcut).  Returns
    ``(flags, votes, scores, feats)``.
    """
    det = detector if detector is not None else state.detector
    if det is None:
        raise StateError("identification needs detection heads")
    old_ids = state.bank.active_ids()
    old_ids = old_ids[old_ids < state.n_old_mark]
    if old_ids.size == 0:
        raise StateError("no old classes to identify against")
    feats = state.pair.ema.encode_np(ds.train_x)
    votes = nearest_prototype(state.bank, feats, restrict_to=old_ids)
    if hasattr(det, "score_samples"):
        scores = np.asarray(det.score_samples(feats, votes), dtype=np.float64)
    else:
        all_scores = det.scores(feats, old_ids)
        col = {int(c): j for j, c in enumerate(old_ids)}
        scores = all_scores[np.arange(feats.shape[0]),
                            [col[int(v)] for v in votes]]
    return scores > 0.5, votes, scores, feats


def assign_pseudo_labels(labels: np.ndarray, flags: np.ndarray,
                         votes: np.ndarray, n_old: int) -> PseudoLabels:
    """Pure election logic from per-sample flags and votes.

    A step class counts as seen only when every one of its samples is
    flagged; it then takes its most frequent vote, ties to the lowest old
    id.  When several classes elect the same old id, the one with the
    most winning votes keeps it (ties to the lowest class id) and the
    rest become new.  New ids are handed out from ``n_old`` upward in
    class order.
    """
    labels = np.asarray(labels)
    flags = np.asarray(flags, dtype=bool)
    votes = np.asarray(votes)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    elected: dict = {}
    win_count: dict = {}
    for c in range(n_classes):
        m = labels == c
        if not m.any():
            raise ValueError(f"class {c} has no samples")
        if not flags[m].all():
            continue
        counts = Counter(int(v) for v in votes[m])
        top = max(counts.values())
        elected[c] = min(k for k, v in counts.items() if v == top)
        win_count[c] = top

    by_target: dict = {}
    for c in sorted(elected):
        by_target.setdefault(elected[c], []).append(c)
    for claimants in by_target.values():
        if len(claimants) < 2:
            continue
        keep = max(claimants, key=lambda c: (win_count[c], -c))
        for c in claimants:
            if c != keep:
                del elected[c], win_count[c]

    seen = set(elected)
    assigned = dict(elected)
    new_order = [c for c in range(n_classes) if c not in seen]
    for i, c in enumerate(new_order):
        assigned[c] = n_old + i
    sample_labels = np.asarray([assigned[int(c)] for c in labels],
                               dtype=np.intp)
    return PseudoLabels(n_old=n_old, seen=seen, assigned=assigned,
                        votes=win_count, sample_labels=sample_labels,
                        sample_flags=flags, sample_votes=votes,
                        new_order=new_order)


def generate_pseudo_labels(ds: StepDataset, state: RunState, flags, votes,
                           feats: np.ndarray) -> PseudoLabels:
    """Elect labels and extend the memory bank for the unseen classes."""
    n_old = state.n_old_mark
    pls = assign_pseudo_labels(ds.train_class, flags, votes, n_old)
    if pls.new_order:
        means = _class_means(feats, ds.class_indices(), pls.new_order)
        first = state.bank.extend(means)
        if first != n_old:
            raise InvariantViolation("bank extension started at an "
                                     "unexpected id")
        for i, c in enumerate(pls.new_order):
            state.proto_gid[n_old + i] = ds.overlap_truth[c][1]
    return pls


def refine_pseudo_labels(ds: StepDataset, state: RunState,
                         pls: PseudoLabels, detector=None) -> tuple:
    """Repeat the detection with the adapted encoder.

    Strictly one-directional: only provisionally-new classes can flip to
    seen; every assignment made at the start of the step stays.  A
    flipped class is re-assigned to its elected old id and its
    provisional prototype withdrawn.  Old ids already owned by an
    incumbent are off limits, and when several new classes claim the
    same free old id only the strongest claimant flips.  Returns
    ``(pls, scores)`` with the flips recorded on the labels object.
    """
    flags, votes, scores, _ = identify_seen_samples(ds, state, detector)
    labels = ds.train_class
    taken = {pls.assigned[c] for c in pls.seen}
    by_target: dict = {}
    for c in sorted(set(int(v) for v in labels) - pls.seen):
        m = labels == c
        if not flags[m].all():
            continue
        counts = Counter(int(v) for v in votes[m])
        top = max(counts.values())
        winner = min(k for k, v in counts.items() if v == top)
        if winner in taken:
            continue
        by_target.setdefault(winner, []).append((c, top))

    flips = []
    for winner, claims in sorted(by_target.items()):
        c = max(claims, key=lambda ct: (ct[1], -ct[0]))[0]
        flips.append((c, winner))

    removed = []
    for c, winner in flips:
        provisional = pls.assigned[c]
        state.bank.remove([provisional])
        removed.append(provisional)
        state.proto_gid.pop(provisional, None)
        pls.seen.add(c)
        pls.assigned[c] = winner
        pls.new_order.remove(c)
    if flips:
        pls.sample_labels = np.asarray(
            [pls.assigned[int(c)] for c in labels], dtype=np.intp)
    pls.refine_flips = [c for c, _ in flips]
    pls.removed_protos = removed
    pls.sample_flags = flags
    pls.sample_votes = votes
    return pls, scores


def sample_surrogates(bank: MemoryBank, old_encoder: Encoder,
                      old_ids: np.ndarray, count: int, rng: Rng) -> tuple:
    """Synthesize unit-norm stand-ins for old-class features.

    Each draw picks an old class, scales its prototype direction to the
    old encoder's typical pre-normalization feature magnitude, adds
    Gaussian noise with the encoder's per-dimension running variance,
    and renormalizes.  With zero variance a draw is exactly the class
    prototype.  Returns ``(features (count, d), class_ids (count,))``.
    """
    old_ids = np.asarray(old_ids, dtype=np.intp)
    if old_ids.size == 0:
        raise StateError("no old classes to synthesize from")
    if count < 1:
        raise ValueError("count must be positive")
    scale = old_encoder.running_feat_norm
    if scale <= 0:
        raise StateError("old encoder has a non-positive feature scale")
    classes = rng.split("cls").choice(old_ids, size=count, replace=True)
    draws = (bank.weights[classes] * scale
             + np.sqrt(old_encoder.running_var)
             * rng.split("noise").normal(size=(count, bank.weights.shape[1])))
    norms = np.linalg.norm(draws, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise InvariantViolation("surrogate draw collapsed to zero")
    return draws / norms, classes


# --- incremental steps --------------------------------------------------


def _train_epochs(ds: StepDataset, state: RunState, pls: PseudoLabels,
                  plan: StepPlan, rng: Rng, opt: Adam, old_enc: Encoder,
                  old_ids: np.ndarray, epochs, use_aux: bool,
                  log: StepLog | None, phase: str) -> None:
    """Adaptation epochs shared by the early phase (with the old-class
    pull) and the late phase of an incremental step.  Old prototypes
    receive no moving-average updates."""
    mcfg = state.mcfg
    enc = state.pair.online
    bank = state.bank
    per_class = ds.class_indices()
    iters = _batch_iters(ds.n_train(), plan.p * plan.k)
    aux_w = plan.weights.aux
    cd_on = plan.weights.cd > 0 and (plan.cd_whole_step or phase == "early")

    for epoch in epochs:
        erng = rng.split("epoch", epoch)
        srng = erng.split("surrogate")
        counters = Counter()
        for it in range(iters):
            idx = pk_sample_indices(per_class, plan.p, plan.k,
                                    erng.split("batch", it))
            x = ds.train_x[idx]
            y = pls.sample_labels[idx]
            f = enc.forward_graph(x)
            trip, _ = L.triplet_loss(f, y, plan.weights.triplet_margin)
            id_loss = L.prototype_id_loss(f, y, bank, mcfg.temperature)
            aux_loss = None
            if use_aux and aux_w > 0:
                new_rows = np.flatnonzero(y >= pls.n_old)
                if new_rows.size:
                    f_new = TT.take_rows(f, new_rows)
                    # pull targets follow the features as they move
                    targets = nearest_prototype(bank, f_new.data,
                                                restrict_to=old_ids)
                    aux_loss = L.old_class_pull_loss(
                        f_new, targets, old_ids, bank, mcfg.temperature)
            cd_loss = None
            if cd_on:
                sur, _ = sample_surrogates(bank, old_enc, old_ids,
                                           x.shape[0], srng.split(it))
                old_f = old_enc.encode_np(x)
                old_cos = (old_f @ sur.T if plan.cd_pairwise
                           else np.sum(old_f * sur, axis=1))
                cd_loss = L.structure_distill_loss(
                    f, old_cos, sur, pairwise=plan.cd_pairwise)
            total = L.extendova_objective(trip, id_loss, aux_loss, cd_loss,
                                          aux_w, plan.weights.cd)
            total.backward()
            opt.step()
            pf = (state.pair.ema.encode_np(x)
                  if mcfg.prototype_update_source == "ema" else f.data)
            _update_prototypes(bank, pf, y, mcfg.prototype_momentum,
                               frozen_below=pls.n_old)
            ema_update(state.pair, mcfg.ema_alpha)
            counters.update({"id": id_loss.item(), "triplet": trip.item(),
                             "aux": aux_loss.item() if aux_loss else 0.0,
                             "cd": cd_loss.item() if cd_loss else 0.0})
        if log is not None:
            log.losses_per_epoch.append(
                _epoch_entry(ds.index, epoch, phase, counters, iters))


def run_incremental_step(ds: StepDataset, state: RunState, plan: StepPlan,
                         rng: Rng, detector_override=None,
                         log: StepLog | None = None,
                         stop_after_refine: bool = False) -> PseudoLabels:
    """One full extension step: identify, elect, adapt with the early
    pull, re-detect and withdraw duplicates, finish adapting, then fit
    rejection heads for the surviving new classes.

    ``stop_after_refine`` truncates the step right after the relabelling
    pass (tests compare labelling quality across settings there); the
    state is mid-step at that point and not fit for further steps.
    """
    if state.method != "extendova":
        raise StateError("run_incremental_step drives the extendova method")
    t = ds.index
    state.bank.set_step(t)
    state.n_old_mark = len(state.bank)
    old_ids = state.bank.active_ids()
    old_enc = state.old_model()

    flags, votes, scores_raw, feats = identify_seen_samples(
        ds, state, detector_override)
    pls = generate_pseudo_labels(ds, state, flags, votes, feats)
    if log is not None:
        log.scores["raw"] = scores_raw
        log.ident_raw = {"seen": set(pls.seen), "assigned": dict(pls.assigned)}

    opt = Adam([(p, plan.lr * plan.incremental_lr_scale)
                for p in state.pair.online.params()])
    run_args = (ds, state, pls, plan, rng, opt, old_enc, old_ids)
    _train_epochs(*run_args, epochs=range(1, plan.early_reg_epochs + 1),
                  use_aux=True, log=log, phase="early")
    pls, scores_ref = refine_pseudo_labels(ds, state, pls, detector_override)
    if log is not None:
        log.scores["refined"] = scores_ref
        log.ident_refined = {"seen": set(pls.seen),
                             "assigned": dict(pls.assigned)}
    if stop_after_refine:
        state.step = t
        return pls

    _train_epochs(*run_args,
                  epochs=range(plan.early_reg_epochs + 1, plan.epochs + 1),
                  use_aux=False, log=log, phase="late")

    surviving_new = [pls.assigned[c] for c in pls.new_order]
    if state.detector is not None and surviving_new:
        _train_detector_heads(state.detector,
                              state.pair.ema.encode_np(ds.train_x),
                              pls.sample_labels,
                              np.asarray(surviving_new, dtype=np.intp),
                              step=t, plan=plan, rng=rng.split("detector"))
    state.bank.check_invariants()
    state.step = t
    return pls


def run_finetune_step(ds: StepDataset, state: RunState, plan: StepPlan,
                      rng: Rng, use_kd: bool = False,
                      log: StepLog | None = None) -> PseudoLabels:
    """Every arriving class is treated as new.  With ``use_kd`` the
    old-logit distillation over the frozen old prototypes is added."""
    t = ds.index
    state.bank.set_step(t)
    n_old = state.n_old_mark = len(state.bank)
    old_ids = state.bank.active_ids()
    old_enc = state.old_model()

    feats = state.eval_encoder().encode_np(ds.train_x)
    pls = assign_pseudo_labels(ds.train_class,
                               np.zeros(ds.n_train(), dtype=bool),
                               np.zeros(ds.n_train(), dtype=np.intp), n_old)
    state.bank.extend(_class_means(feats, ds.class_indices(), pls.new_order))
    for i, c in enumerate(pls.new_order):
        state.proto_gid[n_old + i] = ds.overlap_truth[c][1]

    enc = state.pair.online
    opt = Adam([(p, plan.lr * plan.incremental_lr_scale)
                for p in enc.params()])
    mcfg = state.mcfg
    per_class = ds.class_indices()
    iters = _batch_iters(ds.n_train(), plan.p * plan.k)
    old_cols = Tensor(state.bank.weights[old_ids].T) if use_kd else None
    for epoch in range(1, plan.epochs + 1):
        erng = rng.split("epoch", epoch)
        counters = Counter()
        for it in range(iters):
            idx = pk_sample_indices(per_class, plan.p, plan.k,
                                    erng.split("batch", it))
            x = ds.train_x[idx]
            y = pls.sample_labels[idx]
            f = enc.forward_graph(x)
            trip, _ = L.triplet_loss(f, y, plan.weights.triplet_margin)
            id_loss = L.prototype_id_loss(f, y, state.bank, mcfg.temperature)
            total = id_loss + trip
            if use_kd and plan.weights.kd > 0:
                kdt = plan.weights.kd_temperature
                old_logits = old_enc.encode_np(x) @ old_cols.data / kdt
                kd = L.logit_distill_loss(
                    TT.matmul(f, old_cols) * (1.0 / kdt), old_logits)
                total = total + kd * plan.weights.kd
                counters.update({"kd": kd.item()})
            total.backward()
            opt.step()
            _update_prototypes(state.bank, f.data, y, mcfg.prototype_momentum,
                               frozen_below=n_old)
            counters.update({"id": id_loss.item(), "triplet": trip.item()})
        if log is not None:
            log.losses_per_epoch.append(
                _epoch_entry(t, epoch, "train", counters, iters))
    ema_update(state.pair, 0.0)
    state.step = t
    return pls


def run_baseline_step(ds: StepDataset, state: RunState, plan: StepPlan,
                      rng: Rng, log: StepLog | None = None) -> PseudoLabels:
    """Threshold baseline.

    Every sample is scored by the previous classifier once, before any
    update.  An accepted sample keeps its argmax class; a class with at
    least one rejected sample gets a fresh column that all its rejected
    samples share.  Training is cross entropy + triplet + weighted
    old-logit distillation.
    """
    t = ds.index
    mcfg = state.mcfg
    clf = state.classifier
    if clf is None:
        raise StateError("baseline run has no classifier")
    state.bank.set_step(t)
    n_old = state.n_old_mark = clf.n_classes
    old_enc = state.old_model()
    old_W = clf.W.data.copy()
    old_b = clf.b.data.copy()

    feats = old_enc.encode_np(ds.train_x)
    # confidence comes from the classifier at the same logit scale its
    # cross entropy trained at
    logits = (feats @ old_W + old_b) * clf.scale
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    maxp = probs.max(axis=1)
    votes = probs.argmax(axis=1)
    flags = maxp > plan.softmax_threshold

    labels = ds.train_class
    new_id_of: dict = {}
    for c in range(ds.n_local_classes):
        if (~flags[labels == c]).any():
            new_id_of[c] = n_old + len(new_id_of)
    sample_labels = np.where(
        flags, votes, [new_id_of.get(int(c), -1) for c in labels])
    if np.any(sample_labels < 0):
        raise InvariantViolation("baseline labelling left samples unassigned")

    if new_id_of:
        init = []
        for c in new_id_of:
            v = feats[(labels == c) & ~flags].mean(axis=0)
            init.append(v / max(np.linalg.norm(v), 1e-12))
        clf.extend(np.stack(init))
        for c, nid in new_id_of.items():
            state.class_gid[nid] = ds.overlap_truth[c][1]

    # class-level mirror of the decision (all samples accepted, majority
    # argmax), kept for comparison with the detection-based pipeline
    seen = set()
    assigned = {}
    for c in range(ds.n_local_classes):
        m = labels == c
        if flags[m].all():
            counts = Counter(int(v) for v in votes[m])
            top = max(counts.values())
            seen.add(c)
            assigned[c] = min(k for k, v in counts.items() if v == top)
    pls = PseudoLabels(n_old=n_old, seen=seen, assigned=assigned, votes={},
                       sample_labels=sample_labels, sample_flags=flags,
                       sample_votes=votes,
                       new_order=[c for c in range(ds.n_local_classes)
                                  if c not in seen])
    if log is not None:
        log.scores["maxsoft"] = maxp
        log.ident_raw = {"seen": set(seen), "assigned": dict(assigned)}

    enc = state.pair.online
    opt = Adam([(p, plan.lr * plan.incremental_lr_scale) for p in enc.params()]
               + [(clf.W, plan.lr), (clf.b, plan.lr)])
    per_class = ds.class_indices()
    iters = _batch_iters(ds.n_train(), plan.p * plan.k)
    old_col_idx = np.arange(n_old, dtype=np.intp)
    for epoch in range(1, plan.epochs + 1):
        erng = rng.split("epoch", epoch)
        counters = Counter()
        for it in range(iters):
            idx = pk_sample_indices(per_class, plan.p, plan.k,
                                    erng.split("batch", it))
            x = ds.train_x[idx]
            y = sample_labels[idx]
            f = enc.forward_graph(x)
            live_logits = clf.logits_graph(f)
            id_loss = _ce_rows(TT.log_softmax_rows(live_logits), y)
            trip, _ = L.triplet_loss(f, y, plan.weights.triplet_margin)
            kd = None
            if plan.weights.kd > 0:
                # distilled at its own softer temperature; live_logits carry
                # the classifier scale already, so divide it back out
                kdt = plan.weights.kd_temperature
                old_logits = (old_enc.encode_np(x) @ old_W + old_b) / kdt
                kd = L.logit_distill_loss(
                    TT.take_cols(live_logits, old_col_idx)
                    * (1.0 / (clf.scale * kdt)), old_logits)
                counters.update({"kd": kd.item()})
            L.baseline_objective(id_loss, trip, kd, plan.weights.kd).backward()
            opt.step()
            counters.update({"id": id_loss.item(), "triplet": trip.item()})
        if log is not None:
            log.losses_per_epoch.append(
                _epoch_entry(t, epoch, "train", counters, iters))
    ema_update(state.pair, 0.0)
    state.step = t
    return pls


def run_joint_step(stream: Stream, t: int, state: RunState, plan: StepPlan,
                   rng: Rng, log: StepLog | None = None) -> None:
    """Oracle upper bound: train on all data so far with true identities
    taken from the class-level truth table (the one sanctioned read)."""
    mcfg = state.mcfg
    xs, gids = [], []
    for k in range(1, t + 1):
        dsk = stream.step(k)
        gid_of = {c: g for c, (_, g) in dsk.overlap_truth.items()}
        xs.append(dsk.train_x)
        gids.append(np.asarray([gid_of[int(c)] for c in dsk.train_class]))
    x_all = np.vstack(xs)
    gid_all = np.concatenate(gids)

    state.bank.set_step(t)
    state.n_old_mark = len(state.bank)
    new_gids = sorted(set(int(g) for g in gid_all) - set(state.gid_proto))
    if new_gids:
        feats = state.pair.online.encode_np(x_all)
        means = np.stack([feats[gid_all == g].mean(axis=0) for g in new_gids])
        first = state.bank.extend(means)
        for i, g in enumerate(new_gids):
            state.gid_proto[g] = first + i
            state.proto_gid[first + i] = g
    labels = np.asarray([state.gid_proto[int(g)] for g in gid_all],
                        dtype=np.intp)

    per_class = [np.flatnonzero(labels == c) for c in range(len(state.bank))]
    pool = np.asarray([c for c, ix in enumerate(per_class) if ix.size],
                      dtype=np.intp)
    enc = state.pair.online
    opt = Adam([(p, plan.lr * plan.incremental_lr_scale)
                for p in enc.params()])
    iters = _batch_iters(x_all.shape[0], plan.p * plan.k)
    for epoch in range(1, plan.epochs + 1):
        erng = rng.split("epoch", epoch)
        counters = Counter()
        for it in range(iters):
            idx = pk_sample_indices(per_class, plan.p, plan.k,
                                    erng.split("batch", it), class_pool=pool)
            x, y = x_all[idx], labels[idx]
            f = enc.forward_graph(x)
            id_loss = L.prototype_id_loss(f, y, state.bank, mcfg.temperature)
            trip, _ = L.triplet_loss(f, y, plan.weights.triplet_margin)
            (id_loss + trip).backward()
            opt.step()
            _update_prototypes(state.bank, f.data, y, mcfg.prototype_momentum)
            counters.update({"id": id_loss.item(), "triplet": trip.item()})
        if log is not None:
            log.losses_per_epoch.append(
                _epoch_entry(t, epoch, "train", counters, iters))
    ema_update(state.pair, 0.0)
    state.step = t


def run_step(stream: Stream, t: int, state: RunState, plan: StepPlan,
             rng: Rng, detector_override=None, log: StepLog | None = None):
    """Dispatch one incremental step for the state's method."""
    ds = stream.step(t)
    if state.method == "extendova":
        return run_incremental_step(ds, state, plan, rng,
                                    detector_override=detector_override,
                                    log=log)
    if state.method == "baseline":
        return run_baseline_step(ds, state, plan, rng, log=log)
    if state.method == "finetune":
        return run_finetune_step(ds, state, plan, rng, use_kd=False, log=log)
    if state.method == "lwf":
        return run_finetune_step(ds, state, plan, rng, use_kd=True, log=log)
    if state.method == "joint":
        return run_joint_step(stream, t, state, plan, rng, log=log)
    raise StateError(f"unknown method {state.method!r}")


# --- checkpoint payloads ------------------------------------------------


def state_to_dict(state: RunState) -> dict:
    """JSON-ready snapshot of a run state at a step boundary."""
    d = {
        "method": state.method,
        "seed": state.seed,
        "step": state.step,
        "n_old_mark": state.n_old_mark,
        "pair": state.pair.state_dict(),
        "bank": state.bank.state_dict(),
        "proto_gid": sorted((int(k), int(v))
                            for k, v in state.proto_gid.items()),
        "class_gid": sorted((int(k), int(v))
                            for k, v in state.class_gid.items()),
        "gid_proto": sorted((int(k), int(v))
                            for k, v in state.gid_proto.items()),
    }
    if state.detector is not None:
        d["detector"] = state.detector.state_dict()
    if state.classifier is not None:
        d["classifier"] = state.classifier.state_dict()
    return d


def state_from_dict(d: dict, mcfg: ModelConfig, d_in: int) -> RunState:
    enc = Encoder(d_in, mcfg)
    pair = ModelPair(enc)
    pair.load_state_dict(d["pair"])
    bank = MemoryBank.from_state_dict(d["bank"], mcfg.feature_dim)
    state = RunState(method=d["method"], seed=int(d["seed"]), mcfg=mcfg,
                     pair=pair, bank=bank, step=int(d["step"]),
                     n_old_mark=int(d["n_old_mark"]))
    state.proto_gid = {int(k): int(v) for k, v in d["proto_gid"]}
    state.class_gid = {int(k): int(v) for k, v in d["class_gid"]}
    state.gid_proto = {int(k): int(v) for k, v in d["gid_proto"]}
    if "detector" in d:
        state.detector = OvaDetector.from_state_dict(d["detector"],
                                                     mcfg.feature_dim)
    if "classifier" in d:
        state.classifier = BaselineClassifier(mcfg.feature_dim)
        state.classifier.load_state_dict(d["classifier"])
    return state
