"""Training objectives.

All losses return scalar graph tensors.  Prototype matrices, old-model
features and surrogate features always enter as constants: gradients flow
into the current encoder (or, for detector training, into the head
parameters) and nowhere else.  Hard-example mining is done on detached
values and the loss is then assembled from the mined pairs, which yields
the same gradients as mining inside the graph at every point where the
max/min is unique.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalFailure, StateError
from .model import MemoryBank
from .numerics import Tensor
from .numerics import tensor as T

__all__ = [
    "triplet_loss",
    "prototype_id_loss",
    "old_class_pull_loss",
    "ova_loss",
    "logit_distill_loss",
    "structure_distill_loss",
    "baseline_objective",
    "extendova_objective",
]


def _finite(loss: Tensor, name: str) -> Tensor:
    if not np.all(np.isfinite(loss.data)):
        raise NumericalFailure(f"{name} produced a non-finite value")
    return loss


def triplet_loss(features: Tensor, labels: np.ndarray, margin: float = 0.3):
    """Batch-hard triplet loss on unit-norm features.

    Per anchor: hardest positive (largest Euclidean distance within the
    label) against hardest negative (smallest distance outside it), hinged
    at ``margin``.  Anchors whose label appears only once in the batch are
    skipped.  Returns ``(loss, n_active)``; if every anchor is skipped the
    loss is exactly zero and ``n_active`` is 0, which callers should treat
    as a warning sign about their batch composition.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    labels = np.asarray(labels)
    f = features.data
    b = f.shape[0]
    if labels.shape != (b,):
        raise ValueError("labels must match the batch dimension")
    same = labels[:, None] == labels[None, :]
    d2 = np.maximum(2.0 - 2.0 * (f @ f.T), 0.0)
    dist = np.sqrt(d2)

    pos_masked = np.where(same & ~np.eye(b, dtype=bool), dist, -np.inf)
    neg_masked = np.where(~same, dist, np.inf)
    has_pos = np.isfinite(pos_masked).any(axis=1)
    has_neg = np.isfinite(neg_masked).any(axis=1)
    anchors = np.flatnonzero(has_pos & has_neg)
    if anchors.size == 0:
        return Tensor(0.0), 0

    hardest_pos = np.argmax(pos_masked[anchors], axis=1)
    hardest_neg = np.argmin(neg_masked[anchors], axis=1)

    fa = T.take_rows(features, anchors)
    fp = T.take_rows(features, hardest_pos)
    fn = T.take_rows(features, hardest_neg)
    dp = T.sqrt(T.sum_axis((fa - fp) * (fa - fp), 1))
    dn = T.sqrt(T.sum_axis((fa - fn) * (fa - fn), 1))
    hinge = T.relu(dp - dn + margin)
    return _finite(T.mean_all(hinge), "triplet_loss"), int(anchors.size)


def _bank_columns(bank: MemoryBank, restrict_to=None):
    ids = bank.active_ids() if restrict_to is None else \
        np.asarray(restrict_to, dtype=np.intp)
    if ids.size == 0:
        raise StateError("no active prototypes to compute logits against")
    ids = np.sort(ids)
    col_of = {int(c): j for j, c in enumerate(ids)}
    return ids, col_of


def prototype_id_loss(features: Tensor, class_ids: np.ndarray,
                      bank: MemoryBank, temperature: float) -> Tensor:
    """Cross entropy of temperature-scaled cosine similarities against all
    active prototypes.  The prototype matrix is a constant: only the
    features receive gradient, so a step of this loss leaves the bank
    numerically untouched.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    class_ids = np.asarray(class_ids)
    ids, col_of = _bank_columns(bank)
    try:
        cols = np.asarray([col_of[int(c)] for c in class_ids], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} has no active prototype")
    logits = T.matmul(features, Tensor(bank.weights[ids].T)) * (1.0 / temperature)
    lp = T.log_softmax_rows(logits)
    return _finite(T.mean_all(T.take_per_row(lp, cols)) * -1.0,
                   "prototype_id_loss")


def old_class_pull_loss(features: Tensor, old_targets: np.ndarray,
                        old_ids: np.ndarray, bank: MemoryBank,
                        temperature: float) -> Tensor:
    """Cross entropy restricted to the old classes, used to drag samples
    that were provisionally declared new toward their nearest old class
    while regularization is active.  Targets are recomputed by the caller
    on every forward pass; this function just scores them.
    """
    old_ids = np.sort(np.asarray(old_ids, dtype=np.intp))
    if old_ids.size == 0:
        raise StateError("no old classes exist yet")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    old_targets = np.asarray(old_targets)
    col_of = {int(c): j for j, c in enumerate(old_ids)}
    try:
        cols = np.asarray([col_of[int(c)] for c in old_targets], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"target {exc.args[0]} is not an old class")
    logits = T.matmul(features, Tensor(bank.weights[old_ids].T)) * (1.0 / temperature)
    lp = T.log_softmax_rows(logits)
    return _finite(T.mean_all(T.take_per_row(lp, cols)) * -1.0,
                   "old_class_pull_loss")


def ova_loss(features: np.ndarray, heads: dict, labels_col: np.ndarray) -> Tensor:
    """Rejection-aware per-class detection loss over a batch.

    ``heads`` holds the trainable tensors ``pos_w``/``pos_b``/``neg_w``/
    ``neg_b`` for the C classes in play; ``labels_col[i]`` is the column of
    sample i's own class, or -1 for samples that only serve as negatives
    (their own head is frozen elsewhere).  Per sample the loss is
    -log p(own class) - log(1 - p(hardest other class)), where p is the
    positive output of each head's two-way softmax and the hardest other
    class is the one with the largest current score.  Features are
    constants; only head parameters receive gradient.
    """
    features = np.asarray(features, dtype=np.float64)
    labels_col = np.asarray(labels_col, dtype=np.intp)
    b = features.shape[0]
    if labels_col.shape != (b,):
        raise ValueError("labels_col must match the batch dimension")
    c = heads["pos_w"].data.shape[0]
    if c == 0:
        raise ValueError("ova_loss needs at least one head")
    has_positive = labels_col >= 0
    if np.any(labels_col >= c):
        raise ValueError("labels_col entry out of range")

    fx = Tensor(features)
    pos = T.matmul(fx, _transpose_param(heads["pos_w"])) + heads["pos_b"]
    neg = T.matmul(fx, _transpose_param(heads["neg_w"])) + heads["neg_b"]
    margins = pos - neg

    det = margins.data
    masked = det.copy()
    rows = np.arange(b)
    masked[rows[has_positive], labels_col[has_positive]] = -np.inf
    hardest = np.argmax(masked, axis=1)

    # a positive sample in a single-head set has no other class to reject;
    # such rows simply drop out of the rejection term
    eligible = ~has_positive if c < 2 else np.ones(b, dtype=bool)
    if np.any(eligible):
        erows = np.flatnonzero(eligible)
        neg_term = T.logsigmoid(
            T.take_per_row(T.take_rows(margins, erows), hardest[erows])
            * -1.0) * -1.0
        loss = T.mean_all(neg_term)
    else:
        loss = T.sum_all(margins) * 0.0
    if np.any(has_positive):
        pos_rows = np.flatnonzero(has_positive)
        own = T.take_per_row(T.take_rows(margins, pos_rows),
                             labels_col[pos_rows])
        pos_term = T.logsigmoid(own) * -1.0
        # keep per-sample weighting identical for both terms
        loss = loss + T.sum_all(pos_term) * (1.0 / b)
    return _finite(loss, "ova_loss")


def _transpose_param(p: Tensor) -> Tensor:
    """View a (C, d) parameter as (d, C) inside the graph."""
    out = T.Tensor.__new__(T.Tensor)
    out.data = p.data.T
    out.grad = None
    out.requires_grad = p.requires_grad
    out._parents = (p,) if p.requires_grad else ()

    def backward(g):
        p._accum(g.T)

    out._backward = backward if p.requires_grad else None
    return out


def logit_distill_loss(new_logits: Tensor, old_logits: np.ndarray) -> Tensor:
    """Sum over the batch of KL(new distribution || old distribution).

    Both logit blocks must cover the same class columns (the old class
    set); the old distribution is a constant target.
    """
    old_logits = np.asarray(old_logits, dtype=np.float64)
    if new_logits.data.shape != old_logits.shape:
        raise ValueError("logit blocks must have identical shapes")
    if new_logits.data.ndim != 2 or new_logits.data.shape[1] < 1:
        raise ValueError("expected (B, C) logits with C >= 1")
    lp_new = T.log_softmax_rows(new_logits)
    p_new = T.softmax_rows(new_logits)
    shifted = old_logits - old_logits.max(axis=1, keepdims=True)
    lp_old = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return _finite(T.sum_all(p_new * (lp_new - lp_old)), "logit_distill_loss")


def structure_distill_loss(features: Tensor, old_cos: np.ndarray,
                           surrogates: np.ndarray,
                           pairwise: bool = False) -> Tensor:
    """Match the new model's cosines to synthesized old-class features
    against the old model's cosines to the same surrogates.

    Default compares each sample with its aligned surrogate (mean of
    squared differences over the batch).  ``pairwise=True`` compares every
    sample against every surrogate instead.
    """
    surrogates = np.asarray(surrogates, dtype=np.float64)
    old_cos = np.asarray(old_cos, dtype=np.float64)
    b = features.data.shape[0]
    if surrogates.ndim != 2 or surrogates.shape[1] != features.data.shape[1]:
        raise ValueError("surrogates must be (n, feature_dim)")
    if pairwise:
        if old_cos.shape != (b, surrogates.shape[0]):
            raise ValueError("pairwise old cosines must be (B, n_surrogates)")
        new_cos = T.matmul(features, Tensor(surrogates.T))
    else:
        if surrogates.shape[0] != b or old_cos.shape != (b,):
            raise ValueError("aligned mode needs one surrogate and one old "
                             "cosine per sample")
        new_cos = T.sum_axis(features * Tensor(surrogates), 1)
    diff = new_cos - Tensor(old_cos)
    return _finite(T.mean_all(diff * diff), "structure_distill_loss")


def baseline_objective(id_loss: Tensor, trip_loss: Tensor,
                       kd_loss: Tensor | None, kd_weight: float) -> Tensor:
    total = id_loss + trip_loss
    if kd_loss is not None and kd_weight != 0.0:
        total = total + kd_loss * kd_weight
    return _finite(total, "baseline_objective")


def extendova_objective(trip_loss: Tensor, id_loss: Tensor,
                        aux_loss: Tensor | None, cd_loss: Tensor | None,
                        aux_weight: float, cd_weight: float) -> Tensor:
    total = trip_loss + id_loss
    if aux_loss is not None and aux_weight != 0.0:
        total = total + aux_loss * aux_weight
    if cd_loss is not None and cd_weight != 0.0:
        total = total + cd_loss * cd_weight
    return _finite(total, "extendova_objective")
