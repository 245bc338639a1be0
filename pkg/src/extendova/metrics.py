"""Retrieval and identification metrics, plus the metrics CSV format.

Retrieval follows the usual single-query protocol: rank the gallery by
cosine similarity, drop same-identity same-camera entries as junk, average
precision over the ranks of the remaining positives.  Queries left with no
cross-camera positive are excluded and counted.  All reductions have a
fixed order so repeated evaluations are bit-identical.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RetrievalResult",
    "evaluate_retrieval",
    "IdentReport",
    "identification_metrics",
    "forgetting_curve",
    "HistogramResult",
    "confidence_histogram",
    "MetricRow",
    "format_metric_rows",
    "write_metrics_csv",
]


@dataclass
class RetrievalResult:
    map: float
    rank1: float
    cmc: np.ndarray
    n_queries: int
    n_excluded: int


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise ValueError("zero feature vector in retrieval input")
    return x / norms


def evaluate_retrieval(query_x, query_ids, query_cams,
                       gallery_x, gallery_ids, gallery_cams,
                       max_rank: int = 20) -> RetrievalResult:
    """Mean average precision and CMC over a query/gallery split.

    Metrics depend only on cosine direction, so any common rescaling of
    the features is irrelevant.  Ties in similarity rank the lower gallery
    index first, making results independent of gallery storage order in
    generic position.
    """
    q = _unit_rows(query_x)
    g = _unit_rows(gallery_x)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("empty query or gallery")

    aps = []
    first_ranks = []
    n_excluded = 0
    # Queries are processed in blocks so the sort runs once per block;
    # junk entries get a similarity below the cosine range and sink to
    # the bottom, which leaves every valid rank untouched.  Similarities
    # are ranked in float32 (ranking needs comparisons only), packed with
    # the column index into one integer key per entry: the keys are unique,
    # so the cheap default sort realizes exactly the documented order,
    # lower gallery index first on ties.
    q32 = q.astype(np.float32)
    g32t = g.astype(np.float32).T
    col_key = np.arange(g.shape[0], dtype=np.int64)[None, :]
    key_bits = int(g.shape[0] - 1).bit_length()
    chunk = 512
    for lo in range(0, q.shape[0], chunk):
        hi = min(lo + chunk, q.shape[0])
        sims = q32[lo:hi] @ g32t
        same_id = gallery_ids[None, :] == query_ids[lo:hi, None]
        junk = same_id & (gallery_cams[None, :] == query_cams[lo:hi, None])
        positive = same_id & ~junk
        np.copyto(sims, np.float32(-2.0), where=junk)
        neg = -sims + np.float32(0.0)    # ascending = similarity descending
        bits = neg.view(np.uint32)       # IEEE bits, made order-isomorphic
        flip = np.where(bits >> np.uint32(31) != 0, np.uint32(0xFFFFFFFF),
                        np.uint32(0x80000000))
        order = np.argsort(((bits ^ flip).astype(np.int64) << key_bits)
                           | col_key, axis=1)
        for r in range(hi - lo):
            ranks = np.flatnonzero(positive[r, order[r]]) + 1   # 1-indexed
            if ranks.size == 0:
                n_excluded += 1
                continue
            precision_at = np.arange(1, ranks.size + 1) / ranks
            aps.append(precision_at.mean())
            first_ranks.append(ranks[0])

    if not aps:
        raise ValueError("every query was excluded (no cross-camera positives)")
    first_ranks = np.asarray(first_ranks)
    cmc = np.asarray([(first_ranks <= k).mean() for k in range(1, max_rank + 1)])
    return RetrievalResult(map=float(np.mean(aps)), rank1=float(cmc[0]),
                           cmc=cmc, n_queries=len(aps), n_excluded=n_excluded)


@dataclass
class IdentReport:
    """Class-level quality of a seen/unseen split and its assignments.

    precision is absent when nothing was selected as seen; recall is
    absent when the step truly contains no seen classes; assignment
    accuracy is absent when no truly seen class was selected.
    """

    precision: float | None
    recall: float | None
    accuracy: float | None
    n_selected: int
    n_truly_seen: int
    n_classes: int


def identification_metrics(seen_classes, assigned: dict, truth: dict,
                           proto_gid: dict) -> IdentReport:
    """Score a pseudo-labelling decision against ground truth.

    ``seen_classes``: step classes declared seen.  ``assigned``: their
    elected prototype ids.  ``truth``: step class -> (seen_before,
    global id).  ``proto_gid``: prototype id -> the global identity it was
    created for.
    """
    seen_classes = set(int(c) for c in seen_classes)
    n_classes = len(truth)
    truly = {c for c, (s, _) in truth.items() if s}
    n_sel = len(seen_classes)
    tp = len(seen_classes & truly)
    precision = tp / n_sel if n_sel else None
    recall = tp / len(truly) if truly else None
    correct = 0
    for c in seen_classes & truly:
        proto = assigned.get(c)
        if proto is not None and proto_gid.get(int(proto)) == truth[c][1]:
            correct += 1
    accuracy = correct / tp if tp else None
    return IdentReport(precision=precision, recall=recall, accuracy=accuracy,
                       n_selected=n_sel, n_truly_seen=len(truly),
                       n_classes=n_classes)


def forgetting_curve(encoders, test_x, test_ids, test_cams) -> list:
    """Evaluate a sequence of ``(step, encoder)`` pairs on one frozen test
    split.  Returns ``[(step, RetrievalResult), ...]`` in step order."""
    out = []
    for step, enc in sorted(encoders, key=lambda p: p[0]):
        feats = enc.encode_np(test_x)
        out.append((step, evaluate_retrieval(feats, test_ids, test_cams,
                                             feats, test_ids, test_cams)))
    return out


@dataclass
class HistogramResult:
    bin_edges: np.ndarray
    seen: np.ndarray | None
    unseen: np.ndarray | None
    overlap: float | None


def confidence_histogram(seen_scores, unseen_scores, n_bins: int = 20,
                         lo: float = 0.0, hi: float = 1.0) -> HistogramResult:
    """Normalized score histograms on shared bins plus their overlap
    coefficient (sum of bin-wise minima; 1 means indistinguishable, 0
    means perfectly separated).  An empty side leaves that histogram and
    the overlap undefined."""
    if n_bins < 1 or not hi > lo:
        raise ValueError("need n_bins >= 1 and hi > lo")
    edges = np.linspace(lo, hi, n_bins + 1)

    def norm_hist(scores):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            return None
        h, _ = np.histogram(np.clip(scores, lo, hi), bins=edges)
        return h / h.sum()

    hs = norm_hist(seen_scores)
    hu = norm_hist(unseen_scores)
    overlap = float(np.minimum(hs, hu).sum()) if hs is not None and hu is not None \
        else None
    return HistogramResult(bin_edges=edges, seen=hs, unseen=hu, overlap=overlap)


@dataclass
class MetricRow:
    method: str
    step: int
    split: str
    metric: str
    value: float
    seed: int


def format_metric_rows(rows) -> str:
    """Canonical CSV text: fixed header, rows sorted, floats via repr so
    equal runs produce byte-identical files."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "step", "split", "metric", "value", "seed"])
    for r in sorted(rows, key=lambda r: (r.method, r.seed, r.step, r.split,
                                         r.metric)):
        writer.writerow([r.method, r.step, r.split, r.metric,
                         repr(float(r.value)), r.seed])
    return buf.getvalue()


def write_metrics_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_metric_rows(rows))


def read_metrics_csv(path) -> list:
    out = []
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            out.append(MetricRow(method=rec["method"], step=int(rec["step"]),
                                 split=rec["split"], metric=rec["metric"],
                                 value=float(rec["value"]), seed=int(rec["seed"])))
    return out
