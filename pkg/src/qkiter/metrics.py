"""Exhaustive pair ranking, micro-AP and macro-AP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, UndefinedMetricError
from .loss import squared_distances


@dataclass
class RankedPairList:
    """All (query, key) pairs, best first. Rows are parallel arrays."""

    query_ids: np.ndarray
    key_ids: np.ndarray
    scores: np.ndarray
    is_positive: np.ndarray
    n_positives: int

    def __len__(self):
        return len(self.scores)


def _pair_keys(qid, kid):
    return qid.astype(np.int64) * (1 << 31) + kid.astype(np.int64)


def rank_all_pairs(
    q_desc, k_desc, tau: float, ground_truth=None, query_ids=None, key_ids=None
) -> RankedPairList:
    """Score every pair with exp(-d^2/tau) and sort, best first.

    The sort key is the squared distance itself, which orders pairs exactly as
    the score does but without ties from exp() underflowing to zero on far
    pairs. Equal distances fall back to (query_id, key_id).
    """
    q_desc = np.asarray(q_desc, dtype=np.float64)
    k_desc = np.asarray(k_desc, dtype=np.float64)
    nq, nk = len(q_desc), len(k_desc)
    if nq == 0 or nk == 0:
        raise DegenerateInputError("cannot rank pairs with an empty side")
    query_ids = np.arange(nq) if query_ids is None else np.asarray(query_ids)
    key_ids = np.arange(nk) if key_ids is None else np.asarray(key_ids)
    d2 = squared_distances(q_desc, k_desc).ravel()
    qid = np.repeat(query_ids, nk)
    kid = np.tile(key_ids, nq)
    order = np.lexsort((kid, qid, d2))
    qid, kid, d2 = qid[order], kid[order], d2[order]
    gt = np.zeros((0, 2), dtype=np.int64) if ground_truth is None else np.asarray(ground_truth)
    gt = np.unique(gt.reshape(-1, 2), axis=0)
    is_pos = np.isin(_pair_keys(qid, kid), _pair_keys(gt[:, 0], gt[:, 1]))
    return RankedPairList(qid, kid, np.exp(-d2 / tau), is_pos, len(gt))


def _ap(is_pos: np.ndarray, n_positives: int) -> float:
    if n_positives == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    hits = np.cumsum(is_pos)
    ranks = np.flatnonzero(is_pos) + 1
    return float(np.sum(hits[ranks - 1] / ranks) / n_positives)


def micro_ap(rpl: RankedPairList) -> float:
    """Area under the precision-recall curve of the single global ranking."""
    return _ap(rpl.is_positive, rpl.n_positives)


def macro_ap(rpl: RankedPairList) -> float:
    """Mean per-query AP over queries that have at least one positive."""
    # a stable sort by query keeps each query's pairs in global rank order
    order = np.argsort(rpl.query_ids, kind="stable")
    qid = rpl.query_ids[order]
    pos = rpl.is_positive[order].astype(np.int64)
    _, start, group = np.unique(qid, return_index=True, return_inverse=True)
    rank = np.arange(len(qid)) - start[group] + 1
    csum = np.cumsum(pos)
    before = np.concatenate([[0], csum])[start]
    hits = csum - before[group]
    n_pos = np.bincount(group, weights=pos)
    prec_sum = np.bincount(group, weights=np.where(pos == 1, hits / rank, 0.0))
    has_pos = n_pos > 0
    if not has_pos.any():
        raise UndefinedMetricError("no query has a positive pair")
    return float(np.mean(prec_sum[has_pos] / n_pos[has_pos]))


def pr_curve(rpl: RankedPairList):
    """(precision, recall) at every rank holding a positive."""
    hits = np.cumsum(rpl.is_positive)
    ranks = np.flatnonzero(rpl.is_positive) + 1
    return hits[ranks - 1] / ranks, hits[ranks - 1] / max(rpl.n_positives, 1)


def write_pr_csv(rpl: RankedPairList, path) -> None:
    precision, recall = pr_curve(rpl)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["precision", "recall"])
        w.writerows(zip(precision.tolist(), recall.tolist()))


def metrics_report(rpl: RankedPairList) -> dict:
    return {
        "mu_ap": micro_ap(rpl),
        "macro_ap": macro_ap(rpl),
        "n_pairs": len(rpl),
        "n_positives": rpl.n_positives,
    }


def write_metrics(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_ground_truth(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["query_id", "key_id"]:
        raise FormatError(f"{path}: expected header 'query_id,key_id'")
    try:
        pairs = [(int(a), int(b)) for a, b in rows[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def write_ground_truth(pairs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "key_id"])
        w.writerows(np.asarray(pairs, dtype=np.int64).tolist())


def as_descriptor(x) -> np.ndarray:
    """Descriptors travel as float32; round through it so in-process
    evaluation agrees exactly with evaluation from descriptor files."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def evaluate_descriptors(q_desc, k_desc, split, tau: float = 0.07) -> dict:
    rpl = rank_all_pairs(
        as_descriptor(q_desc),
        as_descriptor(k_desc),
        tau,
        split.ground_truth,
        split.query_ids,
        split.key_ids,
    )
    return metrics_report(rpl)


def evaluate_model(q_enc, k_enc, featurizer, split, tau: float = 0.07, workers: int = 1) -> dict:
    """Embed both sides of a held-out split with full forwards and score it."""
    from .encoder import embed

    q_desc = embed(q_enc, featurizer, split.queries, workers)
    k_desc = embed(k_enc, featurizer, split.keys, workers)
    return evaluate_descriptors(q_desc, k_desc, split, tau)


def evaluate_baseline(featurizer, split, tau: float = 0.07) -> dict:
    from .encoder import baseline_featurize
    from .parallel import map_rows

    def feat(x):
        return map_rows(lambda t: baseline_featurize(featurizer, t), np.asarray(x, float))

    return evaluate_descriptors(feat(split.queries), feat(split.keys), split, tau)
