"""Ranking metrics, score normalizers and significance testing."""
from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np
from scipy import stats


class NormalizerKind(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    EXP_MINMAX = "exp_minmax"

    @classmethod
    def parse(cls, value) -> "NormalizerKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_"))


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(scores, relevance, k: int = 10, doc_ids: Sequence[str] | None = None) -> float:
    """Binary-gain nDCG@k of the order induced by ``scores``.

    Ties are broken by ``doc_ids`` ascending (by position when omitted).
    """
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.sum() <= 0:
        raise ValueError("nDCG is undefined without a relevant document")
    if doc_ids is None:
        tiebreak = np.arange(scores.size)
    else:
        tiebreak = np.argsort(np.argsort(np.asarray(doc_ids, dtype=object), kind="stable"), kind="stable")
    order = np.lexsort((tiebreak, -scores))
    disc = _discounts(k)
    top = rel[order][:k]
    dcg = float(top @ disc[: top.size])
    ideal = np.sort(rel)[::-1][:k]
    return dcg / float(ideal @ disc[: ideal.size])


def batch_ndcg(scores: np.ndarray, relevance: np.ndarray, mask: np.ndarray,
               tiebreak: np.ndarray, k: int = 10) -> np.ndarray:
    """Vectorized nDCG@k over a padded ``(n_lists, width)`` stack.

    ``tiebreak`` holds each document's doc_id rank within its list.
    """
    s = np.where(mask, scores, -np.inf)
    order = np.lexsort((tiebreak, -s), axis=-1)
    rel = np.where(mask, relevance, 0).astype(np.float64)
    ranked = np.take_along_axis(rel, order, axis=-1)[:, :k]
    disc = _discounts(k)[: ranked.shape[1]]
    dcg = ranked @ disc
    ideal = -np.sort(-rel, axis=-1)[:, :k] @ disc
    return dcg / ideal


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value.

    A zero-variance difference gives p = 0 when the means differ, else 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    sd = d.std(ddof=1)
    mean = d.mean()
    if sd == 0 or not np.isfinite(sd):
        return 0.0 if mean != 0 else 1.0
    t = mean / (sd / np.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), df=d.size - 1))


def normalize_scores(scores, kind) -> np.ndarray:
    """Map ranker scores to click-attraction probabilities.

    ``exp_minmax`` min-max scales the list to [0, 1] and returns ``exp(z - 1)``,
    which lies in ``[1/e, 1]``; a constant-score list maps to 0.5 everywhere.
    This formula is a reconstruction, not a documented standard.
    """
    kind = NormalizerKind.parse(kind)
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot normalize an empty list")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if kind is NormalizerKind.SOFTMAX:
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        # floors keep outputs strictly positive when exp underflows
        return np.maximum(e / e.sum(axis=-1, keepdims=True), np.finfo(float).tiny)
    if kind is NormalizerKind.SIGMOID:
        return np.maximum(0.5 * (1.0 + np.tanh(0.5 * s)), np.finfo(float).tiny)
    lo = s.min(axis=-1, keepdims=True)
    span = np.ptp(s, axis=-1, keepdims=True)
    z = (s - lo) / np.where(span == 0, 1.0, span)
    return np.where(span == 0, 0.5, np.exp(z - 1.0))
