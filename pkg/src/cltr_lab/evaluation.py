"""Ranker evaluation and click-model selection by held-out click log-likelihood."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ClickLog, ClickModelParams, PBMParams, QueryList
from .ltr import stack_lists, stack_log
from .metrics import NormalizerKind, batch_ndcg, normalize_scores
from .propensity import RelevanceEstimate, conditional_examination, list_attributes
from .ranker import Ranker

PROBABILITY_FLOOR = 1e-6


@dataclass
class EvalReport:
    per_query: dict
    method: str = ""
    repeat: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_query.values()))) if self.per_query else float("nan")

    def to_csv(self) -> str:
        rows = ["query_id,ndcg10"] + [f"{q},{v:.6f}" for q, v in self.per_query.items()]
        return "\n".join(rows) + "\n"


def evaluate_ranker(ranker: Ranker, lists: Sequence[QueryList], k: int = 10,
                    method: str = "", repeat: int = 0) -> EvalReport:
    stacked = stack_lists(lists)
    values = batch_ndcg(ranker.score(stacked.features), stacked.relevance, stacked.mask, stacked.tiebreak, k)
    for v in values:
        assert 0.0 <= v <= 1.0 + 1e-12
    return EvalReport({ql.query_id: float(v) for ql, v in zip(stacked.lists, values)}, method, repeat)


def _attraction_table(ranker: Ranker, lists, width: int, normalizer: NormalizerKind) -> np.ndarray:
    table = np.zeros((len(lists), width))
    for i, ql in enumerate(lists):
        table[i, : ql.length] = normalize_scores(ranker.score(ql.features), normalizer)
    return table


def click_log_likelihood(log: ClickLog, lists: Sequence[QueryList], ranker: Ranker,
                         model: ClickModelParams, normalizer="exp_minmax") -> float:
    """Total log-likelihood of the observed clicks.

    ``P(C_j = 1 | c_<j)`` is the model's examination probability given the
    clicks above rank j times the ranker's normalized score, which stands in
    for the attraction (and for CCM's relevance). Both ``p`` and ``1 - p``
    are floored at 1e-6 before taking logs.
    """
    if len(log) == 0:
        return 0.0
    normalizer = NormalizerKind.parse(normalizer)
    lists = list(lists)
    width = max(ql.length for ql in lists)
    slog = stack_log(log, lists, width)
    attraction = _attraction_table(ranker, lists, width, normalizer)
    _, sat = list_attributes(model, lists, width)
    rho = attraction[slog.list_index]
    exam = conditional_examination(model, slog.clicks, rho, sat[slog.list_index])
    p = np.clip(exam * rho, 0.0, 1.0)
    c = slog.clicks > 0
    terms = np.where(c, np.log(np.maximum(p, PROBABILITY_FLOOR)), np.log(np.maximum(1.0 - p, PROBABILITY_FLOOR)))
    # fixed summation order: per session, then across sessions
    return float(np.sum(np.where(slog.mask, terms, 0.0), axis=1).sum())


@dataclass
class Selection:
    chosen: str
    ll: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"chosen": self.chosen, "ll": self.ll}


def select_method(log: ClickLog, lists: Sequence[QueryList], ranker: Ranker,
                  candidates: Sequence[tuple], normalizer="exp_minmax") -> Selection:
    """Pick the candidate click model with the highest click log-likelihood.

    ``candidates`` holds ``(params, label)`` pairs. Exact ties go to a PBM
    candidate when one is among the best.
    """
    if len(candidates) < 2:
        raise ValueError("method selection needs at least two candidates")
    table = {label: click_log_likelihood(log, lists, ranker, params, normalizer) for params, label in candidates}
    best = max(table.values())
    tied = [(params, label) for params, label in candidates if table[label] == best]
    pbm = [label for params, label in tied if isinstance(params, PBMParams)]
    return Selection(pbm[0] if pbm else tied[0][1], table)


def relevance_from_ranker(ranker: Ranker, lists: Sequence[QueryList], normalizer="exp_minmax") -> RelevanceEstimate:
    return RelevanceEstimate.from_ranker(ranker, lists, normalizer)
