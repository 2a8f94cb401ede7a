"""Counterfactual (IPS), naive and full-information listwise training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ClickLog, ClickModelParams, QueryList, ValidationError
from .metrics import batch_ndcg
from .propensity import (
    ClippingPolicy,
    RelevanceEstimate,
    conditional_examination,
    ips_weights,
    list_attributes,
)
from .ranker import Ranker, weighted_softmax_ce

logger = logging.getLogger(__name__)

MODES = ("ips", "no_ips", "full_info")


@dataclass
class StackedLists:
    """Query lists padded into dense arrays."""

    lists: list
    features: np.ndarray  # (n_lists, width, dim)
    relevance: np.ndarray  # (n_lists, width)
    mask: np.ndarray
    tiebreak: np.ndarray

    @property
    def width(self) -> int:
        return self.features.shape[1]


def stack_lists(lists: Sequence[QueryList], width: int | None = None) -> StackedLists:
    lists = list(lists)
    width = width or max((ql.length for ql in lists), default=1)
    dim = next((ql.dim for ql in lists if ql.length), 0)
    n = len(lists)
    feats = np.zeros((n, width, dim))
    rel = np.zeros((n, width), dtype=np.int8)
    mask = np.zeros((n, width), dtype=bool)
    tiebreak = np.zeros((n, width), dtype=np.int64)
    for i, ql in enumerate(lists):
        m = ql.length
        if m > width:
            raise ValidationError(f"list {ql.query_id} has {m} docs, wider than {width}")
        feats[i, :m] = ql.features
        rel[i, :m] = ql.relevance
        mask[i, :m] = True
        tiebreak[i, :m] = np.argsort(np.argsort(np.asarray(ql.doc_ids, dtype=object), kind="stable"), kind="stable")
    return StackedLists(lists, feats, rel, mask, tiebreak)


@dataclass
class StackedLog:
    features: np.ndarray  # per list, shared by sessions
    list_index: np.ndarray  # (n_sessions,)
    clicks: np.ndarray  # (n_sessions, width)
    mask: np.ndarray  # (n_sessions, width)


def stack_log(log: ClickLog, lists: Sequence[QueryList], width: int) -> StackedLog:
    """Align every session with its query list as padded arrays."""
    stacked = stack_lists(lists, width)
    position = {ql.query_id: i for i, ql in enumerate(stacked.lists)}
    n = len(log)
    list_index = np.empty(n, dtype=np.int64)
    clicks = np.zeros((n, stacked.width), dtype=np.int8)
    for i, s in enumerate(log):
        try:
            q = position[s.query_id]
        except KeyError:
            raise ValidationError(f"session {i} refers to unknown query {s.query_id!r}") from None
        if s.clicks.size != stacked.lists[q].length:
            raise ValidationError(
                f"session {i} has {s.clicks.size} clicks for a list of {stacked.lists[q].length} docs"
            )
        list_index[i] = q
        clicks[i, : s.clicks.size] = s.clicks
    return StackedLog(stacked.features, list_index, clicks, stacked.mask[list_index])


def score_list(ranker: Ranker, ql: QueryList) -> np.ndarray:
    return ranker.score_list(ql)


def session_weights(log: StackedLog, lists: Sequence[QueryList], propensity: ClickModelParams | None,
                    policy: ClippingPolicy, relevance: RelevanceEstimate | None = None) -> np.ndarray:
    """Clipped IPS weight for every session and rank (plain clicks when ``propensity`` is None)."""
    if propensity is None:
        return log.clicks.astype(np.float64)
    width = log.clicks.shape[1]
    rel, sat = list_attributes(propensity, lists, width, relevance)
    prop = conditional_examination(propensity, log.clicks, rel[log.list_index], sat[log.list_index])
    return ips_weights(prop, log.clicks, policy)


@dataclass
class TrainConfig:
    mode: str = "ips"
    lr: float = 0.02
    batch_size: int = 256
    steps: int = 4000
    max_weight: float = 100.0
    seed: int = 0
    eval_every: int = 500
    architecture: str = "linear"
    hidden: tuple = (32, 16)
    dropout: float = 0.1
    grad_clip: float | None = 10.0

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0 or self.batch_size <= 0 or self.steps <= 0 or self.eval_every <= 0:
            raise ValidationError("learning rate, batch size, steps and eval cadence must be positive")

    def new_ranker(self, dim: int) -> Ranker:
        if self.architecture == "linear":
            return Ranker.linear(dim)
        if self.architecture == "mlp":
            return Ranker.mlp(dim, self.hidden, self.dropout, seed=self.seed)
        raise ValidationError(f"unknown architecture {self.architecture!r}")


@dataclass
class TrainResult:
    ranker: Ranker
    curve: list = field(default_factory=list)  # (clicks_consumed, ndcg@10)
    losses: list = field(default_factory=list)

    def curve_csv(self) -> str:
        rows = ["clicks_consumed,ndcg_at_10"]
        rows += [f"{c},{v:.6f}" for c, v in self.curve]
        return "\n".join(rows) + "\n"


def mean_ndcg(ranker: Ranker, stacked: StackedLists, k: int = 10) -> float:
    if not stacked.lists:
        return float("nan")
    scores = ranker.score(stacked.features)
    return float(batch_ndcg(scores, stacked.relevance, stacked.mask, stacked.tiebreak, k).mean())


def train(train_lists: Sequence[QueryList], log: ClickLog | None, propensity: ClickModelParams | None = None,
          config: TrainConfig = TrainConfig(), test_lists: Sequence[QueryList] = (),
          relevance: RelevanceEstimate | None = None, width: int | None = None) -> TrainResult:
    """Fit a ranker by mini-batch SGD on a weighted listwise softmax cross-entropy.

    ``ips`` weights each click by its clipped inverse propensity under
    ``propensity`` (session-conditional for cascade models), ``no_ips`` uses
    raw clicks and ``full_info`` trains on the true labels of ``train_lists``
    instead of the log. Click weights are rescaled by one constant so that
    the average clicked weight is 1, which leaves the optimum unchanged and
    keeps step sizes comparable across modes.
    """
    width = width or max(ql.length for ql in train_lists)
    dim = next(ql.dim for ql in train_lists if ql.length)
    rng = np.random.default_rng(config.seed)
    ranker = config.new_ranker(dim)
    test_stack = stack_lists(test_lists, width) if test_lists else None

    if config.mode == "full_info":
        stacked = stack_lists(train_lists, width)
        rel = stacked.relevance.astype(np.float64)
        n_rel = rel.sum(axis=1, keepdims=True)
        if np.any(n_rel == 0):
            raise ValidationError("full-information training needs a relevant document in every list")
        weights = rel / n_rel
        list_index = np.arange(len(stacked.lists))
        features, mask = stacked.features, stacked.mask
        consumed_unit = np.ones(len(list_index))
    else:
        if log is None or len(log) == 0:
            raise ValidationError(f"{config.mode} training needs a click log")
        slog = stack_log(log, train_lists, width)
        policy = ClippingPolicy(config.max_weight)
        weights = session_weights(slog, train_lists, propensity if config.mode == "ips" else None, policy, relevance)
        clicked = weights[slog.clicks > 0]
        weights = weights / clicked.mean()
        list_index = slog.list_index
        features, mask = slog.features, slog.mask
        consumed_unit = slog.clicks.sum(axis=1)

    n = len(list_index)
    batch = min(config.batch_size, n)
    result = TrainResult(ranker)
    order = rng.permutation(n)
    cursor = 0
    consumed = 0
    for step in range(config.steps):
        if cursor + batch > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor: cursor + batch]
        cursor += batch
        x = features[list_index[idx]]
        drop_rng = rng if config.architecture == "mlp" else None
        scores, cache = ranker.forward(x, drop_rng)
        losses, g_scores = weighted_softmax_ce(scores, weights[idx], mask[idx])
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step} (mode {config.mode})")
        grads = ranker.backward(cache, g_scores / batch)
        if config.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > config.grad_clip:
                grads = [g * (config.grad_clip / norm) for g in grads]
        for w, g in zip(ranker.weights, grads):
            w -= config.lr * g
        consumed += int(consumed_unit[idx].sum())
        result.losses.append(loss)
        if test_stack is not None and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            result.curve.append((consumed, mean_ndcg(ranker, test_stack)))
    ranker.meta.update({"steps": config.steps, "seed": config.seed, "mode": config.mode})
    return result
