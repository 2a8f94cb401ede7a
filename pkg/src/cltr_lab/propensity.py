"""Examination propensities, IPS weights and click-model parameter estimation.

Cascade propensities are session-conditional: the examination probability of
rank j given the clicks observed above it. Each model's step from rank i to
rank i+1 multiplies the running examination probability by a continuation
factor that is affine in the click ``c_i``:

    DCM  1 - c_i (1 - lambda_i)
    DBN  gamma (1 - c_i s_i)
    CCM  alpha1 - c_i (alpha1 - alpha2 (1 - R_i) - alpha3 R_i)

Replacing ``c_i`` by the click probability ``P(C_i = 1 | E_i = 1)`` yields the
query-level marginal examination probability instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    CCMParams,
    ClickLog,
    ClickModelParams,
    DBNParams,
    DCMParams,
    NoiseSpec,
    PBMParams,
    PropensityVector,
    QueryList,
    ValidationError,
)
from .metrics import NormalizerKind, normalize_scores
from .ranker import Ranker, weighted_softmax_ce

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClippingPolicy:
    max_weight: float = 100.0

    def __post_init__(self):
        if not self.max_weight >= 1:
            raise ValidationError(f"max_weight must be >= 1, got {self.max_weight}")

    @property
    def floor(self) -> float:
        return 1.0 / self.max_weight

    def to_dict(self) -> dict:
        return {"max_weight": self.max_weight}


DEFAULT_CLIPPING = ClippingPolicy()


class RelevanceEstimate(dict):
    """Mapping ``(query_id, doc_id) -> P(relevant)``."""

    def __init__(self, values: Mapping = ()):
        super().__init__()
        for key, p in dict(values).items():
            p = float(p)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"relevance probability {p} for {key} outside [0, 1]")
            dict.__setitem__(self, (str(key[0]), str(key[1])), p)

    @classmethod
    def from_ranker(cls, ranker: Ranker, lists: Sequence[QueryList], normalizer="exp_minmax"):
        out = {}
        for ql in lists:
            probs = normalize_scores(ranker.score(ql.features), NormalizerKind.parse(normalizer))
            out.update({(ql.query_id, d): float(min(p, 1.0)) for d, p in zip(ql.doc_ids, probs)})
        return cls(out)

    @classmethod
    def oracle(cls, lists: Sequence[QueryList]):
        return cls({(ql.query_id, d): float(r) for ql in lists for d, r in zip(ql.doc_ids, ql.relevance)})

    def for_list(self, ql: QueryList) -> np.ndarray:
        return np.array([self[(ql.query_id, d)] for d in ql.doc_ids])


# --------------------------------------------------------------------------
# Vectorized core
# --------------------------------------------------------------------------


def continuation_factors(params: ClickModelParams, clicks, relevance=None, satisfaction=None) -> np.ndarray:
    """Per-rank factor carrying examination from rank i to rank i+1.

    ``clicks`` may be observed clicks or click probabilities; its last axis is
    the rank. PBM has no cascade structure and is rejected.
    """
    c = np.asarray(clicks, dtype=np.float64)
    k = c.shape[-1]
    if isinstance(params, DCMParams):
        lam = params.continuation(k)
        return 1.0 - c * (1.0 - lam)
    if isinstance(params, DBNParams):
        if satisfaction is None:
            raise ValidationError("DBN propensities need per-position satisfaction values")
        s = np.asarray(satisfaction, dtype=np.float64)
        return params.gamma * (1.0 - c * s)
    if isinstance(params, CCMParams):
        if relevance is None:
            raise ValidationError("CCM propensities need per-position relevance values")
        r = np.asarray(relevance, dtype=np.float64)
        after_click = params.alpha2 * (1.0 - r) + params.alpha3 * r
        return params.alpha1 - c * (params.alpha1 - after_click)
    raise ValidationError(f"no cascade continuation for {type(params).__name__}")


def _exclusive_cumprod(factors: np.ndarray) -> np.ndarray:
    out = np.ones_like(factors)
    out[..., 1:] = np.cumprod(factors[..., :-1], axis=-1)
    return out


def conditional_examination(params: ClickModelParams, clicks, relevance=None, satisfaction=None) -> np.ndarray:
    """Unclipped session-conditional examination for every rank, broadcasting over sessions.

    The value at rank j is the product of the per-rank continuation factors,
    i.e. the probability of reaching rank j when the response at every
    examined rank i < j is ``clicks[i]``.
    """
    c = np.asarray(clicks, dtype=np.float64)
    if isinstance(params, PBMParams):
        return np.broadcast_to(params.examination(c.shape[-1]), c.shape).copy()
    return _exclusive_cumprod(continuation_factors(params, c, relevance, satisfaction))


def marginal_examination(params: ClickModelParams, attraction, relevance=None, satisfaction=None) -> np.ndarray:
    """Exact query-level ``P(E_j = 1 | q)`` given per-rank click-given-examination probabilities."""
    return conditional_examination(params, attraction, relevance, satisfaction)


def _to_vector(raw: np.ndarray, policy: ClippingPolicy) -> PropensityVector:
    raw = np.asarray(raw, dtype=np.float64)
    clipped = raw < policy.floor
    return PropensityVector(np.where(clipped, policy.floor, np.minimum(raw, 1.0)), clipped)


# --------------------------------------------------------------------------
# Per-session propensities
# --------------------------------------------------------------------------


def pbm_propensity(theta, list_length: int, policy: ClippingPolicy = DEFAULT_CLIPPING) -> PropensityVector:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size < list_length:
        raise ValidationError(f"theta has {theta.size} entries, list has {list_length}")
    return _to_vector(theta[:list_length], policy)


def dcm_propensity(lam, clicks, policy: ClippingPolicy = DEFAULT_CLIPPING) -> PropensityVector:
    clicks = np.asarray(clicks)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size < clicks.size:
        raise ValidationError(f"lambda has {lam.size} entries, list has {clicks.size}")
    raw = conditional_examination(DCMParams(lam=lam[: clicks.size]), clicks)
    return _to_vector(raw, policy)


def dbn_propensity(gamma: float, satisfaction, clicks, policy: ClippingPolicy = DEFAULT_CLIPPING) -> PropensityVector:
    raw = conditional_examination(DBNParams(gamma), clicks, satisfaction=satisfaction)
    return _to_vector(raw, policy)


def ccm_propensity(alpha1: float, alpha2: float, alpha3: float, rel, clicks,
                   policy: ClippingPolicy = DEFAULT_CLIPPING) -> PropensityVector:
    raw = conditional_examination(CCMParams(alpha1, alpha2, alpha3), clicks, relevance=rel)
    return _to_vector(raw, policy)


def ips_weights(prop, clicks, policy: ClippingPolicy = DEFAULT_CLIPPING) -> np.ndarray:
    """``min(1/p, max_weight)`` on clicked positions, 0 elsewhere; ``p = 0`` maps to ``max_weight``.

    Accepts a :class:`PropensityVector` or a raw array of any shape matching ``clicks``.
    """
    values = prop.values if isinstance(prop, PropensityVector) else np.asarray(prop, dtype=np.float64)
    clicks = np.asarray(clicks)
    if values.shape != clicks.shape:
        raise ValueError(f"propensity shape {values.shape} does not match clicks {clicks.shape}")
    with np.errstate(divide="ignore", over="ignore"):
        inv = np.where(values > 0, 1.0 / np.where(values > 0, values, 1.0), np.inf)
    return np.where(clicks > 0, np.minimum(inv, policy.max_weight), 0.0)


# --------------------------------------------------------------------------
# Oracles and estimators
# --------------------------------------------------------------------------


def list_attributes(params: ClickModelParams, lists: Sequence[QueryList], width: int,
                    relevance: RelevanceEstimate | None = None):
    """Padded ``(n_lists, width)`` relevance and satisfaction matrices for a propensity model."""
    rel = np.zeros((len(lists), width))
    sat = np.zeros((len(lists), width))
    for i, ql in enumerate(lists):
        n = ql.length
        rel[i, :n] = ql.relevance if relevance is None else relevance.for_list(ql)
        if isinstance(params, DBNParams):
            sat[i, :n] = params.satisfaction_for(ql.doc_ids)
    return rel, sat


def pbm_oracle_theta(lists: Sequence[QueryList], params: ClickModelParams, noise: NoiseSpec,
                     k: int) -> PBMParams:
    """Best query-independent examination curve for logs generated by ``params``.

    For PBM this is the model's own theta. For cascade models it is the exact
    per-query marginal examination probability averaged over lists with
    uniform query sampling, which is what a PBM fitted to infinite data
    converges to.
    """
    if isinstance(params, PBMParams):
        return PBMParams(theta=params.examination(k))
    att = np.zeros((len(lists), k))
    present = np.zeros((len(lists), k), dtype=bool)
    for i, ql in enumerate(lists):
        att[i, : ql.length] = noise.attraction(ql.relevance)
        present[i, : ql.length] = True
    rel, sat = list_attributes(params, lists, k)
    marg = marginal_examination(params, att, rel, sat)
    counts = present.sum(axis=0)
    theta = np.where(present, marg, 0.0).sum(axis=0) / np.maximum(counts, 1)
    theta = np.where(counts > 0, theta, theta[counts > 0][-1] if counts.any() else 1.0)
    return PBMParams(theta=np.clip(theta, 1e-12, 1.0))


@dataclass
class DCMEstimate:
    lam: np.ndarray
    support: np.ndarray
    flagged: np.ndarray

    @property
    def params(self) -> DCMParams:
        return DCMParams(lam=self.lam)

    def to_dict(self) -> dict:
        return {"lambda": self.lam.tolist(), "support": self.support.tolist(), "flagged": self.flagged.tolist()}


def mle_dcm_lambda(log: ClickLog, k: int, default: float = 1.0) -> DCMEstimate:
    """Last-click estimator of the DCM continuation probabilities.

    ``lambda_j`` is the share of sessions clicked at rank j in which that click
    is not the session's last. Ranks without clicks inherit the previous
    supported estimate (``default`` before any) and are flagged.
    """
    clicked = np.zeros(k)
    not_last = np.zeros(k)
    for s in log:
        c = np.asarray(s.clicks[:k])
        pos = np.flatnonzero(c)
        if pos.size == 0:
            continue
        clicked[pos] += 1
        not_last[pos[:-1]] += 1
    lam = np.empty(k)
    flagged = clicked == 0
    last = default
    for j in range(k):
        if flagged[j]:
            lam[j] = last
        else:
            lam[j] = last = not_last[j] / clicked[j]
    return DCMEstimate(lam, clicked.astype(int), flagged)


@dataclass
class DLAConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 0.1
    propensity_lr: float = 0.1
    max_weight: float = 100.0
    seed: int = 0


@dataclass
class PBMEstimate:
    theta: np.ndarray
    flagged: np.ndarray
    ranker: Ranker | None = None
    history: list = field(default_factory=list)

    @property
    def params(self) -> PBMParams:
        return PBMParams(theta=self.theta)

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "flagged": self.flagged.tolist()}


def estimate_pbm_dla(log: ClickLog, lists: Sequence[QueryList], k: int,
                     config: DLAConfig = DLAConfig()) -> PBMEstimate:
    """Simplified dual learning of PBM propensities and a linear ranker.

    Two softmax cross-entropy objectives are optimized in alternation on the
    same mini-batches: the ranker's, with clicks weighted by the inverse of the
    current examination estimate, and a per-rank propensity model's, with
    clicks weighted by the inverse of the ranker's relative relevance estimate.
    The returned theta is normalized so that rank 1 has propensity 1; ranks
    that never received a click are flagged as unidentifiable.
    """
    if len(log) == 0:
        raise ValueError("DLA needs a non-empty click log")
    from .ltr import stack_log

    stacked = stack_log(log, lists, k)
    clicks, mask = stacked.clicks, stacked.mask
    n = clicks.shape[0]
    ranker = Ranker.linear(stacked.features.shape[-1])
    logits = np.zeros(k)
    rng = np.random.default_rng(config.seed)
    flagged = clicks.sum(axis=0) == 0
    history = []
    order = rng.permutation(n)
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor: cursor + config.batch_size]
        cursor += config.batch_size
        c, m = clicks[idx], mask[idx]
        x = stacked.features[stacked.list_index[idx]]

        exam = np.exp(logits - logits.max())
        theta = exam / exam[0]
        w_rank = ips_weights(theta[None, :].repeat(len(idx), 0), c, ClippingPolicy(config.max_weight))
        scores, cache = ranker.forward(x)
        loss_r, g_scores = weighted_softmax_ce(scores, w_rank / max(w_rank.sum(), 1e-12) * len(idx), m)
        grads = ranker.backward(cache, g_scores / len(idx))

        rel = np.exp(np.where(m, scores - scores[:, :1], -np.inf))
        w_prop = ips_weights(rel, c, ClippingPolicy(config.max_weight))
        w_prop = w_prop / max(w_prop.sum(), 1e-12) * len(idx)
        p_exam = exam / exam.sum()
        g_logits = (w_prop.sum(axis=1, keepdims=True) * p_exam - w_prop).sum(axis=0) / len(idx)
        loss_p = -np.sum(w_prop * np.log(p_exam)) / len(idx)
        if not (np.isfinite(loss_r).all() and np.isfinite(loss_p)):
            raise FloatingPointError(f"DLA diverged at step {step}: ranker loss {loss_r}, propensity loss {loss_p}")

        ranker.weights[0] -= config.lr * grads[0]
        logits -= config.propensity_lr * g_logits
        if step % 100 == 0:
            history.append((step, float(np.mean(loss_r)), float(loss_p)))

    exam = np.exp(logits - logits.max())
    theta = np.clip(exam / exam[0], 1e-6, 1.0)
    theta[0] = 1.0
    return PBMEstimate(theta, flagged, ranker, history)
