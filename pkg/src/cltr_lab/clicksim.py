"""Click simulation under PBM, DCM, DBN and CCM user models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    CCMParams,
    ClickLog,
    ClickModelParams,
    DBNParams,
    DCMParams,
    NoiseSpec,
    PBMParams,
    QueryList,
    Session,
    ValidationError,
    reciprocal_schedule,
)

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096


class SimulationError(RuntimeError):
    pass


def pbm_theta_schedule(eta: float, k: int) -> np.ndarray:
    """Examination probability ``(1/j)**eta`` for ranks 1..k."""
    return reciprocal_schedule(eta, k)


def dcm_lambda_schedule(beta: float, eta: float, k: int) -> np.ndarray:
    """Post-click continuation probability ``beta * (1/j)**eta`` for ranks 1..k."""
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"beta must lie in [0, 1], got {beta}")
    return reciprocal_schedule(eta, k, scale=beta)


def dbn_params_from_relevance(lists: Sequence[QueryList], gamma: float, s_relevant: float = 0.6,
                              s_nonrelevant: float = 0.1) -> DBNParams:
    """DBN parameters whose per-document satisfaction follows binary relevance."""
    sat = {d: (s_relevant if r else s_nonrelevant) for ql in lists for d, r in zip(ql.doc_ids, ql.relevance)}
    return DBNParams(gamma, sat, default_satisfaction=s_nonrelevant)


def model_label(params: ClickModelParams) -> str:
    """Experiment-style label such as ``dcm_0.6_0.5`` or ``pbm_1.0``."""
    if isinstance(params, PBMParams) and params.eta is not None:
        return f"pbm_{params.eta:.1f}"
    if isinstance(params, DCMParams) and params.beta is not None:
        return f"dcm_{params.beta:.1f}_{params.eta:.1f}"
    if isinstance(params, DBNParams):
        return f"dbn_{params.gamma:g}"
    if isinstance(params, CCMParams):
        return f"ccm_{params.alpha1:g}_{params.alpha2:g}_{params.alpha3:g}"
    return params.kind


@dataclass(frozen=True)
class SimulatorConfig:
    params: ClickModelParams
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    keep_empty_sessions: bool = False
    seed: int = 0
    target_clicks: int = 200_000
    max_sessions: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.target_clicks <= 0:
            raise ValidationError("target_clicks must be positive")

    @property
    def label(self) -> str:
        return self.name or model_label(self.params)


# --------------------------------------------------------------------------
# Vectorized session dynamics
# --------------------------------------------------------------------------


def simulate_batch(params: ClickModelParams, attraction: np.ndarray, rng: np.random.Generator,
                   relevance: np.ndarray | None = None, satisfaction: np.ndarray | None = None,
                   mask: np.ndarray | None = None):
    """Simulate one session per row; returns ``(clicks, examined)`` boolean arrays.

    ``attraction[i, j]`` is the click probability of the document at rank j
    once examined. Columns where ``mask`` is False are never examined.
    """
    att = np.asarray(attraction, dtype=np.float64)
    n, k = att.shape
    mask = np.ones((n, k), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    if isinstance(params, PBMParams):
        theta = params.examination(k)
        examined = (rng.random((n, k)) < theta) & mask
        clicks = examined & (rng.random((n, k)) < att)
        return clicks, examined

    if isinstance(params, DCMParams):
        lam = params.continuation(k)
    elif isinstance(params, DBNParams):
        if satisfaction is None:
            raise ValidationError("DBN simulation needs per-position satisfaction")
        sat = np.asarray(satisfaction, dtype=np.float64)
    elif isinstance(params, CCMParams):
        if relevance is None:
            raise ValidationError("CCM simulation needs per-position relevance")
        rel = np.asarray(relevance, dtype=np.float64)
    else:
        raise ValidationError(f"unsupported click model {type(params).__name__}")

    u_click = rng.random((n, k))
    u_go = rng.random((n, k))
    u_sat = rng.random((n, k))
    examined = np.zeros((n, k), dtype=bool)
    clicks = np.zeros((n, k), dtype=bool)
    active = mask[:, 0].copy()
    for j in range(k):
        active &= mask[:, j]
        examined[:, j] = active
        clicked = active & (u_click[:, j] < att[:, j])
        clicks[:, j] = clicked
        if isinstance(params, DCMParams):
            # scan on without a click; after a click keep going with lambda_j
            go_on = ~clicked | (u_go[:, j] < lam[j])
        elif isinstance(params, DBNParams):
            satisfied = clicked & (u_sat[:, j] < sat[:, j])
            go_on = ~satisfied & (u_go[:, j] < params.gamma)
        else:
            after_click = params.alpha2 * (1.0 - rel[:, j]) + params.alpha3 * rel[:, j]
            go_on = np.where(clicked, u_go[:, j] < after_click, u_go[:, j] < params.alpha1)
        active &= go_on
    return clicks, examined


class _ListTable:
    """Padded per-list attributes used by the simulator."""

    def __init__(self, lists: Sequence[QueryList], params: ClickModelParams, noise: NoiseSpec):
        self.lists = list(lists)
        width = max(ql.length for ql in self.lists)
        n = len(self.lists)
        self.width = width
        self.lengths = np.array([ql.length for ql in self.lists])
        self.mask = np.arange(width)[None, :] < self.lengths[:, None]
        self.relevance = np.zeros((n, width))
        self.satisfaction = np.zeros((n, width))
        for i, ql in enumerate(self.lists):
            self.relevance[i, : ql.length] = ql.relevance
            if isinstance(params, DBNParams):
                self.satisfaction[i, : ql.length] = params.satisfaction_for(ql.doc_ids)
        self.attraction = np.where(self.mask, noise.attraction(self.relevance), 0.0)


def _check_coverage(params: ClickModelParams, width: int) -> None:
    if isinstance(params, PBMParams) and params.theta is not None and params.theta.size < width:
        raise ValidationError(f"theta covers {params.theta.size} ranks, list has {width}")
    if isinstance(params, DCMParams) and params.lam is not None and params.lam.size < width:
        raise ValidationError(f"lambda covers {params.lam.size} ranks, list has {width}")


def simulate_session(ql: QueryList, config: SimulatorConfig, rng: np.random.Generator) -> Session:
    """Clicks for one impression of ``ql``."""
    _check_coverage(config.params, ql.length)
    table = _ListTable([ql], config.params, config.noise)
    clicks, _ = simulate_batch(config.params, table.attraction, rng, table.relevance,
                               table.satisfaction, table.mask)
    return Session(ql.query_id, clicks[0].astype(np.int8), config.label, config.seed)


def simulate_log(lists: Sequence[QueryList], config: SimulatorConfig, block_size: int = BLOCK_SIZE) -> ClickLog:
    """Generate sessions until retained sessions hold ``target_clicks`` clicks.

    Queries are drawn uniformly with replacement. Block ``b`` of sessions uses
    its own generator seeded from ``(seed, b)``; each session records its
    position in the overall stream as ``seed``, so generation is reproducible
    and independent of how many blocks run.
    """
    if not lists:
        raise ValidationError("cannot simulate clicks on an empty dataset")
    table = _ListTable(lists, config.params, config.noise)
    _check_coverage(config.params, table.width)
    cap = config.max_sessions or max(1000 * config.target_clicks, 100_000)
    sessions: list[Session] = []
    total = 0
    block = 0
    while total < config.target_clicks:
        if block * block_size >= cap:
            raise SimulationError(
                f"only {total} of {config.target_clicks} clicks after {cap} sessions; "
                "examination or attraction probabilities are too small"
            )
        rng = np.random.default_rng([config.seed, block])
        qi = rng.integers(0, len(table.lists), size=block_size)
        clicks, _ = simulate_batch(config.params, table.attraction[qi], rng, table.relevance[qi],
                                   table.satisfaction[qi], table.mask[qi])
        per_session = clicks.sum(axis=1)
        for row in range(block_size):
            n_c = int(per_session[row])
            if n_c == 0 and not config.keep_empty_sessions:
                continue
            q = qi[row]
            sessions.append(Session(table.lists[q].query_id, clicks[row, : table.lengths[q]].astype(np.int8),
                                    config.label, block * block_size + row))
            total += n_c
            if total >= config.target_clicks:
                break
        block += 1
    logger.debug("simulated %d sessions with %d clicks (%s)", len(sessions), total, config.label)
    return ClickLog(sessions)
