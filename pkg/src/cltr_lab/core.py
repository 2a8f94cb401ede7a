"""Domain types shared across the package.

Everything here is an immutable value: arrays are copied on construction and
flagged read-only, so instances can be handed to worker processes freely.
Feature vectors are stored as the rows of a per-list ``(n_docs, dim)`` array
rather than as individual objects.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np


class ValidationError(ValueError):
    """Raised when a value violates the invariants of its type."""


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_prob(name: str, value: float, low_open: bool = False) -> None:
    if not np.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value}")
    if low_open and not 0.0 < value <= 1.0:
        raise ValidationError(f"{name} must lie in (0, 1], got {value}")
    if not low_open and not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")


# --------------------------------------------------------------------------
# Query lists and click sessions
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QueryList:
    """One query with its ordered documents.

    ``features[j]`` is the representation of the (query, document) pair shown
    at position ``j``; ``relevance[j]`` is its binary relevance label.
    """

    query_id: str
    doc_ids: tuple
    features: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "query_id", str(self.query_id))
        object.__setattr__(self, "doc_ids", tuple(str(d) for d in self.doc_ids))
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim == 1 and len(self.doc_ids) == 0:
            feats = feats.reshape(0, 0)
        object.__setattr__(self, "features", _frozen(feats, np.float64))
        object.__setattr__(self, "relevance", _frozen(self.relevance, np.int8))

    @property
    def length(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0

    def violations(self) -> list[str]:
        problems = []
        n = len(self.doc_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            problems.append(f"features shape {self.features.shape} does not match {n} docs")
        elif not np.all(np.isfinite(self.features)):
            problems.append("non-finite feature value")
        if self.relevance.shape != (n,):
            problems.append(f"relevance length {self.relevance.shape} does not match {n} docs")
        elif not np.all(np.isin(self.relevance, (0, 1))):
            problems.append("relevance is not binary")
        dupes = [d for d, c in Counter(self.doc_ids).items() if c > 1]
        if dupes:
            problems.append(f"duplicate doc_id(s): {', '.join(sorted(dupes))}")
        return problems

    def subset(self, order: Sequence[int]) -> "QueryList":
        order = np.asarray(order, dtype=int)
        return QueryList(
            self.query_id,
            tuple(self.doc_ids[i] for i in order),
            self.features[order],
            self.relevance[order],
        )

    def __eq__(self, other):
        if not isinstance(other, QueryList):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and self.doc_ids == other.doc_ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.relevance, other.relevance)
        )

    def to_dict(self) -> dict:
        return {
            "qid": self.query_id,
            "docs": [
                {"id": d, "rel": int(r), "x": [float(v) for v in x]}
                for d, r, x in zip(self.doc_ids, self.relevance, self.features)
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QueryList":
        docs = d["docs"]
        dim = len(docs[0]["x"]) if docs else 0
        feats = np.array([doc["x"] for doc in docs], dtype=np.float64).reshape(len(docs), dim)
        return cls(d["qid"], [doc["id"] for doc in docs], feats, [doc["rel"] for doc in docs])


@dataclass(frozen=True, eq=False)
class Session:
    """One impression of a query list and the clicks it received."""

    query_id: str
    clicks: np.ndarray
    generator: str | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "query_id", str(self.query_id))
        clicks = _frozen(self.clicks, np.int8)
        if clicks.ndim != 1 or not np.all((clicks == 0) | (clicks == 1)):
            raise ValidationError(f"clicks must be a binary vector, got {self.clicks!r}")
        object.__setattr__(self, "clicks", clicks)

    @property
    def n_clicks(self) -> int:
        return int(self.clicks.sum())

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.clicks, other.clicks)
            and self.generator == other.generator
            and self.seed == other.seed
        )

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"qid": self.query_id, "clicks": [int(c) for c in self.clicks]}
        if self.generator is not None:
            d["gen"] = self.generator
        if self.seed is not None:
            d["seed"] = int(self.seed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Session":
        return cls(d["qid"], d["clicks"], d.get("gen"), d.get("seed"))


class ClickLog:
    """An ordered collection of sessions with a per-query index."""

    def __init__(self, sessions: Iterable[Session]):
        self._sessions = tuple(sessions)
        index: dict[str, list[int]] = {}
        for i, s in enumerate(self._sessions):
            index.setdefault(s.query_id, []).append(i)
        self._index = {q: tuple(v) for q, v in index.items()}

    @property
    def sessions(self) -> tuple:
        return self._sessions

    @property
    def query_index(self) -> Mapping[str, tuple]:
        return self._index

    @property
    def counts(self) -> dict[str, int]:
        return {q: len(v) for q, v in self._index.items()}

    @property
    def n_clicks(self) -> int:
        return sum(s.n_clicks for s in self._sessions)

    def __len__(self) -> int:
        return len(self._sessions)

    def __iter__(self):
        return iter(self._sessions)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ClickLog(self._sessions[i])
        return self._sessions[i]

    def __eq__(self, other):
        if not isinstance(other, ClickLog):
            return NotImplemented
        return self._sessions == other._sessions

    def unresolved_queries(self, query_ids: Iterable[str]) -> list[str]:
        known = set(query_ids)
        return sorted(q for q in self._index if q not in known)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict()) + "\n" for s in self._sessions)

    @classmethod
    def from_jsonl(cls, text: str) -> "ClickLog":
        return cls(Session.from_dict(json.loads(line)) for line in text.splitlines() if line.strip())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "ClickLog":
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


# --------------------------------------------------------------------------
# Click model parameters
# --------------------------------------------------------------------------


def reciprocal_schedule(eta: float, k: int, scale: float = 1.0) -> np.ndarray:
    """``scale * (1/j)**eta`` for ranks ``j = 1..k``."""
    if eta < 0:
        raise ValidationError(f"eta must be >= 0, got {eta}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    ranks = np.arange(1, k + 1, dtype=np.float64)
    return scale * (1.0 / ranks) ** eta


def _vector_or_schedule(name, values, schedule):
    if (values is None) == (schedule is None):
        raise ValidationError(f"{name}: give exactly one of an explicit vector or a schedule")


@dataclass(frozen=True, eq=False)
class PBMParams:
    """Position-based model: examination probability ``theta[j]`` per rank."""

    theta: np.ndarray | None = None
    eta: float | None = None

    kind = "pbm"

    def __post_init__(self):
        _vector_or_schedule("PBM", self.theta, self.eta)
        if self.theta is not None:
            theta = _frozen(self.theta, np.float64)
            if theta.ndim != 1 or theta.size == 0:
                raise ValidationError("PBM theta must be a non-empty vector")
            for j, t in enumerate(theta):
                _check_prob(f"theta[{j}]", float(t), low_open=True)
            object.__setattr__(self, "theta", theta)
        else:
            if not np.isfinite(self.eta) or self.eta < 0:
                raise ValidationError(f"PBM eta must be >= 0, got {self.eta}")
            object.__setattr__(self, "eta", float(self.eta))

    def examination(self, k: int) -> np.ndarray:
        if self.theta is None:
            return reciprocal_schedule(self.eta, k)
        if self.theta.size < k:
            raise ValidationError(f"theta has {self.theta.size} entries, list needs {k}")
        return np.array(self.theta[:k])

    def to_dict(self) -> dict:
        if self.theta is not None:
            return {"kind": "pbm", "theta": self.theta.tolist()}
        return {"kind": "pbm", "eta": self.eta}

    def __eq__(self, other):
        return isinstance(other, PBMParams) and self.to_dict() == other.to_dict()


@dataclass(frozen=True, eq=False)
class DCMParams:
    """Dependent click model: continuation probability ``lam[j]`` after a click at rank j."""

    lam: np.ndarray | None = None
    beta: float | None = None
    eta: float | None = None

    kind = "dcm"

    def __post_init__(self):
        schedule = None if self.beta is None and self.eta is None else (self.beta, self.eta)
        _vector_or_schedule("DCM", self.lam, schedule)
        if self.lam is not None:
            lam = _frozen(self.lam, np.float64)
            if lam.ndim != 1 or lam.size == 0:
                raise ValidationError("DCM lambda must be a non-empty vector")
            for j, v in enumerate(lam):
                _check_prob(f"lambda[{j}]", float(v))
            object.__setattr__(self, "lam", lam)
        else:
            if self.beta is None or self.eta is None:
                raise ValidationError("DCM schedule needs both beta and eta")
            _check_prob("beta", self.beta)
            if not np.isfinite(self.eta) or self.eta < 0:
                raise ValidationError(f"DCM eta must be >= 0, got {self.eta}")
            object.__setattr__(self, "beta", float(self.beta))
            object.__setattr__(self, "eta", float(self.eta))

    def continuation(self, k: int) -> np.ndarray:
        if self.lam is None:
            return reciprocal_schedule(self.eta, k, scale=self.beta)
        if self.lam.size < k:
            raise ValidationError(f"lambda has {self.lam.size} entries, list needs {k}")
        return np.array(self.lam[:k])

    def to_dict(self) -> dict:
        if self.lam is not None:
            return {"kind": "dcm", "lambda": self.lam.tolist()}
        return {"kind": "dcm", "beta": self.beta, "eta": self.eta}

    def __eq__(self, other):
        return isinstance(other, DCMParams) and self.to_dict() == other.to_dict()


@dataclass(frozen=True, eq=False)
class DBNParams:
    """Dynamic Bayesian network model.

    ``satisfaction`` maps doc_id to the probability that a click on it
    satisfies the user; documents missing from the mapping use ``default_satisfaction``.
    """

    gamma: float
    satisfaction: Mapping[str, float] = field(default_factory=dict)
    default_satisfaction: float = 0.0

    kind = "dbn"

    def __post_init__(self):
        _check_prob("gamma", self.gamma, low_open=True)
        _check_prob("default_satisfaction", self.default_satisfaction)
        sat = {str(k): float(v) for k, v in dict(self.satisfaction).items()}
        for doc, s in sat.items():
            _check_prob(f"satisfaction[{doc}]", s)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "default_satisfaction", float(self.default_satisfaction))
        object.__setattr__(self, "satisfaction", _FrozenDict(sat))

    def satisfaction_for(self, doc_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.satisfaction.get(d, self.default_satisfaction) for d in doc_ids])

    def to_dict(self) -> dict:
        return {
            "kind": "dbn",
            "gamma": self.gamma,
            "satisfaction": dict(self.satisfaction),
            "default_satisfaction": self.default_satisfaction,
        }

    def __eq__(self, other):
        return isinstance(other, DBNParams) and self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class CCMParams:
    """Click chain model continuation probabilities."""

    alpha1: float
    alpha2: float
    alpha3: float

    kind = "ccm"

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            _check_prob(name, getattr(self, name))
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_dict(self) -> dict:
        return {"kind": "ccm", "alpha1": self.alpha1, "alpha2": self.alpha2, "alpha3": self.alpha3}


class _FrozenDict(dict):
    def _readonly(self, *args, **kwargs):
        raise TypeError("mapping is read-only")

    __setitem__ = __delitem__ = update = pop = popitem = clear = setdefault = _readonly

    def __hash__(self):
        return hash(tuple(sorted(self.items())))


ClickModelParams = Union[PBMParams, DCMParams, DBNParams, CCMParams]


def params_from_dict(d: Mapping) -> ClickModelParams:
    kind = d.get("kind")
    if kind == "pbm":
        return PBMParams(theta=d.get("theta"), eta=d.get("eta"))
    if kind == "dcm":
        return DCMParams(lam=d.get("lambda"), beta=d.get("beta"), eta=d.get("eta"))
    if kind == "dbn":
        return DBNParams(d["gamma"], d.get("satisfaction", {}), d.get("default_satisfaction", 0.0))
    if kind == "ccm":
        return CCMParams(d["alpha1"], d["alpha2"], d["alpha3"])
    raise ValidationError(f"unknown click model kind {kind!r}")


# --------------------------------------------------------------------------
# Propensities and noise
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PropensityVector:
    """Per-position examination probabilities for one session.

    ``clipped[j]`` marks positions whose raw value fell below the clipping
    floor and was raised to it.
    """

    values: np.ndarray
    clipped: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        clipped = np.zeros(values.shape, dtype=bool) if self.clipped is None else self.clipped
        clipped = _frozen(clipped, bool)
        if values.ndim != 1 or clipped.shape != values.shape:
            raise ValidationError("propensity values and flags must be equal-length vectors")
        if not np.all((values > 0) & (values <= 1)):
            raise ValidationError(f"propensities must lie in (0, 1]: {values}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "clipped", clipped)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, PropensityVector):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.clipped, other.clipped)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "clipped": self.clipped.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PropensityVector":
        return cls(d["values"], d["clipped"])


@dataclass(frozen=True)
class NoiseSpec:
    """Click probabilities for examined documents by relevance."""

    p_click_nonrelevant: float = 0.05
    p_click_relevant: float = 1.0

    def __post_init__(self):
        _check_prob("p_click_nonrelevant", self.p_click_nonrelevant)
        _check_prob("p_click_relevant", self.p_click_relevant)

    def attraction(self, relevance) -> np.ndarray:
        rel = np.asarray(relevance, dtype=np.float64)
        return rel * self.p_click_relevant + (1.0 - rel) * self.p_click_nonrelevant

    def to_dict(self) -> dict:
        return {"p_click_nonrelevant": self.p_click_nonrelevant, "p_click_relevant": self.p_click_relevant}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseSpec":
        return cls(d["p_click_nonrelevant"], d["p_click_relevant"])


# --------------------------------------------------------------------------
# Dataset validation and (de)serialization
# --------------------------------------------------------------------------


@dataclass
class ValidationReport:
    n_queries: int = 0
    problems: dict[str, list[str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.problems


def validate_dataset(dataset: Iterable[QueryList]) -> ValidationReport:
    """Check every list's invariants plus dataset-wide feature dimension."""
    report = ValidationReport()
    dims: Counter = Counter()
    lists = list(dataset)
    for ql in lists:
        report.n_queries += 1
        problems = ql.violations()
        if problems:
            report.problems.setdefault(ql.query_id, []).extend(problems)
        if ql.length:
            dims[ql.dim] += 1
    if len(dims) > 1:
        majority = dims.most_common(1)[0][0]
        for ql in lists:
            if ql.length and ql.dim != majority:
                report.problems.setdefault(ql.query_id, []).append(
                    f"feature dim {ql.dim} differs from dataset dim {majority}"
                )
    seen: Counter = Counter(ql.query_id for ql in lists)
    for qid, c in seen.items():
        if c > 1:
            report.problems.setdefault(qid, []).append(f"query id appears {c} times")
    return report


def write_lists_jsonl(lists: Iterable[QueryList], path) -> None:
    with open(path, "w") as fh:
        for ql in lists:
            fh.write(json.dumps(ql.to_dict()) + "\n")


def read_lists_jsonl(path) -> list[QueryList]:
    with open(path) as fh:
        return [QueryList.from_dict(json.loads(line)) for line in fh if line.strip()]
