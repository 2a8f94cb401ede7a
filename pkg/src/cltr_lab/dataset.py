"""Dataset ingestion, synthetic generation, initial ranking and top-k preparation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .core import QueryList, ValidationError, read_lists_jsonl, write_lists_jsonl
from .ranker import Ranker

logger = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_RELEVANCE_THRESHOLD = 3


class DatasetFormatError(ValueError):
    pass


@dataclass
class PreparedDataset:
    train: list[QueryList]
    test: list[QueryList]
    feature_dim: int
    k: int = DEFAULT_K
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self._train_index = {ql.query_id: i for i, ql in enumerate(self.train)}

    def train_list(self, query_id: str) -> QueryList:
        return self.train[self._train_index[query_id]]

    def train_position(self, query_id: str) -> int:
        return self._train_index[query_id]

    def has_query(self, query_id: str) -> bool:
        return query_id in self._train_index

    def save(self, directory) -> None:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_lists_jsonl(self.train, d / "train.jsonl")
        write_lists_jsonl(self.test, d / "test.jsonl")
        meta = dict(self.provenance, feature_dim=self.feature_dim, k=self.k)
        (d / "provenance.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PreparedDataset":
        from pathlib import Path

        d = Path(directory)
        meta = json.loads((d / "provenance.json").read_text())
        return cls(
            read_lists_jsonl(d / "train.jsonl"),
            read_lists_jsonl(d / "test.jsonl"),
            meta["feature_dim"],
            meta["k"],
            meta,
        )


# --------------------------------------------------------------------------
# LETOR / SVMLight ingestion
# --------------------------------------------------------------------------


def _parse_line(line: str, lineno: int):
    body, _, comment = line.partition("#")
    toks = body.split()
    if len(toks) < 2:
        raise DatasetFormatError(f"line {lineno}: expected '<label> qid:<id> ...'")
    try:
        label = int(toks[0])
    except ValueError:
        raise DatasetFormatError(f"line {lineno}: label {toks[0]!r} is not an integer") from None
    if label < 0:
        raise DatasetFormatError(f"line {lineno}: negative label {label}")
    if not toks[1].startswith("qid:"):
        raise DatasetFormatError(f"line {lineno}: second token must be qid:<id>")
    qid = toks[1][4:]
    feats = {}
    for tok in toks[2:]:
        idx, sep, val = tok.partition(":")
        try:
            i = int(idx)
            v = float(val)
        except ValueError:
            raise DatasetFormatError(f"line {lineno}: bad feature token {tok!r}") from None
        if not sep or i < 1:
            raise DatasetFormatError(f"line {lineno}: feature indices are 1-based, got {tok!r}")
        if not np.isfinite(v):
            raise DatasetFormatError(f"line {lineno}: non-finite feature value {tok!r}")
        feats[i] = v
    doc_id = comment.strip().split()[0] if comment.strip() else None
    return label, qid, feats, doc_id


def load_letor(path, relevance_threshold: int = DEFAULT_RELEVANCE_THRESHOLD,
               feature_dim: int | None = None) -> list[QueryList]:
    """Read an SVMLight/LETOR file into query lists with binary relevance.

    Labels at or above ``relevance_threshold`` become relevant. Absent feature
    indices are filled with 0. Documents without a ``# doc_id`` comment get
    ``d<n>`` by order of appearance within their query.
    """
    rows: dict[str, list] = {}
    max_index = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            label, qid, feats, doc_id = _parse_line(line, lineno)
            if feats:
                max_index = max(max_index, max(feats))
            rows.setdefault(qid, []).append((label, feats, doc_id, lineno))

    dim = max_index if feature_dim is None else feature_dim
    if max_index > dim:
        raise DatasetFormatError(f"feature index {max_index} exceeds declared dim {dim}")
    out = []
    for qid, docs in rows.items():
        x = np.zeros((len(docs), dim))
        ids, rel = [], []
        for n, (label, feats, doc_id, lineno) in enumerate(docs):
            for i, v in feats.items():
                x[n, i - 1] = v
            ids.append(doc_id if doc_id is not None else f"d{n}")
            rel.append(1 if label >= relevance_threshold else 0)
        if len(set(ids)) != len(ids):
            raise DatasetFormatError(f"query {qid}: duplicate doc ids")
        out.append(QueryList(qid, ids, x, rel))
    return out


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


def generate_synthetic(n_queries: int, docs_per_query: int, feature_dim: int,
                       relevant_fraction: float, seed: int,
                       label_noise: float = 1.0, query_spread: float = 0.0,
                       query_shift: float = 0.0) -> list[QueryList]:
    """Synthetic lists whose relevance is a noisy threshold of a linear score.

    Recipe: a unit direction ``w`` is drawn once per seed; each document gets
    features ``x ~ N(0, I)``, a latent ``z = x.w + label_noise * eps`` with
    ``eps ~ N(0, 1)``, and ``r = 1`` iff ``z`` exceeds the ``1 - relevant_fraction``
    quantile of its marginal ``N(0, 1 + label_noise**2)``. Each document is
    therefore relevant with probability exactly ``relevant_fraction``,
    independently of the others.

    ``query_spread > 0`` adds a per-query offset ``query_spread * u_q`` with
    ``u_q ~ N(0, 1)`` to the latent score (and widens the cut so the marginal
    rate is unchanged), making some queries much richer in relevant
    documents than others.

    ``query_shift > 0`` adds a per-query feature offset ``m_q`` drawn from
    ``N(0, diag(query_shift * g)**2)`` with per-feature scales ``g ~ Exp(1)``
    fixed per seed. The offset is shared by all documents of a query, so it
    never changes the within-query order by ``x.w``, but it misleads
    pointwise scorers pooled across queries.
    """
    if min(n_queries, docs_per_query, feature_dim) < 1:
        raise ValueError("counts must be positive")
    if not 0.0 < relevant_fraction < 1.0:
        raise ValueError("relevant_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(feature_dim)
    w /= np.linalg.norm(w)
    cut = np.sqrt(1.0 + label_noise**2 + query_spread**2) * norm.ppf(1.0 - relevant_fraction)
    x = rng.standard_normal((n_queries, docs_per_query, feature_dim))
    z = x @ w + label_noise * rng.standard_normal((n_queries, docs_per_query))
    if query_spread:
        z += query_spread * rng.standard_normal((n_queries, 1))
    if query_shift:
        scales = query_shift * rng.exponential(size=feature_dim)
        x = x + scales * rng.standard_normal((n_queries, 1, feature_dim))
    rel = (z > cut).astype(np.int8)
    return [
        QueryList(f"q{q}", [f"q{q}-d{i}" for i in range(docs_per_query)], x[q], rel[q])
        for q in range(n_queries)
    ]


def split_queries(lists: Sequence[QueryList], test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lists))
    n_test = int(round(test_fraction * len(lists)))
    test_idx = set(order[:n_test].tolist())
    train = [ql for i, ql in enumerate(lists) if i not in test_idx]
    test = [ql for i, ql in enumerate(lists) if i in test_idx]
    return train, test


# --------------------------------------------------------------------------
# Initial ranker and top-k preparation
# --------------------------------------------------------------------------


def train_initial_ranker(raw: Sequence[QueryList], n_queries_sample: int = 50,
                         seed: int = 0, ridge: float = 1e-3) -> Ranker:
    """Pointwise least-squares linear scorer fit on a random query sample."""
    if n_queries_sample < 1:
        raise ValueError("empty sample")
    if n_queries_sample > len(raw):
        raise ValueError(f"sample of {n_queries_sample} exceeds {len(raw)} available queries")
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(raw), size=n_queries_sample, replace=False).tolist())
    x = np.concatenate([raw[i].features for i in picked])
    y = np.concatenate([raw[i].relevance for i in picked]).astype(np.float64)
    if x.shape[0] == 0:
        raise ValueError("sampled queries contain no documents")
    x = x - x.mean(axis=0)
    y = y - y.mean()
    w = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    return Ranker.linear(x.shape[1], weights=w, meta={"init_sample": picked, "seed": seed})


def rank_order(scores: np.ndarray, doc_ids: Sequence[str]) -> np.ndarray:
    """Indices sorting by score descending, ties by doc_id ascending."""
    return np.array(sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i])), dtype=int)


def prepare_lists(lists: Sequence[QueryList], initial: Ranker, k: int):
    kept, stats = [], {"input_queries": len(lists), "removed_no_relevant": 0, "truncated": 0}
    for ql in lists:
        if ql.length == 0:
            stats["removed_no_relevant"] += 1
            continue
        order = rank_order(initial.score(ql.features), ql.doc_ids)
        if ql.length > k:
            stats["truncated"] += 1
        top = ql.subset(order[:k])
        if top.relevance.sum() == 0:
            stats["removed_no_relevant"] += 1
            continue
        kept.append(top)
    stats["kept_queries"] = len(kept)
    return kept, stats


def prepare(train_raw: Sequence[QueryList], initial: Ranker, k: int = DEFAULT_K,
            test_raw: Sequence[QueryList] = ()) -> PreparedDataset:
    """Rank with ``initial``, keep the top ``k`` and drop lists with no relevant document."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    train, train_stats = prepare_lists(train_raw, initial, k)
    test, test_stats = prepare_lists(test_raw, initial, k)
    dims = {ql.dim for ql in list(train) + list(test)}
    if len(dims) > 1:
        raise ValidationError(f"inconsistent feature dims {sorted(dims)}")
    dim = dims.pop() if dims else 0
    provenance = {"k": k, "train": train_stats, "test": test_stats}
    logger.info("prepared %d train / %d test lists", len(train), len(test))
    return PreparedDataset(train, test, dim, k, provenance)
