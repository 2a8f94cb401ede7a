"""Scoring functions and listwise softmax cross-entropy losses."""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .core import QueryList


class RankerError(ValueError):
    pass


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


class Ranker:
    """A linear or feed-forward scoring function ``f(x)``.

    The feed-forward variant stacks dense layers with ELU activations and
    ends in a single linear output unit. Dropout, when configured, is applied
    to every hidden layer after the first and only while training.
    """

    def __init__(self, architecture: dict, weights: Sequence[np.ndarray], meta: dict | None = None):
        self.architecture = dict(architecture)
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.meta = dict(meta or {})
        kind = self.architecture.get("kind")
        if kind == "linear":
            if len(self.weights) != 1 or self.weights[0].shape != (self.architecture["dim"],):
                raise RankerError("linear ranker needs a single weight vector of length dim")
        elif kind == "mlp":
            expected = 2 * (len(self.architecture["sizes"]) + 1)
            if len(self.weights) != expected:
                raise RankerError(f"mlp ranker needs {expected} weight arrays, got {len(self.weights)}")
        else:
            raise RankerError(f"unknown architecture {kind!r}")

    @classmethod
    def linear(cls, dim: int, weights=None, meta=None) -> "Ranker":
        w = np.zeros(dim) if weights is None else np.asarray(weights, dtype=np.float64)
        return cls({"kind": "linear", "dim": int(dim)}, [w], meta)

    @classmethod
    def mlp(cls, dim: int, sizes=(32, 16), dropout: float = 0.0, seed: int = 0,
            activation: str = "elu", meta=None) -> "Ranker":
        if activation != "elu":
            raise RankerError("only the elu activation is implemented")
        rng = np.random.default_rng(seed)
        weights = []
        fan_in = dim
        for width in list(sizes) + [1]:
            weights.append(rng.standard_normal((fan_in, width)) * np.sqrt(1.0 / fan_in))
            weights.append(np.zeros(width))
            fan_in = width
        arch = {"kind": "mlp", "dim": int(dim), "sizes": [int(s) for s in sizes],
                "activation": activation, "dropout": float(dropout)}
        return cls(arch, weights, meta)

    @property
    def dim(self) -> int:
        return int(self.architecture["dim"])

    def copy(self) -> "Ranker":
        return Ranker(self.architecture, [w.copy() for w in self.weights], self.meta)

    # -- inference -------------------------------------------------------

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise RankerError(f"feature dim {x.shape[-1]} does not match ranker dim {self.dim}")
        return x

    def score(self, x) -> np.ndarray:
        """Scores for an array of feature vectors shaped ``(..., dim)``."""
        scores, _ = self.forward(x)
        return scores

    def score_list(self, ql: QueryList) -> np.ndarray:
        return self.score(ql.features)

    # -- training --------------------------------------------------------

    def forward(self, x, rng: np.random.Generator | None = None):
        """Scores plus the cache needed by :meth:`backward`.

        Passing ``rng`` switches dropout on.
        """
        x = self._check(x)
        if self.architecture["kind"] == "linear":
            return x @ self.weights[0], (x,)
        h = x
        cache = []
        p_drop = self.architecture.get("dropout", 0.0)
        n_hidden = len(self.architecture["sizes"])
        for layer in range(n_hidden):
            w, b = self.weights[2 * layer], self.weights[2 * layer + 1]
            a = h @ w + b
            out = _elu(a)
            mask = None
            if rng is not None and p_drop > 0 and layer >= 1:
                mask = (rng.random(out.shape) >= p_drop) / (1.0 - p_drop)
                out = out * mask
            cache.append((h, a, mask))
            h = out
        w, b = self.weights[-2], self.weights[-1]
        cache.append((h, None, None))
        return (h @ w + b)[..., 0], cache

    def backward(self, cache, grad_scores: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(grad_scores * scores)`` with respect to every weight array."""
        g = np.asarray(grad_scores, dtype=np.float64)
        if self.architecture["kind"] == "linear":
            (x,) = cache
            return [np.tensordot(g, x, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))]
        grads = [None] * len(self.weights)
        h_last = cache[-1][0]
        axes = tuple(range(g.ndim))
        grads[-2] = np.tensordot(h_last, g, axes=(axes, axes))[:, None]
        grads[-1] = np.array([g.sum()])
        delta = g[..., None] * self.weights[-2][:, 0]
        for layer in range(len(self.architecture["sizes"]) - 1, -1, -1):
            h_in, a, mask = cache[layer]
            if mask is not None:
                delta = delta * mask
            delta = delta * _elu_grad(a)
            grads[2 * layer] = np.tensordot(h_in, delta, axes=(axes, axes))
            grads[2 * layer + 1] = delta.reshape(-1, delta.shape[-1]).sum(axis=0)
            if layer:
                delta = delta @ self.weights[2 * layer].T
        return grads

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "weights": [{"shape": list(w.shape), "data": w.ravel().tolist()} for w in self.weights],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ranker":
        weights = [np.array(w["data"], dtype=np.float64).reshape(w["shape"]) for w in d["weights"]]
        return cls(d["architecture"], weights, d.get("meta"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Ranker":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def log_softmax(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    top = np.max(s, axis=-1, keepdims=True)
    shifted = s - top
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    if mask is not None:
        out = np.where(mask, out, 0.0)
    return out


def weighted_softmax_ce(scores: np.ndarray, weights: np.ndarray, mask: np.ndarray | None = None):
    """Per-list ``sum_j w_j * -log softmax(s)_j`` and its gradient w.r.t. the scores.

    Works on a single list or a ``(batch, k)`` stack; ``mask`` excludes padding.
    """
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.shape != weights.shape:
        raise ValueError(f"scores {scores.shape} and weights {weights.shape} differ in shape")
    if mask is None:
        finite = np.all(np.isfinite(scores))
    else:
        finite = np.all(np.isfinite(np.where(mask, scores, 0.0)))
    if not finite:
        raise FloatingPointError("non-finite scores")
    logp = log_softmax(scores, mask)
    loss = -np.sum(weights * logp, axis=-1)
    p = np.exp(logp)
    if mask is not None:
        p = np.where(mask, p, 0.0)
    grad = np.sum(weights, axis=-1, keepdims=True) * p - weights
    return loss, grad


def ips_listwise_loss(scores, clicks, weights):
    """IPS-weighted softmax cross-entropy for one list.

    Returns ``(loss, gradient)``. ``weights`` must vanish wherever ``clicks`` is 0.
    """
    clicks = np.asarray(clicks)
    weights = np.asarray(weights, dtype=np.float64)
    if clicks.shape != weights.shape or np.shape(scores) != weights.shape:
        raise ValueError("scores, clicks and weights must have equal length")
    if np.any(weights[clicks == 0] != 0):
        raise ValueError("weights must be zero at unclicked positions")
    loss, grad = weighted_softmax_ce(scores, weights)
    return float(loss), grad


def full_info_loss(scores, relevance):
    """Softmax cross-entropy against the uniform distribution over relevant documents."""
    rel = np.asarray(relevance, dtype=np.float64)
    if np.shape(scores) != rel.shape:
        raise ValueError("scores and relevance must have equal length")
    n_rel = rel.sum()
    if n_rel == 0:
        raise ValueError("full-information loss needs at least one relevant document")
    loss, grad = weighted_softmax_ce(scores, rel / n_rel)
    return float(loss), grad
