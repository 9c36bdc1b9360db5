"""Forward computation of the relation-embedding model.

An item is a stack of ``aspects`` embedding vectors. For an item pair the
aspect stacks are crossed into aspects^2 element-wise interaction vectors;
each interaction queries a key-value memory (memory attention) and the
resulting vectors are pooled under an MLP-scored softmax (weight attention)
into a single relation embedding. Users are sums of relation embeddings over
their history pairs, and a candidate is scored by dotting the user vector
against its relations to the history.

These per-pair functions are the readable reference path and keep every
intermediate for the backward pass; the batched hot path lives in
:mod:`reda.kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

ABLATIONS = ("full", "npil", "nmal")

# Parameters are drawn i.i.d. from N(0, INIT_STD); this keeps initial
# attention distributions near-uniform so both softmaxes receive gradient.
INIT_STD = 0.1


@dataclass
class HyperParams:
    """Model dimensions and scoring options.

    dim: relation/embedding dimensionality.
    aspects: embedding vectors per item (the crossing layer sees aspects^2).
    mem_slices: rows in the memory key/value matrices.
    hidden: hidden width of the weight-attention MLP.
    n_neg: evaluation negatives ranked against the held-out item.
    relation_ratio: fraction of history relations used at scoring time.
    """

    dim: int = 128
    aspects: int = 2
    mem_slices: int = 20
    hidden: int = 10
    n_neg: int = 100
    relation_ratio: float = 1.0

    def __post_init__(self):
        if min(self.dim, self.aspects, self.mem_slices, self.hidden) < 1:
            raise ValueError("dim, aspects, mem_slices, hidden must all be >= 1")
        if not (0.0 < self.relation_ratio <= 1.0):
            raise ValueError("relation_ratio must be in (0, 1]")


@dataclass
class ModelParams:
    """All trainable tensors.

    aspects:   (num_items, k, d) per-item aspect embeddings.
    mem_keys:  (m, d) memory keys addressed by interaction vectors.
    mem_vals:  (m, d) memory values mixed into relation parts.
    mlp_w:     (s, d) weight-attention input map.
    mlp_b:     (s,) weight-attention bias.
    mlp_h:     (s,) weight-attention output projection.
    ablation:  "full", "npil" (k forced to 1), or "nmal" (memory bypassed).
    """

    aspects: np.ndarray
    mem_keys: np.ndarray
    mem_vals: np.ndarray
    mlp_w: np.ndarray
    mlp_b: np.ndarray
    mlp_h: np.ndarray
    ablation: str = "full"

    @property
    def num_items(self) -> int:
        return self.aspects.shape[0]

    @property
    def k(self) -> int:
        return self.aspects.shape[1]

    @property
    def dim(self) -> int:
        return self.aspects.shape[2]

    @property
    def mem_slices(self) -> int:
        return self.mem_keys.shape[0]

    @property
    def hidden(self) -> int:
        return self.mlp_b.shape[0]

    @property
    def use_memory(self) -> bool:
        return self.ablation != "nmal"

    def tensors(self) -> tuple[np.ndarray, ...]:
        """Trainable tensors in checkpoint order."""
        return (self.aspects, self.mem_keys, self.mem_vals,
                self.mlp_w, self.mlp_b, self.mlp_h)

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tensors()), ablation=self.ablation)

    def check_finite(self) -> None:
        for t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise ValueError("non-finite model parameter")


def init_params(
    num_items: int,
    hp: HyperParams,
    rng: np.random.Generator,
    ablation: str = "full",
) -> ModelParams:
    """Gaussian-initialized parameters; "npil" collapses the crossing to k=1."""
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    k = 1 if ablation == "npil" else hp.aspects
    d, m, s = hp.dim, hp.mem_slices, hp.hidden
    return ModelParams(
        aspects=rng.normal(0.0, INIT_STD, size=(num_items, k, d)),
        mem_keys=rng.normal(0.0, INIT_STD, size=(m, d)),
        mem_vals=rng.normal(0.0, INIT_STD, size=(m, d)),
        mlp_w=rng.normal(0.0, INIT_STD, size=(s, d)),
        mlp_b=rng.normal(0.0, INIT_STD, size=s),
        mlp_h=rng.normal(0.0, INIT_STD, size=s),
        ablation=ablation,
    )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def pair_interaction(params: ModelParams, i: int, j: int) -> np.ndarray:
    """All k^2 element-wise aspect products of items i and j.

    Row q = n*k + l is aspects[i, n] * aspects[j, l]; rows are ordered
    lexicographically by (n, l) with n outermost.
    """
    pi = params.aspects[i]
    pj = params.aspects[j]
    k, d = pi.shape
    return (pi[:, None, :] * pj[None, :, :]).reshape(k * k, d)


def memory_attend(params: ModelParams, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Key-value memory lookup for one interaction vector.

    Scores are plain dot products against the keys (no scaling); the softmax
    over slices mixes the value rows. Returns (mixed value, attention).
    """
    scores = params.mem_keys @ v
    att = softmax(scores)
    return att @ params.mem_vals, att


def weight_scores(params: ModelParams, v_all: np.ndarray) -> np.ndarray:
    """Importance weights over interaction rows: softmax of h . relu(W v + b)."""
    hid = np.maximum(v_all @ params.mlp_w.T + params.mlp_b, 0.0)
    return softmax(hid @ params.mlp_h)


@dataclass
class RelationTrace:
    """Relation embedding for one item pair plus every intermediate.

    v:       (k^2, d) interaction rows.
    att_mem: (k^2, m) memory attention per row, or None when memory is bypassed.
    r_parts: (k^2, d) per-row relation parts (memory outputs, or v itself).
    att_w:   (k^2,) pooling weights.
    r:       (d,) pooled relation embedding.
    """

    v: np.ndarray
    att_mem: np.ndarray | None
    r_parts: np.ndarray
    att_w: np.ndarray
    r: np.ndarray


def relation_embedding(params: ModelParams, i: int, j: int) -> RelationTrace:
    """Full forward pass for one item pair, intermediates retained."""
    v = pair_interaction(params, i, j)
    if params.use_memory:
        scores = v @ params.mem_keys.T           # (k^2, m)
        att_mem = softmax(scores, axis=1)
        r_parts = att_mem @ params.mem_vals
    else:
        att_mem = None
        r_parts = v
    att_w = weight_scores(params, v)
    r = att_w @ r_parts
    return RelationTrace(v=v, att_mem=att_mem, r_parts=r_parts, att_w=att_w, r=r)


@dataclass
class UserEmbedding:
    """Aggregated (unnormalized sum) relation embedding over history pairs."""

    z: np.ndarray
    pair_count: int


def subsample_indices(n: int, ratio: float, rng: np.random.Generator | None) -> np.ndarray:
    """Sorted uniform sample of ceil(ratio * n) indices out of range(n).

    ratio == 1 returns everything and consumes no randomness, so full-ratio
    runs are independent of the generator handed in.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must be in (0, 1]")
    if ratio >= 1.0 or n == 0:
        return np.arange(n, dtype=np.int64)
    keep = math.ceil(ratio * n)
    if rng is None:
        raise ValueError("rng required when ratio < 1")
    picked = rng.choice(n, size=keep, replace=False)
    picked.sort()
    return picked.astype(np.int64)


def history_pairs(history) -> list[tuple[int, int]]:
    """All unordered pairs of the history, lexicographic by position."""
    return [(int(a), int(b)) for a, b in combinations(history, 2)]


def user_embedding(
    params: ModelParams,
    history,
    ratio: float = 1.0,
    rng: np.random.Generator | None = None,
    mean: bool = False,
) -> UserEmbedding:
    """Sum of relation embeddings over (a subsample of) the history's pairs.

    Histories with fewer than two items have no pairs and yield z = 0.
    ``mean`` switches to averaging; off by default since per-user scale does
    not change that user's candidate ranking.
    """
    pairs = history_pairs(history)
    if not pairs:
        return UserEmbedding(z=np.zeros(params.dim), pair_count=0)
    kept = subsample_indices(len(pairs), ratio, rng)
    z = np.zeros(params.dim)
    for ix in kept:
        a, b = pairs[int(ix)]
        z += relation_embedding(params, a, b).r
    if mean and len(kept):
        z /= len(kept)
    return UserEmbedding(z=z, pair_count=int(len(kept)))


_empty_history_scores = 0


def empty_history_score_count() -> int:
    """How many times score() was asked to rank against an empty history."""
    return _empty_history_scores


def score(
    params: ModelParams,
    user: UserEmbedding,
    history,
    candidate: int,
    ratio: float = 1.0,
    rng: np.random.Generator | None = None,
    kept: np.ndarray | None = None,
) -> float:
    """Preference of the user for ``candidate``.

    Mean over the full history size of z . r(candidate, j) for kept history
    items j; the normalizer stays the full history length even when ratio
    subsamples the terms. ``history`` must not contain the candidate.
    ``kept`` lets callers ranking many candidates share one subsample.
    """
    global _empty_history_scores
    n_full = len(history)
    if n_full == 0:
        _empty_history_scores += 1
        return 0.0
    if kept is None:
        kept = subsample_indices(n_full, ratio, rng)
    total = 0.0
    for ix in kept:
        j = int(history[int(ix)])
        total += float(user.z @ relation_embedding(params, candidate, j).r)
    return total / n_full


def rank_candidates(
    params: ModelParams,
    user: UserEmbedding,
    history,
    candidates,
    ratio: float = 1.0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Candidates in descending score order, ties broken by ascending index.

    One history subsample is drawn per call and shared by every candidate so
    the scores are comparable.
    """
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    kept = subsample_indices(len(history), ratio, rng) if len(history) else None
    scored = [
        (score(params, user, history, int(c), kept=kept), int(c))
        for c in candidates
    ]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [c for _, c in scored]
