"""Vectorized numpy implementation of the batched hot kernels.

Matches the per-pair reference in :mod:`reda.model` but computes a whole
batch of item pairs at once. Also the fallback when numba is unavailable or
REDA_BACKEND=numpy.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def relation_batch(P, K, M, W, b, h, items_i, items_j, use_memory) -> np.ndarray:
    """Relation embeddings for pairs (items_i[p], items_j[p]); returns (B, d)."""
    B = items_i.shape[0]
    k, d = P.shape[1], P.shape[2]
    pi = P[items_i]                                   # (B, k, d)
    pj = P[items_j]
    V = (pi[:, :, None, :] * pj[:, None, :, :]).reshape(B, k * k, d)
    if use_memory:
        att_mem = _softmax_last(V @ K.T)              # (B, k^2, m)
        r_part = att_mem @ M
    else:
        r_part = V
    hid = np.maximum(V @ W.T + b, 0.0)                # (B, k^2, s)
    att_w = _softmax_last(hid @ h)                    # (B, k^2)
    return np.einsum("bq,bqd->bd", att_w, r_part)


def forward_pairs(P, K, M, W, b, h, items_i, items_j, use_memory):
    """Batched forward keeping intermediates for the backward pass.

    Returns (V, att_mem, r_part, H, att_w, R); att_mem is all-zeros when the
    memory is bypassed (it is not consumed on that path).
    """
    B = items_i.shape[0]
    k, d = P.shape[1], P.shape[2]
    m = K.shape[0]
    pi = P[items_i]
    pj = P[items_j]
    V = (pi[:, :, None, :] * pj[:, None, :, :]).reshape(B, k * k, d)
    if use_memory:
        att_mem = _softmax_last(V @ K.T)
        r_part = att_mem @ M
    else:
        att_mem = np.zeros((B, k * k, m))
        r_part = V
    H = np.maximum(V @ W.T + b, 0.0)
    att_w = _softmax_last(H @ h)
    R = np.einsum("bq,bqd->bd", att_w, r_part)
    return V, att_mem, r_part, H, att_w, R


def backward_pairs(
    P, K, M, W, b, h, items_i, items_j, use_memory,
    V, att_mem, r_part, H, att_w, GR,
    inv_i, inv_j, n_unique,
):
    """Gradients of sum_p GR[p] . R[p] with respect to every parameter tensor.

    Item-embedding gradients come back compact: row ``inv_i[p]`` of dP holds
    the gradient of the item ``items_i[p]`` (same for j), with ``n_unique``
    distinct touched items overall.
    """
    B, K2, d = V.shape
    k = P.shape[1]

    # pooling
    g_attw = np.einsum("bd,bqd->bq", GR, r_part)          # (B, K2)
    G_rpart = att_w[:, :, None] * GR[:, None, :]          # (B, K2, d)
    # softmax over interaction rows
    dot_w = np.sum(att_w * g_attw, axis=1, keepdims=True)
    du = att_w * (g_attw - dot_w)                         # (B, K2)
    # weight-attention MLP
    dh = np.einsum("bq,bqs->s", du, H)
    dHid = du[:, :, None] * h                             # (B, K2, s)
    dPre = np.where(H > 0.0, dHid, 0.0)
    dW = np.einsum("bqs,bqd->sd", dPre, V)
    db = np.sum(dPre, axis=(0, 1))
    dV = dPre @ W                                         # (B, K2, d)
    # memory attention
    if use_memory:
        dM = np.einsum("bqm,bqd->md", att_mem, G_rpart)
        d_att = G_rpart @ M.T                             # (B, K2, m)
        dot_m = np.sum(att_mem * d_att, axis=2, keepdims=True)
        dA = att_mem * (d_att - dot_m)
        dK = np.einsum("bqm,bqd->md", dA, V)
        dV += dA @ K
    else:
        dM = np.zeros_like(M)
        dK = np.zeros_like(K)
        dV += G_rpart
    # interaction crossing back to the two aspect stacks
    dV4 = dV.reshape(B, k, k, d)
    pi = P[items_i]
    pj = P[items_j]
    dPi = np.einsum("bnld,bld->bnd", dV4, pj)
    dPj = np.einsum("bnld,bnd->bld", dV4, pi)
    dP = np.zeros((n_unique, k, d))
    np.add.at(dP, inv_i, dPi)
    np.add.at(dP, inv_j, dPj)
    return dP, dK, dM, dW, db, dh
