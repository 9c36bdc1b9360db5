"""numba @njit implementation of the batched hot kernels.

Same surface and math as :mod:`reda.kernels.numpy_backend`, written as
explicit loops so the whole pair batch runs fused without temporaries.
Loops are serial on purpose: accumulation order is fixed, so results are
bit-reproducible run to run. Kernels release the GIL, which lets the
evaluation layer fan users out over threads.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

NAME = "numba"

_JIT = dict(cache=True, nogil=True, fastmath=False)


@njit(**_JIT)
def relation_batch(P, K, M, W, b, h, items_i, items_j, use_memory):
    B = items_i.shape[0]
    k = P.shape[1]
    d = P.shape[2]
    m = K.shape[0]
    s = W.shape[0]
    K2 = k * k
    R = np.zeros((B, d))
    v = np.empty(d)
    r_part = np.empty(d)
    att = np.empty(m)
    scores = np.empty(K2)
    parts = np.empty((K2, d))
    for p in range(B):
        i = items_i[p]
        j = items_j[p]
        for n in range(k):
            for l in range(k):
                q = n * k + l
                for e in range(d):
                    v[e] = P[i, n, e] * P[j, l, e]
                if use_memory:
                    amax = -1.0e300
                    for t in range(m):
                        acc = 0.0
                        for e in range(d):
                            acc += v[e] * K[t, e]
                        att[t] = acc
                        if acc > amax:
                            amax = acc
                    ssum = 0.0
                    for t in range(m):
                        w = math.exp(att[t] - amax)
                        att[t] = w
                        ssum += w
                    for e in range(d):
                        r_part[e] = 0.0
                    for t in range(m):
                        a = att[t] / ssum
                        for e in range(d):
                            r_part[e] += a * M[t, e]
                else:
                    for e in range(d):
                        r_part[e] = v[e]
                for e in range(d):
                    parts[q, e] = r_part[e]
                sc = 0.0
                for a_ in range(s):
                    pre = b[a_]
                    for e in range(d):
                        pre += W[a_, e] * v[e]
                    if pre > 0.0:
                        sc += h[a_] * pre
                scores[q] = sc
        umax = -1.0e300
        for q in range(K2):
            if scores[q] > umax:
                umax = scores[q]
        wsum = 0.0
        for q in range(K2):
            w = math.exp(scores[q] - umax)
            scores[q] = w
            wsum += w
        for q in range(K2):
            aw = scores[q] / wsum
            for e in range(d):
                R[p, e] += aw * parts[q, e]
    return R


@njit(**_JIT)
def forward_pairs(P, K, M, W, b, h, items_i, items_j, use_memory):
    B = items_i.shape[0]
    k = P.shape[1]
    d = P.shape[2]
    m = K.shape[0]
    s = W.shape[0]
    K2 = k * k
    V = np.empty((B, K2, d))
    att_mem = np.zeros((B, K2, m))
    r_part = np.empty((B, K2, d))
    H = np.empty((B, K2, s))
    att_w = np.empty((B, K2))
    R = np.zeros((B, d))
    for p in range(B):
        i = items_i[p]
        j = items_j[p]
        for n in range(k):
            for l in range(k):
                q = n * k + l
                for e in range(d):
                    V[p, q, e] = P[i, n, e] * P[j, l, e]
        if use_memory:
            for q in range(K2):
                amax = -1.0e300
                for t in range(m):
                    acc = 0.0
                    for e in range(d):
                        acc += V[p, q, e] * K[t, e]
                    att_mem[p, q, t] = acc
                    if acc > amax:
                        amax = acc
                ssum = 0.0
                for t in range(m):
                    w = math.exp(att_mem[p, q, t] - amax)
                    att_mem[p, q, t] = w
                    ssum += w
                for t in range(m):
                    att_mem[p, q, t] /= ssum
                for e in range(d):
                    acc = 0.0
                    for t in range(m):
                        acc += att_mem[p, q, t] * M[t, e]
                    r_part[p, q, e] = acc
        else:
            for q in range(K2):
                for e in range(d):
                    r_part[p, q, e] = V[p, q, e]
        umax = -1.0e300
        for q in range(K2):
            sc = 0.0
            for a_ in range(s):
                pre = b[a_]
                for e in range(d):
                    pre += W[a_, e] * V[p, q, e]
                hid = pre if pre > 0.0 else 0.0
                H[p, q, a_] = hid
                sc += h[a_] * hid
            att_w[p, q] = sc
            if sc > umax:
                umax = sc
        wsum = 0.0
        for q in range(K2):
            w = math.exp(att_w[p, q] - umax)
            att_w[p, q] = w
            wsum += w
        for q in range(K2):
            att_w[p, q] /= wsum
            aw = att_w[p, q]
            for e in range(d):
                R[p, e] += aw * r_part[p, q, e]
    return V, att_mem, r_part, H, att_w, R


@njit(**_JIT)
def backward_pairs(
    P, K, M, W, b, h, items_i, items_j, use_memory,
    V, att_mem, r_part, H, att_w, GR,
    inv_i, inv_j, n_unique,
):
    B = items_i.shape[0]
    k = P.shape[1]
    d = P.shape[2]
    m = K.shape[0]
    s = W.shape[0]
    K2 = k * k
    dP = np.zeros((n_unique, k, d))
    dK = np.zeros((m, d))
    dM = np.zeros((m, d))
    dW = np.zeros((s, d))
    db = np.zeros(s)
    dh = np.zeros(s)
    g_attw = np.empty(K2)
    du = np.empty(K2)
    dV = np.empty((K2, d))
    dpre = np.empty(s)
    grp = np.empty(d)
    datt = np.empty(m)
    dA = np.empty(m)
    for p in range(B):
        # pooling softmax backward
        dot_w = 0.0
        for q in range(K2):
            acc = 0.0
            for e in range(d):
                acc += GR[p, e] * r_part[p, q, e]
            g_attw[q] = acc
            dot_w += att_w[p, q] * acc
        for q in range(K2):
            du[q] = att_w[p, q] * (g_attw[q] - dot_w)
        for q in range(K2):
            for e in range(d):
                dV[q, e] = 0.0
            # MLP backward for this row
            duq = du[q]
            for a_ in range(s):
                hid = H[p, q, a_]
                dh[a_] += duq * hid
                dp_ = duq * h[a_] if hid > 0.0 else 0.0
                dpre[a_] = dp_
                db[a_] += dp_
            for a_ in range(s):
                dp_ = dpre[a_]
                if dp_ != 0.0:
                    for e in range(d):
                        dW[a_, e] += dp_ * V[p, q, e]
                        dV[q, e] += dp_ * W[a_, e]
            aw = att_w[p, q]
            for e in range(d):
                grp[e] = aw * GR[p, e]          # gradient on r_part row q
            if use_memory:
                for t in range(m):
                    acc = 0.0
                    amt = att_mem[p, q, t]
                    for e in range(d):
                        acc += grp[e] * M[t, e]
                        dM[t, e] += amt * grp[e]
                    datt[t] = acc
                dot_m = 0.0
                for t in range(m):
                    dot_m += att_mem[p, q, t] * datt[t]
                for t in range(m):
                    dA[t] = att_mem[p, q, t] * (datt[t] - dot_m)
                for t in range(m):
                    dAt = dA[t]
                    for e in range(d):
                        dK[t, e] += dAt * V[p, q, e]
                        dV[q, e] += dAt * K[t, e]
            else:
                for e in range(d):
                    dV[q, e] += grp[e]
        # crossing backward, scattered into compact item rows
        si = inv_i[p]
        sj = inv_j[p]
        i = items_i[p]
        j = items_j[p]
        for n in range(k):
            for l in range(k):
                q = n * k + l
                for e in range(d):
                    dP[si, n, e] += dV[q, e] * P[j, l, e]
                    dP[sj, l, e] += dV[q, e] * P[i, n, e]
    return dP, dK, dM, dW, db, dh
