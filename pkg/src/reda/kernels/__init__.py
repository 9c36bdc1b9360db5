"""Backend selection for the batched hot kernels.

Two interchangeable implementations exist: numba @njit loops (default when
numba imports) and vectorized numpy. REDA_BACKEND picks one explicitly:

    REDA_BACKEND=numba   require numba, fail if missing
    REDA_BACKEND=numpy   force the pure-numpy path
    REDA_BACKEND=auto    numba if available, else numpy (default)

Both produce the same numbers up to floating-point summation order; each is
individually deterministic run to run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import numpy_backend

try:
    from . import numba_backend
except ImportError:  # pragma: no cover - exercised only without numba
    numba_backend = None

_BACKENDS = {"numpy": numpy_backend}
if numba_backend is not None:
    _BACKENDS["numba"] = numba_backend


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str):
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    return _BACKENDS[name]


def _select_default():
    choice = os.environ.get("REDA_BACKEND", "auto").strip().lower()
    if choice == "auto":
        return _BACKENDS.get("numba", numpy_backend)
    if choice not in ("numba", "numpy"):
        raise ValueError(f"REDA_BACKEND must be auto, numba, or numpy; got {choice!r}")
    if choice == "numba" and "numba" not in _BACKENDS:
        raise ImportError("REDA_BACKEND=numba but numba is not importable")
    return get_backend(choice)


_active = _select_default()


def active_backend():
    return _active


def active_backend_name() -> str:
    return _active.NAME


def set_backend(name: str) -> None:
    """Programmatic override, mainly for tests and benchmarks."""
    global _active
    _active = get_backend(name)


def _as_items(arr) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr, dtype=np.int64))


@dataclass
class PairCache:
    """Forward intermediates for a pair batch, consumed by the backward."""

    items_i: np.ndarray
    items_j: np.ndarray
    use_memory: bool
    V: np.ndarray
    att_mem: np.ndarray
    r_part: np.ndarray
    H: np.ndarray
    att_w: np.ndarray
    R: np.ndarray


def relation_embeddings(params, items_i, items_j, backend=None) -> np.ndarray:
    """Relation embedding rows for a batch of item pairs; returns (B, dim)."""
    be = backend or _active
    return be.relation_batch(
        params.aspects, params.mem_keys, params.mem_vals,
        params.mlp_w, params.mlp_b, params.mlp_h,
        _as_items(items_i), _as_items(items_j), params.use_memory,
    )


def forward_cache(params, items_i, items_j, backend=None) -> PairCache:
    be = backend or _active
    ii, jj = _as_items(items_i), _as_items(items_j)
    V, att_mem, r_part, H, att_w, R = be.forward_pairs(
        params.aspects, params.mem_keys, params.mem_vals,
        params.mlp_w, params.mlp_b, params.mlp_h,
        ii, jj, params.use_memory,
    )
    return PairCache(ii, jj, params.use_memory, V, att_mem, r_part, H, att_w, R)


def backward_from_cache(params, cache: PairCache, GR, backend=None):
    """Parameter gradients of sum_p GR[p] . R[p].

    Returns (touched_items, dP_compact, dK, dM, dW, db, dh); dP_compact row t
    is the gradient for touched_items[t] (sorted unique).
    """
    be = backend or _active
    both = np.concatenate([cache.items_i, cache.items_j])
    uniq, inv = np.unique(both, return_inverse=True)
    B = cache.items_i.shape[0]
    inv_i = np.ascontiguousarray(inv[:B])
    inv_j = np.ascontiguousarray(inv[B:])
    dP, dK, dM, dW, db, dh = be.backward_pairs(
        params.aspects, params.mem_keys, params.mem_vals,
        params.mlp_w, params.mlp_b, params.mlp_h,
        cache.items_i, cache.items_j, cache.use_memory,
        cache.V, cache.att_mem, cache.r_part, cache.H, cache.att_w,
        np.ascontiguousarray(GR),
        inv_i, inv_j, len(uniq),
    )
    return uniq, dP, dK, dM, dW, db, dh
