"""Relation-wise triplet ranking loss, analytic backward, Adam, epoch loop.

One training sample is (target pair, context pair, negative pair) for a user;
the loss log(sigmoid(rc.rn - rc.rt)) is minimized, pulling the context
relation toward the target relation and away from the negative one. The
backward pass is hand-derived through the pooling softmax, the MLP, the
memory attention, and the aspect crossing, for all three relations at once
(the context relation feeds both dot products).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import LooSplit, batch_triplets, eligible_pair_count
from .model import ABLATIONS, HyperParams, ModelParams, init_params
from .rng import substream


@dataclass
class TrainConfig:
    batch_size: int = 2000
    learning_rate: float = 0.001
    epochs: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 42
    ablation: str = "full"
    strict_negatives: bool = False
    early_stop_patience: int = 0  # 0 disables; needs a validate_fn

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")


def log_sigmoid(x):
    """log(sigmoid(x)), stable for any magnitude of x."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid_neg(x):
    """sigmoid(-x) without overflow; this is d/dx log(sigmoid(x))."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, t / (1.0 + t), 1.0 / (1.0 + t))


def triplet_loss(r_t: np.ndarray, r_c: np.ndarray, r_n: np.ndarray) -> float:
    """log(sigmoid(rc.rn - rc.rt)); always <= 0, minimized by the trainer."""
    x = float(r_c @ r_n - r_c @ r_t)
    return float(log_sigmoid(x))


@dataclass
class Gradients:
    """Parameter gradients; sparse over the item table, dense elsewhere.

    ``aspects[t]`` is the gradient for item ``items[t]`` only; items not
    touched by the batch have exactly zero gradient and are not stored.
    """

    items: np.ndarray
    aspects: np.ndarray
    mem_keys: np.ndarray
    mem_vals: np.ndarray
    mlp_w: np.ndarray
    mlp_b: np.ndarray
    mlp_h: np.ndarray

    def dense_aspects(self, num_items: int) -> np.ndarray:
        out = np.zeros((num_items,) + self.aspects.shape[1:])
        out[self.items] = self.aspects
        return out

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(t))
            for t in (self.aspects, self.mem_keys, self.mem_vals,
                      self.mlp_w, self.mlp_b, self.mlp_h)
        )


def triplets_to_arrays(triplets) -> tuple[np.ndarray, np.ndarray]:
    """Stack pair endpoints as (3B,) arrays: target block, context, negative."""
    B = len(triplets)
    ii = np.empty(3 * B, dtype=np.int64)
    jj = np.empty(3 * B, dtype=np.int64)
    for x, t in enumerate(triplets):
        ii[x], jj[x] = t.target_pair
        ii[B + x], jj[B + x] = t.context_pair
        ii[2 * B + x], jj[2 * B + x] = t.negative_pair
    return ii, jj


def batch_loss_and_grads(
    params: ModelParams,
    triplets,
    backend=None,
) -> tuple[float, np.ndarray, Gradients]:
    """Mean triplet loss over the batch and its exact parameter gradients.

    Returns (mean loss, per-triplet losses, gradients of the mean loss).
    """
    B = len(triplets)
    ii, jj = triplets_to_arrays(triplets)
    cache = kernels.forward_cache(params, ii, jj, backend=backend)
    R = cache.R
    rt, rc, rn = R[:B], R[B:2 * B], R[2 * B:]
    x = np.einsum("bd,bd->b", rc, rn) - np.einsum("bd,bd->b", rc, rt)
    losses = log_sigmoid(x)
    g = sigmoid_neg(x) / B                     # d(mean loss)/dx per triplet
    GR = np.concatenate([
        -g[:, None] * rc,                      # through the target relation
        g[:, None] * (rn - rt),                # context appears in both dots
        g[:, None] * rc,                       # through the negative relation
    ])
    items, dP, dK, dM, dW, db, dh = kernels.backward_from_cache(
        params, cache, GR, backend=backend
    )
    grads = Gradients(items=items, aspects=dP, mem_keys=dK, mem_vals=dM,
                      mlp_w=dW, mlp_b=db, mlp_h=dh)
    return float(np.mean(losses)), losses, grads


def backward_triplet(params: ModelParams, triplet, backend=None) -> Gradients:
    """Gradient of the (single-sample) triplet loss; thin batch-of-one wrapper."""
    _, _, grads = batch_loss_and_grads(params, [triplet], backend=backend)
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter tensor.

    The item-table moments are lazy: rows untouched by a batch keep their
    moments undecayed, so update cost tracks batch size, not catalog size.
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    TENSORS = ("aspects", "mem_keys", "mem_vals", "mlp_w", "mlp_b", "mlp_h")

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        st = cls()
        for name, t in zip(cls.TENSORS, params.tensors()):
            st.m[name] = np.zeros_like(t)
            st.v[name] = np.zeros_like(t)
        return st

    def copy(self) -> "AdamState":
        st = AdamState(step=self.step)
        st.m = {k: a.copy() for k, a in self.m.items()}
        st.v = {k: a.copy() for k, a in self.v.items()}
        return st


def adam_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> bool:
    """One bias-corrected Adam update in place; item rows update lazily.

    Returns False (and leaves params and state untouched) when the gradient
    is non-finite so the caller can skip and count the batch.
    """
    if not grads.all_finite():
        return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    def apply_dense(name, param, g):
        if weight_decay:
            g = g + weight_decay * param
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    rows = grads.items
    g = grads.aspects
    if weight_decay:
        g = g + weight_decay * params.aspects[rows]
    m = state.m["aspects"][rows]
    v = state.v["aspects"][rows]
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    state.m["aspects"][rows] = m
    state.v["aspects"][rows] = v
    params.aspects[rows] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    apply_dense("mem_keys", params.mem_keys, grads.mem_keys)
    apply_dense("mem_vals", params.mem_vals, grads.mem_vals)
    apply_dense("mlp_w", params.mlp_w, grads.mlp_w)
    apply_dense("mlp_b", params.mlp_b, grads.mlp_b)
    apply_dense("mlp_h", params.mlp_h, grads.mlp_h)
    return True


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    history: list[tuple[int, float, float]]  # (epoch, mean loss, seconds)
    skipped_batches: int
    epochs_run: int


def batches_per_epoch(split: LooSplit, batch_size: int) -> int:
    """ceil(eligible pair count / batch size): one epoch covers the pair pool."""
    pairs = eligible_pair_count(split)
    return max(1, -(-pairs // batch_size)) if pairs else 0


def train(
    split: LooSplit,
    hp: HyperParams,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    epoch_callback=None,
    validate_fn=None,
    backend=None,
) -> TrainResult:
    """Run the epoch loop; each epoch draws its own derived random stream.

    Epoch e's batches come from substream (seed, "train", e), so resuming
    from a checkpointed (params, adam, epoch) continues bit-identically to an
    uninterrupted run. ``epoch_callback(epoch, params, adam, loss)`` fires
    after every epoch; ``validate_fn(params) -> metric`` enables early
    stopping when cfg.early_stop_patience > 0 (higher metric is better).
    """
    if params is None:
        params = init_params(split.train.num_items, hp, substream(cfg.seed, "init"),
                             ablation=cfg.ablation)
    if adam is None:
        adam = AdamState.zeros(params)
    n_batches = batches_per_epoch(split, cfg.batch_size)
    history: list[tuple[int, float, float]] = []
    skipped = 0
    best_metric = -np.inf
    stale = 0
    epochs_run = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = substream(cfg.seed, "train", epoch)
        epoch_losses = []
        for _ in range(n_batches):
            triplets = batch_triplets(split, cfg.batch_size, rng,
                                      strict_negatives=cfg.strict_negatives)
            mean_loss, _, grads = batch_loss_and_grads(params, triplets, backend=backend)
            applied = adam_step(
                params, grads, adam, cfg.learning_rate,
                beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay,
            )
            if not applied:
                skipped += 1
                continue
            epoch_losses.append(mean_loss)
        elapsed = time.perf_counter() - t0
        epoch_mean = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        history.append((epoch, epoch_mean, elapsed))
        epochs_run = epoch + 1
        if epoch_callback is not None:
            epoch_callback(epoch, params, adam, epoch_mean)
        if cfg.early_stop_patience > 0 and validate_fn is not None:
            metric = validate_fn(params)
            if metric > best_metric:
                best_metric = metric
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return TrainResult(params=params, adam=adam, history=history,
                       skipped_batches=skipped, epochs_run=epochs_run)
