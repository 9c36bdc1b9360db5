import math

import numpy as np
import pytest

from conftest import make_params
from reda import model
from reda.data import TrainingTriplet, leave_one_out_split
from reda.evaluation import SyntheticSpec, generate_synthetic
from reda.training import (
    AdamState, Gradients, TrainConfig, adam_step, backward_triplet,
    batch_loss_and_grads, batches_per_epoch, log_sigmoid, sigmoid_neg, train,
    triplet_loss, triplets_to_arrays,
)


def triplet_objective(params, trip):
    rt = model.relation_embedding(params, *trip.target_pair).r
    rc = model.relation_embedding(params, *trip.context_pair).r
    rn = model.relation_embedding(params, *trip.negative_pair).r
    return triplet_loss(rt, rc, rn)


def finite_difference(params, trip, name, h=1e-5):
    t = getattr(params, name)
    g = np.zeros_like(t)
    it = np.nditer(t, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = t[ix]
        t[ix] = orig + h
        fp = triplet_objective(params, trip)
        t[ix] = orig - h
        fm = triplet_objective(params, trip)
        t[ix] = orig
        g[ix] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def grad_rel_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


TENSORS = ("aspects", "mem_keys", "mem_vals", "mlp_w", "mlp_b", "mlp_h")


def random_triplet(rng, num_items):
    items = rng.choice(num_items, size=6, replace=False)
    return TrainingTriplet(
        0,
        (int(items[0]), int(items[1])),
        (int(items[2]), int(items[3])),
        (int(items[4]), int(items[5])),
    )


class TestTripletLoss:
    def test_all_zero_vectors(self):
        z = np.zeros(4)
        assert triplet_loss(z, z, z) == pytest.approx(-math.log(2), abs=1e-12)
        assert triplet_loss(z, z, z) == pytest.approx(-0.693147, abs=1e-6)

    def test_aligned_context_orthogonal_negative(self):
        r_c = np.array([1.0, 0.0])
        r_n = np.array([0.0, 1.0])
        got = triplet_loss(r_c, r_c, r_n)
        oracle = -1.0 - math.log1p(math.exp(-1.0))
        assert got == pytest.approx(oracle, abs=1e-12)
        assert got == pytest.approx(-1.313262, abs=1e-6)

    def test_extreme_arguments_stable(self):
        # x = rc.rn - rc.rt = -60 and +60 via 1-d vectors
        r_c = np.array([1.0])
        assert triplet_loss(np.array([60.0]), r_c, np.array([0.0])) == \
            pytest.approx(-60.0, abs=1e-9)
        plus = triplet_loss(np.array([0.0]), r_c, np.array([60.0]))
        assert -1e-20 < plus < 0.0
        assert plus == pytest.approx(-math.exp(-60.0), rel=1e-6)

    def test_loss_always_negative(self):
        """Strictly negative wherever exp(-x) is representable; float64
        rounds log(sigmoid(x)) to -0.0 only beyond x ~ 745."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            rt, rc, rn = rng.normal(size=(3, 8)) * rng.uniform(0.1, 3.0)
            loss = triplet_loss(rt, rc, rn)
            assert loss < 0.0
        huge = triplet_loss(np.zeros(2), np.array([40.0, 0]), np.array([40.0, 0]))
        assert huge <= 0.0 and np.isfinite(huge)

    def test_scalar_helpers_match_math(self):
        for x in (-50.0, -2.0, -1e-9, 0.0, 1e-9, 2.0, 50.0):
            assert log_sigmoid(x) == pytest.approx(
                math.log(1.0 / (1.0 + math.exp(-x))) if abs(x) < 30 else
                (x if x < 0 else 0.0) - math.log1p(math.exp(-abs(x))), abs=1e-12)
            assert sigmoid_neg(x) == pytest.approx(1.0 / (1.0 + math.exp(x)) if x < 30
                                                   else math.exp(-x), rel=1e-12)


class TestBackwardTriplet:
    def test_gradient_check_both_backends(self, backend):
        """Quick version of the acceptance gate: 3 random draws, all coords."""
        for draw in range(3):
            rng = np.random.default_rng(200 + draw)
            params = make_params(seed=200 + draw, num_items=10, dim=6,
                                 aspects=2, mem_slices=3, hidden=4, scale=1.0)
            trip = random_triplet(rng, 10)
            grads = backward_triplet(params, trip, backend=backend)
            ana = dict(
                aspects=grads.dense_aspects(10), mem_keys=grads.mem_keys,
                mem_vals=grads.mem_vals, mlp_w=grads.mlp_w,
                mlp_b=grads.mlp_b, mlp_h=grads.mlp_h,
            )
            for name in TENSORS:
                fd = finite_difference(params, trip, name)
                assert grad_rel_error(ana[name], fd) <= 1e-4, (draw, name)

    def test_untouched_items_zero_gradient(self, backend):
        params = make_params(seed=40, num_items=30)
        trip = TrainingTriplet(0, (0, 1), (2, 3), (4, 5))
        grads = backward_triplet(params, trip, backend=backend)
        assert set(grads.items.tolist()) == {0, 1, 2, 3, 4, 5}
        dense = grads.dense_aspects(30)
        np.testing.assert_array_equal(dense[6:], 0.0)

    def test_memory_bypass_zeroes_memory_grads(self, backend):
        params = make_params(seed=41, ablation="nmal")
        trip = TrainingTriplet(0, (0, 1), (2, 3), (4, 5))
        grads = backward_triplet(params, trip, backend=backend)
        np.testing.assert_array_equal(grads.mem_keys, 0.0)
        np.testing.assert_array_equal(grads.mem_vals, 0.0)

    def test_repeated_item_accumulates(self, backend):
        """An item in two pairs gets the sum of both contributions."""
        params = make_params(seed=42, scale=1.0)
        trip = TrainingTriplet(0, (0, 1), (0, 2), (3, 4))
        grads = backward_triplet(params, trip, backend=backend)
        fd = finite_difference(params, trip, "aspects")
        assert grad_rel_error(grads.dense_aspects(params.num_items), fd) <= 1e-4


class TestBatchLoss:
    def test_batch_mean_matches_fsum(self, tiny_split):
        params = make_params(seed=43, num_items=tiny_split.train.num_items)
        from reda.data import batch_triplets
        from reda.rng import substream
        triplets = batch_triplets(tiny_split, 64, substream(0, "train"))
        mean_loss, losses, _ = batch_loss_and_grads(params, triplets)
        assert mean_loss == pytest.approx(math.fsum(losses) / len(losses),
                                          abs=1e-12)

    def test_per_triplet_losses_match_scalar_path(self, tiny_split):
        params = make_params(seed=44, num_items=tiny_split.train.num_items)
        from reda.data import batch_triplets
        from reda.rng import substream
        triplets = batch_triplets(tiny_split, 5, substream(1, "train"))
        _, losses, _ = batch_loss_and_grads(params, triplets)
        for trip, got in zip(triplets, losses):
            assert got == pytest.approx(triplet_objective(params, trip), rel=1e-10)

    def test_arrays_layout(self):
        trips = [TrainingTriplet(0, (1, 2), (3, 4), (5, 6)),
                 TrainingTriplet(1, (7, 8), (9, 10), (11, 12))]
        ii, jj = triplets_to_arrays(trips)
        np.testing.assert_array_equal(ii, [1, 7, 3, 9, 5, 11])
        np.testing.assert_array_equal(jj, [2, 8, 4, 10, 6, 12])


class TestAdam:
    def _zero_grads(self, params):
        return Gradients(
            items=np.array([0], dtype=np.int64),
            aspects=np.zeros((1,) + params.aspects.shape[1:]),
            mem_keys=np.zeros_like(params.mem_keys),
            mem_vals=np.zeros_like(params.mem_vals),
            mlp_w=np.zeros_like(params.mlp_w),
            mlp_b=np.zeros_like(params.mlp_b),
            mlp_h=np.zeros_like(params.mlp_h),
        )

    def test_zero_gradient_keeps_params(self):
        params = make_params(seed=45)
        before = params.copy()
        state = AdamState.zeros(params)
        assert adam_step(params, self._zero_grads(params), state, lr=0.1)
        assert state.step == 1
        for a, b in zip(params.tensors(), before.tensors()):
            np.testing.assert_array_equal(a, b)

    def test_first_step_algebra(self):
        """With g = 1 at step 1 the update is -lr / (1 + eps)."""
        params = make_params(seed=46)
        state = AdamState.zeros(params)
        grads = self._zero_grads(params)
        grads.mlp_h = np.ones_like(params.mlp_h)
        before = params.mlp_h.copy()
        lr, eps = 0.01, 1e-8
        adam_step(params, grads, state, lr=lr, eps=eps)
        np.testing.assert_allclose(params.mlp_h, before - lr / (1.0 + eps),
                                   rtol=1e-12)

    def test_nonfinite_gradient_skipped(self):
        params = make_params(seed=47)
        before = params.copy()
        state = AdamState.zeros(params)
        grads = self._zero_grads(params)
        grads.mem_keys = np.full_like(params.mem_keys, np.inf)
        assert not adam_step(params, grads, state, lr=0.1)
        assert state.step == 0
        np.testing.assert_array_equal(params.mem_keys, before.mem_keys)

    def test_lazy_sparse_rows(self):
        """Moments of untouched item rows are not decayed or updated."""
        params = make_params(seed=48, num_items=4)
        state = AdamState.zeros(params)
        state.m["aspects"][3] = 0.5
        state.v["aspects"][3] = 0.25
        row3 = params.aspects[3].copy()
        grads = self._zero_grads(params)
        grads.items = np.array([1], dtype=np.int64)
        grads.aspects = np.ones((1,) + params.aspects.shape[1:])
        adam_step(params, grads, state, lr=0.01)
        np.testing.assert_array_equal(state.m["aspects"][3], 0.5)
        np.testing.assert_array_equal(state.v["aspects"][3], 0.25)
        np.testing.assert_array_equal(params.aspects[3], row3)
        assert np.all(state.m["aspects"][1] != 0.0)

    def test_weight_decay_moves_params(self):
        params = make_params(seed=49)
        before = params.copy()
        state = AdamState.zeros(params)
        adam_step(params, self._zero_grads(params), state, lr=0.01,
                  weight_decay=0.1)
        assert not np.array_equal(params.mem_keys, before.mem_keys)


def quick_split(seed=11):
    ds = generate_synthetic(SyntheticSpec(
        n_users=30, n_items=60, n_genres=3, items_per_user=6,
        affinity=0.8, seed=seed,
    ))
    return leave_one_out_split(ds, n_neg=10, seed=seed)


class TestTrainLoop:
    def test_two_runs_bitwise_identical(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        cfg = TrainConfig(batch_size=64, epochs=5, seed=3)
        a = train(split, hp, cfg)
        b = train(split, hp, cfg)
        for ta, tb in zip(a.params.tensors(), b.params.tensors()):
            np.testing.assert_array_equal(ta, tb)
        assert [h[:2] for h in a.history] == [h[:2] for h in b.history]

    def test_zero_learning_rate_freezes_params(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        cfg = TrainConfig(batch_size=32, epochs=2, seed=0, learning_rate=0.0)
        from reda.rng import substream
        init = model.init_params(split.train.num_items, hp, substream(0, "init"))
        result = train(split, hp, cfg)
        for ta, tb in zip(result.params.tensors(), init.tensors()):
            np.testing.assert_array_equal(ta, tb)

    def test_npil_forces_single_aspect(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=3, mem_slices=3, hidden=4)
        cfg = TrainConfig(batch_size=32, epochs=1, seed=0, ablation="npil")
        result = train(split, hp, cfg)
        assert result.params.k == 1

    def test_nmal_memory_frozen(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        cfg = TrainConfig(batch_size=32, epochs=3, seed=2, ablation="nmal")
        from reda.rng import substream
        init = model.init_params(split.train.num_items, hp,
                                 substream(2, "init"), ablation="nmal")
        result = train(split, hp, cfg)
        np.testing.assert_array_equal(result.params.mem_keys, init.mem_keys)
        np.testing.assert_array_equal(result.params.mem_vals, init.mem_vals)
        assert not np.array_equal(result.params.aspects, init.aspects)

    def test_resume_equivalence(self):
        """2 epochs + 3 resumed epochs equals 5 straight epochs, bit for bit."""
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        full = train(split, hp, TrainConfig(batch_size=64, epochs=5, seed=9))
        part = train(split, hp, TrainConfig(batch_size=64, epochs=2, seed=9))
        resumed = train(
            split, hp, TrainConfig(batch_size=64, epochs=5, seed=9),
            params=part.params, adam=part.adam, start_epoch=part.epochs_run,
        )
        for ta, tb in zip(full.params.tensors(), resumed.params.tensors()):
            np.testing.assert_array_equal(ta, tb)
        assert full.adam.step == resumed.adam.step
        for name in AdamState.TENSORS:
            np.testing.assert_array_equal(full.adam.m[name], resumed.adam.m[name])
            np.testing.assert_array_equal(full.adam.v[name], resumed.adam.v[name])

    def test_epoch_size_definition(self):
        split = quick_split()
        pairs = sum(
            len(p) * (len(p) - 1) // 2 for p in split.train.positives if len(p) >= 2
        )
        assert batches_per_epoch(split, 64) == math.ceil(pairs / 64)

    def test_epochs_zero_returns_init(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        result = train(split, hp, TrainConfig(batch_size=32, epochs=0, seed=4))
        from reda.rng import substream
        init = model.init_params(split.train.num_items, hp, substream(4, "init"))
        for ta, tb in zip(result.params.tensors(), init.tensors()):
            np.testing.assert_array_equal(ta, tb)
        assert result.history == []

    def test_early_stop_on_plateau(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        cfg = TrainConfig(batch_size=32, epochs=20, seed=5, early_stop_patience=2)
        result = train(split, hp, cfg, validate_fn=lambda params: 0.0)
        assert result.epochs_run == 3  # first sets best, two stale evals stop

    def test_epoch_callback_sees_each_epoch(self):
        split = quick_split()
        hp = model.HyperParams(dim=8, aspects=2, mem_slices=3, hidden=4)
        seen = []
        train(split, hp, TrainConfig(batch_size=32, epochs=3, seed=6),
              epoch_callback=lambda e, p, a, l: seen.append(e))
        assert seen == [0, 1, 2]
