import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import make_params
from reda import kernels, model


def random_pairs(params, n, seed=0):
    rng = np.random.default_rng(seed)
    ii = rng.integers(params.num_items, size=n)
    jj = rng.integers(params.num_items, size=n)
    return ii.astype(np.int64), jj.astype(np.int64)


def reference_rows(params, ii, jj):
    return np.stack([
        model.relation_embedding(params, int(i), int(j)).r
        for i, j in zip(ii, jj)
    ])


class TestForwardAgainstReference:
    @pytest.mark.parametrize("aspects,mem_slices", [(1, 1), (2, 4), (3, 5)])
    def test_relation_batch(self, backend, aspects, mem_slices):
        params = make_params(seed=31, aspects=aspects, mem_slices=mem_slices)
        ii, jj = random_pairs(params, 40, seed=1)
        got = kernels.relation_embeddings(params, ii, jj, backend=backend)
        np.testing.assert_allclose(got, reference_rows(params, ii, jj),
                                   rtol=1e-10, atol=1e-14)

    def test_relation_batch_nmal(self, backend):
        params = make_params(seed=32, ablation="nmal")
        ii, jj = random_pairs(params, 25, seed=2)
        got = kernels.relation_embeddings(params, ii, jj, backend=backend)
        np.testing.assert_allclose(got, reference_rows(params, ii, jj),
                                   rtol=1e-10, atol=1e-14)

    def test_forward_cache_matches_trace(self, backend):
        params = make_params(seed=33, aspects=2, mem_slices=3)
        ii, jj = random_pairs(params, 10, seed=3)
        cache = kernels.forward_cache(params, ii, jj, backend=backend)
        for p in range(10):
            tr = model.relation_embedding(params, int(ii[p]), int(jj[p]))
            np.testing.assert_allclose(cache.V[p], tr.v, rtol=1e-12)
            np.testing.assert_allclose(cache.att_mem[p], tr.att_mem, atol=1e-12)
            np.testing.assert_allclose(cache.r_part[p], tr.r_parts, atol=1e-12)
            np.testing.assert_allclose(cache.att_w[p], tr.att_w, atol=1e-12)
            np.testing.assert_allclose(cache.R[p], tr.r, atol=1e-12)

    def test_cache_shapes(self, backend):
        params = make_params(seed=34, dim=6, aspects=2, mem_slices=3, hidden=4)
        ii, jj = random_pairs(params, 7, seed=4)
        c = kernels.forward_cache(params, ii, jj, backend=backend)
        assert c.V.shape == (7, 4, 6)
        assert c.att_mem.shape == (7, 4, 3)
        assert c.H.shape == (7, 4, 4)
        assert c.att_w.shape == (7, 4)
        assert c.R.shape == (7, 6)


class TestBackwardCrossBackend:
    def _grads(self, params, be):
        ii, jj = random_pairs(params, 30, seed=5)
        cache = kernels.forward_cache(params, ii, jj, backend=be)
        GR = np.random.default_rng(6).normal(size=cache.R.shape)
        return kernels.backward_from_cache(params, cache, GR, backend=be)

    @pytest.mark.skipif("numba" not in kernels.available_backends(),
                        reason="numba unavailable")
    @pytest.mark.parametrize("ablation", ["full", "nmal"])
    def test_backends_agree(self, ablation):
        params = make_params(seed=35, ablation=ablation)
        out_np = self._grads(params, kernels.get_backend("numpy"))
        out_nb = self._grads(params, kernels.get_backend("numba"))
        np.testing.assert_array_equal(out_np[0], out_nb[0])
        for a, b in zip(out_np[1:], out_nb[1:]):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)

    def test_touched_items_sorted_unique(self, backend):
        params = make_params(seed=36)
        items, *_ = self._grads(params, backend)
        assert np.all(np.diff(items) > 0)


class TestBackendSelection:
    def test_available_contains_numpy(self):
        assert "numpy" in kernels.available_backends()

    def test_get_backend_unknown(self):
        with pytest.raises(ValueError):
            kernels.get_backend("tpu")

    def test_set_backend_round_trip(self):
        original = kernels.active_backend_name()
        try:
            kernels.set_backend("numpy")
            assert kernels.active_backend_name() == "numpy"
        finally:
            kernels.set_backend(original)

    @pytest.mark.parametrize("env,expect", [("numpy", "numpy"), ("auto", None)])
    def test_env_flag(self, env, expect):
        code = ("import reda.kernels as k; print(k.active_backend_name())")
        out = subprocess.run(
            [sys.executable, "-c", code],
            env={**os.environ, "REDA_BACKEND": env},
            capture_output=True, text=True, check=True,
        )
        name = out.stdout.strip()
        if expect is None:
            assert name in ("numba", "numpy")
        else:
            assert name == expect

    def test_env_flag_invalid(self):
        code = "import reda.kernels"
        out = subprocess.run(
            [sys.executable, "-c", code],
            env={**os.environ, "REDA_BACKEND": "cuda"},
            capture_output=True, text=True,
        )
        assert out.returncode != 0
        assert "REDA_BACKEND" in out.stderr
