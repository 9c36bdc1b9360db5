import numpy as np
import pytest

from reda import kernels, model
from reda.data import leave_one_out_split
from reda.evaluation import SyntheticSpec, generate_synthetic


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    return kernels.get_backend(request.param)


@pytest.fixture(scope="session")
def tiny_split():
    """Small planted-genre split shared by fast tests."""
    ds = generate_synthetic(SyntheticSpec(
        n_users=40, n_items=80, n_genres=4, items_per_user=8,
        affinity=0.9, seed=11,
    ))
    return leave_one_out_split(ds, n_neg=20, seed=11)


def make_params(seed=0, num_items=20, dim=8, aspects=2, mem_slices=4,
                hidden=5, ablation="full", scale=None):
    """Random parameters; ``scale`` rescales away from the training init."""
    hp = model.HyperParams(dim=dim, aspects=aspects, mem_slices=mem_slices,
                           hidden=hidden)
    params = model.init_params(num_items, hp, np.random.default_rng(seed),
                               ablation=ablation)
    if scale is not None:
        for t in params.tensors():
            t *= scale / model.INIT_STD
    return params
