import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybridasr.config import toy_config
from hybridasr.conformer import DecoderOnlyConformer
from hybridasr.tensor import Tensor

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def toy_model(mode="dense", seed=0, randomize_routers=True, **kw):
    """Two-layer float64 model; random routers so top-k has no ties."""
    model = DecoderOnlyConformer(toy_config(mode, **kw), seed=seed)
    r = np.random.default_rng(seed + 99)
    if randomize_routers:
        for name, p in model.named_parameters():
            if ".router.w" in name:
                p.data[...] = r.normal(0.0, 0.5, p.shape)
    return model.eval()


@pytest.fixture
def make_toy():
    return toy_model
