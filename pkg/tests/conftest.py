import numpy as np
import pytest

from trustmerge.bundle import BundleConfig, make_bundle
from trustmerge.mlp import TrainConfig
from trustmerge.params import Checkpoint


def random_checkpoint(rng, include_degenerate=False):
    """Random small checkpoint; optionally with empty and scalar tensors."""
    tensors = [
        ("layer0.weight", rng.normal(size=(rng.integers(1, 5), rng.integers(1, 5)))),
        ("layer0.bias", rng.normal(size=rng.integers(1, 5))),
        ("layer1.weight", rng.normal(size=(3,))),
    ]
    if include_degenerate:
        tensors.append(("scalar", np.float64(rng.normal())))
        tensors.append(("empty", np.empty((0,), dtype=np.float64)))
        tensors.append(("empty2d", np.empty((3, 0), dtype=np.float64)))
    return Checkpoint(tensors)


def tiny_bundle_config(seed=3):
    """Small, fast bundle for integration tests (seconds, not minutes)."""
    return BundleConfig(
        seed=seed,
        hidden=(8,),
        samples_train=96,
        samples_test=48,
        exemplar_count=12,
        pretrain=TrainConfig(epochs=6),
        finetune=TrainConfig(epochs=10),
    )


@pytest.fixture(scope="session")
def small_bundle():
    return make_bundle(tiny_bundle_config())


@pytest.fixture(scope="session")
def bundle_cache():
    """Shared cache of full-size bundles keyed by seed."""
    cache = {}

    def get(seed: int):
        if seed not in cache:
            cache[seed] = make_bundle(BundleConfig(seed=seed))
        return cache[seed]

    return get
