import os

import numpy as np
import pytest
import torch

from scorefpe.gmm import default_gmm
from scorefpe.sde import SdeSpec

torch.set_num_threads(1)

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")


@pytest.fixture(scope="session")
def gmm():
    return default_gmm()


@pytest.fixture(scope="session")
def ve():
    return SdeSpec(kind="ve")


@pytest.fixture(scope="session")
def vp():
    return SdeSpec(kind="vp")


@pytest.fixture(scope="session")
def rve():
    return SdeSpec(kind="rve")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def cached_training(tag, cfg, gmm, sde):
    """Train once per (tag, config) and cache the parameter vector on disk.

    The cache key includes the full training config, so editing a config
    invalidates the entry; delete tests/.cache to force retraining.
    """
    import hashlib
    import json

    from scorefpe.train import train, trained_score_net

    key = hashlib.sha256(
        json.dumps(
            {
                "tag": tag,
                "cfg": repr(cfg),
                "gmm": repr(gmm),
                "sde": repr(sde),
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()[:16]
    os.makedirs(CACHE_DIR, exist_ok=True)
    path = os.path.join(CACHE_DIR, f"{tag}-{key}.npz")
    if os.path.exists(path):
        with np.load(path) as data:
            params = data["params"]
            loss_rows = data["loss_rows"]
    else:
        report = train(cfg, gmm, sde)
        params = report.final_params
        loss_rows = np.asarray(report.epochs, dtype=np.float64)
        np.savez(path, params=params, loss_rows=loss_rows)
    return trained_score_net(cfg, params), loss_rows
