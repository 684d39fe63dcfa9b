import numpy as np
import pytest

from mlmcmc_beam.config import config_from_dict
from mlmcmc_beam.fem import BeamGeometry
from mlmcmc_beam.random_field import MaternParams, build_kl_basis


@pytest.fixture(scope="session")
def geom():
    return BeamGeometry()


@pytest.fixture(scope="session")
def small_basis():
    """Coarse-quadrature basis, enough modes for sampler-level tests."""
    return build_kl_basis(MaternParams(4.0, 0.5, 1.5), n_quad=24, truncation=40)


def make_config(**overrides) -> dict:
    """Base config document for small test hierarchies."""
    doc = {
        "experiment": "CostVariance",
        "seed": 42,
        "replicates": 1,
        "output_dir": "out/test",
        "matern": {"variance": 4.0, "corr_length": 0.5, "smoothness": 1.5},
        "field": {"n_quad": 24},
        "observations": {"sigma_f": 1.0e-7, "truth_truncation": 20},
        "sampling": {"pcn_beta": 0.2, "coarsest_samples": 1000,
                     "burn_in_fraction": 0.1},
        "levels": [
            {"m": 5, "nx": 6, "ny": 4},
            {"m": 10, "nx": 12, "ny": 8, "subsample": 5},
        ],
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return doc


@pytest.fixture
def config_doc():
    return make_config


@pytest.fixture
def tiny_config():
    return config_from_dict(make_config())


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
