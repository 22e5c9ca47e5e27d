from pathlib import Path

import numpy as np
import pytest
from pytransform3d.rotations import active_matrix_from_angle

from bliplab.autodiff import RngStream
from bliplab.bayes.vad import VadConfig
from bliplab.data.graphs import ParticleGraph
from bliplab.data.simulation import SimConfig, generate_split
from bliplab.models.mpnn import ModelConfig, init_model


@pytest.fixture(scope="session")
def parameters_dir():
    return Path(__file__).parent.parent.resolve() / "bliplab" / "parameters"


@pytest.fixture(scope="session")
def rotation_from_angles():
    """Rotation about x, then y, then z, with angles in degrees."""

    def rotate(angles):
        matrix = np.eye(3)
        for basis, angle in enumerate(angles):
            step = active_matrix_from_angle(basis, np.deg2rad(angle))
            matrix = step @ matrix
        return matrix

    return rotate


@pytest.fixture(scope="session")
def short_sim_config():
    return SimConfig(n_steps=20, seed=7)


@pytest.fixture(scope="session")
def small_splits(short_sim_config):
    return generate_split(short_sim_config, n_train=8, n_val=4, n_test=4)


@pytest.fixture(scope="session")
def two_graphs(small_splits):
    return small_splits["train"][:2]


def make_model_config(architecture="gnn", mode="deterministic", **kwargs):
    kwargs.setdefault("n_layers", 2)
    kwargs.setdefault("hidden_dim", 8)
    if mode == "blip":
        kwargs.setdefault("vad", VadConfig(hidden_dim=8))
    if mode == "mc_dropout":
        kwargs.setdefault("dropout_p", 0.2)
    return ModelConfig(architecture=architecture, mode=mode, **kwargs)


@pytest.fixture()
def model_factory():
    def make(architecture="gnn", mode="deterministic", seed=0, **kwargs):
        config = make_model_config(architecture, mode, **kwargs)
        return init_model(config, RngStream(seed).child("init"))

    return make


@pytest.fixture()
def model_config_factory():
    return make_model_config


@pytest.fixture()
def graph_factory():
    def make(seed: int, n: int = 5) -> ParticleGraph:
        rng = np.random.default_rng(seed)
        return ParticleGraph(
            positions=rng.normal(size=(n, 3)),
            velocities=rng.normal(size=(n, 3)),
            charges=rng.choice([-1.0, 1.0], size=n),
            target_positions=rng.normal(size=(n, 3)),
        )

    return make


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        dest="slow",
        default=False,
        help="enable runslow decorated tests",
    )


def pytest_configure(config):
    if not config.option.slow:
        setattr(config.option, "markexpr", "not slow")
