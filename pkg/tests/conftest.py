import numpy as np
import pytest

from calodqm import synthgen
from calodqm.core import MapSequence
from calodqm.model import ModelSpec, build_model
from calodqm.preprocess import build_adjacency, make_windows, preprocess_sequence


DESK_DIMS = (8, 24, 2)
DESK_RBX = 4


@pytest.fixture(scope="session")
def desk_geometry():
    return synthgen.make_geometry("custom", rbx_count=DESK_RBX, dims=DESK_DIMS)


@pytest.fixture(scope="session")
def desk_run(desk_geometry):
    profile = synthgen.GenProfile(geometry=desk_geometry, n_ls=160, seed=42)
    return synthgen.generate_run(profile)


@pytest.fixture(scope="session")
def desk_topo(desk_geometry):
    return build_adjacency(desk_geometry)


@pytest.fixture(scope="session")
def desk_windows(desk_run):
    result = preprocess_sequence(desk_run)
    return make_windows(result.seq, 5)


@pytest.fixture(scope="session")
def desk_model(desk_geometry, desk_topo):
    spec = ModelSpec(*desk_geometry.dims, T=5)
    return build_model(spec, desk_topo, seed=7)


def tiny_spec(dims, T=5):
    """Small model variant for fast training tests."""
    return ModelSpec(
        *dims, T=T, cnn_channels=(4, 8), gnn_hidden=8, gnn_layers=2,
        embed_dim=16, rnn_hidden=32, latent_dim=8,
    )
