import numpy as np
import pytest

from bliplab.autodiff import RngStream, Tensor, tsum
from bliplab.data.graphs import build_batch
from bliplab.training import gradient_force
from bliplab.training.forces import (
    EnergyHead,
    NodeMlpEnergy,
    PairMlpEnergy,
    QuadraticEnergy,
)


def finite_difference_force(head, batch, step=1e-5):
    positions = np.array(batch.positions)
    force = np.zeros_like(positions)
    for index in np.ndindex(positions.shape):
        up, down = positions.copy(), positions.copy()
        up[index] += step
        down[index] -= step
        difference = (
            head.energy(Tensor(up), batch).item()
            - head.energy(Tensor(down), batch).item()
        )
        force[index] = -difference / (2 * step)
    return force


def test_quadratic_energy_force(two_graphs):
    batch = build_batch(two_graphs)
    force = gradient_force(QuadraticEnergy(), batch)
    np.testing.assert_allclose(
        force, -2 * batch.positions, rtol=0, atol=1e-10
    )


@pytest.mark.parametrize("head_type", [NodeMlpEnergy, PairMlpEnergy])
def test_mlp_force_matches_finite_differences(head_type, graph_factory):
    head = head_type.init(RngStream(4), hidden_dim=8)
    batch = build_batch([graph_factory(0), graph_factory(1)])
    force = gradient_force(head, batch)
    expected = finite_difference_force(head, batch)
    error = np.max(np.abs(force - expected)) / np.max(np.abs(expected))
    assert error < 1e-5


def test_pair_forces_sum_to_zero_per_graph(graph_factory):
    head = PairMlpEnergy.init(RngStream(2))
    batch = build_batch([graph_factory(3), graph_factory(4)])
    force = gradient_force(head, batch)
    for graph in range(batch.n_graphs):
        np.testing.assert_allclose(
            force[batch.graph_slice(graph)].sum(axis=0), 0.0, atol=1e-12
        )


class VectorEnergy(EnergyHead):
    def energy(self, positions, batch):
        return positions


class ConstantEnergy(EnergyHead):
    def energy(self, positions, batch):
        return tsum(Tensor(np.ones(3)))


def test_energy_must_be_scalar(two_graphs):
    with pytest.raises(ValueError, match="scalar"):
        gradient_force(VectorEnergy(), build_batch(two_graphs))


def test_position_independent_energy_has_no_force(two_graphs):
    batch = build_batch(two_graphs)
    force = gradient_force(ConstantEnergy(), batch)
    np.testing.assert_array_equal(force, np.zeros((10, 3)))
