"""
Forces as negative position gradients of a scalar energy.

An energy head maps watched positions to per-node or per-edge energies
whose sum is the total energy. ``gradient_force`` records the head on a
dedicated tape that watches only the positions.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt

from bliplab.autodiff import (
    RngStream,
    Tape,
    Tensor,
    gather,
    square,
    swish,
    tsum,
)
from bliplab.bayes.vad import BayesianLinear, init_linear, linear
from bliplab.data.graphs import GraphBatch


class EnergyHead:
    """Maps positions of a batch to its total energy."""

    def energy(self, positions: Tensor, batch: GraphBatch) -> Tensor:
        raise NotImplementedError


class QuadraticEnergy(EnergyHead):
    """``E = sum_i |x_i|^2``; the force is ``-2 x_i``."""

    def energy(self, positions: Tensor, batch: GraphBatch) -> Tensor:
        return tsum(square(positions))


def _mlp_layers(
    rng: RngStream, sizes: Sequence[int]
) -> Sequence[BayesianLinear]:
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params = init_linear(rng.child(k), n_in, n_out)
        layers.append(
            BayesianLinear(Tensor(params["theta"]), Tensor(params["bias"]))
        )
    return tuple(layers)


def _apply(layers: Sequence[BayesianLinear], x: Tensor) -> Tensor:
    for index, layer in enumerate(layers):
        x = linear(layer, x)
        if index < len(layers) - 1:
            x = swish(x)
    return x


@dataclass(frozen=True, eq=False)
class NodeMlpEnergy(EnergyHead):
    """Sum of per-node energies ``e(x_i)`` from a small MLP."""

    layers: Sequence[BayesianLinear]

    @classmethod
    def init(cls, rng: RngStream, hidden_dim: int = 16) -> "NodeMlpEnergy":
        return cls(_mlp_layers(rng, (3, hidden_dim, hidden_dim, 1)))

    def energy(self, positions: Tensor, batch: GraphBatch) -> Tensor:
        return tsum(_apply(self.layers, positions))


@dataclass(frozen=True, eq=False)
class PairMlpEnergy(EnergyHead):
    """
    Sum over edges of ``e(|x_i - x_j|^2)``; invariant to translations, so
    the forces on a graph sum to zero.
    """

    layers: Sequence[BayesianLinear]

    @classmethod
    def init(cls, rng: RngStream, hidden_dim: int = 16) -> "PairMlpEnergy":
        return cls(_mlp_layers(rng, (1, hidden_dim, hidden_dim, 1)))

    def energy(self, positions: Tensor, batch: GraphBatch) -> Tensor:
        diff = gather(positions, batch.receivers) - gather(
            positions, batch.senders
        )
        dist2 = tsum(square(diff), axis=1, keepdims=True)
        return tsum(_apply(self.layers, dist2))


def gradient_force(
    head: EnergyHead, batch: GraphBatch
) -> npt.NDArray[np.float64]:
    """
    ``F = -dE/dx`` for every node of the batch.

    Parameters
    ----------
    head : EnergyHead
        The energy model.
    batch : GraphBatch
        Supplies positions and the edge list.

    Returns
    -------
    npt.NDArray
        Forces, shape (n_nodes, 3).

    Raises
    ------
    ValueError
        If the head does not return a single energy value.
    """
    tape = Tape()
    positions = tape.watch(batch.positions)
    energy = head.energy(positions, batch)
    if energy.size != 1:
        raise ValueError(
            f"Energy head must return a scalar, got shape {energy.shape}"
        )
    if energy.tape is not tape:
        # Energy independent of positions
        return np.zeros_like(batch.positions)
    return -tape.backward(energy)[positions]
