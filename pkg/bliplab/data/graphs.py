import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from bliplab.exceptions import DataError

logger = logging.getLogger(__name__)

N_PARTICLES = 5
ARCHITECTURES = ("gnn", "egnn")


def _readonly(values, shape=None) -> npt.NDArray[np.float64]:
    array = np.array(values, dtype=np.float64)
    if shape is not None:
        array = array.reshape(shape)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class ParticleGraph:
    """
    One N-body record: the initial state and the positions after the
    prediction horizon.

    Attributes
    ----------
    positions : npt.NDArray
        Initial positions, shape (n, 3).
    velocities : npt.NDArray
        Initial velocities, shape (n, 3).
    charges : npt.NDArray
        Charges in {-1, +1}, shape (n,).
    target_positions : npt.NDArray
        Positions after the horizon, shape (n, 3).
    """

    positions: npt.NDArray[np.float64]
    velocities: npt.NDArray[np.float64]
    charges: npt.NDArray[np.float64]
    target_positions: npt.NDArray[np.float64]

    def __post_init__(self):
        positions = _readonly(self.positions)
        n = positions.shape[0] if positions.ndim == 2 else -1
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise DataError(f"positions must be (n, 3), got {positions.shape}")
        velocities = _readonly(self.velocities)
        targets = _readonly(self.target_positions)
        charges = _readonly(self.charges)
        for name, array in (
            ("velocities", velocities),
            ("target_positions", targets),
        ):
            if array.shape != (n, 3):
                raise DataError(f"{name} must be ({n}, 3), got {array.shape}")
        if charges.shape != (n,):
            raise DataError(f"charges must be ({n},), got {charges.shape}")
        for name, array in (
            ("positions", positions),
            ("velocities", velocities),
            ("charges", charges),
            ("target_positions", targets),
        ):
            if not np.all(np.isfinite(array)):
                raise DataError(f"{name} contains non-finite values")
        if not np.all(np.abs(charges) == 1.0):
            raise DataError(f"charges must be exactly +1 or -1, got {charges}")

        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "velocities", velocities)
        object.__setattr__(self, "charges", charges)
        object.__setattr__(self, "target_positions", targets)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def permuted(self, permutation: Sequence[int]) -> "ParticleGraph":
        """Return the same system with particles reordered."""
        permutation = np.asarray(permutation)
        return ParticleGraph(
            self.positions[permutation],
            self.velocities[permutation],
            self.charges[permutation],
            self.target_positions[permutation],
        )

    def transformed(
        self, rotation: npt.NDArray, translation: Optional[npt.NDArray] = None
    ) -> "ParticleGraph":
        """
        Apply ``x -> R x + t`` to positions and targets and ``v -> R v`` to
        velocities.
        """
        t = np.zeros(3) if translation is None else np.asarray(translation)
        return ParticleGraph(
            self.positions @ rotation.T + t,
            self.velocities @ rotation.T,
            self.charges,
            self.target_positions @ rotation.T + t,
        )


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """
    Several fully connected particle graphs stacked into one disjoint graph.

    Edge ``k`` is the ordered pair ``edge_index[k] = (i, j)``: the message
    travels from sender ``j`` to receiver ``i``.

    Attributes
    ----------
    node_features : npt.NDArray
        Initial node features h0, shape (n_nodes, d).
    edge_index : npt.NDArray
        Ordered (receiver, sender) pairs, shape (n_edges, 2).
    edge_attrs : npt.NDArray
        Charge products a_ij = c_i c_j, shape (n_edges, 1).
    positions, velocities, targets : npt.NDArray
        Shape (n_nodes, 3).
    charges : npt.NDArray
        Shape (n_nodes,).
    graph_offsets : npt.NDArray
        Node ``graph_offsets[g]`` is the first node of graph ``g``; the
        last entry is ``n_nodes``.
    architecture : str
        The featurization contract used for ``node_features``.
    """

    node_features: npt.NDArray[np.float64]
    edge_index: npt.NDArray[np.int64]
    edge_attrs: npt.NDArray[np.float64]
    positions: npt.NDArray[np.float64]
    velocities: npt.NDArray[np.float64]
    charges: npt.NDArray[np.float64]
    targets: npt.NDArray[np.float64]
    graph_offsets: npt.NDArray[np.int64]
    architecture: str

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    @property
    def n_graphs(self) -> int:
        return self.graph_offsets.shape[0] - 1

    @property
    def receivers(self) -> npt.NDArray[np.int64]:
        return self.edge_index[:, 0]

    @property
    def senders(self) -> npt.NDArray[np.int64]:
        return self.edge_index[:, 1]

    @property
    def node_graph(self) -> npt.NDArray[np.int64]:
        """Graph id of every node."""
        sizes = np.diff(self.graph_offsets)
        return np.repeat(np.arange(self.n_graphs), sizes)

    @property
    def in_degree(self) -> npt.NDArray[np.float64]:
        return np.bincount(self.receivers, minlength=self.n_nodes).astype(
            np.float64
        )

    def graph_slice(self, graph: int) -> slice:
        return slice(
            int(self.graph_offsets[graph]), int(self.graph_offsets[graph + 1])
        )


def node_features_for(
    architecture: str,
    positions: npt.NDArray,
    velocities: npt.NDArray,
) -> npt.NDArray[np.float64]:
    """
    Initial node features for an architecture.

    The GNN sees position and velocity concatenated (6 values); the EGNN
    sees only the rotation-invariant velocity norm (1 value).
    """
    if architecture == "gnn":
        return np.concatenate([positions, velocities], axis=1)
    if architecture == "egnn":
        return np.linalg.norm(velocities, axis=1, keepdims=True)
    raise ValueError(
        f"Unknown architecture {architecture!r}, expected one of "
        f"{ARCHITECTURES}"
    )


def build_batch(
    graphs: Sequence[ParticleGraph], architecture: str = "gnn"
) -> GraphBatch:
    """
    Stack particle graphs into a fully connected, disjoint batch.

    Parameters
    ----------
    graphs : Sequence[ParticleGraph]
        The graphs to batch. All must have the same number of particles.
    architecture : str
        Either "gnn" or "egnn"; selects the node featurization.

    Returns
    -------
    GraphBatch
        The batch, with n (n - 1) edges per graph.
    """
    if len(graphs) == 0:
        raise ValueError("Cannot build a batch from an empty list of graphs")
    n = graphs[0].n_particles
    for index, graph in enumerate(graphs):
        if graph.n_particles != n:
            raise DataError(
                f"Graph {index} has {graph.n_particles} particles, "
                f"expected {n}"
            )

    positions = np.concatenate([g.positions for g in graphs])
    velocities = np.concatenate([g.velocities for g in graphs])
    charges = np.concatenate([g.charges for g in graphs])
    targets = np.concatenate([g.target_positions for g in graphs])

    receivers, senders = np.nonzero(~np.eye(n, dtype=bool))
    offsets = np.arange(len(graphs)) * n
    edge_index = np.concatenate(
        [np.stack([receivers + o, senders + o], axis=1) for o in offsets]
    ).astype(np.int64)
    edge_attrs = (charges[edge_index[:, 0]] * charges[edge_index[:, 1]])[
        :, None
    ]

    graph_offsets = np.arange(len(graphs) + 1, dtype=np.int64) * n
    for array in (edge_index, graph_offsets):
        array.flags.writeable = False

    return GraphBatch(
        node_features=_readonly(
            node_features_for(architecture, positions, velocities)
        ),
        edge_index=edge_index,
        edge_attrs=_readonly(edge_attrs),
        positions=_readonly(positions),
        velocities=_readonly(velocities),
        charges=_readonly(charges),
        targets=_readonly(targets),
        graph_offsets=graph_offsets,
        architecture=architecture,
    )


def graph_to_record(graph: ParticleGraph) -> dict:
    return {
        "positions": graph.positions.tolist(),
        "velocities": graph.velocities.tolist(),
        "charges": graph.charges.tolist(),
        "targets": graph.target_positions.tolist(),
    }


def write_dataset(
    path: Union[str, Path], graphs: Sequence[ParticleGraph]
) -> Path:
    """
    Write graphs as JSON lines.

    Python's float repr is the shortest decimal string that round-trips,
    so reading the file back reproduces every float64 bit for bit.
    """
    path = Path(path)
    with open(path, "w") as f:
        for graph in graphs:
            f.write(json.dumps(graph_to_record(graph)) + "\n")
    logger.debug("Wrote %d records to %s", len(graphs), path)
    return path


def read_dataset(
    path: Union[str, Path], n_particles: Optional[int] = N_PARTICLES
) -> List[ParticleGraph]:
    """
    Read a JSON-lines dataset.

    Parameters
    ----------
    path : Union[str, Path]
        The ``.jsonl`` file.
    n_particles : Optional[int]
        Expected particle count per record; None accepts any count.

    Returns
    -------
    List[ParticleGraph]
        The records in file order.

    Raises
    ------
    DataError
        On a malformed record (the message names the line) or a record
        with the wrong number of particles.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset file {path} does not exist")

    graphs = []
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise DataError(
                    f"{path}:{line_number}: malformed record ({error.msg})"
                ) from None
            graphs.append(_record_to_graph(record, path, line_number))
            if n_particles is not None and (
                graphs[-1].n_particles != n_particles
            ):
                raise DataError(
                    f"{path}:{line_number}: record has "
                    f"{graphs[-1].n_particles} particles, expected "
                    f"{n_particles}"
                )
    return graphs


def _record_to_graph(record, path: Path, line_number: int) -> ParticleGraph:
    keys = {"positions", "velocities", "charges", "targets"}
    if not isinstance(record, dict) or set(record) != keys:
        found = sorted(record) if isinstance(record, dict) else record
        raise DataError(
            f"{path}:{line_number}: expected keys {sorted(keys)}, "
            f"found {found}"
        )
    try:
        return ParticleGraph(
            positions=record["positions"],
            velocities=record["velocities"],
            charges=record["charges"],
            target_positions=record["targets"],
        )
    except (DataError, ValueError, TypeError) as error:
        raise DataError(f"{path}:{line_number}: {error}") from None
