from bliplab.data.graphs import (
    GraphBatch,
    ParticleGraph,
    build_batch,
    read_dataset,
    write_dataset,
)
from bliplab.data.simulation import SimConfig, generate_split, simulate

__all__ = [
    "GraphBatch",
    "ParticleGraph",
    "SimConfig",
    "build_batch",
    "generate_split",
    "read_dataset",
    "simulate",
    "write_dataset",
]
