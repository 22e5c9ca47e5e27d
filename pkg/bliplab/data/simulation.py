"""
Charged-particle dataset generator.

Five unit-mass particles with charges ±1 move under softened Coulomb
forces inside a box with soft harmonic walls. Each record stores the
initial state and the positions after ``n_steps`` velocity-Verlet steps.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import dask
import numpy as np
import numpy.typing as npt

from bliplab.autodiff.rng import RngStream
from bliplab.data.graphs import ParticleGraph
from bliplab.exceptions import ConfigError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SimConfig:
    """
    Physical and sampling constants of the N-body generator.

    Attributes
    ----------
    n_particles : int
        Particles per system.
    box_half_size : float
        Walls start at ``±box_half_size`` along every axis.
    interaction_strength : float
        Coulomb constant k.
    dt : float
        Integrator step.
    n_steps : int
        Prediction horizon in integrator steps.
    softening : float
        Softening length added to pair distances.
    init_pos_std : float
        Standard deviation of the initial positions.
    init_vel_norm : float
        Speed of every particle at t = 0.
    seed : int
        Root seed of the generator streams.
    wall_stiffness : float
        Spring constant of the soft walls.
    use_walls : bool
        Disable to integrate free space dynamics.
    """

    n_particles: int = 5
    box_half_size: float = 5.0
    interaction_strength: float = 1.0
    dt: float = 0.001
    n_steps: int = 1000
    softening: float = 0.1
    init_pos_std: float = 0.5
    init_vel_norm: float = 0.5
    seed: int = 43
    wall_stiffness: float = 10.0
    use_walls: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError(f"sim.dt must be > 0, got {self.dt}")
        if self.n_steps <= 0:
            raise ConfigError(f"sim.n_steps must be > 0, got {self.n_steps}")
        if self.softening <= 0:
            raise ConfigError(
                f"sim.softening must be > 0, got {self.softening}"
            )
        if self.n_particles < 2:
            raise ConfigError(
                f"sim.n_particles must be >= 2, got {self.n_particles}"
            )
        if self.box_half_size <= 0:
            raise ConfigError(
                f"sim.box_half_size must be > 0, got {self.box_half_size}"
            )


def coulomb_forces(
    positions: npt.NDArray,
    charges: npt.NDArray,
    interaction_strength: float = 1.0,
    softening: float = 0.1,
) -> npt.NDArray[np.float64]:
    """
    Softened pairwise Coulomb forces.

    ``F_i = sum_{j != i} k q_i q_j (r_i - r_j) / (|r_i - r_j|^2 + s^2)^1.5``

    Parameters
    ----------
    positions : npt.NDArray
        Shape (n, 3).
    charges : npt.NDArray
        Shape (n,).
    interaction_strength : float
        Coulomb constant k.
    softening : float
        Softening length s.

    Returns
    -------
    npt.NDArray
        Forces, shape (n, 3). Like charges repel.
    """
    positions = np.asarray(positions, dtype=np.float64)
    charges = np.asarray(charges, dtype=np.float64)
    diff = positions[:, None, :] - positions[None, :, :]
    dist2 = np.sum(diff * diff, axis=-1) + softening**2
    coupling = interaction_strength * charges[:, None] * charges[None, :]
    scale = coupling / dist2**1.5
    # Self interaction vanishes because diff is zero on the diagonal
    return np.sum(scale[:, :, None] * diff, axis=1)


def wall_forces(
    positions: npt.NDArray, box_half_size: float, stiffness: float
) -> npt.NDArray[np.float64]:
    """Harmonic restoring force on the part of a coordinate outside the box."""
    excess = positions - np.clip(positions, -box_half_size, box_half_size)
    return -stiffness * excess


def total_forces(
    positions: npt.NDArray, charges: npt.NDArray, config: SimConfig
) -> npt.NDArray[np.float64]:
    forces = coulomb_forces(
        positions, charges, config.interaction_strength, config.softening
    )
    if config.use_walls:
        forces = forces + wall_forces(
            positions, config.box_half_size, config.wall_stiffness
        )
    return forces


def total_energy(
    positions: npt.NDArray,
    velocities: npt.NDArray,
    charges: npt.NDArray,
    config: SimConfig,
) -> float:
    """Kinetic plus softened Coulomb plus wall energy (unit masses)."""
    kinetic = 0.5 * np.sum(velocities * velocities)
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1) + config.softening**2)
    coupling = (
        config.interaction_strength * charges[:, None] * charges[None, :]
    )
    upper = np.triu_indices(len(charges), k=1)
    potential = np.sum(coupling[upper] / dist[upper])
    if config.use_walls:
        excess = positions - np.clip(
            positions, -config.box_half_size, config.box_half_size
        )
        potential += 0.5 * config.wall_stiffness * np.sum(excess * excess)
    return float(kinetic + potential)


def integrate(
    positions: npt.NDArray,
    velocities: npt.NDArray,
    charges: npt.NDArray,
    config: SimConfig,
    n_steps: Optional[int] = None,
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """
    Velocity-Verlet integration with unit masses.

    Parameters
    ----------
    positions, velocities : npt.NDArray
        Initial state, shape (n, 3).
    charges : npt.NDArray
        Shape (n,). Any real values are accepted here.
    config : SimConfig
        Physical constants.
    n_steps : Optional[int]
        Number of steps; defaults to ``config.n_steps``.

    Returns
    -------
    Tuple[npt.NDArray, npt.NDArray]
        Final positions and velocities.
    """
    x = np.array(positions, dtype=np.float64)
    v = np.array(velocities, dtype=np.float64)
    q = np.asarray(charges, dtype=np.float64)
    dt = config.dt
    steps = config.n_steps if n_steps is None else n_steps

    acceleration = total_forces(x, q, config)
    for _ in range(steps):
        v += 0.5 * dt * acceleration
        x += dt * v
        acceleration = total_forces(x, q, config)
        v += 0.5 * dt * acceleration
    return x, v


def sample_initial_state(
    config: SimConfig, rng: RngStream
) -> Tuple[npt.NDArray, npt.NDArray, npt.NDArray]:
    n = config.n_particles
    positions = np.clip(
        config.init_pos_std * rng.normal((n, 3)),
        -config.box_half_size,
        config.box_half_size,
    )
    directions = rng.normal((n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    velocities = config.init_vel_norm * directions
    charges = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
    return positions, velocities, charges


def simulate(config: SimConfig, rng: RngStream) -> ParticleGraph:
    """
    Sample an initial state and integrate it over the prediction horizon.

    Parameters
    ----------
    config : SimConfig
        The generator configuration.
    rng : RngStream
        The stream owned by this record.

    Returns
    -------
    ParticleGraph
        Initial state plus final positions as targets.
    """
    positions, velocities, charges = sample_initial_state(config, rng)
    final_positions, _ = integrate(positions, velocities, charges, config)
    return ParticleGraph(positions, velocities, charges, final_positions)


def _simulate_record(config: SimConfig, split: str, index: int):
    return simulate(config, RngStream(config.seed).child(split, index))


def generate_split(
    config: SimConfig,
    n_train: int = 3000,
    n_val: int = 3000,
    n_test: int = 3000,
    jobs: int = 1,
) -> Dict[str, List[ParticleGraph]]:
    """
    Generate the train, validation and test datasets.

    Record ``k`` of split ``s`` is simulated from the stream
    ``(seed, s, k)``, so the splits never share trajectories and the
    output does not depend on ``jobs``.

    Parameters
    ----------
    config : SimConfig
        The generator configuration.
    n_train, n_val, n_test : int
        Record counts, each at least 1.
    jobs : int
        Worker processes; 1 runs serially.

    Returns
    -------
    Dict[str, List[ParticleGraph]]
        Keys "train", "val" and "test".
    """
    counts = dict(zip(SPLITS, (n_train, n_val, n_test)))
    for split, count in counts.items():
        if count < 1:
            raise ConfigError(f"n_{split} must be >= 1, got {count}")

    datasets = {}
    for split, count in counts.items():
        logger.info("Simulating %d %s records", count, split)
        if jobs > 1:
            tasks = [
                dask.delayed(_simulate_record)(config, split, index)
                for index in range(count)
            ]
            records = list(
                dask.compute(*tasks, scheduler="processes", num_workers=jobs)
            )
        else:
            records = [
                _simulate_record(config, split, index)
                for index in range(count)
            ]
        datasets[split] = records
    return datasets
