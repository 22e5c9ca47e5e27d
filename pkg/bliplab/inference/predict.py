"""
Predictive distributions from MC sampling, MAP passes and ensembles.

The variance of the prediction splits, by the law of total variance, into
an epistemic part (spread of the sampled means) and an aleatoric part
(expected likelihood variance, a fixed floor here).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import dask
import numpy as np
import numpy.typing as npt

from bliplab.autodiff import RngStream
from bliplab.bayes.vad import infer_coefficients
from bliplab.data.graphs import GraphBatch
from bliplab.exceptions import ConfigError, DataError
from bliplab.models.mpnn import BlipModel, forward
from bliplab.training.engine import Checkpoint

logger = logging.getLogger(__name__)

INFERENCE_MODES = ("map", "mc")


@dataclass(frozen=True)
class InferenceConfig:
    """
    Attributes
    ----------
    mode : str
        "mc" for sampling, "map" for one noise-free pass.
    n_samples : int
        Stochastic forward passes in "mc" mode, at least 2.
    aleatoric_var : float
        Homoscedastic likelihood variance added to every target.
    seed : int
        Root seed of the sample streams.
    """

    mode: str = "mc"
    n_samples: int = 100
    aleatoric_var: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in INFERENCE_MODES:
            raise ConfigError(
                f"inference.mode must be one of {INFERENCE_MODES}, got "
                f"{self.mode!r}"
            )
        if self.mode == "mc" and self.n_samples < 2:
            raise ConfigError(
                f"inference.n_samples must be >= 2, got {self.n_samples}"
            )
        if self.aleatoric_var < 0:
            raise ConfigError(
                "inference.aleatoric_var must be >= 0, got "
                f"{self.aleatoric_var}"
            )


@dataclass(frozen=True, eq=False)
class PredictiveSummary:
    """
    Per-target predictive moments.

    Attributes
    ----------
    mean : npt.NDArray
        Predictive mean, shape (n_nodes, 3).
    epistemic_var : Optional[npt.NDArray]
        Variance of the sampled means; None for a MAP prediction.
    aleatoric_var : Optional[npt.NDArray]
        Expected likelihood variance; None for a MAP prediction.
    n_samples : int
        Forward passes behind ``mean``.
    """

    mean: npt.NDArray[np.float64]
    epistemic_var: Optional[npt.NDArray[np.float64]]
    aleatoric_var: Optional[npt.NDArray[np.float64]]
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if (self.epistemic_var is None) != (self.aleatoric_var is None):
            raise ValueError("Both variance parts must be given or neither")
        for name in ("epistemic_var", "aleatoric_var"):
            value = getattr(self, name)
            if value is None:
                continue
            if value.shape != self.mean.shape:
                raise ValueError(
                    f"{name} shape {value.shape} does not match mean "
                    f"{self.mean.shape}"
                )
            if np.any(value < 0):
                raise ValueError(f"{name} must be non-negative")

    @property
    def has_variance(self) -> bool:
        return self.epistemic_var is not None

    @property
    def total_var(self) -> Optional[npt.NDArray[np.float64]]:
        if not self.has_variance:
            return None
        return self.epistemic_var + self.aleatoric_var


def _summarize(
    samples: npt.NDArray, aleatoric_var: float
) -> PredictiveSummary:
    return PredictiveSummary(
        mean=np.mean(samples, axis=0),
        epistemic_var=np.var(samples, axis=0, ddof=1),
        aleatoric_var=np.full(samples.shape[1:], float(aleatoric_var)),
        n_samples=samples.shape[0],
    )


def predict_mc(
    model: BlipModel,
    batch: GraphBatch,
    n_samples: int = 100,
    rng: Optional[RngStream] = None,
    aleatoric_var: float = 0.0,
    jobs: int = 1,
) -> PredictiveSummary:
    """
    Monte Carlo predictive distribution of a blip or MC-dropout model.

    Coefficients are inferred once and reused by every sample. Sample
    ``s`` draws its noise from ``rng.child("mc-sample", s)``, so results
    do not depend on ``jobs``.

    Parameters
    ----------
    model : BlipModel
        A model in blip or mc_dropout mode.
    batch : GraphBatch
        Inputs.
    n_samples : int
        Number of stochastic passes, at least 2.
    rng : Optional[RngStream]
        Root stream; seed 0 when omitted.
    aleatoric_var : float
        Fixed likelihood variance.
    jobs : int
        Threads evaluating samples in parallel.

    Returns
    -------
    PredictiveSummary
        Sample mean and unbiased sample variance.
    """
    if n_samples < 2:
        raise ValueError(f"MC inference needs >= 2 samples, got {n_samples}")
    if model.config.mode == "deterministic":
        raise ValueError("A deterministic model has no predictive spread")
    rng = RngStream(0) if rng is None else rng
    weights = model.bind()
    coeffs = None
    if model.config.mode == "blip":
        coeffs = infer_coefficients(model.inference_net(weights), batch)

    def sample(s: int) -> npt.NDArray:
        stream = rng.child("mc-sample", s)
        return forward(model, batch, coeffs, stream, weights).numpy()

    logger.debug("Drawing %d MC samples with %d jobs", n_samples, jobs)
    if jobs > 1:
        samples = dask.compute(
            *[dask.delayed(sample)(s) for s in range(n_samples)],
            scheduler="threads",
            num_workers=jobs,
        )
    else:
        samples = [sample(s) for s in range(n_samples)]
    return _summarize(np.stack(samples), aleatoric_var)


def predict_map(model: BlipModel, batch: GraphBatch) -> PredictiveSummary:
    """
    One pass with the mean weights and no noise; variances are absent.
    """
    mean = forward(model, batch).numpy()
    return PredictiveSummary(np.array(mean), None, None, 1)


def _member_model(member: Union[Checkpoint, BlipModel]) -> BlipModel:
    return member.model if isinstance(member, Checkpoint) else member


def predict_ensemble(
    members: Sequence[Union[Checkpoint, BlipModel]],
    batch: GraphBatch,
    aleatoric_var: float = 0.0,
) -> PredictiveSummary:
    """
    Mean and unbiased variance of the members' MAP predictions.

    Raises
    ------
    ValueError
        For fewer than two members.
    ConfigError
        If the members do not share one model configuration.
    """
    if len(members) < 2:
        raise ValueError(f"An ensemble needs >= 2 members, got {len(members)}")
    models = [_member_model(member) for member in members]
    for index, model in enumerate(models[1:], start=1):
        if model.config != models[0].config:
            raise ConfigError(
                f"Ensemble member {index} has config {model.config}, "
                f"member 0 has {models[0].config}"
            )
    samples = np.stack([forward(model, batch).numpy() for model in models])
    return _summarize(samples, aleatoric_var)


def write_predictions(
    path: Union[str, Path], summary: PredictiveSummary, batch: GraphBatch
) -> Path:
    """
    Write one JSON line per node with its graph and node index, mean,
    variance parts (null for MAP) and target.
    """
    path = Path(path)
    node_graph = batch.node_graph
    with open(path, "w") as f:
        for node in range(batch.n_nodes):
            graph = int(node_graph[node])
            record = {
                "graph": graph,
                "node": node - int(batch.graph_offsets[graph]),
                "mean": summary.mean[node].tolist(),
                "epistemic_var": (
                    summary.epistemic_var[node].tolist()
                    if summary.has_variance
                    else None
                ),
                "aleatoric_var": (
                    summary.aleatoric_var[node].tolist()
                    if summary.has_variance
                    else None
                ),
                "n_samples": summary.n_samples,
                "target": batch.targets[node].tolist(),
            }
            f.write(json.dumps(record) + "\n")
    return path


def read_predictions(
    path: Union[str, Path],
) -> Tuple[PredictiveSummary, npt.NDArray, npt.NDArray]:
    """
    Read a prediction dump.

    Returns
    -------
    Tuple[PredictiveSummary, npt.NDArray, npt.NDArray]
        The summary, the targets (n_nodes, 3) and the graph index of every
        node.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Prediction file {path} does not exist")
    columns = {
        key: []
        for key in ("graph", "mean", "epistemic_var", "aleatoric_var")
    }
    targets, n_samples = [], set()
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                for key in columns:
                    columns[key].append(record[key])
                targets.append(record["target"])
                n_samples.add(record["n_samples"])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataError(
                    f"{path}:{line_number}: malformed prediction record"
                ) from None
    if not targets:
        raise DataError(f"{path}: no prediction records")
    if len(n_samples) != 1:
        raise DataError(f"{path}: inconsistent n_samples {sorted(n_samples)}")

    has_variance = columns["epistemic_var"][0] is not None
    if any((v is not None) != has_variance for v in columns["epistemic_var"]):
        raise DataError(f"{path}: mixes MAP and sampled records")
    summary = PredictiveSummary(
        mean=np.array(columns["mean"], dtype=np.float64),
        epistemic_var=(
            np.array(columns["epistemic_var"], dtype=np.float64)
            if has_variance
            else None
        ),
        aleatoric_var=(
            np.array(columns["aleatoric_var"], dtype=np.float64)
            if has_variance
            else None
        ),
        n_samples=n_samples.pop(),
    )
    return (
        summary,
        np.array(targets, dtype=np.float64),
        np.array(columns["graph"], dtype=np.int64),
    )
