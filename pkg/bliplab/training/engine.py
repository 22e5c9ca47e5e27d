"""
Training loops for BLIP models and their baselines.

Every mode shares one loop: shuffle, batch, one forward pass on a fresh
tape, backward, optimizer step, and a noise-free validation pass for
model selection. Blip mode adds the inference network and the KL term.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import dask
import numpy as np

from bliplab.autodiff import RngStream, Tape, Tensor, mean, square
from bliplab.bayes.vad import (
    count_weight_elements,
    infer_coefficients,
    kl_divergence,
)
from bliplab.data.graphs import GraphBatch, ParticleGraph, build_batch
from bliplab.exceptions import ConfigError, DataError, NumericalError
from bliplab.models.mpnn import BlipModel, ModelConfig, forward, init_model
from bliplab.training.optim import Optimizer
from bliplab.utils.utils import random_rotation

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "adamw")


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings.

    Attributes
    ----------
    epochs : int
        Passes over the training set.
    batch_size : int
        Graphs per batch.
    lr : float
        Constant learning rate.
    optimizer : str
        "adam" or "adamw".
    kl_weight : float
        Weight lambda of the KL term (blip only).
    prior_p : float
        Dropout probability matched by the prior.
    grad_clip : Optional[float]
        Maximum global gradient norm; None disables clipping.
    seed : int
        Root seed of the shuffle and weight-noise streams.
    eval_every : int
        Validation interval in epochs.
    weight_decay : float
        Decoupled weight decay for "adamw".
    augment_rotations : bool
        Rotate every training batch about the box centre by a rotation
        drawn uniformly from SO(3).
    """

    epochs: int = 10000
    batch_size: int = 100
    lr: float = 5e-4
    optimizer: str = "adam"
    kl_weight: float = 0.01
    prior_p: float = 0.5
    grad_clip: Optional[float] = None
    seed: int = 0
    eval_every: int = 1
    weight_decay: float = 0.0
    augment_rotations: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(
                f"train.batch_size must be >= 1, got {self.batch_size}"
            )
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"train.optimizer must be one of {OPTIMIZERS}, got "
                f"{self.optimizer!r}"
            )
        if self.kl_weight < 0:
            raise ConfigError(
                f"train.kl_weight must be >= 0, got {self.kl_weight}"
            )
        if not 0.0 < self.prior_p < 1.0:
            raise ConfigError(
                f"train.prior_p must be in (0, 1), got {self.prior_p}"
            )
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(
                f"train.grad_clip must be > 0 or null, got {self.grad_clip}"
            )
        if self.eval_every < 1:
            raise ConfigError(
                f"train.eval_every must be >= 1, got {self.eval_every}"
            )
        if self.weight_decay < 0:
            raise ConfigError(
                f"train.weight_decay must be >= 0, got {self.weight_decay}"
            )


@dataclass(eq=False)
class Checkpoint:
    """
    A trained model with everything needed to reproduce and resume it.

    Attributes
    ----------
    model : BlipModel
        The selected (best validation) weights.
    train_config : TrainConfig
        Settings of the run.
    epoch : int
        Epoch at which ``model`` was taken.
    rng_state : Dict
        State of the final epoch's shuffle stream after it drew the
        batch order.
    history : List[Dict[str, float]]
        One row per validation: epoch, train_loss, train_mse, kl,
        weighted_kl, val_mse.
    """

    model: BlipModel
    train_config: TrainConfig
    epoch: int
    rng_state: Dict = field(default_factory=dict)
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config


def _elbo_terms(
    prediction: Tensor,
    target: Tensor,
    kl_total: Tensor,
    kl_weight: float,
    n_data: int,
) -> Tuple[Tensor, Tensor, Tensor]:
    if prediction.shape != target.shape:
        raise ValueError(
            f"Prediction shape {prediction.shape} does not match target "
            f"shape {target.shape}"
        )
    if n_data < 1:
        raise ValueError(f"n_data must be >= 1, got {n_data}")
    data_term = mean(square(prediction - target))
    weighted_kl = kl_weight * kl_total / float(n_data)
    return data_term + weighted_kl, data_term, weighted_kl


def elbo_loss(
    prediction: Tensor,
    target: Tensor,
    kl_total: Tensor,
    kl_weight: float,
    n_data: int,
) -> Tensor:
    """
    Single-sample negative ELBO: ``MSE + kl_weight * KL / n_data``.

    The Gaussian likelihood has a fixed unit scale, so up to constants the
    expected log-likelihood is the mean squared error.

    Parameters
    ----------
    prediction : Tensor
        One stochastic prediction.
    target : Tensor
        Targets of the same shape.
    kl_total : Tensor
        Summed KL of all coefficient groups (zero for baselines).
    kl_weight : float
        lambda.
    n_data : int
        Size of the training set.

    Returns
    -------
    Tensor
        The scalar loss.
    """
    return _elbo_terms(prediction, target, kl_total, kl_weight, n_data)[0]


def model_kl(
    model: BlipModel,
    batch: GraphBatch,
    weights: Mapping[str, Tensor],
    prior_p: float,
):
    """
    Coefficients of ``batch`` and the KL of both coefficient groups.
    """
    coeffs = infer_coefficients(model.inference_net(weights), batch)
    n_message = count_weight_elements(
        model.bayesian_layers("message", weights)
    )
    n_update = count_weight_elements(model.bayesian_layers("update", weights))
    kl = kl_divergence(coeffs.alpha, prior_p, n_message) + kl_divergence(
        coeffs.beta, prior_p, n_update
    )
    return coeffs, kl


def evaluate_mse(model: BlipModel, batch: GraphBatch) -> float:
    """Mean squared error of the noise-free prediction."""
    prediction = forward(model, batch).numpy()
    return float(np.mean((prediction - batch.targets) ** 2))


def _check_data(
    data: Mapping[str, Sequence[ParticleGraph]],
) -> Tuple[Sequence[ParticleGraph], Sequence[ParticleGraph]]:
    for split in ("train", "val"):
        if split not in data or len(data[split]) == 0:
            raise DataError(f"Training needs a non-empty {split!r} split")
    return data["train"], data["val"]


def _fit(
    model: BlipModel,
    data: Mapping[str, Sequence[ParticleGraph]],
    config: TrainConfig,
) -> Checkpoint:
    train, val = _check_data(data)
    architecture = model.config.architecture
    mode = model.config.mode
    val_batch = build_batch(val, architecture)
    n_data = len(train)
    rng = RngStream(config.seed)
    optimizer = Optimizer(
        model.params,
        config.optimizer,
        config.lr,
        config.weight_decay,
        config.grad_clip,
    )
    kl_weight = config.kl_weight if mode == "blip" else 0.0

    best_model, best_epoch, best_val = model, 0, np.inf
    history = []
    for epoch in range(1, config.epochs + 1):
        shuffle = rng.child("shuffle", epoch)
        order = shuffle.permutation(n_data)
        totals = np.zeros(4)
        n_batches = 0
        for index, start in enumerate(range(0, n_data, config.batch_size)):
            chunk = order[start : start + config.batch_size]
            graphs = [train[i] for i in chunk]
            if config.augment_rotations:
                rotation = random_rotation(
                    rng.child("augment", epoch, index).generator
                )
                graphs = [graph.transformed(rotation) for graph in graphs]
            batch = build_batch(graphs, architecture)
            tape = Tape()
            weights = model.bind(tape)

            noise = None
            coeffs = None
            kl = Tensor(0.0)
            if mode == "blip":
                coeffs, kl = model_kl(model, batch, weights, config.prior_p)
            if mode != "deterministic":
                noise = rng.child("weight-noise", epoch, index)
            prediction = forward(model, batch, coeffs, noise, weights)
            loss, data_term, weighted_kl = _elbo_terms(
                prediction,
                Tensor(batch.targets),
                kl,
                kl_weight,
                n_data,
            )

            components = np.array(
                [loss.item(), data_term.item(), kl.item(), weighted_kl.item()]
            )
            if not np.all(np.isfinite(components)):
                raise NumericalError(
                    f"Non-finite loss at epoch {epoch}, batch {index}: "
                    f"loss={components[0]}, mse={components[1]}, "
                    f"kl={components[2]}, weighted_kl={components[3]}"
                )
            grads = tape.backward(loss)
            model = model.with_params(
                optimizer.step(
                    model.params,
                    {name: grads[t] for name, t in weights.items()},
                )
            )
            totals += components
            n_batches += 1

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            val_mse = evaluate_mse(model, val_batch)
            means = totals / n_batches
            history.append(
                {
                    "epoch": epoch,
                    "train_loss": float(means[0]),
                    "train_mse": float(means[1]),
                    "kl": float(means[2]),
                    "weighted_kl": float(means[3]),
                    "val_mse": val_mse,
                }
            )
            logger.info(
                "epoch %d loss %.6g mse %.6g kl %.6g weighted_kl %.6g "
                "val_mse %.6g",
                epoch,
                *means,
                val_mse,
            )
            if val_mse < best_val:
                best_model, best_epoch, best_val = model, epoch, val_mse

    return Checkpoint(
        model=best_model,
        train_config=config,
        epoch=best_epoch,
        rng_state=shuffle.get_state(),
        history=history,
    )


def train_blip(
    model: BlipModel,
    data: Mapping[str, Sequence[ParticleGraph]],
    config: TrainConfig,
) -> Checkpoint:
    """
    Train a blip model by maximizing the single-sample ELBO.

    Per batch the inference network is evaluated once, one stochastic
    forward pass is drawn and the loss is ``MSE + lambda KL / n_train``.

    Parameters
    ----------
    model : BlipModel
        An initialized model in blip mode.
    data : Mapping[str, Sequence[ParticleGraph]]
        At least the "train" and "val" splits.
    config : TrainConfig
        Optimization settings.

    Returns
    -------
    Checkpoint
        The weights with the lowest validation MSE.
    """
    if model.config.mode != "blip":
        raise ValueError(
            f"train_blip needs a blip model, got {model.config.mode}"
        )
    return _fit(model, data, config)


def train_baseline(
    model: BlipModel,
    data: Mapping[str, Sequence[ParticleGraph]],
    config: TrainConfig,
    kind: str = "deterministic",
) -> Checkpoint:
    """
    Train a deterministic or MC-dropout model on plain MSE.

    Dropout is active during training for ``kind="mc_dropout"``.
    """
    if kind not in ("deterministic", "mc_dropout"):
        raise ValueError(f"Unknown baseline kind {kind!r}")
    if model.config.mode != kind:
        raise ValueError(
            f"Baseline kind {kind} does not match model mode "
            f"{model.config.mode}"
        )
    return _fit(model, data, config)


def _train_member(
    model_config: ModelConfig,
    data: Mapping[str, Sequence[ParticleGraph]],
    config: TrainConfig,
    member: int,
) -> Checkpoint:
    member_config = replace(config, seed=config.seed + member)
    model = init_model(
        model_config, RngStream(member_config.seed).child("init")
    )
    logger.info("Training ensemble member %d", member)
    return train_baseline(model, data, member_config, "deterministic")


def train_ensemble(
    model_config: ModelConfig,
    data: Mapping[str, Sequence[ParticleGraph]],
    config: TrainConfig,
    n_members: int = 4,
    jobs: int = 1,
) -> List[Checkpoint]:
    """
    Train a deep ensemble of deterministic models.

    Member ``k`` is initialized and trained with seed ``config.seed + k``.

    Parameters
    ----------
    model_config : ModelConfig
        Shared architecture; must be deterministic.
    data : Mapping[str, Sequence[ParticleGraph]]
        At least the "train" and "val" splits.
    config : TrainConfig
        Shared optimization settings.
    n_members : int
        Ensemble size, at least 2.
    jobs : int
        Members trained in parallel processes; 1 runs serially.

    Returns
    -------
    List[Checkpoint]
        One checkpoint per member, in member order.
    """
    if n_members < 2:
        raise ValueError(f"An ensemble needs >= 2 members, got {n_members}")
    if model_config.mode != "deterministic":
        raise ValueError(
            f"Ensemble members must be deterministic, got {model_config.mode}"
        )
    if jobs > 1:
        tasks = [
            dask.delayed(_train_member)(model_config, data, config, member)
            for member in range(n_members)
        ]
        return list(
            dask.compute(*tasks, scheduler="processes", num_workers=jobs)
        )
    return [
        _train_member(model_config, data, config, member)
        for member in range(n_members)
    ]
