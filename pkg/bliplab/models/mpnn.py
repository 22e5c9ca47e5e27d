"""
Message-passing networks for the particle-position task.

Two architectures share one parameter layout convention:

- ``gnn``: a plain MPNN on (position, velocity) features with a readout
  head whose output is added to the initial positions.
- ``egnn``: an E(n)-equivariant network with velocity, which moves the
  particles directly and never sees raw coordinates in its node features.

Each can run deterministically, with variational adaptive dropout
(``blip``) or with MC dropout. All three modes use the same weights and
the same code path; only the way the internal linear layers of the
message and update functions are applied changes.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from bliplab.autodiff import (
    RngStream,
    Tape,
    Tensor,
    concat,
    gather,
    scatter_add,
    square,
    swish,
    tsum,
)
from bliplab.bayes.vad import (
    BayesianLinear,
    InferenceNet,
    VadCoefficients,
    VadConfig,
    forward_local_reparam,
    head_shapes,
    inference_net_from_weights,
    init_inference_net,
    init_linear,
    linear,
)
from bliplab.data.graphs import ARCHITECTURES, GraphBatch
from bliplab.exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

MODES = ("deterministic", "blip", "mc_dropout")
NODE_FEATURE_DIMS = {"gnn": 6, "egnn": 1}
EDGE_FEATURE_DIM = 1
MLP_DEPTH = 4
READOUT_DEPTH = 3
COORD_INIT_SCALE = 1e-3

LinearApplier = Callable[[BayesianLinear, Tensor], Tensor]


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture and uncertainty mode of a model.

    Attributes
    ----------
    architecture : str
        "gnn" or "egnn".
    n_layers : int
        Number of message-passing layers.
    hidden_dim : int
        Width of node states and of every hidden layer.
    mode : str
        "deterministic", "blip" or "mc_dropout".
    dropout_p : Optional[float]
        Dropout probability; set exactly when ``mode == "mc_dropout"``.
    vad : Optional[VadConfig]
        Inference-network settings; set exactly when ``mode == "blip"``.
    """

    architecture: str = "gnn"
    n_layers: int = 4
    hidden_dim: int = 64
    mode: str = "deterministic"
    dropout_p: Optional[float] = None
    vad: Optional[VadConfig] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"model.architecture must be one of {ARCHITECTURES}, got "
                f"{self.architecture!r}"
            )
        if self.mode not in MODES:
            raise ConfigError(
                f"model.mode must be one of {MODES}, got {self.mode!r}"
            )
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ConfigError(
                "model.n_layers and model.hidden_dim must be >= 1, got "
                f"{self.n_layers} and {self.hidden_dim}"
            )
        if self.mode == "mc_dropout":
            if self.dropout_p is None or not 0.0 <= self.dropout_p < 1.0:
                raise ConfigError(
                    "model.dropout_p must be in [0, 1) for mc_dropout, got "
                    f"{self.dropout_p}"
                )
        elif self.dropout_p is not None:
            raise ConfigError(
                f"model.dropout_p is only valid in mc_dropout mode, not "
                f"{self.mode}"
            )
        if self.mode == "blip" and self.vad is None:
            raise ConfigError("model.vad is required in blip mode")
        if self.mode != "blip" and self.vad is not None:
            raise ConfigError(
                f"model.vad is only valid in blip mode, not {self.mode}"
            )

    @property
    def node_dim(self) -> int:
        return NODE_FEATURE_DIMS[self.architecture]


def _linear_specs(config: ModelConfig) -> List[Tuple[str, int, int, float]]:
    """(prefix, fan_in, fan_out, init scale) of every main-network linear."""
    hidden = config.hidden_dim
    specs = [("embed.node", config.node_dim, hidden, 1.0)]
    if config.architecture == "gnn":
        specs.append(("embed.edge", EDGE_FEATURE_DIM, hidden, 1.0))
        message_in = 3 * hidden
    else:
        message_in = 2 * hidden + 1 + EDGE_FEATURE_DIM

    for layer in range(config.n_layers):
        for name, n_in in (("message", message_in), ("update", 2 * hidden)):
            for k in range(MLP_DEPTH):
                fan_in = n_in if k == 0 else hidden
                specs.append(
                    (f"layers.{layer}.{name}.{k}", fan_in, hidden, 1.0)
                )
        if config.architecture == "egnn":
            for name in ("coord", "velocity"):
                specs.append(
                    (f"layers.{layer}.{name}.0", hidden, hidden, 1.0)
                )
                scale = COORD_INIT_SCALE if name == "coord" else 1.0
                specs.append((f"layers.{layer}.{name}.1", hidden, 1, scale))

    if config.architecture == "gnn":
        for k in range(READOUT_DEPTH):
            fan_out = 3 if k == READOUT_DEPTH - 1 else hidden
            specs.append((f"readout.{k}", hidden, fan_out, 1.0))
    return specs


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of every parameter a model with ``config`` has."""
    shapes = {}
    for prefix, fan_in, fan_out, _ in _linear_specs(config):
        shapes[f"{prefix}.theta"] = (fan_in, fan_out)
        shapes[f"{prefix}.bias"] = (fan_out,)
    if config.mode == "blip":
        inputs = {
            "message": EDGE_FEATURE_DIM + 2 * config.node_dim,
            "update": config.node_dim,
        }
        for head, n_in in inputs.items():
            for k, (fan_in, fan_out) in enumerate(
                head_shapes(n_in, config.vad.hidden_dim)
            ):
                shapes[f"vad.{head}.{k}.theta"] = (fan_in, fan_out)
                shapes[f"vad.{head}.{k}.bias"] = (fan_out,)
    return shapes


class BlipModel:
    """
    Main-network weights, inference-network weights and configuration.

    Parameters are plain float64 arrays keyed by dotted names such as
    ``layers.0.message.2.theta``. ``bind`` wraps them as tensors for one
    forward pass, attached to a tape when gradients are needed.

    Parameters
    ----------
    config : ModelConfig
        The architecture.
    params : Mapping[str, npt.ArrayLike]
        One array per name in ``parameter_shapes(config)``.
    """

    def __init__(
        self, config: ModelConfig, params: Mapping[str, npt.ArrayLike]
    ):
        expected = parameter_shapes(config)
        missing = sorted(set(expected) - set(params))
        unexpected = sorted(set(params) - set(expected))
        if missing or unexpected:
            raise ValueError(
                f"Parameter names do not match the config: missing "
                f"{missing}, unexpected {unexpected}"
            )
        self.config = config
        self.params: Dict[str, npt.NDArray[np.float64]] = {}
        for name, shape in expected.items():
            value = np.array(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(
                    f"Parameter {name} has shape {value.shape}, expected "
                    f"{shape}"
                )
            self.params[name] = value

    @property
    def n_parameters(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Wrap every parameter, watching it on ``tape`` if given."""
        if tape is None:
            return {name: Tensor(value) for name, value in self.params.items()}
        return {name: tape.watch(value) for name, value in self.params.items()}

    def with_params(
        self, params: Mapping[str, npt.ArrayLike]
    ) -> "BlipModel":
        return BlipModel(self.config, params)

    def inference_net(
        self, weights: Optional[Mapping[str, Tensor]] = None
    ) -> InferenceNet:
        if self.config.mode != "blip":
            raise ValueError(
                f"A {self.config.mode} model has no inference network"
            )
        weights = self.bind() if weights is None else weights
        return inference_net_from_weights(weights, self.config.vad)

    def bayesian_layers(
        self, role: str, weights: Optional[Mapping[str, Tensor]] = None
    ) -> List[BayesianLinear]:
        """
        Layers scaled by the edge ("message") or node ("update")
        coefficient.
        """
        names = {
            "message": ("message", "coord"),
            "update": ("update", "velocity"),
        }
        weights = self.bind() if weights is None else weights
        layers = []
        for prefix, *_ in _linear_specs(self.config):
            parts = prefix.split(".")
            if parts[0] == "layers" and parts[2] in names[role]:
                layers.append(
                    BayesianLinear.from_weights(weights, prefix, role)
                )
        return layers

    def __repr__(self):
        c = self.config
        return (
            f"BlipModel({c.architecture}, mode={c.mode}, "
            f"layers={c.n_layers}, params={self.n_parameters})"
        )


def init_model(config: ModelConfig, rng: RngStream) -> BlipModel:
    """
    Initialize a model from the ``init`` stream.

    Each linear draws from its own sub-stream named after its prefix, so
    the values do not depend on construction order.
    """
    params = {}
    for prefix, fan_in, fan_out, scale in _linear_specs(config):
        layer = init_linear(rng.child(prefix), fan_in, fan_out, scale)
        params[f"{prefix}.theta"] = layer["theta"]
        params[f"{prefix}.bias"] = layer["bias"]
    if config.mode == "blip":
        params.update(
            init_inference_net(
                rng, config.node_dim, EDGE_FEATURE_DIM, config.vad
            )
        )
    model = BlipModel(config, params)
    logger.debug("Initialized %r", model)
    return model


def dropout(h: Tensor, p: float, rng: RngStream) -> Tensor:
    """Inverted dropout: zero units with probability p, scale by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"Dropout probability must be in [0, 1), got {p}")
    keep = rng.uniform(h.shape) >= p
    return h * (keep / (1.0 - p))


class _MeanWeights:
    """Noise-free pass through every layer."""

    def mlp_layer(self, layer: BayesianLinear, h: Tensor) -> Tensor:
        return linear(layer, h)

    scalar_layer = mlp_layer


class _LocalReparam:
    """Variational adaptive dropout on every Bayesian layer."""

    def __init__(self, coeffs: VadCoefficients, rng: RngStream):
        self.coeffs = coeffs
        self.rng = rng
        self._calls = itertools.count()

    def mlp_layer(self, layer: BayesianLinear, h: Tensor) -> Tensor:
        scale = (
            self.coeffs.alpha if layer.role == "message" else self.coeffs.beta
        )
        return forward_local_reparam(
            layer, h, scale, self.rng.child(next(self._calls))
        )

    scalar_layer = mlp_layer


class _Dropout:
    """Dropout after every linear of the message and update functions."""

    def __init__(self, p: float, rng: RngStream):
        self.p = p
        self.rng = rng
        self._calls = itertools.count()

    def mlp_layer(self, layer: BayesianLinear, h: Tensor) -> Tensor:
        return dropout(
            linear(layer, h), self.p, self.rng.child(next(self._calls))
        )

    def scalar_layer(self, layer: BayesianLinear, h: Tensor) -> Tensor:
        return linear(layer, h)


def _select_applier(
    model: BlipModel,
    coeffs: Optional[VadCoefficients],
    rng: Optional[RngStream],
):
    mode = model.config.mode
    if coeffs is not None and mode != "blip":
        raise ValueError(f"A {mode} model does not take VAD coefficients")
    if rng is None or mode == "deterministic":
        return _MeanWeights()
    if mode == "blip":
        if coeffs is None:
            raise ValueError(
                "Sampling a blip model needs VAD coefficients; call "
                "infer_coefficients first or pass rng=None for MAP"
            )
        return _LocalReparam(coeffs, rng)
    return _Dropout(model.config.dropout_p, rng)


def _mlp(
    layers: Sequence[BayesianLinear], h: Tensor, apply: LinearApplier
) -> Tensor:
    for index, layer in enumerate(layers):
        h = apply(layer, h)
        if index < len(layers) - 1:
            h = swish(h)
    return h


def _layers(
    weights: Mapping[str, Tensor], prefix: str, depth: int, role: str
) -> List[BayesianLinear]:
    return [
        BayesianLinear.from_weights(weights, f"{prefix}.{k}", role)
        for k in range(depth)
    ]


def _check_batch(model: BlipModel, batch: GraphBatch):
    config = model.config
    if batch.architecture != config.architecture:
        raise DataError(
            f"Batch was featurized for {batch.architecture!r} but the model "
            f"is {config.architecture!r}"
        )
    if batch.node_features.shape[1] != config.node_dim:
        raise DataError(
            f"Node features have {batch.node_features.shape[1]} columns, "
            f"model expects {config.node_dim}"
        )


def forward_gnn(
    model: BlipModel,
    batch: GraphBatch,
    coeffs: Optional[VadCoefficients] = None,
    rng: Optional[RngStream] = None,
    weights: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """
    Predict final positions with the plain MPNN.

    ``h0 = Linear(position, velocity)``, ``e_ij = Linear(a_ij)``; each
    layer computes ``m_i = sum_j M(h_j, h_i, e_ij)`` and
    ``h_i <- U(h_i, m_i)``. The readout is added to the initial positions.

    Parameters
    ----------
    model : BlipModel
        A model with ``architecture == "gnn"``.
    batch : GraphBatch
        A batch featurized for the GNN.
    coeffs : Optional[VadCoefficients]
        Blip mode only; required when sampling.
    rng : Optional[RngStream]
        Noise stream. None gives the noise-free (MAP) pass in every mode.
    weights : Optional[Mapping[str, Tensor]]
        Bound parameters from ``model.bind``; constants when omitted.

    Returns
    -------
    Tensor
        Predicted positions, shape (n_nodes, 3).
    """
    _check_batch(model, batch)
    applier = _select_applier(model, coeffs, rng)
    weights = model.bind() if weights is None else weights
    receivers, senders = batch.receivers, batch.senders

    h = linear(
        BayesianLinear.from_weights(weights, "embed.node"),
        Tensor(batch.node_features),
    )
    e = linear(
        BayesianLinear.from_weights(weights, "embed.edge"),
        Tensor(batch.edge_attrs),
    )
    for layer in range(model.config.n_layers):
        message_mlp = _layers(
            weights, f"layers.{layer}.message", MLP_DEPTH, "message"
        )
        update_mlp = _layers(
            weights, f"layers.{layer}.update", MLP_DEPTH, "update"
        )
        inputs = concat([gather(h, senders), gather(h, receivers), e], 1)
        messages = _mlp(message_mlp, inputs, applier.mlp_layer)
        aggregated = scatter_add(messages, receivers, batch.n_nodes)
        h = _mlp(update_mlp, concat([h, aggregated], 1), applier.mlp_layer)

    readout = _layers(weights, "readout", READOUT_DEPTH, "message")
    displacement = _mlp(readout, h, linear)
    return Tensor(batch.positions) + displacement


def forward_egnn(
    model: BlipModel,
    batch: GraphBatch,
    coeffs: Optional[VadCoefficients] = None,
    rng: Optional[RngStream] = None,
    weights: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """
    Predict final positions with the velocity EGNN.

    Per layer, with ``d_ij = x_i - x_j``:

    - ``m_ij = phi_e(h_i, h_j, |d_ij|^2, a_ij)``
    - ``v_i <- phi_v(h_i) v_i + sum_j d_ij phi_x(m_ij) / deg(i)``
    - ``x_i <- x_i + v_i``
    - ``h_i <- phi_h(h_i, sum_j m_ij)``

    The positions after the last layer are the prediction. Parameters and
    return value are as for ``forward_gnn``.
    """
    _check_batch(model, batch)
    applier = _select_applier(model, coeffs, rng)
    weights = model.bind() if weights is None else weights
    receivers, senders = batch.receivers, batch.senders
    inverse_degree = (1.0 / np.maximum(batch.in_degree, 1.0))[:, None]

    x = Tensor(batch.positions)
    v = Tensor(batch.velocities)
    a = Tensor(batch.edge_attrs)
    h = linear(
        BayesianLinear.from_weights(weights, "embed.node"),
        Tensor(batch.node_features),
    )
    for layer in range(model.config.n_layers):
        prefix = f"layers.{layer}"
        phi_e = _layers(weights, f"{prefix}.message", MLP_DEPTH, "message")
        phi_h = _layers(weights, f"{prefix}.update", MLP_DEPTH, "update")
        phi_x = _layers(weights, f"{prefix}.coord", 2, "message")
        phi_v = _layers(weights, f"{prefix}.velocity", 2, "update")

        diff = gather(x, receivers) - gather(x, senders)
        dist2 = tsum(square(diff), axis=1, keepdims=True)
        inputs = concat(
            [gather(h, receivers), gather(h, senders), dist2, a], 1
        )
        messages = _mlp(phi_e, inputs, applier.mlp_layer)
        coord_weights = _mlp(phi_x, messages, applier.scalar_layer)
        shift = scatter_add(diff * coord_weights, receivers, batch.n_nodes)
        v = _mlp(phi_v, h, applier.scalar_layer) * v + shift * inverse_degree
        x = x + v
        aggregated = scatter_add(messages, receivers, batch.n_nodes)
        h = _mlp(phi_h, concat([h, aggregated], 1), applier.mlp_layer)
    return x


def forward(
    model: BlipModel,
    batch: GraphBatch,
    coeffs: Optional[VadCoefficients] = None,
    rng: Optional[RngStream] = None,
    weights: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """Dispatch to the forward pass of the model's architecture."""
    if model.config.architecture == "gnn":
        return forward_gnn(model, batch, coeffs, rng, weights)
    return forward_egnn(model, batch, coeffs, rng, weights)


def forward_mc_dropout(
    model: BlipModel,
    batch: GraphBatch,
    rng: Optional[RngStream],
    train_mode: bool = True,
    weights: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """
    Forward pass of an MC-dropout model.

    Dropout masks are drawn whenever ``rng`` is given, in training and in
    MC inference alike. Outside training, ``rng=None`` gives the
    noise-free pass.

    Raises
    ------
    ValueError
        If the model is not in mc_dropout mode, or ``train_mode`` is set
        without a noise stream.
    """
    if model.config.mode != "mc_dropout":
        raise ValueError(
            f"forward_mc_dropout needs an mc_dropout model, got "
            f"{model.config.mode}"
        )
    if train_mode and rng is None:
        raise ValueError("Dropout training needs a noise stream")
    return forward(model, batch, None, rng, weights)
