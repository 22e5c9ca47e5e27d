"""
Variational adaptive dropout.

Weights of message and update functions carry multiplicative Gaussian
noise ``w = theta + sqrt(alpha) * |theta| * eps`` whose variance scale is
predicted per edge (alpha) or per node (beta) by a small inference
network. Sampling happens in activation space through the local
reparameterization trick, and the KL term against a dropout-matched prior
has a closed form that does not depend on theta.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from bliplab.autodiff import (
    RngStream,
    Tensor,
    as_tensor,
    concat,
    gather,
    gaussian_sample,
    log,
    matmul,
    mean,
    reshape,
    sigmoid,
    sqrt,
    square,
    swish,
)
from bliplab.data.graphs import GraphBatch
from bliplab.exceptions import ConfigError

logger = logging.getLogger(__name__)

ROLES = ("message", "update")


@dataclass(frozen=True)
class VadConfig:
    """
    Settings of the inference network that predicts dropout coefficients.

    Attributes
    ----------
    hidden_dim : int
        Width of the two hidden layers of each head.
    p_min, p_max : float
        Clamp bounds on the dropout probability.
    init_logit : float
        Initial output bias of both heads; -3 starts with little noise.
    """

    hidden_dim: int = 64
    p_min: float = 1e-3
    p_max: float = 0.8
    init_logit: float = -3.0

    def __post_init__(self):
        if not 0.0 < self.p_min < self.p_max < 1.0:
            raise ConfigError(
                "vad needs 0 < p_min < p_max < 1, got "
                f"p_min={self.p_min}, p_max={self.p_max}"
            )
        if self.hidden_dim < 1:
            raise ConfigError(
                f"vad.hidden_dim must be >= 1, got {self.hidden_dim}"
            )


@dataclass(frozen=True, eq=False)
class BayesianLinear:
    """
    A linear layer whose weights are the means of a Gaussian posterior.

    Attributes
    ----------
    theta : Tensor
        Mean weights, shape (in, out).
    bias : Tensor
        Deterministic bias, shape (out,).
    role : str
        "message" layers take the edge coefficient, "update" layers the
        node coefficient.
    """

    theta: Tensor
    bias: Tensor
    role: str = "message"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"Unknown role {self.role!r}, expected {ROLES}")
        if self.theta.ndim != 2 or self.bias.shape != (self.theta.shape[1],):
            raise ValueError(
                f"Inconsistent layer shapes: theta {self.theta.shape}, "
                f"bias {self.bias.shape}"
            )
        if not np.all(np.isfinite(self.theta.data)):
            raise ValueError("theta contains non-finite values")

    @classmethod
    def from_weights(
        cls, weights: Mapping[str, Tensor], prefix: str, role: str = "message"
    ) -> "BayesianLinear":
        return cls(weights[f"{prefix}.theta"], weights[f"{prefix}.bias"], role)

    @property
    def n_in(self) -> int:
        return self.theta.shape[0]

    @property
    def n_out(self) -> int:
        return self.theta.shape[1]


def init_linear(
    rng: RngStream, n_in: int, n_out: int, scale: float = 1.0
) -> Dict[str, npt.NDArray[np.float64]]:
    """
    Uniform fan-in initialization, ``U(-b, b)`` with ``b = scale/sqrt(n_in)``
    for both weights and bias.
    """
    bound = scale / np.sqrt(n_in)
    return {
        "theta": bound * (2.0 * rng.child("theta").uniform((n_in, n_out)) - 1),
        "bias": bound * (2.0 * rng.child("bias").uniform(n_out) - 1.0),
    }


def linear(layer: BayesianLinear, h: Tensor) -> Tensor:
    """Noise-free pass ``h theta + bias`` with the mean weights."""
    return matmul(h, layer.theta) + layer.bias


def forward_local_reparam(
    layer: BayesianLinear,
    h: Tensor,
    alpha: Optional[Tensor],
    rng: Optional[RngStream],
) -> Tensor:
    """
    Sample the pre-activations of a Bayesian linear layer.

    With ``gamma = h theta + bias`` and
    ``delta = alpha * ((h * h) (theta * theta))`` the output is
    ``gamma + sqrt(delta) * eps``, which has the same distribution per
    unit as multiplying ``h`` by weights drawn from
    ``N(theta, alpha theta^2)``.

    Parameters
    ----------
    layer : BayesianLinear
        The layer.
    h : Tensor
        Inputs, shape (B, in).
    alpha : Optional[Tensor]
        One non-negative variance scale per row, shape (B,). None gives
        the noise-free pass.
    rng : Optional[RngStream]
        Source of ``eps``. None gives the noise-free pass.

    Returns
    -------
    Tensor
        Shape (B, out).
    """
    if alpha is None or rng is None:
        return linear(layer, h)
    alpha = as_tensor(alpha)
    if alpha.shape != (h.shape[0],):
        raise ValueError(
            f"alpha must have one entry per row: {alpha.shape} for inputs "
            f"{h.shape}"
        )
    if np.any(alpha.data < 0):
        raise ValueError("alpha must be non-negative")

    gamma = linear(layer, h)
    delta = reshape(alpha, (-1, 1)) * matmul(square(h), square(layer.theta))
    return gaussian_sample(gamma, sqrt(delta), rng)


@dataclass(frozen=True, eq=False)
class VadCoefficients:
    """
    Per-edge (alpha) and per-node (beta) noise scales, shared by every
    message-passing layer.
    """

    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        for name, values in (("alpha", self.alpha), ("beta", self.beta)):
            if values.ndim != 1:
                raise ValueError(f"{name} must be 1-D, got {values.shape}")
            if not np.all(values.data > 0) or not np.all(
                np.isfinite(values.data)
            ):
                raise ValueError(f"{name} must be finite and positive")

    def detach(self) -> "VadCoefficients":
        return VadCoefficients(self.alpha.detach(), self.beta.detach())


@dataclass(frozen=True, eq=False)
class InferenceNet:
    """
    Two-headed network mapping invariant inputs to dropout coefficients.

    Attributes
    ----------
    message_head : Tuple[BayesianLinear, ...]
        Applied per edge to ``(a_ij, h0_i, h0_j)``.
    update_head : Tuple[BayesianLinear, ...]
        Applied per node to ``h0_i``.
    p_min, p_max : float
        Clamp bounds of the dropout probability.
    """

    message_head: Tuple[BayesianLinear, ...]
    update_head: Tuple[BayesianLinear, ...]
    p_min: float = 1e-3
    p_max: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.p_min < self.p_max < 1.0:
            raise ConfigError(
                f"Invalid clamp bounds p_min={self.p_min}, p_max={self.p_max}"
            )

    @property
    def max_coefficient(self) -> float:
        return self.p_max / (1.0 - self.p_max)


def head_shapes(n_in: int, hidden_dim: int) -> Sequence[Tuple[int, int]]:
    return ((n_in, hidden_dim), (hidden_dim, hidden_dim), (hidden_dim, 1))


def init_inference_net(
    rng: RngStream,
    node_dim: int,
    edge_dim: int,
    config: VadConfig,
) -> Dict[str, npt.NDArray[np.float64]]:
    """
    Parameters of both heads, named ``vad.<head>.<k>.theta|bias``.

    The last bias of each head is set to ``config.init_logit``.
    """
    inputs = {"message": edge_dim + 2 * node_dim, "update": node_dim}
    params = {}
    for head, n_in in inputs.items():
        shapes = head_shapes(n_in, config.hidden_dim)
        for k, (fan_in, fan_out) in enumerate(shapes):
            prefix = f"vad.{head}.{k}"
            layer = init_linear(rng.child(prefix), fan_in, fan_out)
            if k == len(shapes) - 1:
                layer["bias"] = np.full(fan_out, config.init_logit)
            params[f"{prefix}.theta"] = layer["theta"]
            params[f"{prefix}.bias"] = layer["bias"]
    return params


def inference_net_from_weights(
    weights: Mapping[str, Tensor], config: VadConfig
) -> InferenceNet:
    heads = {}
    for head in ROLES:
        heads[head] = tuple(
            BayesianLinear.from_weights(weights, f"vad.{head}.{k}", head)
            for k in range(3)
        )
    return InferenceNet(
        heads["message"], heads["update"], config.p_min, config.p_max
    )


def _head_to_coefficient(
    layers: Sequence[BayesianLinear], x: Tensor, p_min: float, p_max: float
) -> Tensor:
    for index, layer in enumerate(layers):
        x = linear(layer, x)
        if index < len(layers) - 1:
            x = swish(x)
    p = p_min + (p_max - p_min) * sigmoid(reshape(x, (-1,)))
    return p / (1.0 - p)


def infer_coefficients(
    net: InferenceNet, batch: GraphBatch
) -> VadCoefficients:
    """
    Evaluate the inference network once for a batch.

    Parameters
    ----------
    net : InferenceNet
        The heads, bound to a tape when gradients are needed.
    batch : GraphBatch
        Only the invariant inputs ``node_features`` and ``edge_attrs``
        are read.

    Returns
    -------
    VadCoefficients
        ``alpha = p / (1 - p)`` per edge and node, with
        ``p`` in ``[p_min, p_max]``.
    """
    h0 = Tensor(batch.node_features)
    edge_inputs = concat(
        [
            Tensor(batch.edge_attrs),
            gather(h0, batch.receivers),
            gather(h0, batch.senders),
        ],
        axis=1,
    )
    alpha = _head_to_coefficient(
        net.message_head, edge_inputs, net.p_min, net.p_max
    )
    beta = _head_to_coefficient(net.update_head, h0, net.p_min, net.p_max)
    return VadCoefficients(alpha, beta)


def prior_variance_ratio(p_prior: float) -> float:
    """``lambda = p / (1 - p)`` of the dropout-matched prior."""
    if not 0.0 < p_prior < 1.0:
        raise ValueError(f"p_prior must be in (0, 1), got {p_prior}")
    return p_prior / (1.0 - p_prior)


def kl_divergence(
    coefficients: Tensor, p_prior: float, n_weight_elements: int
) -> Tensor:
    """
    KL between the noisy-weight posterior and the dropout-matched prior.

    Per weight element
    ``KL(N(theta, alpha theta^2) || N(0, lambda theta^2))
    = log(lambda / alpha) / 2 + (alpha + 1) / (2 lambda) - 1/2``,
    independent of theta.

    Parameters
    ----------
    coefficients : Tensor
        Per-edge alpha or per-node beta, all positive.
    p_prior : float
        Prior dropout probability.
    n_weight_elements : int
        Number of non-zero weights the coefficients scale. Exactly zero
        weights have a degenerate posterior and prior and contribute
        nothing.

    Returns
    -------
    Tensor
        ``n_weight_elements`` times the mean per-element KL.
    """
    coefficients = as_tensor(coefficients)
    if coefficients.size == 0:
        raise ValueError("kl_divergence needs at least one coefficient")
    if np.any(coefficients.data <= 0):
        raise ValueError("Coefficients must be strictly positive")
    lam = prior_variance_ratio(p_prior)

    per_element = (
        0.5 * (np.log(lam) - log(coefficients))
        + (coefficients + 1.0) / (2.0 * lam)
        - 0.5
    )
    return float(n_weight_elements) * mean(per_element)


def count_weight_elements(layers: Sequence[BayesianLinear]) -> int:
    return int(sum(np.count_nonzero(layer.theta.data) for layer in layers))
