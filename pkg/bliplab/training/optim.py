from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt

Arrays = Dict[str, npt.NDArray[np.float64]]


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    step: int = 0
    m: Arrays = field(default_factory=dict)
    v: Arrays = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, npt.NDArray]) -> "AdamState":
        return cls(
            0,
            {name: np.zeros_like(value) for name, value in params.items()},
            {name: np.zeros_like(value) for name, value in params.items()},
        )


def global_norm(grads: Mapping[str, npt.NDArray]) -> float:
    return float(
        np.sqrt(sum(np.sum(np.square(g)) for g in grads.values()))
    )


def clip_by_global_norm(
    grads: Mapping[str, npt.NDArray], max_norm: float
) -> Tuple[Arrays, float]:
    """
    Rescale all gradients jointly so that their global norm is at most
    ``max_norm``. Returns the clipped gradients and the norm before
    clipping.
    """
    norm = global_norm(grads)
    scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
    return {name: g * scale for name, g in grads.items()}, norm


def adam_step(
    params: Mapping[str, npt.NDArray],
    grads: Mapping[str, npt.NDArray],
    state: AdamState,
    lr: float = 5e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> Tuple[Arrays, AdamState]:
    """
    One Adam update, or AdamW when ``weight_decay > 0``.

    Parameters
    ----------
    params : Mapping[str, npt.NDArray]
        Current parameters.
    grads : Mapping[str, npt.NDArray]
        Gradients, one per parameter.
    state : AdamState
        Moments from the previous step; not modified.
    lr : float
        Learning rate.
    betas : Tuple[float, float]
        Decay rates of the first and second moments.
    eps : float
        Added to the root of the second moment.
    weight_decay : float
        Decoupled decay ``p <- p - lr * weight_decay * p``.

    Returns
    -------
    Tuple[Dict, AdamState]
        New parameters and new state.
    """
    if set(params) != set(grads):
        raise ValueError(
            "Gradients and parameters have different names: "
            f"{sorted(set(params) ^ set(grads))}"
        )
    beta1, beta2 = betas
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step

    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        if m.shape != value.shape or g.shape != value.shape:
            raise ValueError(
                f"Shape mismatch for {name}: param {value.shape}, "
                f"grad {g.shape}, state {m.shape}"
            )
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        updated = value
        if weight_decay:
            updated = updated - lr * weight_decay * updated
        new_params[name] = updated - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step, new_m, new_v)


class Optimizer:
    """
    Stateful wrapper around ``adam_step`` with optional clipping.

    Parameters
    ----------
    params : Mapping[str, npt.NDArray]
        Parameters to optimize; only their shapes are used here.
    kind : str
        "adam" or "adamw".
    lr : float
        Learning rate.
    weight_decay : float
        Used by "adamw" only.
    grad_clip : Optional[float]
        Maximum global gradient norm, or None.
    """

    def __init__(
        self,
        params: Mapping[str, npt.NDArray],
        kind: str = "adam",
        lr: float = 5e-4,
        weight_decay: float = 0.0,
        grad_clip: Optional[float] = None,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"Unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay if kind == "adamw" else 0.0
        self.grad_clip = grad_clip
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like(params)
        self.last_grad_norm = float("nan")

    def step(
        self,
        params: Mapping[str, npt.NDArray],
        grads: Mapping[str, npt.NDArray],
    ) -> Arrays:
        if self.grad_clip is not None:
            grads, self.last_grad_norm = clip_by_global_norm(
                grads, self.grad_clip
            )
        params, self.state = adam_step(
            params,
            grads,
            self.state,
            self.lr,
            self.betas,
            self.eps,
            self.weight_decay,
        )
        return params
