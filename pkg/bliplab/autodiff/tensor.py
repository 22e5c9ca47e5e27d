"""
Dense float64 tensors with an explicit reverse-mode gradient tape.

A ``Tape`` records every operation applied to tensors that are attached to
it. Leaves are attached with ``Tape.watch``; any operation with at least
one attached input records a node on that tape and returns an attached
result. Tensors that are not attached to a tape are constants: they are
immutable and can be shared freely between threads and forward passes.

A tape is single use. ``Tape.backward`` walks the recorded nodes once in
reverse order and returns a ``GradientMap`` holding one gradient buffer per
watched leaf; afterwards the tape is consumed and refuses further use.
"""

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from bliplab.autodiff.rng import RngStream

ArrayLike = Union["Tensor", npt.ArrayLike]
VjpFunction = Callable[
    [npt.NDArray[np.float64]], Sequence[Optional[npt.NDArray[np.float64]]]
]

_tape_counter = itertools.count()


def _freeze(array: npt.NDArray) -> npt.NDArray[np.float64]:
    array = np.asarray(array, dtype=np.float64)
    if array.flags.writeable and array.base is None:
        array.flags.writeable = False
    elif array.flags.writeable:
        array = array.copy()
        array.flags.writeable = False
    return array


class Tensor:
    """
    A dense, row-major float64 array, optionally attached to a tape.

    Parameters
    ----------
    data : array_like
        The values. Always copied and stored as read-only float64.
    """

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data: npt.ArrayLike):
        self.data = _freeze(np.array(data, dtype=np.float64, copy=True))
        self.tape: Optional["Tape"] = None
        self.tape_id: Optional[int] = None

    @classmethod
    def _wrap(
        cls,
        data: npt.NDArray,
        tape: Optional["Tape"] = None,
        tape_id: Optional[int] = None,
    ) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = _freeze(data)
        tensor.tape = tape
        tensor.tape_id = tape_id
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> npt.NDArray[np.float64]:
        """Read-only view of the values."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs one element, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(other, self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(other, self, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __rtruediv__(self, other):
        return elementwise(other, self, "div")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


@dataclass(frozen=True)
class _Node:
    op: str
    input_ids: Tuple[Optional[int], ...]
    vjp: Optional[VjpFunction]
    shape: Tuple[int, ...] = ()


class GradientMap:
    """Gradient buffers of the watched leaves, keyed by tape handle."""

    def __init__(self, tape: "Tape", buffers: Dict[int, npt.NDArray]):
        self._tape = tape
        self._buffers = buffers

    def __getitem__(self, tensor: Tensor) -> npt.NDArray[np.float64]:
        if tensor not in self:
            raise KeyError(f"{tensor!r} is not a watched leaf of this tape")
        return self._buffers[tensor.tape_id]

    def __contains__(self, tensor: Tensor) -> bool:
        return (
            tensor.tape is self._tape and tensor.tape_id in self._buffers
        )

    def __len__(self):
        return len(self._buffers)


class Tape:
    """
    Records operations for one reverse pass.

    Nodes are appended in execution order, so every node's inputs precede
    it. ``backward`` can be called exactly once.
    """

    def __init__(self):
        self.id = next(_tape_counter)
        self.nodes: List[_Node] = []
        self.consumed = False

    def watch(self, value: ArrayLike) -> Tensor:
        """Attach a new leaf holding a copy of ``value``."""
        self._check_open()
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=np.float64, copy=True)
        self.nodes.append(_Node("leaf", (), None, data.shape))
        return Tensor._wrap(data, self, len(self.nodes) - 1)

    def record(
        self,
        op: str,
        data: npt.NDArray,
        inputs: Sequence[Tensor],
        vjp: VjpFunction,
    ) -> Tensor:
        self._check_open()
        input_ids = tuple(
            t.tape_id if t.tape is self else None for t in inputs
        )
        self.nodes.append(_Node(op, input_ids, vjp))
        return Tensor._wrap(data, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> GradientMap:
        """
        Run the reverse pass from a scalar ``loss``.

        Parameters
        ----------
        loss : Tensor
            A single-element tensor recorded on this tape.

        Returns
        -------
        GradientMap
            One gradient buffer per watched leaf; leaves that do not
            influence the loss get zeros.
        """
        self._check_open()
        if loss.tape is not self:
            raise RuntimeError("Loss is not recorded on this tape")
        if loss.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )

        buffers: Dict[int, npt.NDArray] = {
            loss.tape_id: np.ones_like(loss.data)
        }
        for node_id in range(loss.tape_id, -1, -1):
            node = self.nodes[node_id]
            grad = buffers.get(node_id)
            if grad is None or node.vjp is None:
                continue
            input_grads = node.vjp(grad)
            for input_id, input_grad in zip(node.input_ids, input_grads):
                if input_id is None or input_grad is None:
                    continue
                if input_id in buffers:
                    buffers[input_id] = buffers[input_id] + input_grad
                else:
                    buffers[input_id] = input_grad
            # Intermediate buffers are no longer needed
            del buffers[node_id]

        self.consumed = True
        leaf_buffers = {}
        for node_id, node in enumerate(self.nodes):
            if node.op != "leaf":
                continue
            if node_id in buffers:
                grad = np.array(buffers[node_id], dtype=np.float64)
            else:
                grad = np.zeros(node.shape)
            leaf_buffers[node_id] = grad.reshape(node.shape)
        return GradientMap(self, leaf_buffers)

    def _check_open(self):
        if self.consumed:
            raise RuntimeError(
                f"Tape {self.id} has already been consumed by backward"
            )


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _active_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is not None and tensor.tape is not tape:
            raise RuntimeError("Cannot combine tensors from different tapes")
        tape = tensor.tape
    return tape


def _make(
    op: str,
    data: npt.NDArray,
    inputs: Sequence[Tensor],
    vjp: VjpFunction,
) -> Tensor:
    tape = _active_tape(*inputs)
    if tape is None:
        return Tensor._wrap(data)
    return tape.record(op, data, inputs, vjp)


def _unbroadcast(
    grad: npt.NDArray, shape: Tuple[int, ...]
) -> npt.NDArray[np.float64]:
    """Sum ``grad`` over the dimensions that were stretched to it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product of two 2-D tensors.

    Raises
    ------
    ValueError
        If either input is not 2-D or the inner dimensions disagree.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} @ {b.shape}"
        )
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _make("matmul", a_data @ b_data, (a, b), vjp)


def elementwise(a: ArrayLike, b: ArrayLike, kind: str) -> Tensor:
    """
    Broadcasting add, sub, mul or div.

    Division by zero is not trapped; it yields non-finite values that the
    training loop's finiteness checks reject.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"Shapes {a.shape} and {b.shape} cannot be broadcast for {kind}"
        ) from None

    a_data, b_data = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    if kind == "add":
        out = a_data + b_data

        def vjp(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    elif kind == "sub":
        out = a_data - b_data

        def vjp(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    elif kind == "mul":
        out = a_data * b_data

        def vjp(g):
            return (
                _unbroadcast(g * b_data, a_shape),
                _unbroadcast(g * a_data, b_shape),
            )

    elif kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a_data / b_data

        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (
                    _unbroadcast(g / b_data, a_shape),
                    _unbroadcast(-g * out / b_data, b_shape),
                )

    else:
        raise ValueError(f"Unknown elementwise kind: {kind}")

    return _make(kind, out, (a, b), vjp)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise(a, b, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise(a, b, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    a_data = a.data
    return _make("square", a_data * a_data, (a,), lambda g: (2 * g * a_data,))


def sqrt(a: ArrayLike) -> Tensor:
    """Square root; the gradient at exactly zero is taken to be zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        grad = np.zeros_like(out)
        np.divide(0.5 * g, out, out=grad, where=out > 0)
        return (grad,)

    return _make("sqrt", out, (a,), vjp)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    a_data = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a_data)
    return _make("log", out, (a,), lambda g: (g / a_data,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(a: ArrayLike, kind: str = "swish") -> Tensor:
    """
    Pointwise activation: ``swish(x) = x * sigmoid(x)`` or identity.
    """
    a = as_tensor(a)
    if kind == "identity":
        return a
    if kind != "swish":
        raise ValueError(f"Unknown activation: {kind}")

    x = a.data
    s = expit(x)

    def vjp(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _make("swish", x * s, (a,), vjp)


def swish(a: ArrayLike) -> Tensor:
    return activation(a, "swish")


def reduce(
    a: ArrayLike,
    kind: str = "sum",
    axis: Optional[int] = None,
    keepdims: bool = False,
) -> Tensor:
    """
    Sum or mean over all elements or along one axis.

    Raises
    ------
    ValueError
        For an invalid axis, an unknown kind, or a mean over zero elements.
    """
    a = as_tensor(a)
    in_shape = a.shape
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise ValueError(f"Invalid axis {axis} for shape {in_shape}")
        axis = axis % a.ndim
        count = in_shape[axis]
    else:
        count = a.size

    if kind == "sum":
        scale = 1.0
        out = np.sum(a.data, axis=axis, keepdims=keepdims)
    elif kind == "mean":
        if count == 0:
            raise ValueError(f"Mean over an empty slice of shape {in_shape}")
        scale = 1.0 / count
        out = np.mean(a.data, axis=axis, keepdims=keepdims)
    else:
        raise ValueError(f"Unknown reduction: {kind}")

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, in_shape),)

    return _make(kind, np.asarray(out), (a,), vjp)


def tsum(
    a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    return reduce(a, "sum", axis, keepdims)


def mean(
    a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    return reduce(a, "mean", axis, keepdims)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return np.split(g, splits, axis=axis)

    return _make("concat", out, tensors, vjp)


def gather(a: ArrayLike, index: npt.ArrayLike) -> Tensor:
    """Select rows ``a[index]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    in_shape = a.shape

    def vjp(g):
        grad = np.zeros(in_shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make("gather", a.data[index], (a,), vjp)


def scatter_add(a: ArrayLike, index: npt.ArrayLike, n_rows: int) -> Tensor:
    """
    Segment sum: row ``k`` of the output is the sum of the rows of ``a``
    whose ``index`` equals ``k``. Rows are summed in input order.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ValueError(
            f"scatter_add index length {index.shape[0]} does not match "
            f"{a.shape[0]} rows"
        )
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, index, a.data)
    return _make("scatter_add", out, (a,), lambda g: (g[index],))


def gaussian_sample(
    mean: ArrayLike, std: ArrayLike, rng: RngStream
) -> Tensor:
    """
    Reparameterized draw ``mean + std * eps`` with ``eps ~ N(0, I)``.

    Gradients flow to ``mean`` and ``std``; the noise is a constant.

    Raises
    ------
    ValueError
        If any element of ``std`` is negative.
    """
    mean, std = as_tensor(mean), as_tensor(std)
    if np.any(std.data < 0):
        raise ValueError("gaussian_sample needs std >= 0 everywhere")
    shape = np.broadcast_shapes(mean.shape, std.shape)
    eps = rng.normal(shape)
    out = mean.data + std.data * eps
    mean_shape, std_shape = mean.shape, std.shape

    def vjp(g):
        return _unbroadcast(g, mean_shape), _unbroadcast(g * eps, std_shape)

    return _make("gaussian_sample", out, (mean, std), vjp)


def backward(loss: Tensor) -> GradientMap:
    """
    Reverse pass on the tape that recorded ``loss``.

    Raises
    ------
    RuntimeError
        If ``loss`` is detached or its tape was already consumed.
    ValueError
        If ``loss`` is not a scalar.
    """
    if loss.tape is None:
        raise RuntimeError("Loss is detached from any tape")
    return loss.tape.backward(loss)
