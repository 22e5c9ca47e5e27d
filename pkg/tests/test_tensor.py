import numpy as np
import pytest

from bliplab.autodiff import (
    RngStream,
    Tape,
    Tensor,
    activation,
    backward,
    concat,
    elementwise,
    exp,
    gather,
    gaussian_sample,
    log,
    matmul,
    mean,
    neg,
    reduce,
    reshape,
    scatter_add,
    sigmoid,
    sqrt,
    square,
    swish,
    transpose,
    tsum,
)


def numerical_gradient(function, x, step=1e-5):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += step
        down[index] -= step
        grad[index] = (function(up) - function(down)) / (2 * step)
    return grad


def relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_matmul_identity():
    result = matmul([[1.0, 0.0], [0.0, 1.0]], [[3.0], [4.0]])
    np.testing.assert_array_equal(result.numpy(), [[3.0], [4.0]])


def test_matmul_hand_sum():
    assert matmul([[1.0, 1.0]], [[1.0], [2.0]]).item() == 3.0


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a_value = rng.normal(size=(3, 4))
    b_value = rng.normal(size=(4, 2))

    tape = Tape()
    a = tape.watch(a_value)
    grads = backward(tsum(matmul(a, b_value)))

    expected = numerical_gradient(
        lambda x: np.sum(x @ b_value), a_value.copy()
    )
    assert relative_error(grads[a], expected) < 1e-6


def test_elementwise_annihilator():
    result = elementwise([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], "mul")
    np.testing.assert_array_equal(result.numpy(), [0.0, 0.0, 0.0])


def test_elementwise_broadcast():
    result = elementwise([1.0, 2.0], [10.0], "add")
    np.testing.assert_array_equal(result.numpy(), [11.0, 12.0])


def test_elementwise_rejects_incompatible_shapes():
    with pytest.raises(ValueError, match="cannot be broadcast"):
        elementwise(np.ones(3), np.ones(2), "add")


def test_division_by_zero_is_not_trapped():
    result = elementwise([1.0], [0.0], "div")
    assert not np.isfinite(result.item())


def test_square_gradient_is_twice_input():
    value = np.array([-1.5, 0.0, 2.0, 3.25])
    tape = Tape()
    a = tape.watch(value)
    grads = backward(tsum(a * a))
    np.testing.assert_allclose(grads[a], 2 * value)


def test_broadcast_gradient_is_sum_reduced():
    tape = Tape()
    a = tape.watch(np.ones((4, 3)))
    b = tape.watch(np.ones((1, 3)))
    grads = backward(tsum(a * b))
    assert grads[b].shape == (1, 3)
    np.testing.assert_array_equal(grads[b], [[4.0, 4.0, 4.0]])


def test_swish_values():
    assert swish(0.0).item() == 0.0
    assert abs(swish(10.0).item() - 10.0) < 1e-3


@pytest.mark.parametrize("x", [-2.0, -0.5, 0.0, 0.5, 2.0])
def test_swish_gradient_matches_finite_differences(x):
    tape = Tape()
    a = tape.watch(np.array([x]))
    grads = backward(tsum(swish(a)))

    def function(value):
        return float(np.sum(value / (1 + np.exp(-value))))

    expected = numerical_gradient(function, np.array([x]))
    assert relative_error(grads[a], expected) < 1e-6


def test_identity_activation_returns_input():
    a = Tensor([1.0, -2.0])
    assert activation(a, "identity") is a


def test_reduce_mean_along_axis():
    result = reduce([[1.0, 2.0], [3.0, 4.0]], "mean", axis=0)
    np.testing.assert_array_equal(result.numpy(), [2.0, 3.0])


def test_mean_of_empty_tensor_raises():
    with pytest.raises(ValueError, match="empty"):
        mean(np.zeros((0, 3)))


def test_reduce_gradient_spreads_evenly():
    tape = Tape()
    a = tape.watch(np.ones((2, 5)))
    grads = backward(mean(a))
    np.testing.assert_allclose(grads[a], np.full((2, 5), 0.1))


def test_concat_and_gather_gradients():
    tape = Tape()
    a = tape.watch(np.arange(6.0).reshape(3, 2))
    b = tape.watch(np.ones((3, 1)))
    picked = gather(concat([a, b], axis=1), [0, 0, 2])
    grads = backward(tsum(picked))
    np.testing.assert_array_equal(grads[a], [[2, 2], [0, 0], [1, 1]])
    np.testing.assert_array_equal(grads[b], [[2], [0], [1]])


def test_scatter_add_sums_segments():
    values = np.array([[1.0], [2.0], [3.0], [4.0]])
    result = scatter_add(values, [0, 1, 0, 2], 3)
    np.testing.assert_array_equal(result.numpy(), [[4.0], [2.0], [4.0]])


def test_scatter_add_gradient_gathers():
    tape = Tape()
    a = tape.watch(np.ones((4, 2)))
    weights = np.array([[1.0, 1.0], [10.0, 10.0], [100.0, 100.0]])
    out = scatter_add(a, [0, 1, 0, 2], 3) * weights
    grads = backward(tsum(out))
    np.testing.assert_array_equal(grads[a][:, 0], [1.0, 10.0, 1.0, 100.0])


def test_gaussian_sample_zero_std_returns_mean():
    result = gaussian_sample([1.0, 2.0], [0.0, 0.0], RngStream(0))
    np.testing.assert_array_equal(result.numpy(), [1.0, 2.0])


def test_gaussian_sample_rejects_negative_std():
    with pytest.raises(ValueError, match="std"):
        gaussian_sample([0.0], [-1.0], RngStream(0))


def test_gaussian_sample_gradient_wrt_std_is_noise():
    rng = RngStream(3)
    eps = RngStream(3).normal((4,))
    tape = Tape()
    std = tape.watch(np.ones(4))
    grads = backward(tsum(gaussian_sample(np.zeros(4), std, rng)))
    np.testing.assert_allclose(grads[std], eps)


def test_tape_is_single_use():
    tape = Tape()
    a = tape.watch([1.0])
    loss = tsum(a * a)
    backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.watch([2.0])


def test_backward_needs_scalar_loss():
    tape = Tape()
    a = tape.watch([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(a * 2.0)


def test_detached_loss_raises():
    with pytest.raises(RuntimeError, match="detached"):
        backward(Tensor(1.0))


def test_tensors_from_two_tapes_cannot_mix():
    a = Tape().watch([1.0])
    b = Tape().watch([1.0])
    with pytest.raises(RuntimeError, match="different tapes"):
        a + b


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.watch([1.0, 2.0])
    unused = tape.watch(np.ones((2, 2)))
    grads = backward(tsum(a))
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_constants_are_read_only():
    tensor = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        tensor.numpy()[0] = 5.0


def test_item_needs_one_element():
    with pytest.raises(ValueError, match="one element"):
        Tensor([1.0, 2.0]).item()


def test_rng_streams_are_reproducible_and_independent():
    first = RngStream(5).child("a", 1).normal(10)
    again = RngStream(5).child("a", 1).normal(10)
    other = RngStream(5).child("a", 2).normal(10)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)


def test_rng_state_round_trip():
    stream = RngStream(1).child("x")
    stream.normal(3)
    restored = RngStream.from_state(stream.get_state())
    np.testing.assert_array_equal(stream.normal(5), restored.normal(5))


UNARY_OPS = {
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "square": square,
    "swish": swish,
    "neg": neg,
    "transpose": transpose,
    "reshape": lambda a: reshape(a, (6,)),
    "sum_axis": lambda a: reduce(a, "sum", axis=1),
    "gather": lambda a: gather(a, [1, 0, 1]),
    "scatter_add": lambda a: scatter_add(a, [2, 0], 3),
}
BINARY_OPS = ("add", "sub", "mul", "div")


def squared_loss(op, *values):
    return tsum(square(op(*values)))


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_gradient_matches_finite_differences(name):
    op = UNARY_OPS[name]
    value = np.random.default_rng(1).uniform(0.5, 2.0, size=(2, 3))
    tape = Tape()
    a = tape.watch(value)
    grads = backward(squared_loss(op, a))
    expected = numerical_gradient(
        lambda x: squared_loss(op, Tensor(x)).item(), value.copy()
    )
    assert relative_error(grads[a], expected) < 1e-5


@pytest.mark.parametrize("kind", BINARY_OPS)
def test_binary_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(2)
    a_value = rng.uniform(0.5, 2.0, size=(2, 3))
    b_value = rng.uniform(0.5, 2.0, size=(1, 3))

    def op(a, b):
        return elementwise(a, b, kind)

    tape = Tape()
    a, b = tape.watch(a_value), tape.watch(b_value)
    grads = backward(squared_loss(op, a, b))
    expected_a = numerical_gradient(
        lambda x: squared_loss(op, Tensor(x), Tensor(b_value)).item(),
        a_value.copy(),
    )
    expected_b = numerical_gradient(
        lambda x: squared_loss(op, Tensor(a_value), Tensor(x)).item(),
        b_value.copy(),
    )
    assert relative_error(grads[a], expected_a) < 1e-5
    assert relative_error(grads[b], expected_b) < 1e-5


def test_gaussian_sample_mean_and_expected_gradient():
    n, mu, sigma = 200_000, 0.7, 1.3
    tape = Tape()
    mean_in = tape.watch(np.full(n, mu))
    std_in = tape.watch(np.full(n, sigma))
    sample = gaussian_sample(mean_in, std_in, RngStream(9))
    grads = backward(tsum(square(sample)))

    assert abs(sample.numpy().mean() - mu) < 5 * sigma / np.sqrt(n)
    # d/dmu (mu + sigma eps)^2 averages to 2 mu, d/dsigma to 2 sigma
    spread_mu = 2 * sigma
    spread_sigma = 2 * np.sqrt(mu**2 + 2 * sigma**2)
    assert abs(grads[mean_in].mean() - 2 * mu) < 5 * spread_mu / np.sqrt(n)
    assert abs(grads[std_in].mean() - 2 * sigma) < (
        5 * spread_sigma / np.sqrt(n)
    )


CHAIN_OPS = ("sigmoid", "swish", "square", "sqrt", "matmul")


def apply_chain(names, x, mixing):
    for name in names:
        x = matmul(x, mixing) if name == "matmul" else UNARY_OPS[name](x)
    return tsum(x)


@pytest.mark.parametrize("seed", range(10))
def test_random_op_chain_gradient(seed):
    rng = np.random.default_rng(seed)
    names = list(rng.choice(CHAIN_OPS, size=3))
    value = rng.uniform(0.5, 2.0, size=(4, 3))
    mixing = rng.uniform(0.1, 1.0, size=(3, 3))

    tape = Tape()
    x = tape.watch(value)
    grads = backward(apply_chain(names, x, mixing))
    expected = numerical_gradient(
        lambda v: apply_chain(names, Tensor(v), mixing).item(), value.copy()
    )
    assert relative_error(grads[x], expected) < 1e-5, names
