"""Tests for the tape-based tensor engine."""

import threading
from typing import Dict, List

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coloc_retrieval.core import tensor as T
from coloc_retrieval.core.errors import (
    DomainError,
    EmptyCaptionError,
    NumericalError,
    RankError,
    ShapeError,
    TapeError,
)
from coloc_retrieval.core.tensor import Tape, Tensor

finite = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)


def test_scalar_broadcast_and_shape_mismatch() -> None:
    """Test scalars broadcast and other mismatches raise ShapeError."""
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((x + 1.0).data, [[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal((2.0 * x).data, [[2.0, 4.0], [6.0, 8.0]])

    with pytest.raises(ShapeError) as excinfo:
        x + Tensor([1.0, 2.0])
    assert "[2, 2] and [2]" in str(excinfo.value)


def test_empty_tensor_rejected() -> None:
    """Test zero-sized dimensions are refused."""
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_backward_of_square_sum() -> None:
    """Test d/dx sum(x*x) = 2x."""
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(x * x)
        grads = tape.backward(loss)

    assert np.allclose(grads.of(x).data, [2.0, -4.0, 6.0])
    assert grads.of(loss).item() == 1.0


def test_gradients_accumulate_over_reuse() -> None:
    """Test a tensor used twice receives both contributions."""
    x = Tensor([0.5, 1.5], requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(x * x + x)
        grads = tape.backward(loss)

    assert np.allclose(grads.of(x).data, [2.0, 4.0])


def test_constant_receives_zero_gradient() -> None:
    """Test tensors without requires_grad get zeros from the map."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    with Tape() as tape:
        loss = T.reduce_sum(x * c)
        grads = tape.backward(loss)

    assert np.allclose(grads.of(x).data, [3.0, 4.0])
    assert np.array_equal(grads.of(c).data, [0.0, 0.0])


def test_backward_rejects_untracked_and_non_scalar_loss() -> None:
    """Test backward errors for foreign and non-scalar losses."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with pytest.raises(TapeError):
            tape.backward(Tensor(1.0))
        with pytest.raises(RankError):
            tape.backward(x * 2.0)


def test_nothing_recorded_without_tape() -> None:
    """Test operations outside a tape leave no trace."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.reduce_sum(x * x)

    assert T.active_tape() is None
    assert y.node_id is None
    assert not y.requires_grad


def test_tapes_are_thread_local() -> None:
    """Test two threads run independent tapes concurrently."""
    results: Dict[int, List[float]] = {}
    barrier = threading.Barrier(2)

    def worker(scale: int) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            barrier.wait()
            loss = T.reduce_sum(x * float(scale))
            results[scale] = list(tape.backward(loss).of(x).data)

    threads = [threading.Thread(target=worker, args=(s,)) for s in (2, 3)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert results == {2: [2.0, 2.0], 3: [3.0, 3.0]}


def test_relu_subgradient_at_zero_is_zero() -> None:
    """Test relu passes no gradient at exactly zero."""
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(T.reduce_sum(T.relu(x)))

    assert np.array_equal(grads.of(x).data, [0.0, 0.0, 1.0])


def test_max_over_spatial_routes_to_first_maximum() -> None:
    """Test ties send the whole gradient to the first row-major entry."""
    x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(T.reduce_sum(T.max_over_spatial(x)))

    expected = np.zeros((2, 2, 1))
    expected[0, 0, 0] = 1.0
    assert np.array_equal(grads.of(x).data, expected)


@given(
    arrays(np.float64, (3, 4, 2), elements=finite),
    st.permutations(list(range(12))),
)
def test_max_over_spatial_permutation_invariance(
    values: np.ndarray, order: List[int]
) -> None:
    """Test permuting spatial cells does not change the maxima."""
    flat = values.reshape(12, 2)
    permuted = flat[order].reshape(3, 4, 2)

    assert np.array_equal(
        T.max_over_spatial(Tensor(values)).data,
        T.max_over_spatial(Tensor(permuted)).data,
    )


def test_mean_masked() -> None:
    """Test masked mean and the empty-mask error."""
    x = Tensor([1.0, 3.0, 100.0])
    assert T.mean_masked(x, [1.0, 1.0, 0.0]).item() == 2.0

    with pytest.raises(EmptyCaptionError):
        T.mean_masked(x, [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        T.mean_masked(x, [0.5, 1.0, 0.0])


@given(
    arrays(np.float64, st.integers(1, 8), elements=finite),
    st.floats(-100.0, 100.0),
)
def test_log_sum_exp_shift_identity(values: np.ndarray, shift: float) -> None:
    """Test lse(x + c) = lse(x) + c."""
    base = T.log_sum_exp(Tensor(values)).item()
    moved = T.log_sum_exp(Tensor(values + shift)).item()

    assert moved == pytest.approx(base + shift, abs=1e-9)


def test_log_sum_exp_is_stable() -> None:
    """Test large inputs stay finite."""
    value = T.log_sum_exp(Tensor([1000.0, 1000.0])).item()
    assert value == pytest.approx(1000.0 + np.log(2.0))


def test_log_rejects_non_positive() -> None:
    """Test log domain checking."""
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_matmul_and_rank_checks() -> None:
    """Test matmul shapes and rank errors."""
    a = Tensor(np.ones((2, 3)))
    assert (a @ Tensor(np.ones((3, 4)))).shape == (2, 4)
    with pytest.raises(ShapeError):
        a @ Tensor(np.ones((2, 4)))
    with pytest.raises(RankError):
        T.transpose(Tensor(np.ones(3)))
    with pytest.raises(RankError):
        T.max_over_spatial(Tensor(np.ones((2, 2))))


def test_gather_scatter_adds_repeats() -> None:
    """Test repeated gather indices accumulate gradient."""
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    with Tape() as tape:
        picked = T.gather(x, [3, 3, 0])
        grads = tape.backward(T.reduce_sum(picked))

    assert np.array_equal(picked.data, [4.0, 4.0, 1.0])
    assert np.array_equal(grads.of(x).data, [[1.0, 0.0], [0.0, 2.0]])


def test_elementwise_dispatch() -> None:
    """Test dispatch by kind name."""
    x = Tensor([-1.0, 2.0])
    assert np.array_equal(T.elementwise("relu", x).data, [0.0, 2.0])
    assert np.array_equal(T.elementwise("mul", x, 3.0).data, [-3.0, 6.0])
    with pytest.raises(ValueError):
        T.elementwise("cosh", x)
    with pytest.raises(ValueError):
        T.elementwise("add", x)


def test_every_elementwise_kind_is_registered() -> None:
    """Test each dispatched kind has a backward rule."""
    rules = T.backward_rules()
    for kind in T.ELEMENTWISE_KINDS:
        assert kind in rules


def test_debug_mode_flags_non_finite_values() -> None:
    """Test NumericalError names the op in debug mode."""
    previous = T.debug_enabled()
    try:
        T.set_debug(True)
        with np.errstate(over="ignore"):
            with pytest.raises(NumericalError) as excinfo:
                T.exp(Tensor([1000.0]))
        assert "exp" in str(excinfo.value)

        T.set_debug(False)
        with np.errstate(over="ignore"):
            assert np.isinf(T.exp(Tensor([1000.0])).data[0])
    finally:
        T.set_debug(previous)


def test_grad_check_composite_graph() -> None:
    """Test grad_check agrees on a small network."""
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 2)))
    b = Tensor(rng.normal(size=(1, 2)))

    def f() -> Tensor:
        hidden = T.tanh(x @ w + T.tile_rows(b, 3))
        return T.log_sum_exp(T.reshape(T.sigmoid(hidden), (6,)))

    assert T.grad_check(f, [x, w, b]) < 1e-4


def test_grad_check_constant_function() -> None:
    """Test a loss independent of the params reports no error."""
    x = Tensor([1.0, 2.0])
    assert T.grad_check(lambda: T.reduce_sum(Tensor([5.0])), [x]) <= 1e-8


def test_grad_check_rejects_bad_step() -> None:
    """Test eps must be small and positive."""
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.reduce_sum(x), [x], eps=0.0)


def test_reduce_sum_axes() -> None:
    """Test axis reductions and their gradients."""
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert np.array_equal(T.reduce_sum(x, axis=0).data, [3.0, 5.0, 7.0])
    assert T.reduce_sum(x, axis=1, keepdims=True).shape == (2, 1)
    with pytest.raises(RankError):
        T.reduce_sum(x, axis=2)

    w = Tensor([1.0, 2.0, 3.0])
    with Tape() as tape:
        grads = tape.backward(T.reduce_sum(T.reduce_sum(x, axis=0) * w))
    assert np.array_equal(grads.of(x).data, [[1.0, 2.0, 3.0]] * 2)


def test_concat_stack_and_tile() -> None:
    """Test shape plumbing forward values."""
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert T.concat([a, b]).shape == (3, 2)
    assert T.stack([a, a]).shape == (2, 1, 2)
    assert np.array_equal(T.tile_rows(a, 2).data, [[1.0, 2.0], [1.0, 2.0]])
    with pytest.raises(ShapeError):
        T.concat([a, Tensor([[1.0, 2.0, 3.0]])])
    with pytest.raises(ShapeError):
        T.tile_rows(b, 2)
