"""
Tests for the tape-based differentiation core and its numerical oracles.
"""

import threading

import numpy as np
import pytest

from autodiff import (DifferentiableFn, Tape, as_tensor, evaluate, finite_diff_gradient, gradient,
                      relative_error, relu_margin, select_output, spectral_norm, squared_distance_to,
                      value_and_gradient)
from errors import ContractError, ConvergenceError, InputShapeError, ParameterError
from fixtures import composite_fn, linear_logit_fn, product_fn, random_mlp_fn


def test_linear_gradient_is_row_over_bag_size():
    W = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    bag = np.random.default_rng(0).standard_normal((4, 3))
    grad = gradient(linear_logit_fn(W), bag, select_output(1))
    np.testing.assert_allclose(grad, np.tile(W[1] / 4.0, (4, 1)), rtol=0, atol=1e-15)


def test_product_gradient():
    value, grad = value_and_gradient(product_fn(), np.array([[2.0, 3.0]]), select_output(0))
    assert value == 6.0
    np.testing.assert_array_equal(grad, [[3.0, 2.0]])


def test_composite_matches_finite_differences():
    checked = 0
    for trial in range(10):
        f = composite_fn(5, seed=trial)
        x = np.random.default_rng(100 + trial).standard_normal(5)
        if relu_margin(f, x) < 1e-4:
            continue
        selector = select_output(trial % 4)
        assert relative_error(gradient(f, x, selector), finite_diff_gradient(f, x, selector=selector)) <= 1e-5
        checked += 1
    assert checked >= 5


def test_squared_distance_selector():
    W = np.array([[2.0, 0.0], [0.0, 1.0]])
    f = linear_logit_fn(W)
    x = np.array([[1.0, 1.0]])
    value, grad = value_and_gradient(f, x, squared_distance_to([0.0, 0.0]))
    assert value == pytest.approx(5.0)
    np.testing.assert_allclose(grad, [[8.0, 2.0]])


def test_vector_output_without_selector_is_rejected():
    with pytest.raises(ContractError):
        gradient(linear_logit_fn(np.eye(2)), np.ones((3, 2)))


def test_input_shape_is_checked():
    with pytest.raises(InputShapeError):
        evaluate(linear_logit_fn(np.eye(3)), np.ones((2, 4)))


def test_gradient_is_linear_in_output_weights():
    f = random_mlp_fn(4, widths=(6, 3), seed=3)
    x = np.random.default_rng(1).standard_normal(4)
    g0 = gradient(f, x, select_output(0))
    g1 = gradient(f, x, select_output(1))

    def combined(tape, out):
        return tape.add(tape.scale(tape.getitem(out, 0), 2.0), tape.scale(tape.getitem(out, 1), -0.5))

    assert relative_error(gradient(f, x, combined), 2.0 * g0 - 0.5 * g1) <= 1e-12


def test_results_are_read_only():
    grad = gradient(product_fn(), np.array([[1.0, 2.0]]), select_output(0))
    with pytest.raises(ValueError):
        grad[0, 0] = 5.0
    assert not as_tensor([1.0]).flags.writeable


def test_tapes_are_independent_across_threads():
    f = random_mlp_fn(3, widths=(5, 2), seed=9)
    points = [np.random.default_rng(i).standard_normal(3) for i in range(8)]
    expected = [gradient(f, x, select_output(0)) for x in points]
    actual = [None] * len(points)

    def work(i):
        actual[i] = gradient(f, points[i], select_output(0))

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(points))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, e in zip(actual, expected):
        np.testing.assert_array_equal(a, e)


def test_tape_records_operations():
    tape = Tape()
    a = tape.variable(np.array([1.0, -2.0]))
    b = tape.relu(a)
    assert len(tape) == 2
    grads = tape.backward(tape.sum(b), seed=np.ones(()))
    np.testing.assert_array_equal(tape.grad_of(grads, a), [1.0, 0.0])


def test_custom_function():
    f = DifferentiableFn(lambda tape, x: tape.sum(tape.exp(x)), input_shape=(2,), name="sumexp")
    x = np.array([0.0, 1.0])
    np.testing.assert_allclose(gradient(f, x), np.exp(x))


def test_finite_difference_step_must_be_positive():
    with pytest.raises(ParameterError):
        finite_diff_gradient(product_fn(), np.ones((1, 2)), h=0.0, selector=select_output(0))


def test_spectral_norm_matches_svd():
    rng = np.random.default_rng(4)
    for shape in [(3, 3), (5, 2), (2, 6)]:
        W = rng.standard_normal(shape)
        expected = np.linalg.svd(W, compute_uv=False)[0]
        assert spectral_norm(W) == pytest.approx(expected, rel=1e-8)


def test_spectral_norm_scales_linearly():
    W = np.random.default_rng(5).standard_normal((4, 4))
    assert spectral_norm(-3.0 * W) == pytest.approx(3.0 * spectral_norm(W), rel=1e-8)


def test_spectral_norm_edge_cases():
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    # gram annihilates the constant start vector
    assert spectral_norm(np.array([[1.0, -1.0]])) == pytest.approx(np.sqrt(2.0), rel=1e-8)
    with pytest.raises(ParameterError):
        spectral_norm(np.zeros((0, 3)))
    with pytest.raises(ParameterError):
        spectral_norm(np.eye(2), max_iters=0)


def test_spectral_norm_reports_last_estimate():
    with pytest.raises(ConvergenceError) as info:
        spectral_norm(np.diag([3.0, 1.0]), max_iters=1)
    assert info.value.last_estimate > 0
