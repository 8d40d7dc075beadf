"""
Dense tensor math with tape-based reverse-mode differentiation.

Every trace records its operations on a private ``Tape``; a ``DifferentiableFn``
is a forward builder that can be traced any number of times, concurrently,
without shared mutable state. Finite differences and power iteration are
provided as independent numerical oracles.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, ConvergenceError, InputShapeError, ParameterError

logger = logging.getLogger(__name__)

Tensor = np.ndarray


def as_tensor(values) -> Tensor:
    """Copy ``values`` into a read-only float64 array."""
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that were broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """A value recorded on a tape."""
    __slots__ = ("value", "node")

    def __init__(self, value: np.ndarray, node: int):
        self.value = value
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


class Tape:
    """
    Records one forward trace and replays it backwards.

    Backward closures receive the output gradient and return one gradient
    (or None) per parent, in parent order.
    """

    def __init__(self):
        self._parents: List[Tuple[int, ...]] = []
        self._backward: List[Optional[Callable]] = []
        self._shapes: List[Tuple[int, ...]] = []
        self.relu_margin = np.inf

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, value: np.ndarray, parents: Tuple[Var, ...] = (), backward: Optional[Callable] = None) -> Var:
        node = len(self._parents)
        self._parents.append(tuple(p.node for p in parents))
        self._backward.append(backward)
        self._shapes.append(value.shape)
        return Var(value, node)

    # Leaves

    def constant(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64))

    def variable(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64))

    # Elementwise

    def add(self, a: Var, b: Var) -> Var:
        sa, sb = a.shape, b.shape
        return self._push(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Var, b: Var) -> Var:
        sa, sb = a.shape, b.shape
        return self._push(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._push(av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def relu(self, a: Var) -> Var:
        av = a.value
        if av.size:
            self.relu_margin = min(self.relu_margin, float(np.min(np.abs(av))))
        mask = av > 0  # subgradient at exactly 0 is 0
        return self._push(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))

    def tanh(self, a: Var) -> Var:
        out = np.tanh(a.value)
        return self._push(out, (a,), lambda g: (g * (1.0 - out * out),))

    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._push(out, (a,), lambda g: (g * out,))

    # Linear algebra

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise InputShapeError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
        if av.shape[1] != bv.shape[0]:
            raise InputShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
        return self._push(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a: Var) -> Var:
        return self._push(a.value.T, (a,), lambda g: (g.T,))

    def reshape(self, a: Var, shape: Sequence[int]) -> Var:
        original = a.shape
        return self._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),))

    # Reductions

    def sum(self, a: Var, axis: Optional[int] = None, keepdims: bool = False) -> Var:
        shape = a.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._push(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, a: Var, axis: Optional[int] = None, keepdims: bool = False) -> Var:
        count = a.value.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

    def squared_norm(self, a: Var) -> Var:
        av = a.value
        return self._push(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))

    def softmax(self, a: Var, axis: int = -1) -> Var:
        shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / np.sum(e, axis=axis, keepdims=True)
        return self._push(out, (a,),
                          lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))

    def logsumexp(self, a: Var) -> Var:
        av = a.value
        top = np.max(av)
        e = np.exp(av - top)
        total = np.sum(e)
        weights = e / total
        return self._push(np.asarray(top + np.log(total)), (a,), lambda g: (g * weights,))

    # Indexing

    def getitem(self, a: Var, index) -> Var:
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return self._push(np.asarray(a.value[index]), (a,), backward)

    def take_rows(self, a: Var, rows: np.ndarray) -> Var:
        rows = np.asarray(rows, dtype=np.intp)
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, rows, g)
            return (full,)

        return self._push(a.value[rows], (a,), backward)

    # Reverse pass

    def backward(self, output: Var, seed: Optional[np.ndarray] = None) -> List[Optional[np.ndarray]]:
        """
        Accumulate gradients of ``output`` with respect to every recorded node.

        Nodes are visited in reverse recording order, so accumulation order is
        fixed by the trace and results are bit-reproducible.
        """
        grads: List[Optional[np.ndarray]] = [None] * len(self._parents)
        grads[output.node] = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in range(output.node, -1, -1):
            g = grads[node]
            backward = self._backward[node]
            if g is None or backward is None:
                continue
            for parent, contribution in zip(self._parents[node], backward(g)):
                if contribution is None:
                    continue
                grads[parent] = contribution if grads[parent] is None else grads[parent] + contribution
        return grads

    def grad_of(self, grads: List[Optional[np.ndarray]], var: Var) -> np.ndarray:
        g = grads[var.node]
        return np.zeros(self._shapes[var.node]) if g is None else g


Selector = Callable[[Tape, Var], Var]


@dataclass(frozen=True)
class DifferentiableFn:
    """
    A traceable function of one tensor input.

    ``forward(tape, x)`` records the computation on the given tape and returns
    the output variable. ``input_shape`` may use None for free dimensions.
    """
    forward: Callable[[Tape, Var], Var]
    input_shape: Optional[Tuple[Optional[int], ...]] = None
    name: str = "fn"

    def check_input(self, x: np.ndarray):
        if self.input_shape is None:
            return
        if x.ndim != len(self.input_shape) or any(
                want is not None and want != got for want, got in zip(self.input_shape, x.shape)):
            raise InputShapeError(f"{self.name}: expected input shape {self.input_shape}, got {x.shape}")

    def trace(self, x) -> Tuple[Tape, Var, Var]:
        """Record one forward pass on a fresh tape."""
        x = np.asarray(x, dtype=np.float64)
        self.check_input(x)
        tape = Tape()
        x_var = tape.variable(x)
        return tape, x_var, self.forward(tape, x_var)


def evaluate(f: DifferentiableFn, x) -> Tensor:
    """Return f(x) as a read-only tensor."""
    _, _, out = f.trace(x)
    return as_tensor(out.value)


def select_output(index) -> Selector:
    """Selector for one entry of the output (e.g. one logit)."""
    return lambda tape, out: tape.getitem(out, index)


def squared_distance_to(reference) -> Selector:
    """Selector for ||f(x) - reference||^2."""
    ref = np.asarray(reference, dtype=np.float64)
    return lambda tape, out: tape.squared_norm(tape.sub(out, tape.constant(ref)))


def _scalar(tape: Tape, out: Var, selector: Optional[Selector]) -> Var:
    scalar = out if selector is None else selector(tape, out)
    if scalar.value.size != 1:
        raise ContractError(f"selector must reduce the output to a scalar, got shape {scalar.shape}")
    return scalar


def value_and_gradient(f: DifferentiableFn, x, selector: Optional[Selector] = None) -> Tuple[float, Tensor]:
    """Scalar value and its gradient with respect to x from a single trace."""
    tape, x_var, out = f.trace(x)
    scalar = _scalar(tape, out, selector)
    grads = tape.backward(scalar, seed=np.ones(scalar.shape))
    return float(scalar.value), as_tensor(tape.grad_of(grads, x_var))


def gradient(f: DifferentiableFn, x, selector: Optional[Selector] = None) -> Tensor:
    """
    Gradient of a scalar reduction of f with respect to x.

    Args:
        f: Function to differentiate
        x: Input tensor
        selector: Maps f's output to a scalar; None requires f to be scalar

    Returns:
        Tensor with the shape of x

    Raises:
        ContractError: If the selected output is not a scalar
    """
    return value_and_gradient(f, x, selector)[1]


def scalar_value(f: DifferentiableFn, x, selector: Optional[Selector] = None) -> float:
    tape, _, out = f.trace(x)
    return float(_scalar(tape, out, selector).value)


def relu_margin(f: DifferentiableFn, x) -> float:
    """Smallest |pre-activation| reaching a relu when evaluating f at x."""
    tape, _, _ = f.trace(x)
    return tape.relu_margin


def finite_diff_gradient(f: DifferentiableFn, x, h: float = 1e-6,
                         selector: Optional[Selector] = None) -> Tensor:
    """Central finite-difference gradient, one coordinate at a time."""
    if not h > 0:
        raise ParameterError(f"finite-difference step must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + h
        upper = scalar_value(f, x, selector)
        x.flat[i] = original - h
        lower = scalar_value(f, x, selector)
        x.flat[i] = original
        grad.flat[i] = (upper - lower) / (2.0 * h)
    return as_tensor(grad)


def relative_error(actual, expected) -> float:
    """max|actual - expected| / max(max|expected|, 1e-12)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(expected), initial=0.0)), 1e-12)
    return float(np.max(np.abs(actual - expected), initial=0.0)) / scale


def spectral_norm(W, max_iters: int = 10000, tol: float = 1e-12, seed: int = 0) -> float:
    """
    Largest singular value of W by power iteration on W^T W.

    The start vector has equal entries; if W^T W annihilates it, a seeded
    random perturbation is added.

    Raises:
        ParameterError: If W is empty or max_iters < 1
        ConvergenceError: If the estimate has not settled after max_iters
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(1, -1)
    if W.size == 0:
        raise ParameterError("spectral_norm needs a nonempty matrix")
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters}")

    gram = W.T @ W
    v = np.full(gram.shape[0], 1.0 / np.sqrt(gram.shape[0]))
    if np.linalg.norm(gram @ v) == 0.0:
        rng = np.random.default_rng(seed)
        v = v + rng.standard_normal(v.shape)
        v /= np.linalg.norm(v)

    estimate = 0.0
    for iteration in range(1, max_iters + 1):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new_estimate = float(np.sqrt(norm))
        v = w / norm
        if abs(new_estimate - estimate) <= tol * max(1.0, new_estimate):
            logger.debug(f"Power iteration converged after {iteration} iterations")
            return new_estimate
        estimate = new_estimate
    raise ConvergenceError(f"power iteration did not converge in {max_iters} iterations", estimate)
