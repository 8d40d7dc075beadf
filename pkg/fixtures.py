"""
Closed-form and random models with known attributions.

Linear fixtures act on the column mean of the bag, so a single-patch bag
reduces them to an ordinary linear map.
"""

from typing import Sequence

import numpy as np

from autodiff import DifferentiableFn, Tape, Var
from mil_model import MilModel, init_model


def _row_vector(tape: Tape, z: Var) -> Var:
    """Column mean of a bag (or the vector itself) as a 1 x d row."""
    if len(z.shape) == 1:
        return tape.reshape(z, (1, -1))
    return tape.reshape(tape.mean(z, axis=0), (1, -1))


def linear_logit_fn(W) -> DifferentiableFn:
    """f(z) = W mean(z); one output per row of W."""
    W = np.array(W, dtype=np.float64, ndmin=2)

    def forward(tape: Tape, z: Var) -> Var:
        out = tape.matmul(_row_vector(tape, z), tape.constant(W.T))
        return tape.reshape(out, (W.shape[0],))

    return DifferentiableFn(forward, input_shape=(None, W.shape[1]), name="linear")


def split_linear_logit_fn(W) -> DifferentiableFn:
    """(W/2) mean(z) + (W/2) mean(z): the same function as linear_logit_fn on a different graph."""
    W = np.array(W, dtype=np.float64, ndmin=2)

    def forward(tape: Tape, z: Var) -> Var:
        row = _row_vector(tape, z)
        half = tape.constant(W.T / 2.0)
        out = tape.add(tape.matmul(row, half), tape.matmul(row, half))
        return tape.reshape(out, (W.shape[0],))

    return DifferentiableFn(forward, input_shape=(None, W.shape[1]), name="split_linear")


def product_fn() -> DifferentiableFn:
    """Single logit f(z) = z[0, 0] * z[0, 1]."""

    def forward(tape: Tape, z: Var) -> Var:
        out = tape.mul(tape.getitem(z, (0, 0)), tape.getitem(z, (0, 1)))
        return tape.reshape(out, (1,))

    return DifferentiableFn(forward, input_shape=(None, 2), name="product")


def composite_fn(input_dim: int, widths: Sequence[int] = (6, 5, 4), seed: int = 0) -> DifferentiableFn:
    """
    Random vector function exercising linear, relu, tanh, softmax, sum and
    squared-norm nodes; input is a length-``input_dim`` vector.
    """
    rng = np.random.default_rng(seed)
    dims = (input_dim,) + tuple(widths)
    weights = [rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i]) for i in range(len(widths))]
    biases = [rng.standard_normal(dims[i + 1]) * 0.1 for i in range(len(widths))]

    def forward(tape: Tape, x: Var) -> Var:
        h = tape.reshape(x, (1, -1))
        h1 = tape.relu(tape.add(tape.matmul(h, tape.constant(weights[0])), tape.constant(biases[0])))
        h2 = tape.tanh(tape.add(tape.matmul(h1, tape.constant(weights[1])), tape.constant(biases[1])))
        h3 = tape.add(tape.matmul(h2, tape.constant(weights[2])), tape.constant(biases[2]))
        out = tape.add(h3, tape.softmax(h3, axis=1))
        out = tape.add(out, tape.scale(tape.sum(h2), 0.1))
        out = tape.add(out, tape.scale(tape.squared_norm(h1), 0.05))
        return tape.reshape(out, (widths[-1],))

    return DifferentiableFn(forward, input_shape=(input_dim,), name="composite")


def random_mlp_fn(input_dim: int, widths: Sequence[int] = (8, 8, 3), seed: int = 7) -> DifferentiableFn:
    """Plain relu MLP on a vector; the last width is the output size."""
    rng = np.random.default_rng(seed)
    dims = (input_dim,) + tuple(widths)
    layers = [(rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i]), rng.standard_normal(dims[i + 1]) * 0.1)
              for i in range(len(widths))]

    def forward(tape: Tape, x: Var) -> Var:
        h = tape.reshape(x, (1, -1))
        for i, (W, b) in enumerate(layers):
            h = tape.add(tape.matmul(h, tape.constant(W)), tape.constant(b))
            if i < len(layers) - 1:
                h = tape.relu(h)
        return tape.reshape(h, (widths[-1],))

    return DifferentiableFn(forward, input_shape=(input_dim,), name="mlp")


def random_model(input_dim: int = 6, n_classes: int = 2, hidden: Sequence[int] = (8, 6, 4),
                 attention_dim: int = 4, activation: str = "tanh", seed: int = 0,
                 bias_scale: float = 0.1) -> MilModel:
    """Small MilModel with Glorot weights, random biases and classifier weights scaled by 3."""
    model = init_model(input_dim, n_classes, hidden=hidden, attention_dim=attention_dim,
                       activation=activation, seed=seed)
    rng = np.random.default_rng([seed, 99])
    params = {name: np.array(value) for name, value in model.params.items()}
    for name in params:
        if name.startswith("b"):
            params[name] = rng.standard_normal(params[name].shape) * bias_scale
    params["Wc"] = params["Wc"] * 3.0
    return model.with_params(params)


def zero_column_model(model: MilModel, column: int) -> MilModel:
    """Copy of ``model`` whose output does not depend on feature ``column``."""
    params = {name: np.array(value) for name, value in model.params.items()}
    params["W0"][column, :] = 0.0
    return model.with_params(params)


def zero_classifier_model(model: MilModel) -> MilModel:
    """Copy of ``model`` with zero classifier weights and bias: constant zero logits."""
    params = {name: np.array(value) for name, value in model.params.items()}
    params["Wc"][:] = 0.0
    params["bc"][:] = 0.0
    return model.with_params(params)


def random_bag(n: int, d: int, seed: int, scale: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, d)) * scale
