"""
Attention-pooling MLP bag classifier.

A bag (n patches x d features) passes through fully connected hidden layers,
is pooled into one embedding with ABMIL attention, and is mapped to class
logits. Bag rows are sorted by value before any computation, so any row
permutation of a bag produces bitwise-identical logits.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import DifferentiableFn, Tape, Var, as_tensor
from errors import EmptyBagError, InputShapeError, ParameterError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Row order that sorts ``rows`` lexicographically (column 0 first)."""
    rows = np.asarray(rows)
    if rows.shape[0] <= 1:
        return np.arange(rows.shape[0])
    return np.lexsort(rows.T[::-1])


def softmax(values) -> np.ndarray:
    """Max-subtracted softmax of a vector."""
    values = np.asarray(values, dtype=np.float64)
    e = np.exp(values - np.max(values))
    return e / np.sum(e)


def parameter_shapes(input_dim: int, n_classes: int, hidden: Sequence[int],
                     attention_dim: int) -> Dict[str, Tuple[int, ...]]:
    """Parameter shapes keyed by name, in canonical (checkpoint) order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    widths = (input_dim,) + tuple(hidden)
    for i in range(len(hidden)):
        shapes[f"W{i}"] = (widths[i], widths[i + 1])
        shapes[f"b{i}"] = (widths[i + 1],)
    shapes["V"] = (widths[-1], attention_dim)
    shapes["w"] = (attention_dim,)
    shapes["Wc"] = (n_classes, widths[-1])
    shapes["bc"] = (n_classes,)
    return shapes


@dataclass
class MilModel:
    """
    Attention MIL classifier parameters.

    params holds W{i} (in x out) and b{i} per hidden layer, the attention
    matrix V (h x a) and vector w (a), and the classifier Wc (m x h) and bc (m).
    """
    input_dim: int
    n_classes: int
    hidden: Tuple[int, ...]
    attention_dim: int
    params: Dict[str, np.ndarray]
    dropout: float = 0.25
    activation: str = "relu"
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        for name, shape in self.param_shapes().items():
            if name not in self.params:
                raise ParameterError(f"missing parameter {name}")
            if np.shape(self.params[name]) != shape:
                raise ParameterError(f"parameter {name} has shape {np.shape(self.params[name])}, expected {shape}")
        self.params = {name: as_tensor(self.params[name]) for name in self.param_names()}

    @property
    def embed_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def param_names(self) -> List[str]:
        """Parameter names in canonical (checkpoint) order."""
        names = []
        for i in range(len(self.hidden)):
            names += [f"W{i}", f"b{i}"]
        return names + ["V", "w", "Wc", "bc"]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return parameter_shapes(self.input_dim, self.n_classes, self.hidden, self.attention_dim)

    def with_params(self, params: Dict[str, np.ndarray], **changes) -> "MilModel":
        """Copy of this model with replaced parameters."""
        values = dict(input_dim=self.input_dim, n_classes=self.n_classes, hidden=self.hidden,
                      attention_dim=self.attention_dim, params=params, dropout=self.dropout,
                      activation=self.activation, metadata=dict(self.metadata))
        values.update(changes)
        return MilModel(**values)

    def check_bag(self, bag: np.ndarray):
        if bag.ndim != 2 or bag.shape[1] != self.input_dim:
            raise InputShapeError(f"bag must be n x {self.input_dim}, got shape {bag.shape}")
        if bag.shape[0] == 0:
            raise EmptyBagError("bag has no instances")

    def forward(self, tape: Tape, bag: Var, params: Dict[str, Var],
                dropout_masks: Optional[Sequence[np.ndarray]] = None) -> Var:
        """Record the logit computation for one bag; returns an m-vector."""
        h = tape.take_rows(bag, canonical_order(bag.value))
        for i in range(len(self.hidden)):
            h = tape.add(tape.matmul(h, params[f"W{i}"]), params[f"b{i}"])
            h = tape.relu(h) if self.activation == "relu" else tape.tanh(h)
            if dropout_masks is not None:
                h = tape.mul(h, tape.constant(dropout_masks[i]))
        pooled, _ = _pool(tape, h, params)
        out = tape.add(tape.matmul(tape.reshape(pooled, (1, -1)), tape.transpose(params["Wc"])), params["bc"])
        return tape.reshape(out, (self.n_classes,))

    def logit_fn(self) -> DifferentiableFn:
        """The logit layer as a differentiable function of the bag matrix."""

        def forward(tape: Tape, bag: Var) -> Var:
            if bag.shape[0] == 0:
                raise EmptyBagError("bag has no instances")
            params = {name: tape.constant(value) for name, value in self.params.items()}
            return self.forward(tape, bag, params)

        return DifferentiableFn(forward, input_shape=(None, self.input_dim), name="mil_logits")


def _pool(tape: Tape, embeddings: Var, params: Dict[str, Var]) -> Tuple[Var, Var]:
    """a_k = softmax_k(w^T tanh(V^T h_k)); bag embedding = sum_k a_k h_k."""
    n = embeddings.shape[0]
    hidden = tape.tanh(tape.matmul(embeddings, params["V"]))
    scores = tape.reshape(tape.matmul(hidden, tape.reshape(params["w"], (-1, 1))), (n,))
    weights = tape.softmax(scores, axis=0)
    pooled = tape.matmul(tape.reshape(weights, (1, n)), embeddings)
    return tape.reshape(pooled, (embeddings.shape[1],)), weights


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(input_dim: int, n_classes: int, hidden: Sequence[int] = (512, 256, 128),
               attention_dim: int = 64, dropout: float = 0.25, activation: str = "relu",
               seed: int = 0) -> MilModel:
    """Glorot-uniform weights and zero biases drawn from a seeded generator."""
    if input_dim < 1 or n_classes < 1 or attention_dim < 1 or any(h < 1 for h in hidden):
        raise ParameterError("model dimensions must all be >= 1")
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    widths = (input_dim,) + tuple(hidden)
    for i in range(len(hidden)):
        params[f"W{i}"] = _glorot(rng, widths[i], widths[i + 1], (widths[i], widths[i + 1]))
        params[f"b{i}"] = np.zeros(widths[i + 1])
    embed = widths[-1]
    params["V"] = _glorot(rng, embed, attention_dim, (embed, attention_dim))
    params["w"] = _glorot(rng, attention_dim, 1, (attention_dim,))
    params["Wc"] = _glorot(rng, embed, n_classes, (n_classes, embed))
    params["bc"] = np.zeros(n_classes)
    return MilModel(input_dim=input_dim, n_classes=n_classes, hidden=tuple(hidden),
                    attention_dim=attention_dim, params=params, dropout=dropout,
                    activation=activation, metadata={"seed": seed, "epochs": 0})


def attention_pool(model: MilModel, instance_embeddings) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pool instance embeddings (n x h) into one bag embedding.

    Returns:
        (bag embedding of length h, attention weights in the caller's row order)

    Raises:
        EmptyBagError: If n == 0
    """
    embeddings = np.asarray(instance_embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != model.embed_dim:
        raise InputShapeError(f"embeddings must be n x {model.embed_dim}, got shape {embeddings.shape}")
    if embeddings.shape[0] == 0:
        raise EmptyBagError("cannot pool an empty bag")
    order = canonical_order(embeddings)
    tape = Tape()
    params = {name: tape.constant(model.params[name]) for name in ("V", "w")}
    pooled, weights = _pool(tape, tape.constant(embeddings[order]), params)
    restored = np.empty_like(weights.value)
    restored[order] = weights.value
    return as_tensor(pooled.value), as_tensor(restored)


def logits(model: MilModel, bag) -> np.ndarray:
    """Pre-softmax class scores for one bag (dropout disabled)."""
    bag = np.asarray(bag, dtype=np.float64)
    model.check_bag(bag)
    _, _, out = model.logit_fn().trace(bag)
    return as_tensor(out.value)


def predict(model: MilModel, bag) -> Tuple[int, np.ndarray]:
    """Predicted class (lowest index wins ties) and softmax confidences."""
    scores = logits(model, bag)
    return int(np.argmax(scores)), softmax(scores)


def instance_embeddings(model: MilModel, bag) -> np.ndarray:
    """Hidden-layer embeddings of each patch, in the caller's row order."""
    bag = np.asarray(bag, dtype=np.float64)
    model.check_bag(bag)
    h = bag
    for i in range(len(model.hidden)):
        h = h @ model.params[f"W{i}"] + model.params[f"b{i}"]
        h = np.maximum(h, 0.0) if model.activation == "relu" else np.tanh(h)
    return h
