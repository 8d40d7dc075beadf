"""
Training loop for the attention MIL classifier (cross-entropy + Adam).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tape
from data_io import check_labels
from errors import DatasetError, ParameterError
from mil_model import ACTIVATIONS, MilModel, init_model, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation and architecture settings for `train`."""
    epochs: int = 200
    learning_rate: float = 1e-4
    batch_size: int = 1  # bags per step
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.25
    seed: int = 0
    hidden: Tuple[int, ...] = (512, 256, 128)
    attention_dim: int = 64
    activation: str = "relu"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.eps <= 0:
            raise ParameterError("invalid Adam hyperparameters")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if not self.hidden or any(h < 1 for h in self.hidden) or self.attention_dim < 1:
            raise ParameterError("hidden widths and attention_dim must be >= 1")
        return self


class AdamOptimizer:
    """Adam with bias correction over a dict of parameter arrays."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated parameters; inputs are left untouched."""
        self.step_count += 1
        t = self.step_count
        updated = {}
        for name, value in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            updated[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def _check_dataset(bags: Sequence) -> int:
    if not bags:
        raise DatasetError("training set is empty")
    dims = {bag.features.shape[1] for bag in bags}
    if len(dims) != 1:
        raise DatasetError(f"bags disagree on feature dimension: {sorted(dims)}")
    return dims.pop()


def _batch_loss(model: MilModel, batch: Sequence, params: Dict[str, np.ndarray],
                dropout_rng: Optional[np.random.Generator]) -> Tuple[float, Dict[str, np.ndarray], int]:
    """Mean cross-entropy of a batch, its parameter gradients, and correct predictions."""
    tape = Tape()
    param_vars = {name: tape.variable(value) for name, value in params.items()}
    losses = []
    correct = 0
    for bag in batch:
        features = np.asarray(bag.features, dtype=np.float64)
        masks = None
        if dropout_rng is not None and model.dropout > 0:
            keep = 1.0 - model.dropout
            masks = [(dropout_rng.random((features.shape[0], width)) < keep) / keep for width in model.hidden]
        out = model.forward(tape, tape.constant(features), param_vars, dropout_masks=masks)
        correct += int(np.argmax(out.value) == bag.label)
        losses.append(tape.sub(tape.logsumexp(out), tape.getitem(out, int(bag.label))))
    total = losses[0]
    for loss in losses[1:]:
        total = tape.add(total, loss)
    mean_loss = tape.scale(total, 1.0 / len(batch))
    grads = tape.backward(mean_loss)
    return float(mean_loss.value), {name: tape.grad_of(grads, var) for name, var in param_vars.items()}, correct


def train(bags: Sequence, config: TrainConfig, n_classes: Optional[int] = None) -> Tuple[MilModel, List[Dict]]:
    """
    Fit an attention MIL classifier.

    The recorded loss of an epoch is the mean loss before each update.
    With a full batch (``batch_size=len(bags)``) and ``dropout=0`` every
    epoch sees the same objective, so with a small learning rate the
    loss history is non-increasing; dropout makes the objective random
    and voids that guarantee.

    Args:
        bags: Training FeatureBags (all with the same feature dimension)
        config: Optimisation settings
        n_classes: Number of classes (default: max label + 1)

    Returns:
        (trained model, per-epoch history of {epoch, loss, accuracy})

    Raises:
        DatasetError: If the set is empty, feature dimensions disagree or
            a label is outside ``0..n_classes-1``
    """
    config.validate()
    input_dim = _check_dataset(bags)
    n_classes = n_classes or max(int(bag.label) for bag in bags) + 1
    check_labels(bags, n_classes)

    model = init_model(input_dim, n_classes, hidden=config.hidden, attention_dim=config.attention_dim,
                       dropout=config.dropout, activation=config.activation, seed=config.seed)
    params = {name: np.array(value) for name, value in model.params.items()}
    optimizer = AdamOptimizer(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])

    logger.info(f"Training on {len(bags)} bags (d={input_dim}, classes={n_classes}, epochs={config.epochs})")
    history: List[Dict] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(bags))
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, len(bags), config.batch_size):
            batch = [bags[i] for i in order[start:start + config.batch_size]]
            loss, grads, correct = _batch_loss(model, batch, params, dropout_rng)
            if not np.isfinite(loss):
                raise ParameterError(f"training diverged at epoch {epoch} (loss={loss})")
            params = optimizer.step(params, grads)
            epoch_loss += loss * len(batch)
            epoch_correct += correct
        record = {"epoch": epoch, "loss": epoch_loss / len(bags), "accuracy": epoch_correct / len(bags)}
        history.append(record)
        if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
            logger.info(f"Epoch {epoch}/{config.epochs}: loss={record['loss']:.4f} accuracy={record['accuracy']:.3f}")

    metadata = {"seed": config.seed, "epochs": config.epochs}
    if history:
        metadata["final_loss"] = history[-1]["loss"]
        metadata["final_accuracy"] = history[-1]["accuracy"]
    return model.with_params(params, metadata=metadata), history


def evaluate_accuracy(model: MilModel, bags: Sequence) -> float:
    """Slide-level accuracy of ``model`` on ``bags``."""
    if not bags:
        raise DatasetError("cannot score an empty set")
    correct = sum(1 for bag in bags if predict(model, bag.features)[0] == bag.label)
    return correct / len(bags)
