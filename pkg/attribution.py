"""
Path attribution methods for bag classifiers.

Contrastive integrated gradients (CIG) integrates the gradient of the
logit-space distance D(z) = ||f(z) - f(x')||^2 along the straight line from
the baseline x' to the input x. Integrated gradients (IG), expected
gradients (EG), integrated decision gradients (IDG) and the vanilla
gradient are provided for comparison. Every method returns per-feature
attributions (n x d) and per-patch saliency (n).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

import config
from autodiff import (DifferentiableFn, as_tensor, evaluate, select_output, squared_distance_to,
                      value_and_gradient)
from baseline import ReferencePool, sample_baseline
from binfmt import RecordReader, RecordWriter
from errors import ConfigError, ContractError, FormatError, InputShapeError, NumericError, ParameterError, PoolError
from mil_model import MilModel
from storage import csv_text, write_atomic

logger = logging.getLogger(__name__)

ATTR_MAGIC = b"ATTR1"
SLOPE_EPSILON = 1e-12


class Method(str, Enum):
    GRADIENT = "gradient"
    IG = "ig"
    EG = "eg"
    IDG = "idg"
    CIG = "cig"
    RANDOM = "random"
    ORACLE = "oracle"

    @property
    def is_gradient_based(self) -> bool:
        return self not in (Method.RANDOM, Method.ORACLE)


@dataclass(frozen=True, eq=False)
class PathSpec:
    """Straight-line path from ``baseline`` to ``x`` sampled with ``steps`` intervals."""
    x: np.ndarray
    baseline: np.ndarray
    steps: int = config.DEFAULT_STEPS
    rule: str = config.DEFAULT_QUADRATURE

    def __post_init__(self):
        object.__setattr__(self, "x", as_tensor(self.x))
        object.__setattr__(self, "baseline", as_tensor(self.baseline))
        if self.x.shape != self.baseline.shape:
            raise InputShapeError(f"input {self.x.shape} and baseline {self.baseline.shape} differ in shape")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.rule not in config.QUADRATURE_RULES:
            raise ParameterError(f"unknown quadrature rule {self.rule!r}")

    @property
    def delta(self) -> np.ndarray:
        return self.x - self.baseline


@dataclass(eq=False)
class AttributionResult:
    method: str
    attributions: np.ndarray
    saliency: np.ndarray
    residual: Optional[float] = None
    steps: Optional[int] = None
    baseline_ref: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    step_saliency: Optional[List[Tuple[float, np.ndarray]]] = None  # (alpha, per-patch mean |gradient|)

    @property
    def n(self) -> int:
        return self.attributions.shape[0]

    @property
    def d(self) -> int:
        return self.attributions.shape[1]


def quadrature(steps: int, rule: str = config.DEFAULT_QUADRATURE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nodes and weights on [0, 1].

    Trapezoid, left, right and midpoint use ``steps`` intervals; simpson
    rounds ``steps`` up to the next even count.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    m = steps
    if rule == "trapezoid":
        alphas = np.arange(m + 1) / m
        weights = np.full(m + 1, 1.0 / m)
        weights[0] = weights[-1] = 0.5 / m
    elif rule == "left":
        alphas = np.arange(m) / m
        weights = np.full(m, 1.0 / m)
    elif rule == "right":
        alphas = np.arange(1, m + 1) / m
        weights = np.full(m, 1.0 / m)
    elif rule == "midpoint":
        alphas = (np.arange(m) + 0.5) / m
        weights = np.full(m, 1.0 / m)
    elif rule == "simpson":
        m += m % 2
        alphas = np.arange(m + 1) / m
        weights = np.where(np.arange(m + 1) % 2 == 1, 4.0, 2.0)
        weights[0] = weights[-1] = 1.0
        weights = weights / (3.0 * m)
    else:
        raise ParameterError(f"unknown quadrature rule {rule!r}")
    return alphas, weights


def straight_line(x, baseline, alpha: float) -> np.ndarray:
    """gamma(alpha) = x' + alpha (x - x'); returns x itself at alpha = 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if alpha == 1.0:
        return x.copy()
    return baseline + alpha * (x - baseline)


def logit_function(model: Union[MilModel, DifferentiableFn]) -> DifferentiableFn:
    """The logit layer of a MilModel, or a DifferentiableFn unchanged."""
    if isinstance(model, DifferentiableFn):
        return model
    if isinstance(model, MilModel):
        return model.logit_fn()
    raise ContractError(f"cannot attribute {type(model).__name__}; expected MilModel or DifferentiableFn")


def patch_saliency(attributions) -> np.ndarray:
    """Mean absolute attribution over the feature dimensions of each patch."""
    A = np.asarray(attributions, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] < 1:
        raise ParameterError(f"attributions must be n x d with d >= 1, got shape {A.shape}")
    return np.mean(np.abs(A), axis=1)


def contrastive_objective(model, z, baseline) -> float:
    """D(z) = ||f(z) - f(x')||^2."""
    f = logit_function(model)
    z = np.asarray(z, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if z.shape != baseline.shape:
        raise InputShapeError(f"point {z.shape} and baseline {baseline.shape} differ in shape")
    diff = evaluate(f, z) - evaluate(f, baseline)
    return float(np.sum(diff * diff))


def predicted_class(model, x) -> int:
    """Index of the largest logit at x (lowest index on ties)."""
    return int(np.argmax(evaluate(logit_function(model), x)))


def _resolve_target(f: DifferentiableFn, x: np.ndarray, target_class: Optional[int]) -> int:
    out = evaluate(f, x)
    if target_class is None:
        return int(np.argmax(out))
    if not 0 <= target_class < out.size:
        raise ParameterError(f"target class {target_class} outside {out.size} outputs")
    return int(target_class)


def _checked_gradient(f: DifferentiableFn, z: np.ndarray, selector, alpha: Optional[float],
                      method: str) -> Tuple[float, np.ndarray]:
    value, grad = value_and_gradient(f, z, selector)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise NumericError(f"{method}: non-finite gradient", alpha)
    return value, grad


def _path_integral(f: DifferentiableFn, path: PathSpec, selector, method: str, alpha_power: int = 0,
                   record_steps: bool = False) -> Tuple[np.ndarray, Optional[List]]:
    """Quadrature of the selected gradient along the path, optionally times alpha^power."""
    alphas, weights = quadrature(path.steps, path.rule)
    total = np.zeros(path.x.shape)
    snapshots = [] if record_steps else None
    for alpha, weight in zip(alphas, weights):
        z = straight_line(path.x, path.baseline, float(alpha))
        _, grad = _checked_gradient(f, z, selector, float(alpha), method)
        total += (weight * alpha ** alpha_power) * grad
        if record_steps:
            snapshots.append((float(alpha), patch_saliency(grad)))
    return total, snapshots


def cig(model, path: PathSpec, variant: str = "interpolated", record_steps: bool = False) -> AttributionResult:
    """
    Contrastive integrated gradients.

    A = (x - x') * integral over alpha of grad D at gamma(alpha). The
    ``endpoint`` variant differentiates through gamma with respect to x,
    which multiplies each integrand sample by alpha.

    Raises:
        ParameterError: If path.steps < 1 or the variant is unknown
        NumericError: If a gradient is not finite
    """
    if variant not in config.CIG_VARIANTS:
        raise ParameterError(f"unknown CIG variant {variant!r}")
    f = logit_function(model)
    reference = evaluate(f, path.baseline)
    integral, snapshots = _path_integral(f, path, squared_distance_to(reference), "cig",
                                         alpha_power=1 if variant == "endpoint" else 0,
                                         record_steps=record_steps)
    A = path.delta * integral
    objective = contrastive_objective(f, path.x, path.baseline)
    residual = abs(float(np.sum(A)) - objective)
    logger.debug(f"CIG: D(x)={objective:.6g} residual={residual:.3g} ({path.steps} steps, {path.rule})")
    return AttributionResult(method=Method.CIG.value, attributions=as_tensor(A), saliency=patch_saliency(A),
                             residual=residual, steps=path.steps, step_saliency=snapshots,
                             metadata={"quadrature": path.rule, "variant": variant, "objective": objective})


def integrated_gradients(model, path: PathSpec, target_class: Optional[int] = None,
                         record_steps: bool = False) -> AttributionResult:
    """IG of one target logit; the residual is |sum A - (f_c(x) - f_c(x'))|."""
    f = logit_function(model)
    target = _resolve_target(f, path.x, target_class)
    integral, snapshots = _path_integral(f, path, select_output(target), "ig", record_steps=record_steps)
    A = path.delta * integral
    change = float(evaluate(f, path.x)[target] - evaluate(f, path.baseline)[target])
    residual = abs(float(np.sum(A)) - change)
    return AttributionResult(method=Method.IG.value, attributions=as_tensor(A), saliency=patch_saliency(A),
                             residual=residual, steps=path.steps, step_saliency=snapshots,
                             metadata={"quadrature": path.rule, "target_class": target})


def expected_gradients(model, x, pool: ReferencePool, n_samples: int = config.DEFAULT_EG_SAMPLES,
                       target_class: Optional[int] = None, seed=0) -> AttributionResult:
    """
    Expected gradients: mean of (x - x'_j) * grad f_c at x'_j + alpha_j (x - x'_j).

    Each sample draws a baseline bag from the pool and alpha_j ~ U[0, 1).

    Raises:
        ParameterError: If n_samples < 1
        PoolError: If the pool is empty
    """
    if n_samples < 1:
        raise ParameterError(f"n_samples must be >= 1, got {n_samples}")
    if pool.size == 0:
        raise PoolError("expected gradients needs a nonempty reference pool")
    f = logit_function(model)
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(f, x, target_class)
    selector = select_output(target)
    rng = np.random.default_rng(seed)
    total = np.zeros(x.shape)
    for _ in range(n_samples):
        reference = sample_baseline(pool, x.shape[0], rng.integers(0, 2 ** 63 - 1))
        alpha = float(rng.random())
        _, grad = _checked_gradient(f, straight_line(x, reference, alpha), selector, alpha, "eg")
        total += (x - reference) * grad
    A = total / n_samples
    return AttributionResult(method=Method.EG.value, attributions=as_tensor(A), saliency=patch_saliency(A),
                             steps=n_samples, baseline_ref="pool",
                             metadata={"target_class": target, "samples": n_samples, "approximate": True})


def idg(model, path: PathSpec, target_class: Optional[int] = None, record_steps: bool = False) -> AttributionResult:
    """
    Integrated decision gradients.

    Gradients at alpha_j = j/m (j < m) are weighted by the normalized logit
    increase over [alpha_j, alpha_{j+1}]. If the total increase is below
    1e-12 in magnitude the weights fall back to 1/m and the result is flagged.

    Raises:
        ParameterError: If path.steps < 2
    """
    if path.steps < 2:
        raise ParameterError(f"IDG needs at least 2 steps, got {path.steps}")
    f = logit_function(model)
    target = _resolve_target(f, path.x, target_class)
    selector = select_output(target)
    m = path.steps
    alphas = np.arange(m + 1) / m

    values = np.empty(m + 1)
    grads = []
    for j, alpha in enumerate(alphas):
        values[j], grad = _checked_gradient(f, straight_line(path.x, path.baseline, float(alpha)),
                                            selector, float(alpha), "idg")
        grads.append(grad)

    denominator = values[-1] - values[0]
    fallback = abs(denominator) < SLOPE_EPSILON
    if fallback:
        logger.warning(f"IDG: logit change {denominator:.3g} too small for slope weights; using uniform weights")
        slopes = np.full(m, 1.0 / m)
    else:
        slopes = np.diff(values) / denominator

    total = np.zeros(path.x.shape)
    for j in range(m):
        total += slopes[j] * grads[j]
    A = path.delta * total
    snapshots = [(float(a), patch_saliency(g)) for a, g in zip(alphas[:m], grads[:m])] if record_steps else None
    return AttributionResult(method=Method.IDG.value, attributions=as_tensor(A), saliency=patch_saliency(A),
                             steps=m, step_saliency=snapshots,
                             metadata={"target_class": target, "slope_fallback": bool(fallback),
                                       "slope_weights": [float(s) for s in slopes], "approximate": True})


def vanilla_gradient(model, x, target_class: Optional[int] = None) -> AttributionResult:
    f = logit_function(model)
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(f, x, target_class)
    _, grad = _checked_gradient(f, x, select_output(target), None, "gradient")
    return AttributionResult(method=Method.GRADIENT.value, attributions=as_tensor(grad),
                             saliency=patch_saliency(grad), metadata={"target_class": target})


def completeness_residual(result: AttributionResult, model, x, baseline) -> float:
    """|sum of attributions - D(x)|."""
    return abs(float(np.sum(result.attributions)) - contrastive_objective(model, x, baseline))


@dataclass(frozen=True)
class AttributionSettings:
    steps: int = config.DEFAULT_STEPS
    rule: str = config.DEFAULT_QUADRATURE
    cig_variant: str = "interpolated"
    eg_samples: int = config.DEFAULT_EG_SAMPLES
    record_steps: bool = False

    @classmethod
    def from_run_config(cls, cfg) -> "AttributionSettings":
        return cls(steps=cfg.steps, rule=cfg.quadrature, cig_variant=cfg.cig_variant,
                   eg_samples=cfg.eg_samples, record_steps=cfg.emit_steps)


def attribute(method: str, model, x, baseline=None, pool: Optional[ReferencePool] = None,
              settings: Optional[AttributionSettings] = None, seed=0,
              target_class: Optional[int] = None) -> AttributionResult:
    """
    Run one attribution method by name.

    Args:
        method: gradient | ig | eg | idg | cig
        model: MilModel or DifferentiableFn
        x: Bag feature matrix (n x d)
        baseline: Baseline matrix for ig/idg/cig
        pool: Reference pool for eg
        settings: Steps, quadrature rule, CIG variant, EG samples
        seed: Seed for eg sampling
        target_class: Target logit (default: predicted class at x)

    Raises:
        ConfigError: If the method name is unknown
        ContractError: For saliency-only methods or a missing baseline
    """
    try:
        method = Method(method)
    except ValueError:
        raise ConfigError("methods", f"unknown method {method!r}")
    if not method.is_gradient_based:
        raise ContractError(f"{method.value} produces saliency only; it is handled by the evaluator")
    settings = settings or AttributionSettings()
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)

    if method is Method.GRADIENT:
        return vanilla_gradient(model, x, target_class)
    if method is Method.EG:
        if pool is None:
            raise ContractError("expected gradients needs a reference pool")
        return expected_gradients(model, x, pool, settings.eg_samples, target_class, seed)
    if baseline is None:
        raise ContractError(f"{method.value} needs a baseline")
    path = PathSpec(x, baseline, settings.steps, settings.rule)
    if method is Method.CIG:
        return cig(model, path, settings.cig_variant, settings.record_steps)
    if method is Method.IG:
        return integrated_gradients(model, path, target_class, settings.record_steps)
    return idg(model, path, target_class, settings.record_steps)


def encode_attribution(result: AttributionResult) -> bytes:
    """ATTR1: magic, u16 tag length, ASCII tag, u32 n, u32 d, f32 A, f32 s, f64 residual."""
    tag = result.method.encode("ascii")
    writer = RecordWriter().raw(ATTR_MAGIC).pack("H", len(tag)).raw(tag)
    writer.pack("II", result.n, result.d)
    writer.array(result.attributions, "f4").array(result.saliency, "f4")
    writer.pack("d", np.nan if result.residual is None else result.residual)
    return writer.getvalue(with_crc=False)


def decode_attribution(data: bytes, name: str = "attribution") -> AttributionResult:
    reader = RecordReader(data, name, with_crc=False)
    reader.magic(ATTR_MAGIC)
    (tag_length,) = reader.unpack("H", "method tag length")
    tag_offset = reader.offset
    try:
        method = reader.take(tag_length, "method tag").decode("ascii")
    except UnicodeDecodeError:
        raise FormatError(f"{name}: method tag is not ASCII", tag_offset)
    n, d = reader.unpack("II", "dimensions")
    A = reader.array("f4", (n, d), "attributions").astype(np.float64)
    s = reader.array("f4", (n,), "saliency").astype(np.float64)
    (residual,) = reader.unpack("d", "residual")
    reader.finish()
    return AttributionResult(method=method, attributions=as_tensor(A), saliency=as_tensor(s),
                             residual=None if np.isnan(residual) else float(residual))


def write_attribution(result: AttributionResult, path: Union[str, Path]):
    write_atomic(path, encode_attribution(result))


def read_attribution(path: Union[str, Path]) -> AttributionResult:
    return decode_attribution(Path(path).read_bytes(), name=str(path))


def saliency_csv(result: AttributionResult, coords) -> str:
    """``patch_index,x,y,saliency`` rows for one slide."""
    coords = np.asarray(coords)
    if coords.shape != (result.n, 2):
        raise InputShapeError(f"expected {result.n} coordinate pairs, got {coords.shape}")
    rows = [(k, int(x), int(y), repr(float(s))) for k, ((x, y), s) in enumerate(zip(coords, result.saliency))]
    return csv_text(["patch_index", "x", "y", "saliency"], rows)
