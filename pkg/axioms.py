"""
Executable axiom battery.

Each check builds its own fixtures from fixed seeds and returns an
``AxiomCheck``; ``run_battery`` runs them all and ``format_report`` prints
a PASS/FAIL summary.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List

import numpy as np

from attribution import (AttributionSettings, PathSpec, attribute, cig, contrastive_objective,
                         integrated_gradients)
from autodiff import (DifferentiableFn, finite_diff_gradient, gradient, relative_error, relu_margin,
                      select_output, spectral_norm)
from baseline import ReferencePool
from evaluation import info_bins
from mil_model import logits
from fixtures import (composite_fn, linear_logit_fn, random_bag, random_model, split_linear_logit_fn,
                      zero_column_model)

logger = logging.getLogger(__name__)

KINK_MARGIN = 1e-4


@dataclass
class AxiomCheck:
    name: str
    passed: bool
    detail: str
    metrics: Dict[str, Any] = field(default_factory=dict)


def _count(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


def check_gradient_correctness(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """Autodiff against central differences on composite functions and MIL models."""
    worst, checked, skipped = 0.0, 0, 0
    rng = np.random.default_rng(seed)
    for trial in range(_count(100, scale)):
        if trial % 2 == 0:
            f = composite_fn(5, seed=seed + trial)
            x = rng.standard_normal(5)
            selector = select_output(trial % 4)
        else:
            f = random_model(input_dim=3, activation="relu", seed=seed + trial).logit_fn()
            x = rng.standard_normal((4, 3))
            selector = select_output(trial % 2)
        if relu_margin(f, x) < KINK_MARGIN:
            skipped += 1
            continue
        error = relative_error(gradient(f, x, selector), finite_diff_gradient(f, x, 1e-6, selector))
        worst = max(worst, error)
        checked += 1
    return AxiomCheck("gradient_correctness", worst <= 1e-5,
                      f"max relative error {worst:.2e} over {checked} points ({skipped} near a relu kink)",
                      {"max_relative_error": worst, "checked": checked, "skipped": skipped})


def check_gradient_linearity(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """grad(f + g) == grad f + grad g."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for trial in range(_count(20, scale)):
        f = composite_fn(4, seed=seed + 2 * trial)
        g = composite_fn(4, seed=seed + 2 * trial + 1)
        both = DifferentiableFn(lambda tape, x, f=f, g=g: tape.add(f.forward(tape, x), g.forward(tape, x)),
                                input_shape=(4,), name="sum")
        x = rng.standard_normal(4)
        selector = select_output(trial % 4)
        worst = max(worst, relative_error(gradient(both, x, selector),
                                          gradient(f, x, selector) + gradient(g, x, selector)))
    return AxiomCheck("gradient_linearity", worst <= 1e-12, f"max relative error {worst:.2e}",
                      {"max_relative_error": worst})


def check_spectral_scaling(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """spectral_norm(cW) == |c| spectral_norm(W)."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(_count(20, scale)):
        W = rng.standard_normal((4, 3))
        base = spectral_norm(W)
        for c in (-3.0, 0.5, 7.0):
            worst = max(worst, abs(spectral_norm(c * W) - abs(c) * base) / max(1.0, abs(c) * base))
    return AxiomCheck("spectral_norm_scaling", worst <= 1e-8, f"max relative deviation {worst:.2e}",
                      {"max_deviation": worst})


def _completeness_fixture(trial: int, seed: int):
    model = random_model(input_dim=4, hidden=(8, 6, 4), activation="tanh", seed=seed + trial)
    x = random_bag(5, 4, seed=seed + 1000 + trial)
    baseline = random_bag(5, 4, seed=seed + 2000 + trial)
    return model, x, baseline


def check_cig_completeness(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """Sum of CIG equals D(x); residual shrinks about 4x when the steps double."""
    worst, ratios = 0.0, []
    for trial in range(_count(50, scale)):
        model, x, baseline = _completeness_fixture(trial, seed)
        objective = contrastive_objective(model, x, baseline)
        worst = max(worst, cig(model, PathSpec(x, baseline, 300)).residual / max(1.0, objective))
        coarse = cig(model, PathSpec(x, baseline, 200)).residual
        fine = cig(model, PathSpec(x, baseline, 400)).residual
        if fine > 0:
            ratios.append(coarse / fine)
    median = float(np.median(ratios)) if ratios else float("nan")
    passed = worst <= 1e-3 and 3.0 <= median <= 5.0
    return AxiomCheck("cig_completeness", passed,
                      f"max relative residual {worst:.2e} at m=300; median residual ratio m=200/400 {median:.2f}",
                      {"max_relative_residual": worst, "median_ratio": median})


def check_ig_completeness(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """Sum of IG equals f_c(x) - f_c(x')."""
    worst = 0.0
    for trial in range(_count(50, scale)):
        model, x, baseline = _completeness_fixture(trial, seed)
        result = integrated_gradients(model, PathSpec(x, baseline, 300))
        target = result.metadata["target_class"]
        change = float(logits(model, x)[target] - logits(model, baseline)[target])
        worst = max(worst, result.residual / max(1.0, abs(change)))
    return AxiomCheck("ig_completeness", worst <= 1e-3, f"max relative residual {worst:.2e} at m=300",
                      {"max_relative_residual": worst})


def check_linear_closed_form(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """CIG = d * (W^T W d) for linear logits, and (1, 4) on the worked example."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(_count(20, scale)):
        W = rng.standard_normal((3, 4))
        x, baseline = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        delta = (x - baseline)[0]
        expected = delta * (W.T @ W @ delta)
        result = cig(linear_logit_fn(W), PathSpec(x, baseline, 50))
        worst = max(worst, float(np.max(np.abs(result.attributions[0] - expected))) / max(1.0, np.max(np.abs(expected))))
    worked = cig(linear_logit_fn(np.diag([1.0, 2.0])), PathSpec([[1.0, 1.0]], [[0.0, 0.0]], 50))
    worked_ok = np.allclose(worked.attributions, [[1.0, 4.0]], rtol=0, atol=1e-12) and \
        abs(float(np.sum(worked.attributions)) - 5.0) <= 1e-12
    return AxiomCheck("linear_closed_form", worst <= 1e-10 and worked_ok,
                      f"max deviation {worst:.2e}; worked example {np.round(worked.attributions[0], 12).tolist()}",
                      {"max_deviation": worst, "worked_example_ok": bool(worked_ok)})


def check_sensitivity(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """An ignored feature column receives exactly zero attribution."""
    nonzero = []
    settings = AttributionSettings(steps=20)
    for trial in range(_count(20, scale)):
        column = trial % 4
        model = zero_column_model(random_model(input_dim=4, activation="relu", seed=seed + trial), column)
        x = random_bag(5, 4, seed=seed + 300 + trial)
        baseline = random_bag(5, 4, seed=seed + 600 + trial)
        for method in ("gradient", "ig", "cig"):
            result = attribute(method, model, x, baseline=baseline, settings=settings)
            if np.any(result.attributions[:, column] != 0.0):
                nonzero.append(f"{method}@{trial}")
    return AxiomCheck("sensitivity", not nonzero,
                      "ignored columns exactly zero" if not nonzero else f"nonzero in {', '.join(nonzero[:5])}",
                      {"violations": len(nonzero)})


def check_implementation_invariance(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """W x and (W/2) x + (W/2) x receive the same attributions from every method."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    settings = AttributionSettings(steps=20, eg_samples=10)
    for trial in range(_count(20, scale)):
        W = rng.standard_normal((3, 4))
        x = rng.standard_normal((5, 4))
        baseline = rng.standard_normal((5, 4))
        pool = ReferencePool.from_features(rng.standard_normal((12, 4)))
        for method in ("gradient", "ig", "eg", "idg", "cig"):
            a = attribute(method, linear_logit_fn(W), x, baseline, pool, settings, seed=trial)
            b = attribute(method, split_linear_logit_fn(W), x, baseline, pool, settings, seed=trial)
            worst = max(worst, float(np.max(np.abs(a.attributions - b.attributions))))
    return AxiomCheck("implementation_invariance", worst <= 1e-8, f"max attribution difference {worst:.2e}",
                      {"max_difference": worst})


def check_lipschitz_bound(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    """
    |CIG_i| <= L^2 ||d|| |d_i| for linear logits; with endpoint derivatives the
    constant is 2/3 and the attributions sum to (2/3) D(x).
    """
    violations, worst_sum = 0, 0.0
    rng = np.random.default_rng(seed)
    for _ in range(_count(100, scale)):
        W = rng.standard_normal((3, 4))
        x, baseline = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        delta = (x - baseline)[0]
        bound = spectral_norm(W) ** 2 * np.linalg.norm(delta) * np.abs(delta)
        f = linear_logit_fn(W)
        interpolated = cig(f, PathSpec(x, baseline, 50))
        endpoint = cig(f, PathSpec(x, baseline, 50, "simpson"), variant="endpoint")
        violations += int(np.any(np.abs(interpolated.attributions[0]) > bound + 1e-9))
        violations += int(np.any(np.abs(endpoint.attributions[0]) > (2.0 / 3.0) * bound + 1e-9))
        objective = contrastive_objective(f, x, baseline)
        worst_sum = max(worst_sum, abs(float(np.sum(endpoint.attributions)) - (2.0 / 3.0) * objective) / max(1.0, objective))
    return AxiomCheck("lipschitz_bound", violations == 0 and worst_sum <= 1e-8,
                      f"{violations} bound violations; endpoint sum deviation from 2/3 D(x) {worst_sum:.2e}",
                      {"violations": violations, "endpoint_sum_deviation": worst_sum})


def expected_bins_1000() -> List[int]:
    top_k = list(range(1, 11)) + list(range(15, 51, 5)) + list(range(60, 101, 10)) + [150, 200, 300, 400, 500]
    thresholds = [200, 400, 600, 800, 850, 900, 950, 990]
    return sorted(set(top_k) | set(thresholds) | {1000})


def check_bin_protocol(scale: float = 1.0, seed: int = 0) -> AxiomCheck:
    bins = info_bins(1000)
    small = info_bins(5).counts == (1, 2, 3, 4, 5) and info_bins(1).counts == (1,)
    passed = list(bins.counts) == expected_bins_1000() and small
    return AxiomCheck("bin_protocol", passed, f"{len(bins)} bins for n=1000", {"bins": list(bins.counts)})


CHECKS: List[Callable[..., AxiomCheck]] = [
    check_gradient_correctness,
    check_gradient_linearity,
    check_spectral_scaling,
    check_cig_completeness,
    check_ig_completeness,
    check_linear_closed_form,
    check_sensitivity,
    check_implementation_invariance,
    check_lipschitz_bound,
    check_bin_protocol,
]


def run_battery(scale: float = 1.0, seed: int = 0) -> List[AxiomCheck]:
    """
    Run every check.

    Args:
        scale: Multiplier on the number of random trials per check
        seed: Base seed for all fixtures

    Returns:
        One AxiomCheck per check; a check that raises is reported as failed
    """
    results = []
    for check in CHECKS:
        name = check.__name__.replace("check_", "")
        try:
            result = check(scale=scale, seed=seed)
        except Exception as e:
            logger.error(f"Axiom check {name} raised: {e}", exc_info=True)
            result = AxiomCheck(name, False, f"raised {type(e).__name__}: {e}")
        logger.info(f"Axiom {result.name}: {'PASS' if result.passed else 'FAIL'} ({result.detail})")
        results.append(result)
    return results


def format_report(results: List[AxiomCheck]) -> str:
    lines = ["=" * 60, "Axiom battery", "=" * 60]
    for result in results:
        lines.append(f"{'✅ PASS' if result.passed else '❌ FAIL'}: {result.name}: {result.detail}")
    passed = sum(1 for r in results if r.passed)
    lines += ["=" * 60, f"Total: {passed}/{len(results)} checks passed", "=" * 60]
    return "\n".join(lines)


def report_json(results: List[AxiomCheck]) -> str:
    return json.dumps({"all_passed": all(r.passed for r in results),
                       "checks": [asdict(r) for r in results]}, indent=2, sort_keys=True) + "\n"
