"""
Information-curve evaluation of patch saliency for MIL classifiers.

Each evaluated slide starts as a bag of control features sampled from
opposite-class slides. Target patches are revealed in saliency order at the
counts listed by ``info_bins``. MIL-AIC records whether the prediction is
correct at each count; MIL-SIC records the softmax confidence of the true
class. Curves are summarised by the trapezoidal area over the ordinal bin
index.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from attribution import AttributionSettings, Method, attribute
from baseline import ReferencePool, build_reference_pool, make_baseline, sample_baseline
from data_io import check_labels
from errors import ConfigError, ContractError, EvaluationError, InputShapeError, ParameterError
from mil_model import MilModel, predict
from run_history import RunHistory
from scheduler import SlideScheduler
from storage import csv_text

logger = logging.getLogger(__name__)

AIC = "MIL-AIC"
SIC = "MIL-SIC"

# Independent random streams derived from one per-slide seed
BASELINE_STREAM = 0
CONTROL_STREAM = 1
EG_STREAM = 2
RANDOM_STREAM = 3


@dataclass(frozen=True)
class InfoBins:
    """Patch counts at which curves are sampled, with the list each came from."""
    counts: Tuple[int, ...]
    sources: Tuple[str, ...]  # top-k | threshold | top-k+threshold | full

    def __len__(self) -> int:
        return len(self.counts)

    def to_csv(self) -> str:
        rows = [(i, k, s) for i, (k, s) in enumerate(zip(self.counts, self.sources))]
        return csv_text(["bin", "k", "source"], rows)


@dataclass(frozen=True)
class EvalCurve:
    slide_id: str
    method: str
    kind: str
    bins: InfoBins
    values: Tuple[float, ...]
    auc: float


def info_bins(n: int, top_k: Sequence[int] = config.TOP_K_BINS,
              percentiles: Sequence[int] = config.THRESHOLD_PERCENTILES) -> InfoBins:
    """
    Merge the top-k counts with ceil(p% of n) for each percentile.

    Counts above n are dropped and n itself is always the last bin.
    """
    if n < 1:
        raise ParameterError(f"patch count must be >= 1, got {n}")
    sources: Dict[int, set] = {}
    for k in top_k:
        if k <= n:
            sources.setdefault(int(k), set()).add("top-k")
    for p in percentiles:
        k = (int(p) * n + 99) // 100  # ceil(p * n / 100) in integers
        if 1 <= k <= n:
            sources.setdefault(k, set()).add("threshold")
    sources.setdefault(n, {"full"})
    counts = tuple(sorted(sources))
    return InfoBins(counts=counts, sources=tuple("+".join(sorted(sources[k], reverse=True)) for k in counts))


def ranking(saliency) -> np.ndarray:
    """Patch indices by descending saliency, ties broken by ascending index."""
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.ndim != 1:
        raise InputShapeError(f"saliency must be a vector, got shape {saliency.shape}")
    if not np.all(np.isfinite(saliency)):
        raise ParameterError("saliency contains non-finite values")
    return np.lexsort((np.arange(saliency.size), -saliency))


def reveal(target, control, order, k: int) -> np.ndarray:
    """
    Control bag with the target's rows restored at the top-k ranked positions.

    Raises:
        ParameterError: If k is outside 0..n
        InputShapeError: If control and target shapes differ
        ContractError: If order is not a permutation of 0..n-1
    """
    target = np.asarray(getattr(target, "features", target), dtype=np.float64)
    control = np.asarray(control, dtype=np.float64)
    n = target.shape[0]
    if control.shape != target.shape:
        raise InputShapeError(f"control {control.shape} does not match target {target.shape}")
    if not 0 <= k <= n:
        raise ParameterError(f"k must be within 0..{n}, got {k}")
    order = np.asarray(order)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ContractError("order must be a permutation of the patch indices")
    bag = control.copy()
    shown = order[:k]
    bag[shown] = target[shown]
    return bag


def auc(values: Sequence[float]) -> float:
    """Trapezoidal area over unit-spaced bins, normalized by (#bins - 1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("auc needs at least one value")
    if values.size == 1:
        return float(values[0])
    return float((np.sum(values) - 0.5 * (values[0] + values[-1])) / (values.size - 1))


def information_curves(model: MilModel, target, control, saliency, bins: Optional[InfoBins] = None,
                       method: str = "", slide_id: Optional[str] = None) -> Tuple[EvalCurve, EvalCurve]:
    """MIL-AIC and MIL-SIC from one pass over the bins."""
    features = np.asarray(getattr(target, "features", target), dtype=np.float64)
    label = getattr(target, "label", None)
    if label is None:
        raise ContractError("curves need a target with a ground-truth label")
    slide_id = slide_id or getattr(target, "slide_id", "")
    n = features.shape[0]
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != (n,):
        raise InputShapeError(f"saliency length {saliency.shape} does not match {n} patches")
    bins = bins or info_bins(n)
    if bins.counts[-1] > n:
        raise ParameterError(f"bins reach {bins.counts[-1]} but the bag has {n} patches")

    order = ranking(saliency)
    correct, confidence = [], []
    for k in bins.counts:
        predicted, probabilities = predict(model, reveal(features, control, order, k))
        correct.append(1.0 if predicted == label else 0.0)
        confidence.append(float(probabilities[label]))
    return (EvalCurve(slide_id, method, AIC, bins, tuple(correct), auc(correct)),
            EvalCurve(slide_id, method, SIC, bins, tuple(confidence), auc(confidence)))


def mil_aic(model: MilModel, target, control, saliency, bins: Optional[InfoBins] = None,
            method: str = "") -> EvalCurve:
    return information_curves(model, target, control, saliency, bins, method)[0]


def mil_sic(model: MilModel, target, control, saliency, bins: Optional[InfoBins] = None,
            method: str = "") -> EvalCurve:
    return information_curves(model, target, control, saliency, bins, method)[1]


def random_saliency(n: int, seed, mode: str = "uniform") -> np.ndarray:
    """
    Saliency for the random comparator.

    ``uniform`` draws i.i.d. scores in (0, 1); ``constant`` gives every patch
    the same score, so ranking falls back to patch order.
    """
    if mode == "constant":
        return np.full(n, 0.5)
    if mode != "uniform":
        raise ParameterError(f"unknown random saliency mode {mode!r}")
    values = np.random.default_rng(seed).random(n)
    values[values == 0.0] = np.finfo(np.float64).tiny
    return values


def oracle_saliency(mask) -> np.ndarray:
    """Ground-truth tumor mask as saliency."""
    if mask is None:
        raise ContractError("oracle saliency needs a ground-truth mask")
    return np.asarray(mask, dtype=np.float64)


def slide_seed(base_seed: int, slide_id: str) -> int:
    """Base seed plus a stable hash of the slide id (mod 2^31)."""
    digest = hashlib.sha256(slide_id.encode("utf-8")).digest()
    return int(base_seed) + int.from_bytes(digest[:8], "big") % (2 ** 31)


@dataclass(frozen=True)
class EvaluationSettings:
    methods: Tuple[str, ...] = config.DEFAULT_METHODS
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    baseline_strategy: str = "opposite"
    pool_slides: int = config.DEFAULT_POOL_SLIDES
    pool_per_slide: Optional[int] = None
    top_k: Tuple[int, ...] = config.TOP_K_BINS
    percentiles: Tuple[int, ...] = config.THRESHOLD_PERCENTILES
    random_mode: str = "uniform"
    seeds: Tuple[int, ...] = (config.DEFAULT_SEED,)
    eval_classes: Optional[Tuple[int, ...]] = None
    threads: int = 1

    @classmethod
    def from_run_config(cls, cfg) -> "EvaluationSettings":
        return cls(methods=tuple(cfg.methods), attribution=AttributionSettings.from_run_config(cfg),
                   baseline_strategy=cfg.baseline_strategy, pool_slides=cfg.pool_slides,
                   pool_per_slide=cfg.pool_per_slide, top_k=tuple(cfg.top_k_bins),
                   percentiles=tuple(cfg.bin_percentiles), random_mode=cfg.random_mode,
                   seeds=tuple(cfg.seeds),
                   eval_classes=None if cfg.eval_classes is None else tuple(cfg.eval_classes),
                   threads=config.get_thread_count(cfg.threads))


@dataclass
class EvaluationReport:
    """Per-(method, class) summary rows, every curve, and the run manifest."""
    rows: List[Dict[str, Any]]
    curves: List[EvalCurve]
    manifest: Dict[str, Any]

    def curves_csv(self) -> str:
        rows = [(curve.slide_id, curve.method, curve.kind, i, k, repr(value))
                for curve in self.curves
                for i, (k, value) in enumerate(zip(curve.bins.counts, curve.values))]
        return csv_text(["slide_id", "method", "kind", "bin", "k", "value"], rows)

    def summary_json(self) -> str:
        return json.dumps({"rows": self.rows, "manifest": self.manifest}, indent=2, sort_keys=True) + "\n"

    def bins_csv(self) -> str:
        """Bins of every distinct bag size, tagged with that size."""
        seen = {}
        for curve in self.curves:
            seen.setdefault(curve.bins.counts[-1], curve.bins)
        rows = [(n, i, k, s) for n in sorted(seen)
                for i, (k, s) in enumerate(zip(seen[n].counts, seen[n].sources))]
        return csv_text(["n", "bin", "k", "source"], rows)


def render_table(rows: Sequence[Dict[str, Any]], class_names: Optional[Sequence[str]] = None) -> str:
    """Aligned plain-text table: one row per method, mean +- std per class and metric."""
    classes = sorted({row["class"] for row in rows})
    methods = list(dict.fromkeys(row["method"] for row in rows))
    by_key = {(row["method"], row["class"]): row for row in rows}

    def label(c):
        return class_names[c] if class_names and c < len(class_names) else f"class {c}"

    header = ["Method"] + [f"{label(c)} {kind}" for c in classes for kind in (AIC, SIC)]
    body = []
    for method in methods:
        cells = [method]
        for c in classes:
            row = by_key.get((method, c))
            for kind in ("aic", "sic"):
                cells.append("-" if row is None else f"{row[kind + '_mean']:.3f} ± {row[kind + '_std']:.3f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


class Evaluator:
    """
    Evaluates several saliency methods on the same slides.

    Per (slide, seed) the baseline and the control features are drawn once
    and shared by every method. Pools are built once per (class, seed)
    before any worker starts; workers only read them.
    """

    def __init__(self, model: MilModel, reference_bags: Sequence, settings: EvaluationSettings,
                 history: Optional[RunHistory] = None):
        unknown = [name for name in settings.methods if name not in config.METHOD_NAMES]
        if unknown:
            raise ConfigError("methods", f"unknown method {unknown[0]!r}")
        self.model = model
        self.reference_bags = list(reference_bags)
        check_labels(self.reference_bags, model.n_classes)
        self.settings = settings
        self.history = history or RunHistory()
        self.pools: Dict[Tuple[int, int], ReferencePool] = {}

    def eligible(self, bags: Sequence) -> List:
        classes = self.settings.eval_classes
        if classes is None:
            classes = tuple(range(1, self.model.n_classes))
        return sorted((bag for bag in bags if bag.label in classes), key=lambda b: b.slide_id)

    def pool_for(self, target_class: int, seed: int) -> ReferencePool:
        key = (target_class, seed)
        if key not in self.pools:
            opposite = [bag for bag in self.reference_bags if bag.label != target_class]
            self.pools[key] = build_reference_pool(opposite, target_class, self.settings.pool_slides,
                                                   self.settings.pool_per_slide, seed)
        return self.pools[key]

    def saliency(self, method: str, bag, baseline, pool: ReferencePool, seed: int) -> np.ndarray:
        if method == Method.RANDOM.value:
            return random_saliency(bag.n, (seed, RANDOM_STREAM), self.settings.random_mode)
        if method == Method.ORACLE.value:
            return oracle_saliency(bag.mask)
        result = attribute(method, self.model, bag.features64(), baseline=baseline, pool=pool,
                           settings=self.settings.attribution, seed=(seed, EG_STREAM))
        return result.saliency

    def evaluate_slide(self, bag, base_seed: int) -> Dict[str, Any]:
        """All methods' curves for one slide under one base seed."""
        seed = slide_seed(base_seed, bag.slide_id)
        pool = self.pools[(bag.label, base_seed)]
        baseline = make_baseline(self.settings.baseline_strategy, bag, pool, self.reference_bags,
                                 seed=(seed, BASELINE_STREAM))
        control = sample_baseline(pool, bag.n, (seed, CONTROL_STREAM))
        bins = info_bins(bag.n, self.settings.top_k, self.settings.percentiles)
        curves = []
        for method in self.settings.methods:
            saliency = self.saliency(method, bag, baseline, pool, seed)
            curves.extend(information_curves(self.model, bag, control, saliency, bins, method=method))
        return {"slide_id": bag.slide_id, "label": bag.label, "seed": seed, "curves": curves}

    def run(self, bags: Sequence) -> EvaluationReport:
        """
        Evaluate every eligible slide under every seed.

        Raises:
            DatasetError: If a label is outside the model's classes
            EvaluationError: If no slide is eligible or any slide job fails
        """
        check_labels(bags, self.model.n_classes)
        eligible = self.eligible(bags)
        if not eligible:
            raise EvaluationError("no slides of the evaluated classes in this split")
        for base_seed in self.settings.seeds:
            for target_class in sorted({bag.label for bag in eligible}):
                self.pool_for(target_class, base_seed)

        scheduler = SlideScheduler(self.settings.threads, self.history)
        for base_seed in self.settings.seeds:
            for bag in eligible:
                scheduler.submit(f"{base_seed:010d}/{bag.slide_id}",
                                 lambda bag=bag, s=base_seed: self.evaluate_slide(bag, s))
        messages = scheduler.run()
        failed = [m for m in messages if m["error"]]
        if failed:
            raise EvaluationError(f"slide {failed[0]['key'].split('/', 1)[1]} failed: {failed[0]['error']}")

        outcomes = [m["result"] for m in messages]
        curves = [curve for outcome in outcomes for curve in outcome["curves"]]
        report = EvaluationReport(rows=summarize(curves, {o["slide_id"]: o["label"] for o in outcomes}),
                                  curves=curves, manifest=self._manifest(outcomes))
        logger.info(f"Evaluated {len(eligible)} slides x {len(self.settings.seeds)} seeds "
                    f"for methods {', '.join(self.settings.methods)}")
        return report

    def _manifest(self, outcomes: List[Dict[str, Any]]) -> Dict[str, Any]:
        return {
            "methods": list(self.settings.methods),
            "seeds": list(self.settings.seeds),
            "slide_seeds": [[o["slide_id"], o["seed"]] for o in outcomes],
            "steps": self.settings.attribution.steps,
            "quadrature": self.settings.attribution.rule,
            "cig_variant": self.settings.attribution.cig_variant,
            "eg_samples": self.settings.attribution.eg_samples,
            "baseline_strategy": self.settings.baseline_strategy,
            "random_mode": self.settings.random_mode,
            "top_k_bins": list(self.settings.top_k),
            "bin_percentiles": list(self.settings.percentiles),
            "pools": {f"class{c}@{s}": pool.describe() for (c, s), pool in sorted(self.pools.items())},
            "jobs": self.history.get_statistics(),
        }


def summarize(curves: Sequence[EvalCurve], labels: Dict[str, int]) -> List[Dict[str, Any]]:
    """Mean and population std of curve AUCs per (method, class)."""
    groups: Dict[Tuple[str, int], Dict[str, List[float]]] = {}
    for curve in curves:
        group = groups.setdefault((curve.method, labels[curve.slide_id]), {AIC: [], SIC: []})
        group[curve.kind].append(curve.auc)
    order = {m: i for i, m in enumerate(dict.fromkeys(c.method for c in curves))}
    rows = []
    for (method, label), values in sorted(groups.items(), key=lambda item: (order[item[0][0]], item[0][1])):
        aic = np.asarray(values[AIC])
        sic = np.asarray(values[SIC])
        rows.append({
            "method": method,
            "class": label,
            "count": int(aic.size),
            "aic_mean": float(np.mean(aic)),
            "aic_std": float(np.std(aic)),
            "sic_mean": float(np.mean(sic)),
            "sic_std": float(np.std(sic)),
        })
    return rows


def evaluate_method(bags: Sequence, model: MilModel, reference_bags: Sequence,
                    settings: Optional[EvaluationSettings] = None, methods: Optional[Sequence[str]] = None,
                    history: Optional[RunHistory] = None) -> EvaluationReport:
    """
    Evaluate saliency methods on one dataset split.

    Args:
        bags: Slides of the split to evaluate (filtered to the evaluated classes)
        model: Trained classifier
        reference_bags: Slides the opposite-class pools are drawn from
        settings: Evaluation settings
        methods: Overrides settings.methods

    Returns:
        EvaluationReport with per-class mean +- std of MIL-AIC and MIL-SIC
    """
    settings = settings or EvaluationSettings()
    if methods is not None:
        settings = replace(settings, methods=tuple(methods))
    return Evaluator(model, reference_bags, settings, history).run(bags)
