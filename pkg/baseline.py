"""
Opposite-class reference pools and per-slide baselines.

A pool aggregates an equal number of patch rows from each of up to
``n_slides`` reference slides whose class differs from the target class.
Baselines are drawn from the pool row by row so that they match the
target bag's shape.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from autodiff import as_tensor
from errors import ContractError, EmptyBagError, ParameterError, PoolError
from storage import csv_text, write_atomic

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]


@dataclass(frozen=True, eq=False)
class ReferencePool:
    """
    Pooled opposite-class patch features (p x d) with per-row provenance.

    provenance[i] is (source slide id, row index within that slide).
    """
    features: np.ndarray
    source_slides: Tuple[str, ...]
    provenance: Tuple[Tuple[str, int], ...]
    classes: Tuple[int, ...]
    target_class: Optional[int]
    seed: Seed
    requested_slides: int = config.DEFAULT_POOL_SLIDES
    per_slide: int = 0
    with_replacement: Tuple[str, ...] = ()
    sparse_warning: bool = False

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def rows_per_slide(self) -> Dict[str, int]:
        counts: Dict[str, int] = defaultdict(int)
        for slide_id, _ in self.provenance:
            counts[slide_id] += 1
        return dict(counts)

    def describe(self) -> Dict:
        """JSON-friendly summary for run manifests."""
        return {
            "target_class": self.target_class,
            "classes": list(self.classes),
            "seed": self.seed if isinstance(self.seed, int) else list(self.seed),
            "source_slides": list(self.source_slides),
            "rows": self.size,
            "per_slide": self.per_slide,
            "requested_slides": self.requested_slides,
            "with_replacement": list(self.with_replacement),
            "sparse_warning": self.sparse_warning,
        }

    @classmethod
    def from_features(cls, features, slide_id: str = "reference", classes: Sequence[int] = (),
                      seed: Seed = 0) -> "ReferencePool":
        """Wrap an explicit feature matrix as a single-source pool."""
        features = as_tensor(features)
        if features.ndim != 2 or features.shape[0] == 0:
            raise PoolError(f"pool features must be a nonempty p x d matrix, got shape {features.shape}")
        return cls(features=features, source_slides=(slide_id,),
                   provenance=tuple((slide_id, i) for i in range(features.shape[0])),
                   classes=tuple(classes), target_class=None, seed=seed, requested_slides=1,
                   per_slide=features.shape[0])


def default_per_slide(bags: Sequence, n_slides: int) -> int:
    """ceil(median bag size / n_slides), at least 1."""
    median = float(np.median([bag.n for bag in bags]))
    return max(1, math.ceil(median / n_slides))


def _select_slides(bags: Sequence, n_slides: int, rng: np.random.Generator) -> List:
    """Pick up to n_slides bags without replacement, round-robin across classes."""
    by_class: Dict[int, List] = defaultdict(list)
    for bag in sorted(bags, key=lambda b: b.slide_id):
        by_class[bag.label].append(bag)
    queues = [[by_class[c][i] for i in rng.permutation(len(by_class[c]))] for c in sorted(by_class)]

    selected = []
    while len(selected) < n_slides and any(queues):
        for q in queues:
            if q and len(selected) < n_slides:
                selected.append(q.pop(0))
    return selected


def build_reference_pool(opposite_bags: Sequence, target_class: int,
                         n_slides: int = config.DEFAULT_POOL_SLIDES,
                         per_slide: Optional[int] = None, seed: Seed = 0) -> ReferencePool:
    """
    Build the shared baseline pool for slides of ``target_class``.

    Args:
        opposite_bags: Candidate reference FeatureBags, none of the target class
        target_class: Class whose slides will be attributed
        n_slides: Maximum number of reference slides
        per_slide: Rows sampled from each slide (default: ceil(median n / n_slides))
        seed: Seed for slide selection and row sampling

    Returns:
        ReferencePool

    Raises:
        PoolError: If no reference slides are given
        ContractError: If a reference slide belongs to the target class
    """
    if not opposite_bags:
        raise PoolError(f"no opposite-class slides available for class {target_class}")
    offending = [bag.slide_id for bag in opposite_bags if bag.label == target_class]
    if offending:
        raise ContractError(f"reference slides share the target class {target_class}: {', '.join(offending[:5])}")
    if n_slides < 1:
        raise ParameterError(f"n_slides must be >= 1, got {n_slides}")
    if per_slide is None:
        per_slide = default_per_slide(opposite_bags, n_slides)
    if per_slide < 1:
        raise ParameterError(f"per_slide must be >= 1, got {per_slide}")
    dims = {bag.d for bag in opposite_bags}
    if len(dims) != 1:
        raise PoolError(f"reference slides disagree on feature dimension: {sorted(dims)}")

    rng = np.random.default_rng(seed)
    selected = _select_slides(opposite_bags, n_slides, rng)

    blocks = []
    provenance: List[Tuple[str, int]] = []
    with_replacement = []
    for bag in selected:
        replace = bag.n < per_slide
        if replace:
            with_replacement.append(bag.slide_id)
            logger.warning(f"Slide {bag.slide_id} has {bag.n} patches < {per_slide}; sampling with replacement")
        rows = rng.choice(bag.n, size=per_slide, replace=replace)
        blocks.append(bag.features64()[rows])
        provenance.extend((bag.slide_id, int(r)) for r in rows)

    sparse = len(selected) < n_slides
    if sparse:
        logger.warning(f"Pool for class {target_class} uses {len(selected)} of {n_slides} requested slides")

    pool = ReferencePool(features=as_tensor(np.vstack(blocks)),
                         source_slides=tuple(bag.slide_id for bag in selected),
                         provenance=tuple(provenance),
                         classes=tuple(sorted({bag.label for bag in selected})),
                         target_class=target_class, seed=seed, requested_slides=n_slides,
                         per_slide=per_slide, with_replacement=tuple(with_replacement),
                         sparse_warning=sparse)
    logger.info(f"Reference pool for class {target_class}: {pool.size} rows from {len(selected)} slides")
    return pool


def sample_indices(pool: ReferencePool, n_target: int, seed: Seed) -> np.ndarray:
    """Pool row indices of a baseline for an n_target-patch bag."""
    if n_target < 1:
        raise EmptyBagError(f"cannot sample a baseline for {n_target} patches")
    if pool.size == 0:
        raise PoolError("reference pool is empty")
    return np.random.default_rng(seed).integers(0, pool.size, size=n_target)


def sample_baseline(pool: ReferencePool, n_target: int, seed: Seed) -> np.ndarray:
    """Draw n_target pool rows uniformly with replacement."""
    return as_tensor(pool.features[sample_indices(pool, n_target, seed)])


def make_baseline(strategy: str, bag, pool: Optional[ReferencePool] = None,
                  reference_bags: Optional[Sequence] = None, seed: Seed = 0) -> np.ndarray:
    """
    Baseline matrix for ``bag`` (a FeatureBag or an n x d matrix).

    ``opposite`` samples the reference pool; ``zero`` and ``mean`` are the
    common fixed baselines kept for comparison.
    """
    features = np.asarray(getattr(bag, "features", bag), dtype=np.float64)
    n, d = features.shape
    if strategy == "opposite":
        if pool is None:
            raise PoolError("the opposite-class baseline needs a reference pool")
        return sample_baseline(pool, n, seed)
    if strategy == "zero":
        return as_tensor(np.zeros((n, d)))
    if strategy == "mean":
        if not reference_bags:
            raise PoolError("the mean baseline needs reference slides")
        mean = np.mean(np.vstack([b.features64() for b in reference_bags]), axis=0)
        return as_tensor(np.tile(mean, (n, 1)))
    raise ParameterError(f"unknown baseline strategy {strategy!r}")


def pool_provenance_csv(pool: ReferencePool) -> str:
    rows = [(slide_id, row, position) for position, (slide_id, row) in enumerate(pool.provenance)]
    return csv_text(["slide_id", "row_index", "pool_position"], rows)


def write_pool_provenance(pool: ReferencePool, path: Union[str, Path]):
    write_atomic(path, pool_provenance_csv(pool).encode("utf-8"))
