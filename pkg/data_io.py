"""
Feature-bag persistence, dataset manifests, patient-level splits, and the
synthetic planted-signal dataset used for desk-scale experiments.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import config
from binfmt import RecordReader, RecordWriter
from errors import DatasetError, FormatError, ParameterError
from storage import csv_text, write_atomic

logger = logging.getLogger(__name__)

BAG_MAGIC = b"FBAG1"
BAG_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class FeatureBag:
    """One slide: n patch feature vectors (f32), grid coordinates and a label."""
    slide_id: str
    patient_id: str
    label: int
    features: np.ndarray
    coords: np.ndarray
    mask: Optional[np.ndarray] = None  # ground-truth tumor patches, synthetic data only

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        self.label = int(self.label)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DatasetError(f"{self.slide_id}: features must be n x d with n, d >= 1, got {self.features.shape}")
        if self.coords.shape != (self.features.shape[0], 2):
            raise DatasetError(f"{self.slide_id}: expected {self.features.shape[0]} coordinate pairs, got {self.coords.shape}")
        if self.label < 0:
            raise DatasetError(f"{self.slide_id}: label must be >= 0")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.features.shape[0],):
                raise DatasetError(f"{self.slide_id}: mask length {self.mask.shape} does not match n")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def features64(self) -> np.ndarray:
        """Features widened to float64 for computation."""
        return self.features.astype(np.float64)

    def tumor_patches(self) -> List[int]:
        return [] if self.mask is None else [int(i) for i in np.flatnonzero(self.mask)]

    def bitwise_equal(self, other: "FeatureBag") -> bool:
        """True if both bags have identical ids, label, and feature/coordinate bits."""
        return (self.slide_id == other.slide_id and self.patient_id == other.patient_id
                and self.label == other.label
                and self.features.tobytes() == other.features.tobytes()
                and self.coords.tobytes() == other.coords.tobytes())


def check_labels(bags: Sequence[FeatureBag], n_classes: int):
    """Raise DatasetError if any bag's label is outside ``0..n_classes-1``."""
    for bag in bags:
        if not 0 <= bag.label < n_classes:
            raise DatasetError(f"{bag.slide_id}: label {bag.label} is outside 0..{n_classes - 1}")


def encode_bag(bag: FeatureBag) -> bytes:
    """Serialize a bag to FBAG1 bytes (the mask is not part of the format)."""
    writer = RecordWriter().raw(BAG_MAGIC).pack("H", BAG_VERSION)
    writer.pack("IIH", bag.n, bag.d, bag.label)
    writer.text(bag.patient_id).text(bag.slide_id)
    writer.array(bag.coords, "i4").array(bag.features, "f4")
    return writer.getvalue()


def decode_bag(data: bytes, name: str = "bag") -> FeatureBag:
    """Parse FBAG1 bytes; raises FormatError (or ChecksumError) with byte offsets."""
    reader = RecordReader(data, name)
    reader.magic(BAG_MAGIC)
    version_offset = reader.offset
    (version,) = reader.unpack("H", "version")
    if version != BAG_VERSION:
        raise FormatError(f"{name}: unsupported version {version}", version_offset)
    n_offset = reader.offset
    n, d, label = reader.unpack("IIH", "header")
    if n < 1 or d < 1:
        raise FormatError(f"{name}: empty bag (n={n}, d={d})", n_offset)
    patient_id = reader.text("patient_id")
    slide_id = reader.text("slide_id")
    coords = reader.array("i4", (n, 2), "coordinates")
    features = reader.array("f4", (n, d), "features")
    reader.finish()
    return FeatureBag(slide_id=slide_id, patient_id=patient_id, label=label, features=features, coords=coords)


def write_bag(bag: FeatureBag, path: Union[str, Path]):
    write_atomic(path, encode_bag(bag))
    logger.debug(f"Bag written: {path} (n={bag.n}, d={bag.d})")


def read_bag(path: Union[str, Path]) -> FeatureBag:
    return decode_bag(Path(path).read_bytes(), name=str(path))


@dataclass
class SlideRecord:
    slide_id: str
    patient_id: str
    label: int
    path: str
    split: Optional[str] = None
    tumor_patches: Optional[List[int]] = None


@dataclass
class DatasetManifest:
    """Class names, slide records, split assignment and generation seed."""
    class_names: List[str]
    slides: List[SlideRecord]
    seed: Optional[int] = None

    def check(self):
        """Validate labels and the patient-level separation of splits."""
        seen_ids = set()
        patient_split: Dict[str, Optional[str]] = {}
        for record in self.slides:
            if record.slide_id in seen_ids:
                raise DatasetError(f"duplicate slide id {record.slide_id}")
            seen_ids.add(record.slide_id)
            if not 0 <= record.label < len(self.class_names):
                raise DatasetError(f"{record.slide_id}: label {record.label} outside {len(self.class_names)} classes")
            if record.split is not None and record.split not in SPLITS:
                raise DatasetError(f"{record.slide_id}: unknown split {record.split!r}")
            previous = patient_split.setdefault(record.patient_id, record.split)
            if previous != record.split:
                raise DatasetError(f"patient {record.patient_id} appears in splits {previous!r} and {record.split!r}")

    def records(self, split: Optional[str] = None) -> List[SlideRecord]:
        return [r for r in self.slides if split is None or r.split == split]

    def to_dict(self) -> Dict:
        return {
            "format": "milcig-manifest",
            "version": 1,
            "class_names": list(self.class_names),
            "seed": self.seed,
            "slides": [vars(r) for r in self.slides],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetManifest":
        try:
            slides = [SlideRecord(**record) for record in data["slides"]]
            manifest = cls(class_names=list(data["class_names"]), slides=slides, seed=data.get("seed"))
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed manifest: {e}")
        manifest.check()
        return manifest


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]):
    manifest.check()
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    write_atomic(path, text.encode("utf-8"))


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON: {e}")
    return DatasetManifest.from_dict(data)


def split(manifest: DatasetManifest, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """
    Assign train/val/test by patient, never by slide.

    Patients are sorted, shuffled with ``seed`` and partitioned by largest
    remainder; every slide inherits its patient's split.

    Raises:
        ParameterError: If a ratio is negative, there are not three ratios,
            or they do not sum to 1 within 1e-9
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != len(SPLITS):
        raise ParameterError(f"expected {len(SPLITS)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise ParameterError(f"ratios must be >= 0, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must sum to 1, got {sum(ratios)}")

    patients = sorted({r.patient_id for r in manifest.slides})
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]

    exact = [r * len(patients) for r in ratios]
    counts = [math.floor(e + 1e-9) for e in exact]
    remainders = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in remainders[:len(patients) - sum(counts)]:
        counts[i] += 1

    assignment: Dict[str, str] = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for patient in shuffled[start:start + count]:
            assignment[patient] = name
        start += count

    slides = [replace(r, split=assignment[r.patient_id]) for r in manifest.slides]
    result = replace(manifest, slides=slides)
    result.check()
    logger.info(f"Split {len(patients)} patients into " + ", ".join(f"{n}={c}" for n, c in zip(SPLITS, counts)))
    return result


@dataclass(frozen=True)
class SyntheticConfig:
    """
    Planted-signal dataset settings.

    Negative (class 0) patches are N(background_mean, background_std^2 I);
    tumor patches of class c >= 1 add a class-specific shift vector of
    Euclidean norm shift_magnitude.
    """
    slides_per_class: int = 100
    patches_per_slide: Tuple[int, int] = (200, 200)
    feature_dim: int = 32
    background_mean: float = 0.0
    background_std: float = 0.5
    shift_magnitude: float = 4.0
    tumor_fraction: Tuple[float, float] = (0.05, 0.20)
    n_classes: int = 2
    slides_per_patient: int = 1
    split_ratios: Tuple[float, float, float] = (0.5, 0.0, 0.5)
    seed: int = config.DEFAULT_SEED

    def validate(self) -> "SyntheticConfig":
        lo, hi = self.tumor_fraction
        if not (0 < lo <= hi <= 1):
            raise ParameterError(f"tumor_fraction must satisfy 0 < lo <= hi <= 1, got {self.tumor_fraction}")
        if self.feature_dim < 2:
            raise ParameterError(f"feature_dim must be >= 2, got {self.feature_dim}")
        p_lo, p_hi = self.patches_per_slide
        if not 1 <= p_lo <= p_hi:
            raise ParameterError(f"patches_per_slide must satisfy 1 <= lo <= hi, got {self.patches_per_slide}")
        if self.slides_per_class < 1 or self.slides_per_patient < 1:
            raise ParameterError("slides_per_class and slides_per_patient must be >= 1")
        if self.n_classes < 2:
            raise ParameterError(f"n_classes must be >= 2, got {self.n_classes}")
        if not self.background_std > 0:
            raise ParameterError(f"background_std must be > 0, got {self.background_std}")
        return self


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    bags: Dict[str, FeatureBag] = field(default_factory=dict)
    shifts: Optional[np.ndarray] = None  # (n_classes - 1) x d


def grid_coords(n: int) -> np.ndarray:
    """Row-major coordinates of n patches on the smallest square grid."""
    side = math.ceil(math.sqrt(n))
    index = np.arange(n)
    return np.stack([index % side, index // side], axis=1).astype(np.int32)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """
    Generate a dataset whose positive slides contain a planted cluster of
    shifted patches; the cluster is recorded as the ground-truth mask.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    directions = rng.standard_normal((cfg.n_classes - 1, cfg.feature_dim))
    shifts = cfg.shift_magnitude * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    class_names = ["normal"] + [f"tumor_{c}" if cfg.n_classes > 2 else "tumor" for c in range(1, cfg.n_classes)]
    records: List[SlideRecord] = []
    bags: Dict[str, FeatureBag] = {}
    for label in range(cfg.n_classes):
        for i in range(cfg.slides_per_class):
            slide_id = f"c{label}_s{i:04d}"
            patient_id = f"c{label}_p{i // cfg.slides_per_patient:04d}"
            n = int(rng.integers(cfg.patches_per_slide[0], cfg.patches_per_slide[1] + 1))
            features = rng.normal(cfg.background_mean, cfg.background_std, size=(n, cfg.feature_dim))
            coords = grid_coords(n)
            mask = np.zeros(n, dtype=bool)
            if label > 0:
                fraction = rng.uniform(*cfg.tumor_fraction)
                count = min(n, max(1, int(round(fraction * n))))
                center = coords[int(rng.integers(n))]
                distance = np.sum((coords - center) ** 2, axis=1)
                mask[np.lexsort((np.arange(n), distance))[:count]] = True
                features[mask] += shifts[label - 1]
            bag = FeatureBag(slide_id=slide_id, patient_id=patient_id, label=label,
                             features=features, coords=coords, mask=mask)
            bags[slide_id] = bag
            records.append(SlideRecord(slide_id=slide_id, patient_id=patient_id, label=label,
                                       path=f"{config.BAGS_DIR}/{slide_id}.fbag",
                                       tumor_patches=bag.tumor_patches()))

    manifest = split(DatasetManifest(class_names=class_names, slides=records, seed=cfg.seed),
                     cfg.split_ratios, cfg.seed)
    logger.info(f"Generated {len(bags)} synthetic slides ({cfg.n_classes} classes, d={cfg.feature_dim})")
    return SyntheticDataset(manifest=manifest, bags=bags, shifts=shifts)


def write_dataset(dataset: SyntheticDataset, root: Union[str, Path]):
    root = Path(root)
    for record in dataset.manifest.slides:
        write_bag(dataset.bags[record.slide_id], root / record.path)
    write_manifest(dataset.manifest, root / config.MANIFEST_FILE)
    logger.info(f"Dataset written to {root} ({len(dataset.manifest.slides)} slides)")


def load_dataset(root: Union[str, Path]) -> Tuple[DatasetManifest, Dict[str, FeatureBag]]:
    """Read the manifest and every bag, attaching ground-truth masks when present."""
    root = Path(root)
    manifest = read_manifest(root / config.MANIFEST_FILE)
    bags = {}
    for record in manifest.slides:
        bag = read_bag(root / record.path)
        if bag.slide_id != record.slide_id or bag.label != record.label:
            raise DatasetError(f"{record.path} does not match its manifest record")
        if record.tumor_patches is not None:
            mask = np.zeros(bag.n, dtype=bool)
            mask[record.tumor_patches] = True
            bag.mask = mask
        bags[record.slide_id] = bag
    return manifest, bags


def load_split(manifest: DatasetManifest, bags: Mapping[str, FeatureBag], split_name: str) -> List[FeatureBag]:
    """Bags of one split, ordered by slide id."""
    return [bags[r.slide_id] for r in sorted(manifest.records(split_name), key=lambda r: r.slide_id)]


def _parse_coord(text: str, where: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"{where}: coordinate {text!r} is not a number") from None
    if not math.isfinite(value) or not value.is_integer():
        raise DatasetError(f"{where}: coordinate {text!r} is not an integer")
    if not -2**31 <= value < 2**31:
        raise DatasetError(f"{where}: coordinate {text!r} does not fit in 32 bits")
    return int(value)


def import_csv(path: Union[str, Path], labels: Mapping[str, int],
               patients: Optional[Mapping[str, str]] = None) -> List[FeatureBag]:
    """
    Read bags from a CSV with header ``slide_id,x,y,f0,...,f{d-1}``.

    Args:
        path: CSV file
        labels: slide_id -> class index
        patients: slide_id -> patient id (default: the slide id)

    Returns:
        Bags ordered by first appearance in the file

    Raises:
        DatasetError: On a bad header, a malformed row, a non-integral
            coordinate or a slide without a label
    """
    coords: Dict[str, List[Tuple[int, int]]] = {}
    features: Dict[str, List[List[float]]] = {}
    try:
        with open(path, newline='', encoding='utf-8') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[:3] != ["slide_id", "x", "y"] or len(header) < 4:
                raise DatasetError(f"{path}: expected header slide_id,x,y,f0,...")
            for line_no, row in enumerate(reader, start=2):
                where = f"{path}:{line_no}"
                if len(row) != len(header):
                    raise DatasetError(f"{where}: expected {len(header)} columns, got {len(row)}")
                try:
                    values = [float(v) for v in row[3:]]
                except ValueError as e:
                    raise DatasetError(f"{where}: {e}") from None
                coords.setdefault(row[0], []).append((_parse_coord(row[1], where), _parse_coord(row[2], where)))
                features.setdefault(row[0], []).append(values)
    except (csv.Error, UnicodeDecodeError) as e:
        raise DatasetError(f"{path}: {e}") from None

    bags = []
    for slide_id, slide_coords in coords.items():
        if slide_id not in labels:
            raise DatasetError(f"{path}: no label given for slide {slide_id}")
        bags.append(FeatureBag(slide_id=slide_id, patient_id=(patients or {}).get(slide_id, slide_id),
                               label=labels[slide_id], features=np.array(features[slide_id], dtype=np.float64),
                               coords=np.array(slide_coords, dtype=np.int64)))
    logger.info(f"Imported {len(bags)} bags from {path}")
    return bags


def export_csv(bags: Sequence[FeatureBag], path: Union[str, Path]):
    """Write bags in the ``slide_id,x,y,f0,...`` layout read by import_csv."""
    if not bags:
        raise DatasetError("nothing to export")
    d = bags[0].d
    if any(bag.d != d for bag in bags):
        raise DatasetError("bags disagree on feature dimension")
    rows = ([bag.slide_id, int(x), int(y)] + [repr(float(v)) for v in row]
            for bag in bags for (x, y), row in zip(bag.coords, bag.features))
    write_atomic(path, csv_text(["slide_id", "x", "y"] + [f"f{j}" for j in range(d)], rows).encode("utf-8"))
