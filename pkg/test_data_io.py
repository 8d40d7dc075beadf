"""
Tests for FBAG1 bags, manifests, patient-level splits and the synthetic dataset.
"""

import csv

import numpy as np
import pytest

from data_io import (DatasetManifest, FeatureBag, SlideRecord, SyntheticConfig, decode_bag, encode_bag,
                     export_csv, generate_synthetic, grid_coords, import_csv, load_dataset, load_split,
                     read_bag, read_manifest, split, write_bag, write_dataset, write_manifest)
from errors import ChecksumError, DatasetError, FormatError, ParameterError


def make_bag(n=5, d=3, slide_id="s1", label=1, seed=0):
    features = np.random.default_rng(seed).standard_normal((n, d))
    return FeatureBag(slide_id=slide_id, patient_id="p1", label=label, features=features, coords=grid_coords(n))


def small_config(**changes):
    values = dict(slides_per_class=6, patches_per_slide=(10, 16), feature_dim=4, seed=5)
    values.update(changes)
    return SyntheticConfig(**values)


def test_bag_file_round_trip(tmp_path):
    bag = make_bag()
    path = tmp_path / "bags" / "s1.fbag"
    write_bag(bag, path)
    assert read_bag(path).bitwise_equal(bag)


def test_bag_rejects_bad_shapes():
    with pytest.raises(DatasetError):
        FeatureBag("s", "p", 0, np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(DatasetError):
        FeatureBag("s", "p", 0, np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(DatasetError):
        FeatureBag("s", "p", 0, np.zeros((3, 2)), np.zeros((3, 2)), mask=[True])


def test_bag_decode_errors_carry_offsets():
    data = encode_bag(make_bag())
    with pytest.raises(FormatError) as info:
        decode_bag(b"XBAG1" + data[5:])
    assert info.value.offset == 0

    with pytest.raises(FormatError) as info:
        decode_bag(data[:30])
    assert info.value.offset is not None

    corrupted = bytearray(data)
    corrupted[-8] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_bag(bytes(corrupted))


def test_features_are_stored_as_float32():
    bag = make_bag()
    assert bag.features.dtype == np.float32
    assert bag.features64().dtype == np.float64


def test_manifest_round_trip(tmp_path):
    records = [SlideRecord("a", "p1", 0, "bags/a.fbag", "train"),
               SlideRecord("b", "p2", 1, "bags/b.fbag", "test", tumor_patches=[0, 2])]
    manifest = DatasetManifest(class_names=["normal", "tumor"], slides=records, seed=3)
    write_manifest(manifest, tmp_path / "manifest.json")
    loaded = read_manifest(tmp_path / "manifest.json")
    assert loaded == manifest


def test_manifest_check():
    with pytest.raises(DatasetError):
        DatasetManifest(["a"], [SlideRecord("x", "p", 0, "x"), SlideRecord("x", "q", 0, "y")]).check()
    with pytest.raises(DatasetError):
        DatasetManifest(["a"], [SlideRecord("x", "p", 1, "x")]).check()
    with pytest.raises(DatasetError):
        DatasetManifest(["a"], [SlideRecord("x", "p", 0, "x", "train"),
                                SlideRecord("y", "p", 0, "y", "test")]).check()


def test_split_is_by_patient():
    records = [SlideRecord(f"s{i}", f"p{i // 3}", i % 2, f"s{i}") for i in range(30)]
    result = split(DatasetManifest(["a", "b"], records), (0.6, 0.2, 0.2), seed=4)
    by_patient = {}
    for record in result.slides:
        by_patient.setdefault(record.patient_id, set()).add(record.split)
    assert all(len(splits) == 1 for splits in by_patient.values())
    counts = {name: sum(1 for s in by_patient.values() if name in s) for name in ("train", "val", "test")}
    assert counts == {"train": 6, "val": 2, "test": 2}


def test_split_is_deterministic():
    records = [SlideRecord(f"s{i}", f"p{i}", 0, f"s{i}") for i in range(11)]
    manifest = DatasetManifest(["a"], records)
    assert split(manifest, seed=1) == split(manifest, seed=1)


def test_split_ratio_validation():
    manifest = DatasetManifest(["a"], [SlideRecord("s", "p", 0, "s")])
    with pytest.raises(ParameterError):
        split(manifest, (0.5, 0.5))
    with pytest.raises(ParameterError):
        split(manifest, (1.2, -0.1, -0.1))
    with pytest.raises(ParameterError):
        split(manifest, (0.5, 0.2, 0.2))


def test_synthetic_dataset_structure():
    dataset = generate_synthetic(small_config())
    assert len(dataset.bags) == 12
    assert dataset.manifest.class_names == ["normal", "tumor"]
    for bag in dataset.bags.values():
        assert 10 <= bag.n <= 16
        if bag.label == 0:
            assert not bag.mask.any()
        else:
            assert 1 <= bag.mask.sum() <= bag.n
    assert np.linalg.norm(dataset.shifts[0]) == pytest.approx(4.0)


def test_synthetic_tumor_patches_carry_the_shift():
    cfg = small_config(slides_per_class=4, patches_per_slide=(100, 100), background_std=0.1)
    dataset = generate_synthetic(cfg)
    shift = dataset.shifts[0]
    for bag in dataset.bags.values():
        if bag.label == 1:
            tumor = bag.features64()[bag.mask].mean(axis=0)
            normal = bag.features64()[~bag.mask].mean(axis=0)
            assert np.linalg.norm(tumor - normal - shift) < 0.5


def test_synthetic_is_seeded():
    a = generate_synthetic(small_config())
    b = generate_synthetic(small_config())
    assert all(a.bags[k].bitwise_equal(b.bags[k]) for k in a.bags)
    c = generate_synthetic(small_config(seed=6))
    assert not all(a.bags[k].bitwise_equal(c.bags[k]) for k in a.bags)


def test_synthetic_validation():
    with pytest.raises(ParameterError):
        small_config(tumor_fraction=(0.5, 0.2)).validate()
    with pytest.raises(ParameterError):
        small_config(n_classes=1).validate()


def test_multiclass_names():
    dataset = generate_synthetic(small_config(n_classes=3, slides_per_class=2))
    assert dataset.manifest.class_names == ["normal", "tumor_1", "tumor_2"]
    assert dataset.shifts.shape == (2, 4)


def test_dataset_round_trip(tmp_path):
    dataset = generate_synthetic(small_config())
    write_dataset(dataset, tmp_path)
    manifest, bags = load_dataset(tmp_path)
    assert manifest == dataset.manifest
    for slide_id, bag in dataset.bags.items():
        assert bags[slide_id].bitwise_equal(bag)
        np.testing.assert_array_equal(bags[slide_id].mask, bag.mask)
    train = load_split(manifest, bags, "train")
    assert [b.slide_id for b in train] == sorted(b.slide_id for b in train)
    assert len(train) + len(load_split(manifest, bags, "test")) == 12


def test_csv_round_trip(tmp_path):
    bags = [make_bag(slide_id="a", label=0, seed=1), make_bag(n=3, slide_id="b", seed=2)]
    export_csv(bags, tmp_path / "bags.csv")
    imported = import_csv(tmp_path / "bags.csv", labels={"a": 0, "b": 1}, patients={"a": "p1", "b": "p1"})
    assert [b.slide_id for b in imported] == ["a", "b"]
    for original, loaded in zip(bags, imported):
        assert loaded.bitwise_equal(original)


def test_csv_import_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("slide,x,y,f0\n")
    with pytest.raises(DatasetError):
        import_csv(path, labels={})
    path.write_text("slide_id,x,y,f0\na,0,0,1.0\n")
    with pytest.raises(DatasetError):
        import_csv(path, labels={})


ID_ALPHABET = list("abcXYZ019_-.:/ ") + ["é", "ß", "Ω", "中", "組", "🧫", "🔬"]


def random_id(rng):
    return "".join(rng.choice(ID_ALPHABET, size=int(rng.integers(1, 13))))


def test_bag_codec_round_trips_random_bags():
    rng = np.random.default_rng(20240611)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        d = int(rng.integers(1, 7))
        features = rng.standard_normal((n, d)) * 10.0 ** rng.integers(-3, 4)
        coords = rng.integers(-2**31, 2**31, size=(n, 2))
        bag = FeatureBag(slide_id=random_id(rng), patient_id=random_id(rng), label=int(rng.integers(0, 2**16)),
                         features=features, coords=coords)
        decoded = decode_bag(encode_bag(bag))
        assert decoded.bitwise_equal(bag)
        assert (decoded.n, decoded.d) == (n, d)


def test_synthetic_tumor_count_is_exact():
    cfg = small_config(slides_per_class=5, patches_per_slide=(100, 100), tumor_fraction=(0.05, 0.05))
    dataset = generate_synthetic(cfg)
    for bag in dataset.bags.values():
        assert bag.mask.sum() == (5 if bag.label == 1 else 0)


def test_linear_classifier_separates_synthetic_patches():
    dataset = generate_synthetic(SyntheticConfig(slides_per_class=10, patches_per_slide=(100, 100)))
    features = np.concatenate([bag.features64() for bag in dataset.bags.values()])
    targets = np.concatenate([bag.mask for bag in dataset.bags.values()]).astype(np.float64)
    design = np.hstack([features, np.ones((len(features), 1))])
    weights, *_ = np.linalg.lstsq(design, targets, rcond=None)
    accuracy = np.mean((design @ weights > 0.5) == (targets > 0.5))
    assert accuracy >= 0.99


def test_csv_round_trip_with_commas_in_slide_ids(tmp_path):
    bags = [make_bag(slide_id="a,1", label=0, seed=1), make_bag(n=2, slide_id='b "x"', seed=2)]
    export_csv(bags, tmp_path / "bags.csv")
    with open(tmp_path / "bags.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert all(len(row) == 6 for row in rows)
    imported = import_csv(tmp_path / "bags.csv", labels={"a,1": 0, 'b "x"': 1},
                          patients={"a,1": "p1", 'b "x"': "p1"})
    for original, loaded in zip(bags, imported):
        assert loaded.bitwise_equal(original)


@pytest.mark.parametrize("row", ["a,0.5,0,1.0", "a,0,1e40,1.0", "a,nan,0,1.0", "a,one,0,1.0", "a,0,0,x"])
def test_csv_import_rejects_bad_values(tmp_path, row):
    path = tmp_path / "bad.csv"
    path.write_text(f"slide_id,x,y,f0\na,0,0,1.0\n{row}\n")
    with pytest.raises(DatasetError) as info:
        import_csv(path, labels={"a": 0})
    assert ":3:" in str(info.value)


def test_csv_import_accepts_integral_float_coordinates(tmp_path):
    path = tmp_path / "bags.csv"
    path.write_text("slide_id,x,y,f0\na,3.0,-2,1.5\n")
    (bag,) = import_csv(path, labels={"a": 0})
    assert bag.coords.tolist() == [[3, -2]]
