"""
End-to-end check of the attribution pipeline on a small synthetic cohort:
generate, train, attribute, evaluate, render.

Runs under pytest or directly as a script (prints a PASS/FAIL summary).
"""

import sys
import tempfile
from pathlib import Path

import pytest

from attribution import AttributionSettings, attribute
from baseline import build_reference_pool, make_baseline
from config import HeatmapSpec, RunConfig
from data_io import SyntheticConfig, generate_synthetic, load_split
from evaluation import EvaluationSettings, Evaluator, evaluate_method
from heatmap import render_heatmap
from trainer import TrainConfig, evaluate_accuracy, train

METHODS = ("gradient", "ig", "cig", "random", "oracle")


def build_pipeline():
    """Dataset, trained model and evaluation report shared by every check."""
    dataset = generate_synthetic(SyntheticConfig(slides_per_class=8, patches_per_slide=(20, 30), feature_dim=6,
                                                 tumor_fraction=(0.2, 0.4), seed=3))
    train_bags = load_split(dataset.manifest, dataset.bags, "train")
    test_bags = load_split(dataset.manifest, dataset.bags, "test")
    model, _ = train(train_bags, TrainConfig(epochs=40, learning_rate=1e-2, dropout=0.0, hidden=(16,),
                                             attention_dim=8, seed=1), n_classes=2)
    settings = EvaluationSettings(methods=METHODS, attribution=AttributionSettings(steps=20),
                                  pool_slides=4, seeds=(11, 12))
    report = evaluate_method(test_bags, model, train_bags, settings)
    return {"train": train_bags, "test": test_bags, "model": model, "settings": settings, "report": report}


@pytest.fixture(scope="module")
def pipeline():
    return build_pipeline()


def _row(report, method):
    return next(row for row in report.rows if row["method"] == method and row["class"] == 1)


def test_model_learns_planted_signal(pipeline):
    accuracy = evaluate_accuracy(pipeline["model"], pipeline["train"])
    print(f"Train accuracy: {accuracy:.3f}")
    assert accuracy >= 0.9


def test_oracle_beats_random(pipeline):
    oracle = _row(pipeline["report"], "oracle")
    random = _row(pipeline["report"], "random")
    print(f"MIL-SIC oracle={oracle['sic_mean']:.3f} random={random['sic_mean']:.3f}")
    assert oracle["sic_mean"] > random["sic_mean"]
    assert oracle["aic_mean"] >= random["aic_mean"]


def test_cig_beats_random(pipeline):
    cig = _row(pipeline["report"], "cig")
    random = _row(pipeline["report"], "random")
    print(f"MIL-SIC cig={cig['sic_mean']:.3f} random={random['sic_mean']:.3f}")
    assert cig["sic_mean"] > random["sic_mean"]


def test_every_method_reported(pipeline):
    report = pipeline["report"]
    assert {row["method"] for row in report.rows} == set(METHODS)
    positives = [bag for bag in pipeline["test"] if bag.label == 1]
    assert all(row["count"] == 2 * len(positives) for row in report.rows)
    assert report.manifest["jobs"]["failed"] == 0


def test_evaluation_is_thread_independent(pipeline):
    settings = pipeline["settings"]
    threaded = EvaluationSettings(methods=settings.methods, attribution=settings.attribution,
                                  pool_slides=settings.pool_slides, seeds=settings.seeds, threads=3)
    again = evaluate_method(pipeline["test"], pipeline["model"], pipeline["train"], threaded)
    assert again.rows == pipeline["report"].rows
    assert again.curves_csv() == pipeline["report"].curves_csv()


def test_heatmap_of_cig(pipeline, tmp_path=None):
    bag = next(bag for bag in pipeline["test"] if bag.label == 1)
    opposite = [b for b in pipeline["train"] if b.label != 1]
    pool = build_reference_pool(opposite, 1, n_slides=4, seed=0)
    baseline = make_baseline("opposite", bag, pool, seed=0)
    result = attribute("cig", pipeline["model"], bag.features64(), baseline, pool, AttributionSettings(steps=20))
    assert result.saliency.shape == (bag.n,)

    out = Path(tmp_path or tempfile.mkdtemp())
    pixels = render_heatmap(bag.coords, result.saliency, HeatmapSpec(cell_size=2), path=out / "cig.ppm")
    assert (out / "cig.ppm").exists()
    assert pixels.shape[2] == 3


@pytest.mark.slow
def test_default_synthetic_run():
    cfg = RunConfig(methods=["cig", "random", "oracle"])
    dataset = generate_synthetic(cfg.synthetic_config())
    train_bags = load_split(dataset.manifest, dataset.bags, "train")
    test_bags = load_split(dataset.manifest, dataset.bags, cfg.eval_split)
    model, _ = train(train_bags, cfg.train_config(), n_classes=len(dataset.manifest.class_names))
    accuracy = evaluate_accuracy(model, test_bags)
    report = Evaluator(model, train_bags, EvaluationSettings.from_run_config(cfg)).run(test_bags)
    cig, random, oracle = (_row(report, method) for method in ("cig", "random", "oracle"))
    print(f"Held-out accuracy={accuracy:.3f} MIL-AIC cig={cig['aic_mean']:.3f} random={random['aic_mean']:.3f} "
          f"oracle={oracle['aic_mean']:.3f}")

    assert accuracy >= 0.95
    assert cig["aic_mean"] - random["aic_mean"] >= 0.15
    assert cig["sic_mean"] - random["sic_mean"] >= 0.15
    assert oracle["aic_mean"] >= 0.95
    assert oracle["aic_mean"] + 1e-12 >= cig["aic_mean"] > random["aic_mean"]


def main():
    """Run all checks."""
    print("=" * 50)
    print("MIL attribution pipeline - system check")
    print("=" * 50)

    state = build_pipeline()
    tests = [
        ("Training", test_model_learns_planted_signal),
        ("Oracle vs random", test_oracle_beats_random),
        ("CIG vs random", test_cig_beats_random),
        ("Report coverage", test_every_method_reported),
        ("Thread independence", test_evaluation_is_thread_independent),
        ("Heatmap", test_heatmap_of_cig),
    ]

    results = []
    for test_name, test_func in tests:
        try:
            test_func(state)
            results.append((test_name, True))
        except AssertionError as e:
            print(f"❌ {test_name} failed: {e}")
            results.append((test_name, False))
        except Exception as e:
            print(f"❌ {test_name} raised exception: {e}")
            results.append((test_name, False))

    print("\n" + "=" * 50)
    print("Test Results Summary")
    print("=" * 50)

    passed = sum(1 for _, result in results if result)
    for test_name, result in results:
        print(f"{'✅ PASS' if result else '❌ FAIL'}: {test_name}")
    print(f"\nTotal: {passed}/{len(results)} tests passed")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
