"""
Tests for the attention MIL classifier, its training loop and checkpoints.
"""

import numpy as np
import pytest

from autodiff import finite_diff_gradient, gradient, relative_error, select_output
from checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from data_io import FeatureBag, SyntheticConfig, generate_synthetic, load_split
from errors import ChecksumError, DatasetError, EmptyBagError, FormatError, InputShapeError, ParameterError
from fixtures import random_bag, random_model
from mil_model import attention_pool, init_model, instance_embeddings, logits, predict
from trainer import TrainConfig, evaluate_accuracy, train


@pytest.fixture
def model():
    return random_model(input_dim=5, n_classes=3, hidden=(7, 4), attention_dim=3, seed=2)


def test_parameter_shapes():
    m = init_model(6, 2, hidden=(8, 4), attention_dim=3, seed=0)
    assert m.param_names() == ["W0", "b0", "W1", "b1", "V", "w", "Wc", "bc"]
    assert m.params["W0"].shape == (6, 8)
    assert m.params["V"].shape == (4, 3)
    assert m.params["Wc"].shape == (2, 4)
    assert m.embed_dim == 4


def test_init_is_seeded():
    a = init_model(4, 2, hidden=(3,), attention_dim=2, seed=5)
    b = init_model(4, 2, hidden=(3,), attention_dim=2, seed=5)
    c = init_model(4, 2, hidden=(3,), attention_dim=2, seed=6)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["W0"], c.params["W0"])


def test_logits_are_permutation_invariant(model):
    bag = random_bag(9, 5, seed=1)
    permuted = bag[np.random.default_rng(3).permutation(9)]
    np.testing.assert_array_equal(logits(model, bag), logits(model, permuted))


def test_attention_weights_form_a_distribution(model):
    bag = random_bag(6, 5, seed=4)
    pooled, weights = attention_pool(model, instance_embeddings(model, bag))
    assert weights.shape == (6,)
    assert np.all(weights >= 0)
    assert weights.sum() == pytest.approx(1.0)
    assert pooled.shape == (model.embed_dim,)


def test_single_patch_bag_pools_to_its_embedding(model):
    bag = random_bag(1, 5, seed=8)
    embedding = instance_embeddings(model, bag)
    pooled, weights = attention_pool(model, embedding)
    np.testing.assert_allclose(weights, [1.0])
    np.testing.assert_allclose(pooled, embedding[0])


def test_predict_returns_softmax(model):
    label, confidences = predict(model, random_bag(5, 5, seed=2))
    assert 0 <= label < 3
    assert confidences.sum() == pytest.approx(1.0)
    assert label == int(np.argmax(confidences))


def test_bag_validation(model):
    with pytest.raises(EmptyBagError):
        logits(model, np.zeros((0, 5)))
    with pytest.raises(InputShapeError):
        logits(model, np.zeros((3, 4)))


def test_logit_gradient_matches_finite_differences(model):
    bag = random_bag(4, 5, seed=6)
    f = model.logit_fn()
    for target in range(3):
        selector = select_output(target)
        assert relative_error(gradient(f, bag, selector), finite_diff_gradient(f, bag, selector=selector)) <= 1e-5


def test_bad_parameter_shapes_are_rejected(model):
    params = dict(model.params)
    params["Wc"] = np.zeros((2, 2))
    with pytest.raises(ParameterError):
        model.with_params(params)


def _easy_dataset():
    cfg = SyntheticConfig(slides_per_class=8, patches_per_slide=(20, 30), feature_dim=6,
                          tumor_fraction=(0.2, 0.4), split_ratios=(0.5, 0.0, 0.5), seed=3)
    dataset = generate_synthetic(cfg)
    bags = dataset.bags
    return load_split(dataset.manifest, bags, "train"), load_split(dataset.manifest, bags, "test")


def test_training_learns_planted_signal():
    train_bags, test_bags = _easy_dataset()
    config = TrainConfig(epochs=40, learning_rate=1e-2, dropout=0.0, hidden=(16,), attention_dim=8, seed=1)
    model, history = train(train_bags, config, n_classes=2)
    assert len(history) == 40
    assert history[-1]["loss"] < history[0]["loss"]
    assert evaluate_accuracy(model, train_bags) >= 0.9
    assert model.metadata["epochs"] == 40


def test_training_is_deterministic():
    train_bags, _ = _easy_dataset()
    config = TrainConfig(epochs=3, learning_rate=1e-2, hidden=(4,), attention_dim=2, seed=7)
    a, _ = train(train_bags, config)
    b, _ = train(train_bags, config)
    assert encode_checkpoint(a) == encode_checkpoint(b)


def test_training_rejects_bad_input():
    with pytest.raises(DatasetError):
        train([], TrainConfig(epochs=1))
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0.0).validate()


def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "model.milckpt"
    save_checkpoint(model.with_params(dict(model.params), metadata={"note": "x"}), path)
    loaded = load_checkpoint(path)
    assert loaded.hidden == model.hidden
    assert loaded.activation == model.activation
    assert loaded.metadata == {"note": "x"}
    for name in model.param_names():
        np.testing.assert_allclose(loaded.params[name], model.params[name], rtol=1e-6, atol=1e-7)
    # a decoded checkpoint re-encodes to the same bytes
    assert encode_checkpoint(loaded) == path.read_bytes()


def test_checkpoint_corruption_is_detected(model):
    data = bytearray(encode_checkpoint(model))
    data[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(data))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(FormatError) as info:
        decode_checkpoint(encode_checkpoint(model)[:40])
    assert info.value.offset is not None


def test_duplicated_bag_has_identical_logits(model):
    bag = random_bag(7, 5, seed=3)
    np.testing.assert_allclose(logits(model, np.vstack([bag, bag])), logits(model, bag), rtol=0, atol=1e-12)


def test_zero_epochs_returns_seeded_initialisation():
    train_bags, _ = _easy_dataset()
    config = TrainConfig(epochs=0, hidden=(5, 3), attention_dim=2, dropout=0.1, seed=13)
    model, history = train(train_bags, config, n_classes=2)
    assert history == []
    expected = init_model(6, 2, hidden=(5, 3), attention_dim=2, dropout=0.1, seed=13)
    assert encode_checkpoint(model) == encode_checkpoint(expected)
    for name in expected.param_names():
        np.testing.assert_array_equal(model.params[name], expected.params[name])


def test_full_batch_loss_is_non_increasing_without_dropout():
    dataset = generate_synthetic(SyntheticConfig(slides_per_class=20))
    bags = load_split(dataset.manifest, dataset.bags, "train")
    config = TrainConfig(epochs=20, learning_rate=1e-3, batch_size=len(bags), dropout=0.0,
                         hidden=(64, 32, 16), seed=0)
    _, history = train(bags, config, n_classes=2)
    losses = [record["loss"] for record in history]
    assert len(losses) == 20
    for before, after in zip(losses, losses[1:]):
        assert after <= before + 1e-9
    assert losses[-1] < losses[0]


def test_training_rejects_labels_outside_classes():
    train_bags, _ = _easy_dataset()
    stray = FeatureBag(slide_id="c2_s0000", patient_id="p", label=2, features=np.ones((3, 6)),
                       coords=np.zeros((3, 2)))
    with pytest.raises(DatasetError):
        train(train_bags + [stray], TrainConfig(epochs=1, hidden=(4,), attention_dim=2), n_classes=2)


def test_checkpoint_reproduces_logits_at_float32_precision(tmp_path, model):
    rounded = model.with_params({name: value.astype(np.float32).astype(np.float64)
                                 for name, value in model.params.items()})
    save_checkpoint(model, tmp_path / "model.milckpt")
    loaded = load_checkpoint(tmp_path / "model.milckpt")
    bag = random_bag(11, 5, seed=4)
    np.testing.assert_array_equal(logits(loaded, bag), logits(rounded, bag))
    np.testing.assert_allclose(logits(loaded, bag), logits(model, bag), rtol=1e-5, atol=1e-6)


def test_checkpoint_codec_round_trips_random_architectures():
    rng = np.random.default_rng(8675309)
    for _ in range(1000):
        hidden = tuple(int(h) for h in rng.integers(1, 7, size=int(rng.integers(0, 4))))
        original = init_model(int(rng.integers(1, 7)), int(rng.integers(1, 5)), hidden=hidden,
                              attention_dim=int(rng.integers(1, 5)),
                              dropout=float(np.float32(rng.uniform(0.0, 0.9))),
                              activation=str(rng.choice(["relu", "tanh"])), seed=int(rng.integers(0, 2**31)))
        data = encode_checkpoint(original)
        decoded = decode_checkpoint(data)
        assert (decoded.input_dim, decoded.n_classes, decoded.hidden, decoded.attention_dim) == \
            (original.input_dim, original.n_classes, original.hidden, original.attention_dim)
        assert (decoded.activation, decoded.dropout, decoded.metadata) == \
            (original.activation, original.dropout, original.metadata)
        for name in original.param_names():
            np.testing.assert_array_equal(decoded.params[name],
                                          original.params[name].astype(np.float32).astype(np.float64))
        assert encode_checkpoint(decoded) == data
