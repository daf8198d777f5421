import json
import math

import numpy as np
import pytest

from src.core import model_zoo
from src.core.errors import InvalidClassIndexError, ModelFileError, ShapeMismatchError


@pytest.fixture
def channel_model():
    """Logistic regression over channel means: 2 channels, 2 classes"""
    return model_zoo.build_model([("global_avgpool", {}), ("dense", {"width": 2})], (2, 4, 4), 2, seed=5)


@pytest.fixture
def channel_data():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 2, size=(64, 2)).astype(np.uint8)
    images = rng.uniform(0.0, 0.2, size=(64, 2, 4, 4))
    images += 0.8 * labels[:, :, None, None]
    return images, labels


class TestConstruction:
    def test_tiny_cnn_layout(self, tiny_model):
        kinds = [layer.kind for layer in tiny_model.layers]
        assert kinds == ["conv", "relu", "maxpool", "conv", "relu", "maxpool", "global_avgpool", "dense"]
        assert tiny_model.conv_indices == [0, 3]
        assert tiny_model.parameterized_indices == [0, 3, 7]

    def test_same_seed_same_parameters(self):
        a = model_zoo.build_tiny_cnn((3, 8, 8), 3, seed=4, widths=(2, 2))
        b = model_zoo.build_tiny_cnn((3, 8, 8), 3, seed=4, widths=(2, 2))
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_bad_output_shape(self):
        with pytest.raises(ShapeMismatchError):
            model_zoo.ModelGraph((model_zoo.LayerSpec("flatten"),), (1, 2, 2), 3)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            model_zoo.LayerSpec("softmax")


class TestForwardBackward:
    def test_prediction_fields(self, tiny_model, tiny_input):
        prediction, trace = model_zoo.forward(tiny_model, tiny_input)
        assert trace is None
        assert prediction.logits.shape == (3,)
        np.testing.assert_allclose(prediction.probabilities, 1.0 / (1.0 + np.exp(-prediction.logits)))
        np.testing.assert_array_equal(prediction.labels, prediction.probabilities >= 0.5)

    @pytest.mark.parametrize("bias,expected", [((0.0, -1e-9), [1, 0]), ((1e-9, -3.0), [1, 0]),
                                               ((-1e-9, 2.0), [0, 1])])
    def test_label_threshold_side(self, bias, expected):
        skeleton = model_zoo.build_model([("global_avgpool", {}), ("dense", {"width": 2})], (1, 2, 2), 2, seed=0)
        model = skeleton.with_parameters([np.zeros((2, 1)), np.asarray(bias)])
        prediction = model_zoo.predict_multilabel(model, np.ones((1, 2, 2)))
        assert prediction.labels.tolist() == expected

    def test_batch_matches_single(self, tiny_model, rng):
        images = rng.uniform(size=(4, 3, 8, 8))
        logits = model_zoo.forward_batch(tiny_model, images)
        for i in range(4):
            np.testing.assert_allclose(logits[i], model_zoo.forward(tiny_model, images[i])[0].logits, atol=1e-12)

    def test_wrong_input_shape(self, tiny_model):
        with pytest.raises(ShapeMismatchError):
            model_zoo.forward(tiny_model, np.zeros((3, 9, 8)))

    def test_trace_covers_every_layer(self, tiny_model, tiny_input):
        _, trace = model_zoo.forward(tiny_model, tiny_input, trace=True)
        assert len(trace) == len(tiny_model.layers)
        assert set(trace.pool_indices) == {2, 5}

    def test_invalid_class_index(self, tiny_model, tiny_input):
        _, trace = model_zoo.forward(tiny_model, tiny_input, trace=True)
        with pytest.raises(InvalidClassIndexError):
            model_zoo.backward(tiny_model, trace, 3)

    @pytest.mark.parametrize("class_index", [0, 2])
    def test_input_gradient_matches_finite_differences(self, tiny_model, tiny_input, class_index):
        grad = model_zoo.input_gradient(tiny_model, tiny_input, class_index)
        assert grad.shape == tiny_input.shape
        eps = 1e-6
        coords = np.random.default_rng(class_index).integers(0, [3, 8, 8], size=(10, 3))
        for c, i, j in coords:
            up, down = tiny_input.copy(), tiny_input.copy()
            up[c, i, j] += eps
            down[c, i, j] -= eps
            numeric = (model_zoo.forward(tiny_model, up)[0].logits[class_index]
                       - model_zoo.forward(tiny_model, down)[0].logits[class_index]) / (2 * eps)
            assert grad[c, i, j] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

    def test_dense_contributions_sum_to_preactivation(self, tiny_model, tiny_input):
        _, trace = model_zoo.forward(tiny_model, tiny_input, trace=True)
        z = trace.contributions(7)
        dense = tiny_model.layers[7]
        np.testing.assert_allclose(z.sum(axis=-1) + dense.bias, trace.outputs[7], atol=1e-12)

    def test_conv_contributions_sum_to_preactivation(self, tiny_model, tiny_input):
        _, trace = model_zoo.forward(tiny_model, tiny_input, trace=True)
        z = trace.contributions(0)
        conv = tiny_model.layers[0]
        np.testing.assert_allclose(z.sum(axis=(-3, -2, -1)) + conv.bias[:, None, None], trace.outputs[0],
                                   atol=1e-12)


class TestTraining:
    def test_loss_decreases_on_separable_data(self, channel_model, channel_data):
        images, labels = channel_data
        config = model_zoo.TrainConfig(epochs=20, lr=0.5, batch_size=16, seed=1)
        trained, history = model_zoo.train(channel_model, images, labels, config)
        assert len(history) == 20
        assert history[-1] < history[0]
        assert model_zoo.evaluate_predictions(trained, images, labels)["macro_f1"] > 0.9

    def test_deterministic(self, channel_model, channel_data):
        images, labels = channel_data
        config = model_zoo.TrainConfig(epochs=3, lr=0.1, batch_size=8, seed=2)
        first = model_zoo.train(channel_model, images, labels, config)
        second = model_zoo.train(channel_model, images, labels, config)
        assert first[1] == second[1]
        for p, q in zip(first[0].parameters(), second[0].parameters()):
            np.testing.assert_array_equal(p, q)

    def test_empty_training_set(self, channel_model):
        with pytest.raises(ValueError):
            model_zoo.train(channel_model, np.zeros((0, 2, 4, 4)), np.zeros((0, 2)), model_zoo.TrainConfig())

    def test_bce_matches_formula(self):
        logits = np.array([[0.0, 2.0], [-1.0, 3.0]])
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = 1.0 / (1.0 + np.exp(-logits))
        expected = -np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert model_zoo.bce_with_logits(logits, targets) == pytest.approx(expected)

    def test_evaluate_predictions_fields(self, channel_model, channel_data):
        images, labels = channel_data
        result = model_zoo.evaluate_predictions(channel_model, images, labels)
        assert set(result) == {"macro_f1", "per_class_f1", "subset_accuracy", "samples"}
        assert len(result["per_class_f1"]) == 2
        assert result["samples"] == 64


class TestHoldoutSplit:
    def test_partition(self):
        train, holdout = model_zoo.split_holdout(50, 0.2, seed=3)
        assert len(holdout) == 10
        assert sorted(np.concatenate([train, holdout]).tolist()) == list(range(50))
        assert np.all(np.diff(train) > 0)

    def test_seeded(self):
        a = model_zoo.split_holdout(30, 0.3, seed=1)
        b = model_zoo.split_holdout(30, 0.3, seed=1)
        np.testing.assert_array_equal(a[1], b[1])

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            model_zoo.split_holdout(10, 1.0, seed=0)


class TestParameterPerturbation:
    def test_zero_noise_is_identity(self, tiny_model):
        same = model_zoo.perturb_parameters(tiny_model, 0.0, seed=1)
        for p, q in zip(tiny_model.parameters(), same.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_noise_scale(self, tiny_model):
        noisy = model_zoo.perturb_parameters(tiny_model, 0.1, seed=1)
        deltas = np.concatenate([(q - p).ravel() for p, q in zip(tiny_model.parameters(), noisy.parameters())])
        assert deltas.std() == pytest.approx(0.1, rel=0.25)

    def test_negative_std(self, tiny_model):
        with pytest.raises(ValueError):
            model_zoo.perturb_parameters(tiny_model, -0.1, seed=1)

    def test_parameter_distance_grows_with_std(self, tiny_model):
        stds = [0.0, 1e-4, 1e-2, 0.1, 1.0]
        distances = []
        for std in stds:
            noisy = model_zoo.perturb_parameters(tiny_model, std, seed=3)
            distances.append(math.sqrt(sum(np.sum((q - p) ** 2)
                                           for p, q in zip(tiny_model.parameters(), noisy.parameters()))))
        assert distances[0] == 0.0
        assert all(a < b for a, b in zip(distances, distances[1:]))

    def test_logit_deviation_grows_with_std(self, tiny_model, tiny_input):
        reference = model_zoo.forward(tiny_model, tiny_input)[0].logits
        increasing = 0
        for seed in range(10):
            deviations = [np.linalg.norm(model_zoo.forward(model_zoo.perturb_parameters(tiny_model, std, seed),
                                                           tiny_input)[0].logits - reference)
                          for std in (1e-4, 1e-2, 1.0)]
            increasing += deviations[0] < deviations[1] < deviations[2]
        assert increasing >= 6

    def test_randomize_is_seeded_and_fresh(self, tiny_model):
        a = model_zoo.randomize_parameters(tiny_model, seed=10)
        b = model_zoo.randomize_parameters(tiny_model, seed=10)
        assert a.rng_seed == 10
        for p, q, original in zip(a.parameters(), b.parameters(), tiny_model.parameters()):
            np.testing.assert_array_equal(p, q)
            assert not np.array_equal(p, original)

    def test_original_is_untouched(self, tiny_model):
        before = [p.copy() for p in tiny_model.parameters()]
        model_zoo.perturb_parameters(tiny_model, 0.5, seed=2)
        for p, q in zip(before, tiny_model.parameters()):
            np.testing.assert_array_equal(p, q)


class TestModelFile:
    def test_save_and_load(self, tiny_model, tiny_input, tmp_path):
        path = tmp_path / "nested" / "model.bin"
        model_zoo.save_model(tiny_model, path)
        loaded = model_zoo.load_model(path)
        assert [layer.kind for layer in loaded.layers] == [layer.kind for layer in tiny_model.layers]
        assert loaded.input_shape == tiny_model.input_shape
        np.testing.assert_allclose(model_zoo.forward(loaded, tiny_input)[0].logits,
                                   model_zoo.forward(tiny_model, tiny_input)[0].logits, atol=1e-4)

    def test_save_load_save_is_byte_identical(self, tiny_model, tmp_path):
        first, second = tmp_path / "first.bin", tmp_path / "second.bin"
        model_zoo.save_model(tiny_model, first)
        model_zoo.save_model(model_zoo.load_model(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_header_shapes_disagree_with_blob(self, tiny_model):
        data = model_zoo.model_to_bytes(tiny_model)
        separator = data.index(b"\0")
        header = json.loads(data[:separator])
        header["layers"][0]["weight_shape"][0] += 1
        with pytest.raises(ModelFileError) as info:
            model_zoo.model_from_bytes(json.dumps(header).encode() + data[separator:])
        assert info.value.layer_index == 0

    def test_header_is_json(self, tiny_model):
        data = model_zoo.model_to_bytes(tiny_model)
        header = json.loads(data[:data.index(b"\0")].decode("utf-8"))
        assert header["format_version"] == model_zoo.MODEL_FORMAT_VERSION
        assert header["num_classes"] == 3

    def test_truncated_blob(self, tiny_model):
        data = model_zoo.model_to_bytes(tiny_model)
        with pytest.raises(ModelFileError) as info:
            model_zoo.model_from_bytes(data[:-4])
        assert info.value.layer_index == 7

    def test_trailing_bytes(self, tiny_model):
        with pytest.raises(ModelFileError):
            model_zoo.model_from_bytes(model_zoo.model_to_bytes(tiny_model) + b"\0\0\0\0")

    def test_missing_separator(self):
        with pytest.raises(ModelFileError):
            model_zoo.model_from_bytes(b'{"format_version": 1}')

    def test_unknown_version(self, tiny_model):
        data = model_zoo.model_to_bytes(tiny_model)
        header = json.loads(data[:data.index(b"\0")])
        header["format_version"] = 99
        with pytest.raises(ModelFileError):
            model_zoo.model_from_bytes(json.dumps(header).encode() + data[data.index(b"\0"):])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            model_zoo.load_model(tmp_path / "absent.bin")
