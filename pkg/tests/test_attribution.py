import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.core import attribution, model_zoo
from src.core.attribution import MethodConfig
from src.core.errors import (
    InvalidClassIndexError,
    LayerNotConvError,
    NonFiniteAttributionError,
    SingularFitError,
)
from src.core.perturbations import BaselineSpec, segment_grid

SMALL_CONFIG = MethodConfig(occlusion_window=(4, 4), occlusion_stride=(2, 2), lime_segments=4, lime_samples=60)


def linear_model(weights, bias=(0.0, 0.0)):
    """Single-channel 4x4 input -> mean -> dense(2)"""
    skeleton = model_zoo.build_model([("global_avgpool", {}), ("dense", {"width": 2})], (1, 4, 4), 2, seed=0)
    return skeleton.with_parameters([np.asarray(weights, dtype=float).reshape(2, 1), np.asarray(bias, dtype=float)])


def pixel_model(pixel_weights):
    """Single-channel 4x4 input -> flatten -> dense(2); class 1 logit is zero"""
    skeleton = model_zoo.build_model([("flatten", {}), ("dense", {"width": 2})], (1, 4, 4), 2, seed=0)
    weights = np.zeros((2, 16))
    weights[0] = np.ravel(pixel_weights)
    return skeleton.with_parameters([weights, np.zeros(2)])


@pytest.fixture
def ramp_input():
    return np.linspace(0.05, 0.95, 16).reshape(1, 4, 4)


class TestMethodConfig:
    def test_full_scale_windows(self):
        config = MethodConfig.full_scale()
        assert config.occlusion_window == (50, 50) and config.occlusion_stride == (10, 10)

    @pytest.mark.parametrize("kwargs", [{"occlusion_window": (0, 5)}, {"lime_samples": 0},
                                        {"lrp_rules": ("zero", "alpha")},
                                        {"occlusion_window": (4, 4), "occlusion_stride": (5, 2)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MethodConfig(**kwargs)


class TestOcclusion:
    def test_whole_image_window(self, ramp_input):
        model = linear_model([2.0, -1.0])
        attr = attribution.occlusion(model, ramp_input, 0, (4, 4), (1, 1), BaselineSpec("black"))
        expected = 1 / (1 + np.exp(-2.0 * ramp_input.mean())) - 0.5
        np.testing.assert_allclose(attr.values, expected)

    def test_single_pixel_windows_follow_intensity(self, ramp_input):
        model = linear_model([2.0, -1.0])
        attr = attribution.occlusion(model, ramp_input, 0, (1, 1), (1, 1), BaselineSpec("black"))
        assert np.all(attr.values > 0)
        assert np.all(np.diff(attr.values.ravel()) > 0)
        negative = attribution.occlusion(model, ramp_input, 1, (1, 1), (1, 1), BaselineSpec("black"))
        assert np.all(negative.values < 0)

    def test_window_starts_cover_borders(self):
        assert attribution._window_starts(8, 4, 2) == [0, 2, 4]
        assert attribution._window_starts(9, 4, 3) == [0, 3, 6]

    def test_stride_beyond_window(self, tiny_model, tiny_input):
        with pytest.raises(ValueError, match="exceeds window"):
            attribution.occlusion(tiny_model, tiny_input, 0, (2, 2), (3, 3), BaselineSpec("black"))
        with pytest.raises(ValueError):
            attribution.occlusion(tiny_model, tiny_input, 0, (4, 2), (2, 3), BaselineSpec("black"))

    @pytest.mark.parametrize("window", [(2, 2), (3, 3), (3, 5)])
    def test_stride_equal_to_window_covers_every_pixel(self, tiny_model, tiny_input, window):
        attr = attribution.occlusion(tiny_model, tiny_input, 0, window, window, BaselineSpec("black"))
        assert attr.values.shape == (8, 8)
        assert np.all(np.isfinite(attr.values))

    def test_agrees_with_single_segment_lime(self, tiny_model, tiny_input):
        whole = segment_grid(8, 8, 1, 1)
        occluded = attribution.occlusion(tiny_model, tiny_input, 2, (8, 8), (8, 8), BaselineSpec("black"))
        surrogate = attribution.lime(tiny_model, tiny_input, 2, 1, 40, 500.0, 0.0, BaselineSpec("black"), seed=4,
                                     segmentation=whole)
        black = np.zeros_like(tiny_input)
        probabilities = attribution.class_probabilities(tiny_model, np.stack([tiny_input, black]), 2)
        np.testing.assert_allclose(occluded.values, probabilities[0] - probabilities[1], atol=1e-12)
        np.testing.assert_allclose(surrogate.values, occluded.values, atol=1e-9)

    def test_window_too_large(self, tiny_model, tiny_input):
        with pytest.raises(ValueError):
            attribution.occlusion(tiny_model, tiny_input, 0, (9, 9), (1, 1), BaselineSpec("black"))

    def test_invalid_class(self, tiny_model, tiny_input):
        with pytest.raises(InvalidClassIndexError):
            attribution.occlusion(tiny_model, tiny_input, 3, (4, 4), (2, 2), BaselineSpec("black"))


class TestLime:
    def test_surrogate_recovers_linear_targets(self):
        rng = np.random.default_rng(0)
        design = (rng.random((50, 3)) < 0.5).astype(float)
        targets = design @ np.array([1.0, 2.0, -1.0]) + 0.5
        coef = attribution.fit_surrogate(design, targets, np.ones(50), 0.0)
        np.testing.assert_allclose(coef, [1.0, 2.0, -1.0], atol=1e-9)

    def test_rank_deficient_without_ridge(self):
        design = np.ones((4, 3))
        with pytest.raises(SingularFitError):
            attribution.fit_surrogate(design, np.zeros(4), np.ones(4), 0.0)

    def test_relevant_segment_wins(self, ramp_input):
        weights = np.zeros((4, 4))
        weights[:2, :2] = 6.0
        model = pixel_model(weights)
        segmentation = segment_grid(4, 4, 2, 2)
        attr = attribution.lime(model, ramp_input, 0, 4, 200, 500.0, 0.01, BaselineSpec("black"), seed=1,
                                segmentation=segmentation)
        per_segment = [attr.values[segmentation.segment_id == k][0] for k in range(4)]
        assert np.argmax(per_segment) == 0
        assert per_segment[0] > 0
        for k in range(4):
            assert np.all(attr.values[segmentation.segment_id == k] == per_segment[k])

    def test_seeded(self, tiny_model, tiny_input):
        a = attribution.explain("lime", tiny_model, tiny_input, 0, SMALL_CONFIG, seed=3)
        b = attribution.explain("lime", tiny_model, tiny_input, 0, SMALL_CONFIG, seed=3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_needs_two_segments(self, tiny_model, tiny_input):
        with pytest.raises(ValueError):
            attribution.lime(tiny_model, tiny_input, 0, 1, 10, 500.0, 0.01, BaselineSpec("black"), seed=0)


class TestGradCam:
    def test_map_formula(self):
        activations = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
        np.testing.assert_allclose(attribution.grad_cam_map(activations, np.ones((2, 2, 2)), 4, 4), 1.0)
        np.testing.assert_allclose(attribution.grad_cam_map(activations, -np.ones((2, 2, 2)), 4, 4), 0.0)

    def test_non_negative_full_resolution(self, tiny_model, tiny_input):
        attr = attribution.gradcam(tiny_model, tiny_input, 1)
        assert attr.values.shape == (8, 8)
        assert attr.values.min() >= 0.0

    def test_explicit_layer(self, tiny_model, tiny_input):
        assert attribution.gradcam(tiny_model, tiny_input, 1, layer=0).values.shape == (8, 8)

    def test_rejects_non_conv_layer(self, tiny_model, tiny_input):
        with pytest.raises(LayerNotConvError):
            attribution.gradcam(tiny_model, tiny_input, 0, layer=1)


class TestLrp:
    @pytest.fixture
    def positive_model(self):
        skeleton = model_zoo.build_model([
            ("conv", {"width": 2, "kernel": 1}),
            ("relu", {}),
            ("global_avgpool", {}),
            ("dense", {"width": 2}),
        ], (2, 3, 3), 2, seed=0)
        return skeleton.with_parameters([
            np.array([[1.0, 0.5], [0.2, 2.0]]).reshape(2, 2, 1, 1), np.zeros(2),
            np.array([[1.0, 3.0], [0.5, 0.5]]), np.zeros(2),
        ])

    def test_zero_rule_conserves_relevance(self, positive_model):
        x = np.random.default_rng(4).uniform(0.1, 1.0, size=(2, 3, 3))
        stages = attribution.lrp_relevances(positive_model, x, 0, rules=("zero", "zero"))
        logit = model_zoo.forward(positive_model, x)[0].logits[0]
        for relevance in stages:
            assert relevance.sum() == pytest.approx(logit, rel=1e-9)

    def test_map_sums_channels(self, positive_model):
        x = np.random.default_rng(5).uniform(0.1, 1.0, size=(2, 3, 3))
        attr = attribution.lrp(positive_model, x, 1, rules=("zero", "zero"))
        relevance = attribution.lrp_relevances(positive_model, x, 1, rules=("zero", "zero"))[0]
        np.testing.assert_allclose(attr.values, relevance.sum(axis=0))

    @pytest.mark.parametrize("count,expected", [
        (1, ["gamma"]),
        (2, ["gamma", "epsilon"]),
        (3, ["gamma", "epsilon", "zero"]),
        (4, ["gamma", "gamma", "epsilon", "zero"]),
        (6, ["gamma", "gamma", "epsilon", "epsilon", "zero", "zero"]),
    ])
    def test_rule_assignment_by_thirds(self, count, expected):
        layers = [("conv", {"width": 2, "kernel": 1}) for _ in range(count - 1)]
        model = model_zoo.build_model(layers + [("global_avgpool", {}), ("dense", {"width": 2})],
                                      (2, 3, 3), 2, seed=0)
        assignment = attribution.lrp_rule_assignment(model)
        assert [assignment[i] for i in sorted(assignment)] == expected

    def test_explicit_rules_length(self, tiny_model):
        with pytest.raises(ValueError):
            attribution.lrp_rule_assignment(tiny_model, ("zero",))

    def test_composite_total_within_ten_percent(self):
        skeleton = model_zoo.build_tiny_cnn((3, 32, 32), 3, seed=6, widths=(4, 4))
        params = [np.abs(p) if i % 2 == 0 else np.zeros_like(p) for i, p in enumerate(skeleton.parameters())]
        model = skeleton.with_parameters(params)
        x = np.random.default_rng(6).uniform(0.5, 1.0, size=(3, 32, 32))
        for class_index in range(3):
            logit = model_zoo.forward(model, x)[0].logits[class_index]
            total = attribution.lrp(model, x, class_index).values.sum()
            assert abs(total - logit) <= 0.1 * abs(logit)

    def test_composite_is_finite(self, tiny_model, tiny_input):
        attr = attribution.explain("lrp", tiny_model, tiny_input, 2, SMALL_CONFIG)
        assert attr.values.shape == (8, 8)


class TestDeepLift:
    @pytest.mark.parametrize("class_index", [0, 1, 2])
    def test_summation_to_delta(self, tiny_model, tiny_input, class_index):
        attr = attribution.deeplift(tiny_model, tiny_input, class_index, BaselineSpec("black"))
        logits = model_zoo.forward_batch(tiny_model, np.stack([tiny_input, np.zeros_like(tiny_input)]))
        assert attr.values.sum() == pytest.approx(logits[0, class_index] - logits[1, class_index], abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2))
    def test_summation_to_delta_on_random_models(self, seed, class_index):
        model = model_zoo.build_tiny_cnn((3, 8, 8), 3, seed=seed, widths=(4, 4))
        x = np.random.default_rng(seed).uniform(0.0, 1.0, size=(3, 8, 8))
        attr = attribution.deeplift(model, x, class_index, BaselineSpec("black"))
        logits = model_zoo.forward_batch(model, np.stack([x, np.zeros_like(x)]))
        assert attr.values.sum() == pytest.approx(logits[0, class_index] - logits[1, class_index], abs=1e-6)

    def test_mean_baseline(self, tiny_model, tiny_input):
        baseline = BaselineSpec("mean")
        attr = attribution.deeplift(tiny_model, tiny_input, 0, baseline)
        reference = np.broadcast_to(tiny_input.mean(axis=(1, 2))[:, None, None], tiny_input.shape)
        logits = model_zoo.forward_batch(tiny_model, np.stack([tiny_input, reference]))
        assert attr.values.sum() == pytest.approx(logits[0, 0] - logits[1, 0], abs=1e-6)

    def test_linear_model_matches_gradient_times_delta(self, ramp_input):
        model = pixel_model(np.arange(16.0).reshape(4, 4) / 10)
        attr = attribution.deeplift(model, ramp_input, 0, BaselineSpec("black"))
        np.testing.assert_allclose(attr.values, ramp_input[0] * np.arange(16.0).reshape(4, 4) / 10)


class TestRandomAndRegistry:
    def test_random_ignores_class(self, tiny_model, tiny_input):
        a = attribution.explain("random", tiny_model, tiny_input, 0, seed=9)
        b = attribution.explain("random", tiny_model, tiny_input, 2, seed=9)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.values.min() >= 0.0 and a.values.max() < 1.0

    def test_registry(self):
        assert set(attribution.METHODS) == {"occlusion", "lime", "gradcam", "lrp", "deeplift", "random"}

    def test_non_finite_map_rejected(self, tiny_model, tiny_input, monkeypatch):
        monkeypatch.setitem(attribution.METHODS, "random",
                            lambda model, x, c, config, seed: attribution.AttributionMap(np.full((8, 8), np.nan),
                                                                                         c, "random"))
        with pytest.raises(NonFiniteAttributionError):
            attribution.explain("random", tiny_model, tiny_input, 0)

    def test_stored_precision(self, tiny_model, tiny_input):
        attr = attribution.explain("deeplift", tiny_model, tiny_input, 0)
        stored = attribution.stored_precision(attr)
        assert stored.values.dtype == np.float64
        np.testing.assert_array_equal(stored.values, attr.values.astype(np.float32))
        np.testing.assert_array_equal(attribution.stored_precision(stored).values, stored.values)

    def test_unknown_method(self, tiny_model, tiny_input):
        with pytest.raises(KeyError):
            attribution.explain("saliency", tiny_model, tiny_input, 0)

    @pytest.mark.parametrize("method_id", sorted(attribution.METHODS))
    def test_every_method_yields_a_map(self, tiny_model, tiny_input, method_id):
        attr = attribution.explain(method_id, tiny_model, tiny_input, 1, SMALL_CONFIG, seed=2)
        assert attr.method_id == method_id
        assert attr.class_index == 1
        assert attr.values.shape == (8, 8)
        assert np.all(np.isfinite(attr.values))

    def test_normalize_map(self, tiny_model, tiny_input):
        attr = attribution.normalize_map(attribution.explain("deeplift", tiny_model, tiny_input, 0))
        assert attr.normalized
        assert attr.values.min() == 0.0 and attr.values.max() == 1.0
