import numpy as np
import pytest
from hypothesis import given, strategies as st

from src.core import perturbations
from src.core.errors import BaselineSpecError, ShapeMismatchError


class TestBaselines:
    def test_parse(self):
        assert perturbations.BaselineSpec.parse("black").kind == "black"
        assert perturbations.BaselineSpec.parse("uniform", seed=4) == perturbations.BaselineSpec("uniform_random",
                                                                                                 seed=4)
        constant = perturbations.BaselineSpec.parse("constant:0.25")
        assert constant.kind == "constant" and constant.constant_value == 0.25

    @pytest.mark.parametrize("kind,value", [("grey", None), ("constant", None), ("black", 0.3)])
    def test_invalid(self, kind, value):
        with pytest.raises(BaselineSpecError):
            perturbations.BaselineSpec(kind, value)

    def test_mean_is_per_channel(self, tiny_input):
        base = perturbations.resolve_baseline(perturbations.BaselineSpec("mean"), tiny_input)
        np.testing.assert_allclose(base, tiny_input.mean(axis=(1, 2)))

    def test_uniform_is_seeded_field(self, tiny_input):
        spec = perturbations.BaselineSpec("uniform_random", seed=3)
        a = perturbations.resolve_baseline(spec, tiny_input)
        assert a.shape == tiny_input.shape
        np.testing.assert_array_equal(a, perturbations.resolve_baseline(spec, tiny_input))

    def test_baseline_image(self, tiny_input):
        image = perturbations.baseline_image(perturbations.BaselineSpec("constant", 0.4), tiny_input)
        assert image.shape == tiny_input.shape
        np.testing.assert_array_equal(image, 0.4)


class TestApplyMask:
    def test_empty_mask_is_identity(self, tiny_input):
        out = perturbations.apply_mask(tiny_input, np.zeros((8, 8), dtype=bool), 0.0)
        np.testing.assert_array_equal(out, tiny_input)

    def test_full_mask_gives_baseline(self, tiny_input):
        out = perturbations.apply_mask(tiny_input, np.ones((8, 8), dtype=bool), np.array([0.1, 0.2, 0.3]))
        np.testing.assert_allclose(out, np.broadcast_to(np.array([0.1, 0.2, 0.3])[:, None, None], (3, 8, 8)))

    def test_stack_of_masks(self, tiny_input):
        masks = np.zeros((2, 8, 8), dtype=bool)
        masks[0, 0, 0] = True
        masks[1, 7, 7] = True
        out = perturbations.apply_mask(tiny_input, masks, 0.0)
        assert out.shape == (2, 3, 8, 8)
        assert np.all(out[0, :, 0, 0] == 0) and np.all(out[0, :, 7, 7] == tiny_input[:, 7, 7])
        assert np.all(out[1, :, 7, 7] == 0)

    def test_shape_mismatch(self, tiny_input):
        with pytest.raises(ShapeMismatchError):
            perturbations.apply_mask(tiny_input, np.zeros((7, 8), dtype=bool), 0.0)


class TestRankPixels:
    def test_morf_and_lerf(self):
        attr = np.array([[0.1, 0.9], [0.5, 0.3]])
        assert perturbations.rank_pixels(attr, "morf").order.tolist() == [1, 2, 3, 0]
        assert perturbations.rank_pixels(attr, "lerf").order.tolist() == [0, 3, 2, 1]

    def test_ties_keep_row_major_order(self):
        attr = np.ones((3, 3))
        assert perturbations.rank_pixels(attr, "morf").order.tolist() == list(range(9))
        assert perturbations.rank_pixels(attr, "lerf").order.tolist() == list(range(9))

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            perturbations.rank_pixels(np.ones((2, 2)), "random")

    @given(st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=1, max_size=30))
    def test_is_permutation(self, values):
        order = perturbations.rank_pixels(np.array(values), "morf").order
        assert sorted(order.tolist()) == list(range(len(values)))
        ranked = np.array(values)[order]
        assert np.all(np.diff(ranked) <= 0)


class TestSegmentation:
    def test_grid_tiles(self):
        grid = perturbations.segment_grid(6, 6, 2, 3)
        assert grid.count == 6
        np.testing.assert_array_equal(grid.segment_id[0], [0, 0, 1, 1, 2, 2])
        np.testing.assert_array_equal(grid.segment_id[5], [3, 3, 4, 4, 5, 5])

    def test_grid_remainder_goes_to_last_tile(self):
        grid = perturbations.segment_grid(7, 7, 2, 2)
        assert np.sum(grid.segment_id == 3) == 16
        assert np.sum(grid.segment_id == 0) == 9

    def test_grid_does_not_fit(self):
        with pytest.raises(ValueError):
            perturbations.segment_grid(4, 4, 5, 1)

    def test_masks_partition(self):
        masks = perturbations.segment_grid(8, 8, 2, 4).masks()
        assert masks.shape == (8, 8, 8)
        np.testing.assert_array_equal(masks.sum(axis=0), 1)

    def test_invalid_ids(self):
        with pytest.raises(ValueError):
            perturbations.Segmentation(np.array([[0, 2], [2, 0]]), 3)

    @pytest.mark.parametrize("h,w,n,expected", [(64, 64, 16, (4, 4)), (32, 64, 8, (2, 4)), (16, 16, 2, (1, 2))])
    def test_grid_shape(self, h, w, n, expected):
        assert perturbations.grid_shape(h, w, n) == expected

    def test_slic_on_constant_image_is_the_grid(self):
        x = np.full((3, 16, 16), 0.4)
        slic = perturbations.segment_slic_like(x, 4)
        np.testing.assert_array_equal(slic.segment_id, perturbations.segment_grid(16, 16, 2, 2).segment_id)

    def test_slic_follows_color_edge(self):
        x = np.ones((3, 16, 16))
        x[:, :, :5] = 0.0
        slic = perturbations.segment_slic_like(x, 2)
        assert slic.count == 2
        assert np.all(slic.segment_id[:, :5] == 0)
        assert np.all(slic.segment_id[:, 5:] == 1)

    def test_slic_is_deterministic(self, tiny_input):
        a = perturbations.segment_slic_like(tiny_input, 4, seed=1)
        b = perturbations.segment_slic_like(tiny_input, 4, seed=1)
        np.testing.assert_array_equal(a.segment_id, b.segment_id)
        assert a.segment_id.min() == 0 and a.segment_id.max() == a.count - 1

    def test_slic_segment_count_range(self, tiny_input):
        with pytest.raises(ValueError):
            perturbations.segment_slic_like(tiny_input, 65)


class TestNoise:
    def test_zero_std_is_identity(self, tiny_input):
        np.testing.assert_array_equal(perturbations.gaussian_input_noise(tiny_input, 0.0, 1), tiny_input)

    def test_clamped_and_seeded(self, tiny_input):
        a = perturbations.gaussian_input_noise(tiny_input, 2.0, 5)
        assert a.min() >= 0.0 and a.max() <= 1.0
        np.testing.assert_array_equal(a, perturbations.gaussian_input_noise(tiny_input, 2.0, 5))

    def test_uniform_ball_radius(self, tiny_input):
        out = perturbations.uniform_ball_noise(tiny_input, 0.05, 2)
        assert np.max(np.abs(out - tiny_input)) <= 0.05
        assert out.min() >= 0.0 and out.max() <= 1.0

    @pytest.mark.parametrize("fn", [perturbations.gaussian_input_noise, perturbations.uniform_ball_noise])
    def test_negative_scale(self, tiny_input, fn):
        with pytest.raises(ValueError):
            fn(tiny_input, -0.1, 0)
