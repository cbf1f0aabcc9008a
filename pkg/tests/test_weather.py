"""Environmental styling: determinism, labels, saturation, composition."""

import numpy as np
import pytest

from musenet import weather as W
from musenet.errors import UsageError


@pytest.fixture
def fixture_image():
    rng = np.random.default_rng(37)
    img = rng.integers(30, 200, size=(64, 64, 3), dtype=np.uint8)
    img[20:40, 10:30] = (180, 60, 60)  # a block so structure survives styling
    return img


ALL_STYLES = list(W.StyleKind)


class TestApplyStyle:
    def test_normal_is_bit_identical_copy(self, fixture_image):
        out = W.apply_style(fixture_image, W.StyleKind.NORMAL, np.random.default_rng(0))
        np.testing.assert_array_equal(out, fixture_image)
        assert out is not fixture_image

    @pytest.mark.parametrize("style", ALL_STYLES, ids=lambda s: s.name.lower())
    def test_same_seed_is_bit_identical(self, fixture_image, style):
        a = W.apply_style(fixture_image, style, np.random.default_rng(123))
        b = W.apply_style(fixture_image, style, np.random.default_rng(123))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("style", ALL_STYLES, ids=lambda s: s.name.lower())
    def test_output_stays_in_range(self, fixture_image, style):
        out = W.apply_style(fixture_image, style, np.random.default_rng(7))
        assert out.dtype == np.uint8
        assert out.shape == fixture_image.shape

    def test_overexposure_formula(self):
        img = np.full((4, 4, 3), 100, dtype=np.uint8)
        np.testing.assert_array_equal(
            W.brightness(img, 1.6, 10.0), np.full((4, 4, 3), 170, dtype=np.uint8))

    def test_overexposure_saturates(self):
        img = np.full((4, 4, 3), 200, dtype=np.uint8)
        np.testing.assert_array_equal(
            W.brightness(img, 1.6, 30.0), np.full((4, 4, 3), 255, dtype=np.uint8))

    def test_fog_lightens_toward_white(self, fixture_image):
        out = W.fog(fixture_image, 0.5)
        assert out.astype(int).mean() > fixture_image.astype(int).mean()

    def test_dark_darkens(self, fixture_image):
        out = W.apply_style(fixture_image, W.StyleKind.DARK, np.random.default_rng(3))
        assert out.astype(int).mean() < fixture_image.astype(int).mean()

    def test_wind_preserves_mean_roughly(self, fixture_image):
        out = W.apply_style(fixture_image, W.StyleKind.WIND, np.random.default_rng(4))
        assert abs(out.astype(float).mean() - fixture_image.astype(float).mean()) < 3.0
        # blur removes high-frequency energy
        def hf(img):
            g = img.astype(float).mean(axis=2)
            return np.abs(np.diff(g, axis=1)).mean()
        assert hf(out) < 0.8 * hf(fixture_image)

    def test_composite_is_literal_composition(self, fixture_image):
        seed = 99
        composite = W.apply_style(fixture_image, W.StyleKind.FOG_RAIN, np.random.default_rng(seed))
        sub = np.random.default_rng(seed).spawn(2)
        fogged = W.apply_style(fixture_image, W.StyleKind.FOG, sub[0])
        rained = W.apply_style(fogged, W.StyleKind.RAIN, sub[1])
        np.testing.assert_array_equal(composite, rained)


class TestStyleLabel:
    def test_drone_rain_is_three(self):
        assert W.style_label(W.Platform.DRONE, W.StyleKind.RAIN) == 3

    def test_satellite_is_zero(self):
        assert W.style_label(W.Platform.SATELLITE, W.StyleKind.NORMAL) == 0

    def test_drone_normal_is_one(self):
        assert W.style_label(W.Platform.DRONE, W.StyleKind.NORMAL) == 1

    def test_satellite_with_style_rejected(self):
        with pytest.raises(UsageError):
            W.style_label(W.Platform.SATELLITE, W.StyleKind.FOG)

    def test_label_bijection_over_legal_pairs(self):
        labels = {W.style_label(W.Platform.SATELLITE, W.StyleKind.NORMAL)}
        labels |= {W.style_label(W.Platform.DRONE, s) for s in W.StyleKind}
        assert labels == set(range(11))


class TestUnseenComposite:
    def test_deterministic(self, fixture_image):
        a = W.unseen_composite(fixture_image, np.random.default_rng(5))
        b = W.unseen_composite(fixture_image, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_differs_from_every_single_style(self, fixture_image):
        mixed = W.unseen_composite(fixture_image, np.random.default_rng(6))
        for style in ALL_STYLES:
            single = W.apply_style(fixture_image, style, np.random.default_rng(6))
            assert not np.array_equal(mixed, single), style.name

    def test_brighter_than_rain_only(self, fixture_image):
        mixed = W.unseen_composite(fixture_image, np.random.default_rng(7))
        rain_only = W.apply_style(fixture_image, W.StyleKind.RAIN, np.random.default_rng(7))
        assert mixed.astype(int).mean() > rain_only.astype(int).mean()


class TestStylingStream:
    def test_frozen_across_calls(self):
        a = W.styling_stream(W.DEFAULT_SEED, 42, 0, W.StyleKind.FOG).random(4)
        b = W.styling_stream(W.DEFAULT_SEED, 42, 0, W.StyleKind.FOG).random(4)
        np.testing.assert_array_equal(a, b)

    def test_varies_with_epoch_and_image(self):
        base = W.styling_stream(1, 5, 1, W.StyleKind.RAIN).random(4)
        assert not np.array_equal(base, W.styling_stream(1, 5, 2, W.StyleKind.RAIN).random(4))
        assert not np.array_equal(base, W.styling_stream(1, 6, 1, W.StyleKind.RAIN).random(4))
