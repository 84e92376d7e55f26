"""Center-surround map, surround means, reconstruction targets."""

import numpy as np
import pytest

from gues import saliency as sal
from gues.rng import substream
from gues.saliency import (DERIVATIVE_BOUND, TARGET_GAIN,
                           fine_grained_saliency, saliency_directional_derivative,
                           saliency_target, saliency_target_batch, surround_mean,
                           surround_mean_at, to_gray)
from gues.verify import naive_fine_grained_saliency


def test_to_gray_coefficients():
    assert to_gray(np.ones((1, 1, 3)))[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert to_gray(np.zeros((1, 1, 3)))[0, 0] == 0.0
    red = np.zeros((1, 1, 3))
    red[0, 0, 0] = 1.0
    assert to_gray(red)[0, 0] == pytest.approx(0.299, abs=1e-12)


def test_to_gray_rejects_bad_shape():
    with pytest.raises(ValueError):
        to_gray(np.zeros((4, 4)))


def test_surround_mean_constant_image():
    for scale in (1, 3, 7):
        out = surround_mean(np.full((20, 20), 0.37), scale)
        assert np.allclose(out, 0.37, atol=1e-12)


def test_surround_mean_single_center_pixel():
    gray = np.zeros((9, 9))
    gray[4, 4] = 1.0
    # window sum at the bright pixel is 1; minus the pixel leaves 0
    assert surround_mean(gray, 1)[4, 4] == 0.0
    assert surround_mean_at(gray, 4, 4, 1) == 0.0


def test_surround_mean_corner_with_replicate_padding():
    gray = np.zeros((3, 3))
    gray[1, 1] = 1.0
    # 3x3 window at (0,0) replicates edges; the only nonzero entry is
    # the original center pixel, so sur = (1 - 0) / 8
    assert surround_mean(gray, 1)[0, 0] == pytest.approx(0.125, abs=1e-15)


def test_surround_mean_rejects_unknown_scale():
    with pytest.raises(ValueError):
        surround_mean(np.zeros((8, 8)), 2)


def test_surround_mean_at_bounds_check():
    with pytest.raises(IndexError):
        surround_mean_at(np.zeros((4, 4)), 4, 0, 1)


def test_map_constant_image_exact_zero():
    out = fine_grained_saliency(np.full((32, 32), 0.5))
    assert out.shape == (32, 32)
    assert np.all(out == 0.0)


def test_map_single_bright_pixel():
    gray = np.zeros((31, 31))
    gray[15, 15] = 1.0
    out = fine_grained_saliency(gray)
    assert out[15, 15] == 1.0
    for dh, dw in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        assert out[15 + dh, 15 + dw] == 0.0


def test_map_matches_naive_oracle_bitwise():
    gen = substream(5, 1)
    for _ in range(4):
        img = gen.random((16, 16))
        ours = fine_grained_saliency(img)
        ref = naive_fine_grained_saliency(img)
        assert ours.tobytes() == ref.tobytes()


def test_map_range_and_clamp():
    img = substream(5, 2).random((24, 24))
    out = fine_grained_saliency(img)
    assert np.all(out >= 0.0)
    assert np.all(out <= 1.0)


def test_map_rejects_non_2d():
    with pytest.raises(ValueError):
        fine_grained_saliency(np.zeros((4, 4, 3)))


def test_target_constant_image_identity():
    image = np.full((16, 16, 3), 0.4)
    target = saliency_target(image)
    # zero saliency: no additive component anywhere
    assert np.array_equal(target, image)


def test_target_additive_component_replicated_across_channels():
    image = substream(5, 3).random((16, 16, 3))
    target = saliency_target(image)
    delta = target - image
    # per-channel add/subtract round trip leaves float eps differences
    assert np.allclose(delta[:, :, 0], delta[:, :, 1], atol=1e-12, rtol=0)
    assert np.allclose(delta[:, :, 0], delta[:, :, 2], atol=1e-12, rtol=0)
    expected = TARGET_GAIN * fine_grained_saliency(to_gray(image))
    assert np.allclose(delta[:, :, 0], expected, atol=1e-12)


def test_target_gain_override():
    image = substream(5, 4).random((8, 8, 3))
    doubled = saliency_target(image, gain=2.0 * TARGET_GAIN) - image
    base = saliency_target(image) - image
    assert np.allclose(doubled, 2.0 * base, atol=1e-12)


def test_target_batch_matches_per_image():
    images = substream(5, 5).random((3, 3, 12, 12))
    batch = saliency_target_batch(images)
    assert batch.shape == images.shape
    for n in range(3):
        hwc = np.transpose(images[n], (1, 2, 0))
        expected = np.transpose(saliency_target(hwc), (2, 0, 1))
        assert np.allclose(batch[n], expected, atol=1e-12)


def test_target_batch_rejects_bad_layout():
    with pytest.raises(ValueError):
        saliency_target_batch(np.zeros((2, 12, 12, 3)))


def test_directional_derivative_locality_and_bound():
    gray = substream(5, 6).random((20, 20))
    field = saliency_directional_derivative(gray, 9, 9)
    h_idx, w_idx = np.nonzero(field)
    if h_idx.size:
        assert np.abs(h_idx - 9).max() <= 15
        assert np.abs(w_idx - 9).max() <= 15
    assert np.abs(field).max() <= DERIVATIVE_BOUND + 1e-6


def test_directional_derivative_zero_in_clamp_active_region():
    # a deep pit: center far below its surround at every scale, so the
    # clamp stays active before and after the probe bump
    gray = np.full((33, 33), 0.9)
    gray[16, 16] = 0.0
    field = saliency_directional_derivative(gray, 16, 16, delta=1e-4)
    assert field[16, 16] == 0.0


def test_lesion_saliency_concentrates_inside_boxes():
    # heavily lesioned samples; sparse ones are diluted by the bright
    # optic-disc confuser, which lights up the map by design
    from gues.data import generate_retinatoy
    samples = [s for s in generate_retinatoy(2, 40) if s.grade == 4]
    assert samples
    for sample in samples:
        smap = fine_grained_saliency(to_gray(sample.image))
        mask = np.zeros_like(smap, dtype=bool)
        for _kind, top, bottom, left, right in sample.lesion_boxes:
            mask[top:bottom + 1, left:right + 1] = True
        assert smap.sum() > 0
        assert smap[mask].sum() >= 0.6 * smap.sum()
