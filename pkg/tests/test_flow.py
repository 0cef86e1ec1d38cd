import numpy as np
import pytest

from conftest import random_homography
from ssp.errors import ShapeError
from ssp.flow import (
    occlusion_from_flows,
    occlusion_mask_fb,
    photometric_weight,
    warp_flow,
    warp_flow_backward,
    warp_labels,
)
from ssp.geometry import homography_flow, warp_homography


def test_zero_flow_is_identity(rng):
    img = rng.standard_normal((3, 6, 5)).astype(np.float32)
    out, mask = warp_flow(img, np.zeros((2, 6, 5)))
    np.testing.assert_array_equal(out, img)
    assert mask.min() == 1


def test_uniform_flow_shifts_one_column():
    img = np.tile(np.arange(5, dtype=np.float64), (1, 3, 1))
    flow = np.zeros((2, 3, 5))
    flow[0] = -1  # every pixel takes its value from one column to the left
    out, mask = warp_flow(img, flow, fill=9.0)
    np.testing.assert_array_equal(out[0, :, 1:], img[0, :, :-1])
    np.testing.assert_array_equal(out[0, :, 0], 9.0)
    np.testing.assert_array_equal(mask[:, 0], 0)


def test_flow_from_homography_matches_homography_warp(rng):
    for _ in range(10):
        h = random_homography(rng)
        img = rng.uniform(0, 1, (3, 24, 20))
        a, ma = warp_homography(img, h)
        b, mb = warp_flow(img, homography_flow(h, 24, 20))
        both = (ma > 0) & (mb > 0)
        assert both.mean() > 0.5
        assert np.abs(a - b)[:, both].max() < 1e-5


def test_warp_flow_backward_is_adjoint(rng):
    flow = rng.uniform(-2, 2, (2, 7, 9))
    x = rng.standard_normal((2, 7, 9))
    g = rng.standard_normal((2, 7, 9))
    out, _ = warp_flow(x, flow)
    assert (out * g).sum() == pytest.approx((x * warp_flow_backward(g, flow)).sum(), rel=1e-10)


def test_warp_labels_nearest():
    labels = np.arange(12, dtype=np.int32).reshape(3, 4)
    flow = np.zeros((2, 3, 4))
    flow[0] = 0.4  # rounds back to the same pixel
    out, valid = warp_labels(labels, flow)
    np.testing.assert_array_equal(out[:, :3], labels[:, :3])
    assert not valid[:, 3].any() and np.all(out[:, 3] == -1)


def test_flow_shape_checked():
    with pytest.raises(ShapeError):
        warp_flow(np.zeros((1, 4, 4)), np.zeros((2, 4, 5)))
    with pytest.raises(ShapeError):
        warp_flow(np.zeros((1, 4, 4)), np.zeros((3, 4, 4)))


def test_photometric_weight_examples(rng):
    a = rng.uniform(0, 1, (3, 4, 4))
    np.testing.assert_array_equal(photometric_weight(a, a), 1.0)
    o = photometric_weight(np.zeros((3, 2, 2)), np.ones((3, 2, 2)))
    np.testing.assert_allclose(o, np.exp(-3), atol=1e-6)
    np.testing.assert_allclose(o, 0.0497871, atol=1e-6)
    b = rng.uniform(0, 1, (3, 4, 4))
    np.testing.assert_array_equal(photometric_weight(a, b), photometric_weight(b, a))


def test_photometric_weight_monotone():
    cur = np.zeros((3, 1, 5))
    past = np.zeros((3, 1, 5))
    past[1, 0] = [0.0, 0.1, 0.3, 0.6, 1.0]
    o = photometric_weight(cur, past)[0, 0]
    assert np.all(np.diff(o) <= 0)


def test_occlusion_examples():
    f = np.zeros((2, 2, 2))
    f[0] = 10
    np.testing.assert_array_equal(occlusion_mask_fb(f, -f), 0)
    np.testing.assert_array_equal(occlusion_mask_fb(f, f), 1)  # 400 > 2.5
    z = np.zeros((2, 2, 2))
    np.testing.assert_array_equal(occlusion_mask_fb(z, z), 0)


def test_occlusion_threshold_is_per_pixel():
    f = np.zeros((2, 1, 2))
    b = np.zeros((2, 1, 2))
    # pixel 0: |f+b|^2 = 0.49 <= 0.5 + 0.01*(0.49); pixel 1: 0.64 > 0.5 + 0.0064
    f[0] = [0.7, 0.8]
    np.testing.assert_array_equal(occlusion_mask_fb(f, b)[0, 0], [0, 1])


def test_occlusion_sign_invariant(rng):
    f = rng.uniform(-3, 3, (2, 5, 5))
    b = rng.uniform(-3, 3, (2, 5, 5))
    np.testing.assert_array_equal(occlusion_mask_fb(f, b), occlusion_mask_fb(-f, -b))


def test_background_flows_are_consistent(small_seq):
    """Forward and backward flows of the generator agree off sprites and in frame."""
    for k in range(len(small_seq.frames) - 1):
        occ = occlusion_from_flows(small_seq.flows_fwd[k], small_seq.flows_bwd[k])[0]
        _, valid = warp_flow(small_seq.labels[k][None].astype(float), small_seq.flows_fwd[k])
        ground = (small_seq.labels[k + 1] != small_seq.config.sprite_class) & (valid > 0)
        # stay one pixel clear of sprite borders, where bilinear resampling of
        # the backward flow mixes sprite and ground motion
        near_sprite = np.zeros_like(ground)
        sp = small_seq.labels[k + 1] == small_seq.config.sprite_class
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                near_sprite |= np.roll(np.roll(sp, dy, 0), dx, 1)
        assert occ[ground & ~near_sprite].max() == 0


def test_fast_sprite_uncovers_occluded_pixels():
    from ssp.synth import SceneConfig, generate_sequence

    seq = generate_sequence(SceneConfig(height=32, width=32, num_frames=3, num_sprites=1, sprite_size=(8, 8),
                                        sprite_speed=(3, 3), max_translation=0, max_yaw=0, seed=5))
    occ = occlusion_from_flows(seq.flows_fwd[0], seq.flows_bwd[0])[0]
    sprite_now = seq.labels[1] == seq.config.sprite_class
    sprite_before = seq.labels[0] == seq.config.sprite_class
    # ground pixels that were under the sprite one frame ago have no consistent match
    uncovered = sprite_before & ~sprite_now
    assert uncovered.any()
    assert occ[uncovered].mean() > 0.9
