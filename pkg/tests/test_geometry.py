import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_homography
from ssp.errors import DegenerateError
from ssp.geometry import (
    CameraPose,
    apply_homography,
    compose,
    estimate_homography_dlt,
    identity_homography,
    invert,
    normalize_homography,
    pose_to_homography,
    scale_homography,
    translation_homography,
    warp_homography,
    warp_homography_backward,
)


def down_pose(x=0.0, y=0.0, altitude=50.0, yaw=0.0, f=64.0, c=31.5):
    """Camera at (x, y, altitude) looking straight down at the z=0 plane."""
    cz, sz = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    flip = np.diag([1.0, -1.0, -1.0])  # camera z points down
    r = flip @ rz.T
    t = -r @ np.array([x, y, altitude])
    return CameraPose(r, t, f, f, c, c)


def random_pose(rng):
    # small tilt around a downward view
    ax = rng.uniform(-0.15, 0.15, 3)
    k = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    tilt = np.eye(3) + np.sin(np.linalg.norm(ax)) / np.linalg.norm(ax) * k + (1 - np.cos(np.linalg.norm(ax))) / np.linalg.norm(ax) ** 2 * k @ k
    base = down_pose(*rng.uniform(-5, 5, 2), altitude=rng.uniform(30, 80))
    return CameraPose(tilt @ base.rotation, tilt @ base.translation, 64, 64, 31.5, 31.5)


def test_apply_identity_and_translation():
    assert apply_homography(identity_homography(), 3.5, -2.0) == (3.5, -2.0)
    assert apply_homography(translation_homography(3, -2), 5, 5) == (8.0, 3.0)


def test_apply_then_inverse(rng):
    for _ in range(20):
        h = random_homography(rng)
        x, y = rng.uniform(0, 64, 2)
        xb, yb = apply_homography(invert(h), *apply_homography(h, x, y))
        assert abs(xb - x) < 1e-6 and abs(yb - y) < 1e-6


def test_compose_matches_sequential_application(rng):
    a, b, c = (random_homography(rng) for _ in range(3))
    x, y = 10.0, 20.0
    np.testing.assert_allclose(apply_homography(compose(a, b), x, y), apply_homography(a, *apply_homography(b, x, y)), atol=1e-6)
    np.testing.assert_allclose(compose(compose(a, b), c), compose(a, compose(b, c)), atol=1e-9)


def test_normalize_rejects_degenerate():
    with pytest.raises(DegenerateError):
        normalize_homography(np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(DegenerateError):
        normalize_homography(np.array([[1.0, 2, 0], [2, 4, 0], [0, 0, 1]]))
    with pytest.raises(DegenerateError):
        apply_homography(np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, 1]]), -1.0, 0.0)


def test_warp_identity(rng):
    img = rng.standard_normal((3, 9, 7)).astype(np.float32)
    out, mask = warp_homography(img, identity_homography())
    np.testing.assert_array_equal(out, img)
    assert mask.min() == 1


def test_warp_integer_shift_on_ramp():
    img = np.tile(np.arange(6, dtype=np.float64), (1, 4, 1))
    out, mask = warp_homography(img, translation_homography(1, 0), fill=-1)
    np.testing.assert_array_equal(out[0, :, 1:], img[0, :, :-1])
    np.testing.assert_array_equal(out[0, :, 0], -1)
    np.testing.assert_array_equal(mask[:, 0], 0)
    assert mask[:, 1:].min() == 1


def test_warp_round_trip_smooth_image(rng):
    ys, xs = np.mgrid[0:32, 0:32]
    img = np.stack([np.sin(xs / 8.0) + np.cos(ys / 9.0)])
    h = random_homography(rng, 0.5)
    # NaN fill marks every pixel whose round trip touched an invalid sample
    fwd, _ = warp_homography(img, h, fill=np.nan)
    back, m2 = warp_homography(fwd, invert(h))
    keep = (m2 > 0) & np.isfinite(back[0])
    assert keep.mean() > 0.25
    assert np.abs(back[0] - img[0])[keep].max() < 1e-2


def test_warp_constant(rng):
    img = np.full((2, 16, 16), 0.25)
    out, mask = warp_homography(img, random_homography(rng))
    np.testing.assert_allclose(out[:, mask > 0], 0.25, atol=1e-12)


def test_warp_nearest_keeps_labels(rng):
    labels = rng.integers(0, 5, (12, 12)).astype(np.int32)
    out, mask = warp_homography(labels, random_homography(rng), fill=-1, mode="nearest")
    assert out.dtype == np.int32
    assert set(np.unique(out[mask > 0])) <= set(range(5))
    assert np.all(out[mask == 0] == -1)


def test_warp_backward_is_adjoint(rng):
    h = random_homography(rng)
    x = rng.standard_normal((2, 10, 10))
    g = rng.standard_normal((2, 10, 10))
    out, _ = warp_homography(x, h)
    assert (out * g).sum() == pytest.approx((x * warp_homography_backward(g, h)).sum(), rel=1e-10)


def test_scale_homography_commutes_with_block_centres(rng):
    h = random_homography(rng)
    hs = scale_homography(h, 4)
    for j, i in [(0, 0), (3, 5), (7, 2)]:
        full = apply_homography(h, 4 * j + 1.5, 4 * i + 1.5)
        feat = apply_homography(hs, j, i)
        np.testing.assert_allclose([4 * feat[0] + 1.5, 4 * feat[1] + 1.5], full, atol=1e-9)


def test_pose_identical_gives_identity(rng):
    for _ in range(5):
        p = random_pose(rng)
        np.testing.assert_allclose(pose_to_homography(p, p), np.eye(3), atol=1e-12)


def test_lateral_translation_is_pixel_shift():
    f, d, t = 64.0, 50.0, 2.0
    a, b = down_pose(0, 0, d, f=f), down_pose(t, 0, d, f=f)
    h = pose_to_homography(a, b)
    # project-and-fit oracle: project plane points in both views
    pts = np.array([[x, y, 0.0] for x in (-10, 0, 7) for y in (-5, 3, 9)])
    shift = b.project(pts) - a.project(pts)
    np.testing.assert_allclose(np.linalg.norm(shift, axis=1), f * t / d, atol=1e-9)
    np.testing.assert_allclose(h[:2, 2], shift[0], atol=1e-9)
    np.testing.assert_allclose(h[:2, :2], np.eye(2), atol=1e-12)


def test_pose_homography_maps_plane_points(rng):
    for _ in range(10):
        a, b = random_pose(rng), random_pose(rng)
        h = pose_to_homography(a, b)
        pts = np.c_[rng.uniform(-20, 20, (20, 2)), np.zeros(20)]
        ua, ub = a.project(pts), b.project(pts)
        xs, ys = apply_homography(h, ua[:, 0], ua[:, 1])
        assert np.abs(np.c_[xs, ys] - ub).max() < 1e-6


def test_pose_rejects_bad_rotation():
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, 2.0]), np.zeros(3), 1, 1, 0, 0)


def test_backproject_then_project(rng):
    p = random_pose(rng)
    xs, ys = rng.uniform(0, 63, 10), rng.uniform(0, 63, 10)
    world = p.backproject_to_plane(xs, ys)
    np.testing.assert_allclose(world[:, 2], 0, atol=1e-9)
    np.testing.assert_allclose(p.project(world), np.c_[xs, ys], atol=1e-9)


def test_dlt_unit_square_identity():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    np.testing.assert_allclose(estimate_homography_dlt(sq, sq), np.eye(3), atol=1e-9)


def test_dlt_recovers_random_homography(rng):
    for _ in range(20):
        h = random_homography(rng, 2.0)
        src = rng.uniform(0, 64, (8, 2))
        dst = np.c_[apply_homography(h, src[:, 0], src[:, 1])]
        est = estimate_homography_dlt(src, dst)
        assert np.abs(est - normalize_homography(h)).max() < 1e-6


def test_dlt_collinear_rejected():
    pts = np.array([[0, 0], [1, 1], [2, 2], [0, 3]], dtype=float)
    with pytest.raises(DegenerateError):
        estimate_homography_dlt(pts, pts + 1)
    with pytest.raises(DegenerateError):
        estimate_homography_dlt(pts[:3], pts[:3])


def test_dlt_all_collinear_many_points():
    pts = np.c_[np.arange(8.0), 2 * np.arange(8.0)]
    with pytest.raises(DegenerateError):
        estimate_homography_dlt(pts, pts)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-0.3, 0.3))
def test_similarity_transform_round_trip(tx, ty, theta):
    c, s = np.cos(theta), np.sin(theta)
    h = np.array([[c, -s, tx], [s, c, ty], [0, 0, 1]])
    x, y = apply_homography(compose(invert(h), h), 3.0, 4.0)
    assert abs(x - 3.0) < 1e-9 and abs(y - 4.0) < 1e-9
