import math

import numpy as np
import pytest

from ssp.errors import ContractError, ShapeError
from ssp.flow import occlusion_from_flows
from ssp.geometry import warp_homography
from ssp.metrics import ConfusionMatrix, confusion_accumulate, miou
from ssp.synth import (
    LinearHead,
    SceneConfig,
    fit_head,
    generate_sequence,
    head_backward,
    head_forward,
    make_teacher_logits,
    surrogate_features,
    surrogate_logits,
)
from ssp.tensor import argmax_channels, softmax_channels


def small(**kw):
    base = dict(height=32, width=32, num_frames=4, num_sprites=0, seed=11)
    base.update(kw)
    return SceneConfig(**base)


def test_same_seed_is_bit_identical():
    a = generate_sequence(small(num_sprites=1, sprite_size=(6, 8)))
    b = generate_sequence(small(num_sprites=1, sprite_size=(6, 8)))
    for x, y in zip(a.frames + a.flows_fwd + a.labels, b.frames + b.flows_fwd + b.labels):
        np.testing.assert_array_equal(x, y)
    c = generate_sequence(small(num_sprites=1, sprite_size=(6, 8), seed=12))
    assert not np.array_equal(a.frames[0], c.frames[0])


def test_static_camera_without_sprites():
    seq = generate_sequence(small(max_translation=0, max_yaw=0))
    for h in seq.homographies:
        np.testing.assert_allclose(h, np.eye(3), atol=1e-12)
    for f in seq.flows_fwd + seq.flows_bwd:
        np.testing.assert_allclose(f, 0, atol=1e-5)
    for img in seq.frames[1:]:
        np.testing.assert_array_equal(img, seq.frames[0])


def test_lateral_translation_flow_magnitude():
    cfg = small(translation_per_frame=(0.6, 0.0), yaw_per_frame=0.0, altitude=40.0, focal=50.0)
    seq = generate_sequence(cfg)
    expect = cfg.focal * 0.6 / cfg.altitude
    for f in seq.flows_fwd + seq.flows_bwd:
        mag = np.hypot(f[0].astype(np.float64), f[1].astype(np.float64))
        assert np.abs(mag - expect).max() < 1e-6


def test_labels_and_class_layout():
    seq = generate_sequence(small(num_sprites=1, sprite_size=(6, 8), num_classes=5))
    assert seq.class_names[-1] == "vehicle" and len(seq.class_names) == 5
    for lab in seq.labels:
        assert lab.dtype == np.int32 and lab.min() >= 0 and lab.max() <= 4
    no_sprites = generate_sequence(small(num_classes=5))
    assert all((lab < 4).all() for lab in no_sprites.labels)
    for img in seq.frames:
        assert img.dtype == np.float32 and img.shape == (3, 32, 32)
        assert img.min() >= 0 and img.max() <= 1


def test_annotation_mask():
    seq = generate_sequence(small(num_frames=7, annotation_every=3))
    assert seq.annotated == [True, False, False, True, False, False, True]


@pytest.mark.parametrize("bad", [dict(height=30), dict(height=36, width=34), dict(num_classes=1),
                                 dict(num_sprites=1, sprite_size=(40, 40)), dict(altitude=0)])
def test_config_validation(bad):
    with pytest.raises(ContractError):
        small(**bad)


def test_camera_only_warp_error():
    for seed in range(3):
        seq = generate_sequence(SceneConfig(num_frames=5, num_sprites=0, seed=seed))
        for k in range(1, 5):
            warped, valid = warp_homography(seq.frames[k - 1].astype(np.float64), seq.homographies[k - 1])
            err = np.abs(warped - seq.frames[k])[:, valid > 0]
            assert err.max() < 2e-2


def test_background_flows_pass_consistency_check():
    seq = generate_sequence(SceneConfig(num_frames=4, num_sprites=0, seed=2))
    for f, b in zip(seq.flows_fwd, seq.flows_bwd):
        occ = occlusion_from_flows(f, b)[0]
        x = np.arange(64) + f[0]
        y = np.arange(64)[:, None] + f[1]
        inside = (x >= 0) & (x <= 63) & (y >= 0) & (y <= 63)
        assert occ[inside].max() == 0


def block_oracle(frame, s=4):
    c, h, w = frame.shape
    out = np.zeros((8, h // s, w // s))
    gray = frame.astype(np.float64).mean(0)
    for by in range(h // s):
        for bx in range(w // s):
            blk = frame[:, by * s:(by + 1) * s, bx * s:(bx + 1) * s].astype(np.float64)
            out[0:3, by, bx] = [blk[i].mean() for i in range(3)]
            out[3:6, by, bx] = [blk[i].std() for i in range(3)]
            gx = gy = 0.0
            for yy in range(by * s, (by + 1) * s):
                for xx in range(bx * s, (bx + 1) * s):
                    if xx + 1 < w:
                        gx += abs(gray[yy, xx + 1] - gray[yy, xx])
                    if yy + 1 < h:
                        gy += abs(gray[yy + 1, xx] - gray[yy, xx])
            out[6, by, bx] = gx / (s * s)
            out[7, by, bx] = gy / (s * s)
    return out


def test_features_match_block_oracle(rng):
    frame = rng.uniform(0, 1, (3, 16, 12)).astype(np.float32)
    np.testing.assert_allclose(surrogate_features(frame), block_oracle(frame), atol=1e-6)


def test_features_constant_frame():
    f = surrogate_features(np.full((3, 8, 8), 0.4, dtype=np.float32))
    np.testing.assert_allclose(f[:3], 0.4, atol=1e-7)
    assert not f[3:].any()


def test_features_step_edge():
    frame = np.zeros((3, 16, 16), dtype=np.float32)
    frame[:, :, 9:] = 1.0
    f = surrogate_features(frame)
    # the jump between columns 8 and 9 lands in block column 2
    assert np.all(np.argmax(f[6], axis=1) == 2)
    assert not f[7].any()


def test_features_shape_errors():
    with pytest.raises(ShapeError):
        surrogate_features(np.zeros((3, 10, 8)))
    with pytest.raises(ShapeError):
        surrogate_features(np.zeros((1, 8, 8)))


def test_surrogate_logits_deterministic(rng):
    frame = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    head = LinearHead(rng.standard_normal((3, 8)).astype(np.float32), np.zeros(3, np.float32))
    np.testing.assert_array_equal(surrogate_logits(frame, head), surrogate_logits(frame.copy(), head))
    a = surrogate_logits(frame, head, noise=1.0, seed=[1, 2])
    np.testing.assert_array_equal(a, surrogate_logits(frame, head, noise=1.0, seed=[1, 2]))
    assert not np.array_equal(a, surrogate_logits(frame, head, noise=1.0, seed=[1, 3]))


def test_head_backward_is_adjoint(rng):
    head = LinearHead(rng.standard_normal((3, 8)), rng.standard_normal(3))
    up = rng.standard_normal((8, 5, 5))
    g = rng.standard_normal((3, 5, 5))
    grads = head_backward(up, g)
    dw = rng.standard_normal((3, 8))
    db = rng.standard_normal(3)
    moved = head_forward(LinearHead(head.weight + dw, head.bias + db), up) - head_forward(head, up)
    assert (g * moved).sum() == pytest.approx((grads["head.weight"] * dw).sum() + (grads["head.bias"] * db).sum())


def test_fitted_head_generalises():
    train = [generate_sequence(SceneConfig(num_frames=4, seed=s, logit_noise=0)) for s in (100, 101, 102)]
    frames = [f for s in train for f in s.frames]
    labels = [lab for s in train for lab in s.labels]
    head = fit_head(frames, labels, 4)
    cm = ConfusionMatrix(4)
    for s in (200, 201):
        seq = generate_sequence(SceneConfig(num_frames=3, seed=s))
        for f, lab in zip(seq.frames, seq.labels):
            confusion_accumulate(cm, lab, argmax_channels(surrogate_logits(f, head)))
    assert miou(cm) > 0.9


def test_teacher_examples(rng):
    labels = rng.integers(0, 4, (20, 20))
    t = make_teacher_logits(labels, 4, margin=6.0)
    np.testing.assert_array_equal(argmax_channels(t), labels)
    p = softmax_channels(t.astype(np.float64), 2.0)
    expected = math.exp(3) / (math.exp(3) + 3)
    assert abs(expected - 0.8700) < 1e-4
    np.testing.assert_allclose(np.take_along_axis(p, labels[None], 0), expected, atol=1e-6)


def test_teacher_corruption_rate(rng):
    labels = rng.integers(0, 4, (100, 100))
    t = make_teacher_logits(labels, 4, corruption_rate=0.1, seed=5)
    frac = (argmax_channels(t) != labels).mean()
    assert abs(frac - 0.1) <= 0.01


def test_teacher_validation():
    with pytest.raises(ContractError):
        make_teacher_logits(np.zeros((2, 2), int), 3, margin=0)
    with pytest.raises(ContractError):
        make_teacher_logits(np.zeros((2, 2), int), 3, corruption_rate=1.0)
