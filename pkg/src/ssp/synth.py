"""Procedural aerial scenes with exact ground truth, and a surrogate image model.

A downward-looking pinhole camera flies over a textured ground plane split
into Voronoi regions, with square sprites ("vehicles") sliding across it.
Labels, homographies and optical flows are all computed analytically from
the camera poses and sprite trajectories.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ssp.errors import ContractError, ShapeError
from ssp.geometry import CameraPose, pose_to_homography
from ssp.losses import loss_ce, loss_ce_backward
from ssp.tensor import bilinear_resize

FEATURE_CHANNELS = 8
_STRIDE = 4

_GROUND_NAMES = ["road", "vegetation", "roof", "water", "soil", "field", "rock"]
_GROUND_COLORS = [
    (0.45, 0.45, 0.48),
    (0.22, 0.55, 0.20),
    (0.70, 0.38, 0.30),
    (0.15, 0.30, 0.65),
    (0.55, 0.45, 0.25),
    (0.75, 0.72, 0.35),
    (0.35, 0.30, 0.30),
]
_SPRITE_COLOR = (0.92, 0.85, 0.15)


@dataclass
class SceneConfig:
    """Generator settings. Distances in meters, speeds of sprites in px/frame."""

    height: int = 64
    width: int = 64
    num_frames: int = 30
    num_classes: int = 4
    num_regions: int = 6
    num_sprites: int = 2
    sprite_size: tuple = (10.0, 14.0)
    sprite_speed: tuple = (1.0, 2.5)
    altitude: float = 50.0
    focal: float = 64.0
    max_translation: float = 1.0
    max_yaw: float = 0.02
    translation_per_frame: tuple = None
    yaw_per_frame: float = None
    texture_amplitude: float = 0.06
    image_noise: float = 0.0
    logit_noise: float = 1.0
    annotation_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.sprite_size = tuple(self.sprite_size)
        self.sprite_speed = tuple(self.sprite_speed)
        if self.translation_per_frame is not None:
            self.translation_per_frame = tuple(self.translation_per_frame)
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if self.height < 32 or self.width < 32:
            raise ContractError("frames must be at least 32x32")
        if self.height % _STRIDE or self.width % _STRIDE:
            raise ContractError(f"frame dims must be divisible by {_STRIDE}")
        if self.altitude <= 0:
            raise ContractError("altitude must be positive")
        if self.num_frames < 1 or self.annotation_every < 1:
            raise ContractError("num_frames and annotation_every must be >= 1")
        if self.num_sprites and max(self.sprite_size) >= min(self.height, self.width):
            raise ContractError("sprites must be smaller than the frame")

    @property
    def ground_classes(self):
        # the last class is reserved for sprites even when there are none,
        # so class indices mean the same thing across configurations
        return self.num_classes - 1

    @property
    def sprite_class(self):
        return self.num_classes - 1

    def class_names(self):
        names = [_GROUND_NAMES[i % len(_GROUND_NAMES)] + ("" if i < len(_GROUND_NAMES) else str(i)) for i in range(self.num_classes - 1)]
        return names + ["vehicle"]


@dataclass
class SyntheticSequence:
    config: SceneConfig
    frames: list
    labels: list
    homographies: list
    flows_fwd: list
    flows_bwd: list
    poses: list
    annotated: list
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


def _yaw_rotation(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    # rows are the camera axes in world coordinates; camera z looks straight down
    return np.array([[c, s, 0.0], [s, -c, 0.0], [0.0, 0.0, -1.0]])


def _make_pose(cfg, center_xy, yaw):
    r = _yaw_rotation(yaw)
    c = np.array([center_xy[0], center_xy[1], cfg.altitude])
    return CameraPose(
        r, -r @ c, cfg.focal, cfg.focal, (cfg.width - 1) / 2, (cfg.height - 1) / 2
    )


class _World:
    """Ground regions and sprites, queried at world coordinates and time."""

    def __init__(self, cfg, rng, footprint):
        self.cfg = cfg
        lo, hi = footprint
        self.centers = rng.uniform(lo, hi, size=(cfg.num_regions, 2))
        classes = np.arange(cfg.num_regions) % cfg.ground_classes
        rng.shuffle(classes)
        self.region_class = classes
        base = np.array([_GROUND_COLORS[c % len(_GROUND_COLORS)] for c in classes])
        self.region_color = np.clip(base + rng.uniform(-0.04, 0.04, size=base.shape), 0, 1)
        m_per_px = cfg.altitude / cfg.focal
        self.edge_width = 2.0 * m_per_px
        # two plane waves per region, wavelengths of 8-16 px
        self.tex_freq = rng.uniform(1 / 16, 1 / 8, size=(cfg.num_regions, 2)) / m_per_px
        self.tex_dir = rng.uniform(0, 2 * np.pi, size=(cfg.num_regions, 2))
        self.tex_phase = rng.uniform(0, 2 * np.pi, size=(cfg.num_regions, 2))

        n = cfg.num_sprites
        self.sprite_half = rng.uniform(*cfg.sprite_size, size=n) * m_per_px / 2
        speed = rng.uniform(*cfg.sprite_speed, size=n) * m_per_px
        heading = rng.uniform(0, 2 * np.pi, size=n)
        self.sprite_vel = np.stack([speed * np.cos(heading), speed * np.sin(heading)], -1)
        self.sprite_mid = np.zeros((n, 2))
        self.mid_frame = (cfg.num_frames - 1) / 2
        self.sprite_tex_phase = rng.uniform(0, 2 * np.pi, size=n)

    def place_sprites(self, rng, mid_center, spread):
        n = self.cfg.num_sprites
        self.sprite_mid = mid_center + rng.uniform(-spread, spread, size=(n, 2))

    def sprite_positions(self, k):
        if not self.cfg.num_sprites:
            return np.zeros((0, 2))
        return self.sprite_mid + (k - self.mid_frame) * self.sprite_vel

    def sprite_index(self, xy, k):
        """Index of the top-most sprite covering each point, -1 for ground."""
        idx = np.full(xy.shape[:-1], -1, dtype=np.int64)
        for s, pos in enumerate(self.sprite_positions(k)):
            inside = np.all(np.abs(xy - pos) <= self.sprite_half[s], axis=-1)
            idx[inside] = s
        return idx

    def _region_color(self, xy, region):
        color = self.region_color[region].copy()
        for w in range(2):
            ang = self.tex_dir[region, w]
            proj = xy[..., 0] * np.cos(ang) + xy[..., 1] * np.sin(ang)
            wave = np.sin(2 * np.pi * self.tex_freq[region, w] * proj + self.tex_phase[region, w])
            color += self.cfg.texture_amplitude * wave[..., None]
        return color

    def ground(self, xy):
        """Class (hard Voronoi cell) and colour at ground points.

        Colours are a softmax blend of every cell's colour over the distances
        to the cell centres, so they change smoothly (over about a pixel)
        across cell borders and resampling a rendered frame reproduces the
        next one to interpolation accuracy.
        """
        d = np.sqrt(((xy[..., None, :] - self.centers) ** 2).sum(-1))
        region = np.argmin(d, axis=-1)
        w = np.exp(-(d - d.min(axis=-1, keepdims=True)) / self.edge_width)
        w /= w.sum(axis=-1, keepdims=True)
        color = np.zeros(xy.shape[:-1] + (3,))
        for r in range(self.cfg.num_regions):
            color += w[..., r, None] * self._region_color(xy, np.full(xy.shape[:-1], r))
        return self.region_class[region], color

    def render(self, xy, k):
        labels, color = self.ground(xy)
        idx = self.sprite_index(xy, k)
        pos = self.sprite_positions(k)
        for s in range(self.cfg.num_sprites):
            on = idx == s
            if not on.any():
                continue
            local = xy[on] - pos[s]
            stripes = np.sin(2 * np.pi * local[:, 0] / (self.sprite_half[s]) + self.sprite_tex_phase[s])
            color[on] = np.array(_SPRITE_COLOR) + self.cfg.texture_amplitude * stripes[:, None]
            labels[on] = self.cfg.sprite_class
        return labels, np.clip(color, 0, 1)


def _trajectory(cfg, rng):
    if cfg.translation_per_frame is not None:
        vel = np.asarray(cfg.translation_per_frame, dtype=np.float64)
    else:
        vel = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
    yaw_rate = cfg.yaw_per_frame if cfg.yaw_per_frame is not None else rng.uniform(-cfg.max_yaw, cfg.max_yaw)
    yaw0 = rng.uniform(0, 2 * np.pi)
    start = rng.uniform(-20, 20, size=2)
    return [_make_pose(cfg, start + k * vel, yaw0 + k * yaw_rate) for k in range(cfg.num_frames)]


def _pixel_grid(cfg):
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    return xs, ys


def _flow_between(world, pose_src, pose_dst, k_src, k_dst, xs, ys):
    """Flow on the destination grid pointing to the source-frame location."""
    xyz = pose_dst.backproject_to_plane(xs, ys)
    xy = xyz[..., :2]
    idx = world.sprite_index(xy, k_dst)
    src = xy.copy()
    dt = k_src - k_dst
    for s in range(world.cfg.num_sprites):
        on = idx == s
        src[on] += dt * world.sprite_vel[s]
    pts = np.concatenate([src, np.zeros(src.shape[:-1] + (1,))], -1).reshape(-1, 3)
    uv = pose_src.project(pts).reshape(xs.shape + (2,))
    return np.stack([uv[..., 0] - xs, uv[..., 1] - ys]).astype(np.float32)


def generate_sequence(config):
    """Render a deterministic sequence for ``config`` (all randomness from ``config.seed``)."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    poses = _trajectory(cfg, rng)
    xs, ys = _pixel_grid(cfg)
    corners_x = np.array([0, cfg.width - 1, 0, cfg.width - 1], dtype=np.float64)
    corners_y = np.array([0, 0, cfg.height - 1, cfg.height - 1], dtype=np.float64)
    pts = np.concatenate([p.backproject_to_plane(corners_x, corners_y)[:, :2] for p in poses])
    margin = 0.25 * (pts.max(0) - pts.min(0))
    world = _World(cfg, rng, (pts.min(0) - margin, pts.max(0) + margin))
    mid = poses[(cfg.num_frames - 1) // 2]
    mid_center = mid.backproject_to_plane(np.array((cfg.width - 1) / 2), np.array((cfg.height - 1) / 2))[:2]
    view_half = 0.25 * min(cfg.height, cfg.width) * cfg.altitude / cfg.focal
    world.place_sprites(rng, mid_center, view_half)

    frames, labels = [], []
    for k, pose in enumerate(poses):
        xy = pose.backproject_to_plane(xs, ys)[..., :2]
        lab, color = world.render(xy, k)
        img = color.transpose(2, 0, 1)
        if cfg.image_noise > 0:
            noise_rng = np.random.default_rng([cfg.seed, 1, k])
            img = np.clip(img + cfg.image_noise * noise_rng.standard_normal(img.shape), 0, 1)
        frames.append(img.astype(np.float32))
        labels.append(lab.astype(np.int32))

    homs, fwd, bwd = [], [], []
    for k in range(cfg.num_frames - 1):
        homs.append(pose_to_homography(poses[k], poses[k + 1]))
        fwd.append(_flow_between(world, poses[k], poses[k + 1], k, k + 1, xs, ys))
        bwd.append(_flow_between(world, poses[k + 1], poses[k], k + 1, k, xs, ys))
    annotated = [k % cfg.annotation_every == 0 for k in range(cfg.num_frames)]
    return SyntheticSequence(cfg, frames, labels, homs, fwd, bwd, poses, annotated, cfg.class_names())


def surrogate_features(frame):
    """Frozen stride-4 features of an RGB frame, shape (8, H/4, W/4).

    Channels: block mean of R, G, B; block standard deviation of R, G, B;
    block mean of |d/dx| and |d/dy| of the grey image (forward differences,
    zero at the last column/row).
    """
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) frame, got {frame.shape}")
    _, h, w = frame.shape
    if h % _STRIDE or w % _STRIDE:
        raise ShapeError(f"frame dims {h}x{w} are not divisible by {_STRIDE}")
    f = frame.astype(np.float64)
    blocks = f.reshape(3, h // _STRIDE, _STRIDE, w // _STRIDE, _STRIDE)
    mean = blocks.mean(axis=(2, 4))
    std = blocks.std(axis=(2, 4))
    gray = f.mean(axis=0)
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :-1] = np.abs(np.diff(gray, axis=1))
    gy[:-1, :] = np.abs(np.diff(gray, axis=0))
    grad = np.stack([gx, gy]).reshape(2, h // _STRIDE, _STRIDE, w // _STRIDE, _STRIDE).mean(axis=(2, 4))
    return np.concatenate([mean, std, grad]).astype(np.float32)


@dataclass
class LinearHead:
    """Per-pixel linear classifier: logits = weight @ features + bias."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, num_classes, channels=FEATURE_CHANNELS, dtype=np.float32):
        return cls(np.zeros((num_classes, channels), dtype=dtype), np.zeros(num_classes, dtype=dtype))

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def params(self):
        return {"head.weight": self.weight, "head.bias": self.bias}

    def with_params(self, params):
        return LinearHead(params["head.weight"], params["head.bias"])


def upsample_features(feat, height, width):
    return bilinear_resize(feat, height, width)


def head_forward(head, up_feat):
    if up_feat.shape[0] != head.weight.shape[1]:
        raise ShapeError(f"head expects {head.weight.shape[1]} feature channels, got {up_feat.shape[0]}")
    out = np.tensordot(head.weight, up_feat, axes=([1], [0])) + head.bias[:, None, None]
    return out.astype(np.result_type(head.weight, up_feat), copy=False)


def head_backward(up_feat, grad_logits):
    """Return {'head.weight': ..., 'head.bias': ...} for upstream ``grad_logits``."""
    return {
        "head.weight": np.tensordot(grad_logits, up_feat, axes=([1, 2], [1, 2])),
        "head.bias": grad_logits.sum(axis=(1, 2)),
    }


def logit_noise(shape, level, seed, dtype=np.float32):
    """Seeded Gaussian logit perturbation; ``seed`` may be an int or a sequence of ints."""
    if level == 0:
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    return (level * rng.standard_normal(shape)).astype(dtype)


def surrogate_logits(frame, head, noise=0.0, seed=0, features=None):
    """Image-model stand-in: linear head on upsampled features plus logit noise."""
    feat = surrogate_features(frame) if features is None else features
    up = upsample_features(feat, *frame.shape[1:])
    clean = head_forward(head, up)
    return clean + logit_noise(clean.shape, noise, seed, clean.dtype)


def fit_head(frames, labels, num_classes, l2=1e-3, max_iter=300):
    """Fit the linear head by L2-regularised multinomial logistic regression.

    Features are standardised for the solve and the scaling is folded back
    into the returned weights.
    """
    feats = [upsample_features(surrogate_features(f), *f.shape[1:]).astype(np.float64) for f in frames]
    x = np.concatenate([f.reshape(f.shape[0], -1) for f in feats], axis=1)
    y = np.concatenate([np.asarray(lab).reshape(-1) for lab in labels])
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True) + 1e-6
    xs = ((x - mu) / sd)[:, None, :]  # (F, 1, N) as a 1-row image
    lab = y[None, :]
    c, nf = num_classes, x.shape[0]

    def objective(theta):
        w = theta[: c * nf].reshape(c, nf)
        b = theta[c * nf:]
        logits = np.tensordot(w, xs, axes=([1], [0])) + b[:, None, None]
        loss = loss_ce(logits, lab) + 0.5 * l2 * (w**2).sum()
        g = loss_ce_backward(logits, lab)
        gw = np.tensordot(g, xs, axes=([1, 2], [1, 2])) + l2 * w
        gb = g.sum(axis=(1, 2))
        return loss, np.concatenate([gw.ravel(), gb])

    res = minimize(objective, np.zeros(c * nf + c), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    w = res.x[: c * nf].reshape(c, nf)
    b = res.x[c * nf:]
    weight = w / sd[:, 0]
    bias = b - weight @ mu[:, 0]
    return LinearHead(weight.astype(np.float32), bias.astype(np.float32))


def make_teacher_logits(labels, num_classes, margin=6.0, corruption_rate=0.0, seed=0):
    """Teacher stand-in: ``margin`` on the (possibly flipped) class, 0 elsewhere.

    Each pixel is flipped to a uniformly drawn different class with
    probability ``corruption_rate``.
    """
    if margin <= 0:
        raise ContractError("margin must be positive")
    if not 0 <= corruption_rate < 1:
        raise ContractError("corruption rate must lie in [0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape) < corruption_rate
    offset = rng.integers(1, num_classes, size=labels.shape)
    cls = np.where(flip, (labels + offset) % num_classes, labels)
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    np.put_along_axis(out, cls[None].astype(np.intp), np.float32(margin), axis=0)
    return out


def sequence_features(seq):
    return [surrogate_features(f) for f in seq.frames]

