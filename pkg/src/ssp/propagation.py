"""Similarity-weighted propagation of logits through a video.

At every frame after the first, the previous output is warped onto the current
frame and blended with the image model's logits:

    out = alpha * past + (1 - alpha) * current

where alpha in [0, 1] comes from a small convolutional stack over the
concatenated (warped past, current) stride-4 feature maps.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ssp.errors import ContractError, ShapeError
from ssp.geometry import identity_homography, scale_homography, warp_homography
from ssp.tensor import (
    ConvSpec,
    bilinear_resize,
    bilinear_resize_backward,
    conv2d,
    conv2d_backward,
    relu,
    sigmoid,
)

FEATURE_STRIDE = 4


@dataclass
class SimilarityLayer:
    """Weights of the alpha predictor.

    ``mode`` is ``"conv"`` (learned stack, 3x3 kernels, ReLU between layers,
    sigmoid output) or ``"cosine"`` (parameter-free cosine similarity).
    """

    convs: list = field(default_factory=list)
    mode: str = "conv"
    stride: int = FEATURE_STRIDE

    def __post_init__(self):
        if self.mode not in ("conv", "cosine"):
            raise ValueError(f"unknown similarity mode {self.mode!r}")
        if self.mode == "cosine" and self.convs:
            raise ValueError("cosine similarity has no parameters")
        if self.mode == "conv":
            if not self.convs:
                raise ValueError("learned similarity needs at least one conv layer")
            for a, b in zip(self.convs, self.convs[1:]):
                if a.out_channels != b.in_channels:
                    raise ShapeError("conv stack channel counts do not chain")
            if self.convs[-1].out_channels != 1:
                raise ShapeError("last similarity conv must output one channel")

    @classmethod
    def create(cls, feature_channels, seed=0, mode="conv", depth=3, dtype=np.float32):
        """Build a layer with channel halving 2C -> C -> C/2 -> ... -> 1.

        Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero.
        """
        if mode == "cosine":
            return cls([], "cosine")
        rng = np.random.default_rng(seed)
        chans = [2 * feature_channels]
        for _ in range(depth - 1):
            chans.append(max(chans[-1] // 2, 1))
        chans.append(1)
        convs = []
        for cin, cout in zip(chans, chans[1:]):
            bound = np.sqrt(1.0 / (cin * 9))
            w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype)
            convs.append(ConvSpec(w, np.zeros(cout, dtype=dtype), stride=1, padding=1))
        return cls(convs, "conv")

    @property
    def feature_channels(self):
        return self.convs[0].in_channels // 2 if self.convs else None

    def params(self):
        out = {}
        for i, c in enumerate(self.convs):
            out[f"sim.{i}.weight"] = c.weight
            out[f"sim.{i}.bias"] = c.bias
        return out

    def with_params(self, params):
        convs = [
            ConvSpec(params[f"sim.{i}.weight"], params[f"sim.{i}.bias"], c.stride, c.padding)
            for i, c in enumerate(self.convs)
        ]
        return SimilarityLayer(convs, self.mode, self.stride)

    def astype(self, dtype):
        return self.with_params({k: v.astype(dtype) for k, v in self.params().items()})


@dataclass
class _AlphaCache:
    inputs: list
    pre: list
    low: np.ndarray
    validity: np.ndarray
    out_shape: tuple


def _check_features(feat_past, feat_cur, layer):
    if feat_past.shape != feat_cur.shape or feat_past.ndim != 3:
        raise ShapeError(f"feature maps differ: {feat_past.shape} vs {feat_cur.shape}")
    if layer.mode == "conv" and feat_past.shape[0] != layer.feature_channels:
        raise ShapeError(
            f"features have {feat_past.shape[0]} channels, layer expects {layer.feature_channels}"
        )


def _validity_map(validity, out_shape):
    if validity is None:
        return np.ones((1,) + out_shape, dtype=np.float32)
    v = np.asarray(validity).reshape((1,) + tuple(np.shape(validity)[-2:]))
    if v.shape[1:] != out_shape:
        raise ShapeError(f"validity grid {v.shape[1:]} does not match alpha grid {out_shape}")
    return v


def similarity_alpha_forward(feat_past, feat_cur, validity, layer, out_shape=None):
    _check_features(feat_past, feat_cur, layer)
    h, w = feat_cur.shape[1:]
    out_shape = tuple(out_shape) if out_shape is not None else (h * layer.stride, w * layer.stride)
    valid = _validity_map(validity, out_shape)
    if layer.mode == "cosine":
        dot = (feat_past * feat_cur).sum(axis=0, keepdims=True)
        norms = np.linalg.norm(feat_past, axis=0) * np.linalg.norm(feat_cur, axis=0)
        sim = dot / np.maximum(norms, 1e-12)[None]
        low = np.clip((sim + 1) / 2, 0, 1)
        inputs, pre = [], []
    else:
        x = np.concatenate([feat_past, feat_cur], axis=0)
        inputs, pre = [], []
        for i, spec in enumerate(layer.convs):
            inputs.append(x)
            z = conv2d(x, spec)
            pre.append(z)
            x = relu(z) if i < len(layer.convs) - 1 else z
        low = sigmoid(x)
    alpha = bilinear_resize(low, *out_shape)
    alpha = np.clip(alpha, 0, 1) * (valid > 0)
    alpha = alpha.astype(feat_cur.dtype, copy=False)
    return alpha, _AlphaCache(inputs, pre, low, valid, out_shape)


def hidden_pattern(feat_past, feat_cur, layer):
    """Sign pattern of the hidden (pre-ReLU) activations, flattened."""
    if layer.mode != "conv":
        return np.zeros(0, dtype=bool)
    x = np.concatenate([feat_past, feat_cur], axis=0)
    out = []
    for spec in layer.convs[:-1]:
        z = conv2d(x, spec)
        out.append((z > 0).ravel())
        x = relu(z)
    return np.concatenate(out) if out else np.zeros(0, dtype=bool)


def similarity_alpha(feat_past_warped, feat_current, validity, layer, out_shape=None):
    """Per-pixel interpolation weights in [0, 1], shape (1, H, W).

    Features are at stride ``layer.stride``; the result is bilinearly
    upsampled to ``out_shape`` (default: stride times the feature grid) and
    forced to 0 wherever ``validity`` is 0.
    """
    return similarity_alpha_forward(feat_past_warped, feat_current, validity, layer, out_shape)[0]


def similarity_alpha_backward(cache, grad_alpha, layer):
    """Gradients of a learned similarity layer.

    Returns (param_grads, grad_feat_past, grad_feat_current).
    """
    if layer.mode != "conv":
        raise ContractError("backward is only defined for the learned similarity layer")
    g = grad_alpha * (cache.validity > 0)
    g_low = bilinear_resize_backward(g, *cache.low.shape[1:])
    g = g_low * cache.low * (1 - cache.low)
    grads = {}
    for i in reversed(range(len(layer.convs))):
        if i < len(layer.convs) - 1:
            g = g * (cache.pre[i] > 0)
        gx, gw, gb = conv2d_backward(cache.inputs[i], layer.convs[i], g)
        grads[f"sim.{i}.weight"] = gw
        grads[f"sim.{i}.bias"] = gb
        g = gx
    c = g.shape[0] // 2
    return grads, g[:c], g[c:]


def propagate_step(q, p_warped, alpha):
    """Blend current logits ``q`` with aligned past logits per pixel.

    Exact at the end points (alpha 0 gives q, alpha 1 gives p) and never
    leaves the interval spanned by p and q.
    """
    if q.shape != p_warped.shape:
        raise ShapeError(f"logit shapes differ: {q.shape} vs {p_warped.shape}")
    if alpha.shape != (1,) + q.shape[1:]:
        raise ShapeError(f"alpha must have shape (1, H, W) = {(1,) + q.shape[1:]}, got {alpha.shape}")
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ContractError("alpha must lie in [0, 1]")
    out = alpha * p_warped + (1 - alpha) * q
    # rounding can push the blend one ulp outside [min, max]
    return np.clip(out, np.minimum(p_warped, q), np.maximum(p_warped, q)).astype(q.dtype, copy=False)


def propagate_step_backward(q, p_warped, alpha, grad_out):
    """Return (grad_q, grad_p_warped, grad_alpha)."""
    grad_q = (1 - alpha) * grad_out
    grad_p = alpha * grad_out
    grad_alpha = (grad_out * (p_warped - q)).sum(axis=0, keepdims=True)
    return grad_q, grad_p, grad_alpha


@dataclass(frozen=True)
class PropagatorState:
    last_prediction: np.ndarray = None
    last_features: np.ndarray = None
    frame_index: int = 0


def reset(state=None):
    """Fresh state for a new video."""
    return PropagatorState()


def align_past(state, homography, frame_shape, stride=FEATURE_STRIDE):
    """Warp the stored prediction and features onto the current frame.

    Returns (past_logits, past_features, validity).
    """
    p, valid = warp_homography(state.last_prediction, homography, fill=0.0)
    if p.shape[1:] != tuple(frame_shape):
        raise ShapeError("stored prediction does not match the current frame size")
    f, _ = warp_homography(state.last_features, scale_homography(homography, stride), fill=0.0)
    return p, f, valid


def video_step(state, q, feat, homography, layer, registration=True, alpha_zero=False):
    """Process one frame of a stream; returns (logits, new_state).

    The first frame passes ``q`` through unchanged. Later frames warp the
    stored output by ``homography`` (identity when ``registration`` is off),
    predict alpha and blend. ``alpha_zero`` forces alpha to 0 everywhere.
    """
    if state.frame_index == 0 or state.last_prediction is None:
        out = q
    else:
        if not registration:
            homography = identity_homography()
        elif homography is None:
            raise ContractError(f"frame {state.frame_index}: homography required with registration on")
        if alpha_zero:
            out = q
        else:
            p, f, valid = align_past(state, homography, q.shape[1:], layer.stride)
            alpha = similarity_alpha(f, feat, valid, layer, q.shape[1:])
            out = propagate_step(q, p, alpha)
    new_state = replace(
        state, last_prediction=out, last_features=feat, frame_index=state.frame_index + 1
    )
    return out, new_state


class Propagator:
    """Stateful wrapper around :func:`video_step` for one stream."""

    def __init__(self, layer, registration=True, alpha_zero=False):
        self.layer = layer
        self.registration = registration
        self.alpha_zero = alpha_zero
        self.state = PropagatorState()

    def reset(self):
        self.state = reset(self.state)

    def step(self, q, feat, homography=None):
        out, self.state = video_step(
            self.state, q, feat, homography, self.layer, self.registration, self.alpha_zero
        )
        return out
