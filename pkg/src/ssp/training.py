"""Two-frame training of the similarity layer (and optionally the surrogate head).

A training pair is (past frame k-1, current frame k). The past frame's image
model output is propagated onto the current frame through the similarity
layer, and the mode's total loss is minimised with momentum SGD.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from ssp.errors import ContractError
from ssp.flow import photometric_weight, warp_flow
from ssp.geometry import identity_homography, scale_homography, warp_homography, warp_homography_backward
from ssp.losses import (
    LossWeights,
    total_loss_base,
    total_loss_base_backward,
    total_loss_kd,
    total_loss_kd_backward,
)
from ssp.pipeline import frame_logits, pair_homography
from ssp.propagation import (
    SimilarityLayer,
    hidden_pattern,
    propagate_step,
    propagate_step_backward,
    similarity_alpha_backward,
    similarity_alpha_forward,
)
from ssp.synth import FEATURE_CHANNELS, LinearHead, fit_head, head_backward, head_forward, logit_noise, upsample_features

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    seed: int = 0
    mode: str = "base"
    one_step: bool = False
    registration: bool = True
    similarity: str = "conv"

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ContractError("need at least one epoch")
        if self.mode not in ("base", "kd"):
            raise ContractError(f"unknown training mode {self.mode!r}")


def sgd_step(params, grads, lr, momentum, velocity=None):
    """v <- m v + g;  p <- p - lr v.  Returns (new_params, new_velocity)."""
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise ContractError(f"gradient for {k} has shape {np.shape(g)}, parameter {np.shape(p)}")
        v = momentum * velocity[k] + g
        new_v[k] = v.astype(p.dtype, copy=False)
        new_p[k] = (p - lr * v).astype(p.dtype, copy=False)
    return new_p, new_v


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    checked: int
    tolerance: float
    skipped: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def grad_check(loss_fn, params, epsilon=1e-3, tolerance=1e-3, max_entries=None, seed=0, pattern_fn=None):
    """Compare analytic gradients with central differences in float64.

    ``loss_fn(params)`` must return (loss, grads). Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-8). ``max_entries`` caps the number of entries
    probed per parameter (chosen at random with ``seed``).

    ``pattern_fn(params)`` may return the on/off pattern of the piecewise
    linear units (ReLU) in the loss. An entry whose +/- epsilon probes change
    that pattern straddles a kink, where a central difference does not
    estimate the derivative; such entries are skipped and counted.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise ContractError("loss is not finite")
    base_pattern = None if pattern_fn is None else pattern_fn(params)
    rng = np.random.default_rng(seed)
    worst = (0.0, None, None)
    checked = skipped = 0
    for key, p in params.items():
        flat = p.reshape(-1)
        g = np.asarray(grads[key], dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            kink = False
            flat[i] = orig + epsilon
            lp = loss_fn(params)[0]
            if pattern_fn is not None:
                kink |= not np.array_equal(pattern_fn(params), base_pattern)
            flat[i] = orig - epsilon
            lm = loss_fn(params)[0]
            if pattern_fn is not None:
                kink |= not np.array_equal(pattern_fn(params), base_pattern)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ContractError("loss is not finite")
            if kink:
                skipped += 1
                continue
            num = (lp - lm) / (2 * epsilon)
            rel = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8)
            checked += 1
            if rel > worst[0]:
                worst = (rel, key, int(i))
    return GradCheckReport(worst[0], worst[1:], checked, tolerance, skipped)


def relu_pattern(params, pair, layer):
    """On/off pattern of the similarity layer's ReLUs for a training pair."""
    sim = {k: v for k, v in params.items() if k.startswith("sim.")}
    if not sim:
        return np.zeros(0, dtype=bool)
    layer = layer.with_params(sim)
    f_w, _ = warp_homography(pair.feat_past, scale_homography(pair.homography, layer.stride))
    return hidden_pattern(f_w, pair.feat_cur, layer)


@dataclass
class TrainingPair:
    """Everything one optimisation step needs, precomputed once."""

    feat_past: np.ndarray
    feat_cur: np.ndarray
    up_past: np.ndarray
    up_cur: np.ndarray
    noise_past: np.ndarray
    noise_cur: np.ndarray
    homography: np.ndarray
    flow: np.ndarray
    weight: np.ndarray
    labels: np.ndarray = None
    teacher_cur: np.ndarray = None
    teacher_past: np.ndarray = None


def make_pair(video, k, registration=True):
    """Training pair (k-1, k) from a :class:`~ssp.dataset.VideoData`."""
    if video.flows_fwd is None:
        raise ContractError(f"{video.name}: training needs optical flows")
    feats = video.features()
    h, w = video.shape
    hom = pair_homography(video, k) if registration else identity_homography()
    flow = video.flows_fwd[k - 1]
    past_img, valid = warp_flow(video.frames[k - 1], flow)
    weight = photometric_weight(video.frames[k], past_img) * valid[None]
    up_p = upsample_features(feats[k - 1], h, w)
    up_c = upsample_features(feats[k], h, w)
    c = video.num_classes
    teacher = video.teacher.get(k)
    return TrainingPair(
        feat_past=feats[k - 1],
        feat_cur=feats[k],
        up_past=up_p,
        up_cur=up_c,
        noise_past=logit_noise((c, h, w), video.logit_noise, video.noise_seed(k - 1)),
        noise_cur=logit_noise((c, h, w), video.logit_noise, video.noise_seed(k)),
        homography=np.asarray(hom, dtype=np.float64),
        flow=flow,
        weight=weight.astype(np.float32),
        labels=video.labels.get(k),
        teacher_cur=None if teacher is None else teacher[0],
        teacher_past=None if teacher is None else teacher[1],
    )


def pair_objective(params, pair, layer, head, mode, weights, need_grad=True):
    """Total loss of one pair and (optionally) its gradients w.r.t. ``params``.

    ``params`` holds ``sim.*`` entries and, when the head is trained,
    ``head.*`` entries; anything missing is taken from ``layer``/``head``.
    """
    sim_params = {k: v for k, v in params.items() if k.startswith("sim.")}
    if sim_params:
        layer = layer.with_params(sim_params)
    train_head = "head.weight" in params
    if train_head:
        head = head.with_params(params)
    q_p = head_forward(head, pair.up_past) + pair.noise_past
    q_c = head_forward(head, pair.up_cur) + pair.noise_cur
    p_w, valid = warp_homography(q_p, pair.homography)
    f_w, _ = warp_homography(pair.feat_past, scale_homography(pair.homography, layer.stride))
    alpha, cache = similarity_alpha_forward(f_w, pair.feat_cur, valid, layer, q_c.shape[1:])
    pred_q = propagate_step(q_c, p_w, alpha)
    pred_p = q_p
    if mode == "base":
        if pair.labels is None:
            raise ContractError("base training needs labels on the current frame")
        args = (pred_q, pred_p, pair.labels, pair.weight, weights)
        loss = total_loss_base(*args, flow=pair.flow)
    else:
        if pair.teacher_cur is None:
            raise ContractError("distillation needs blended teacher logits for both frames")
        args = (pred_q, pred_p, pair.teacher_cur, pair.teacher_past, pair.weight, weights)
        loss = total_loss_kd(*args, flow=pair.flow)
    if not need_grad:
        return loss, None
    if mode == "base":
        g_q, g_p = total_loss_base_backward(*args, flow=pair.flow)
    else:
        g_q, g_p = total_loss_kd_backward(*args, flow=pair.flow)
    g_qc, g_pw, g_alpha = propagate_step_backward(q_c, p_w, alpha, g_q)
    grads = {}
    if sim_params:
        sim_grads, _, _ = similarity_alpha_backward(cache, g_alpha, layer)
        grads.update(sim_grads)
    if train_head:
        g_qp = g_p + warp_homography_backward(g_pw, pair.homography)
        hc = head_backward(pair.up_cur, g_qc)
        hp = head_backward(pair.up_past, g_qp)
        grads["head.weight"] = hc["head.weight"] + hp["head.weight"]
        grads["head.bias"] = hc["head.bias"] + hp["head.bias"]
    return loss, grads


@dataclass
class TrainResult:
    layer: SimilarityLayer
    head: LinearHead
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def warm_start_head(videos):
    """First step of two-step training: fit the surrogate head on annotated frames."""
    frames, labels = [], []
    for v in videos:
        for k, lab in sorted(v.labels.items()):
            frames.append(v.frames[k])
            labels.append(lab)
    if not frames:
        raise ContractError("no annotated frames to fit the surrogate head on")
    return fit_head(frames, labels, videos[0].num_classes)


def collect_pairs(videos, config):
    pairs = []
    for v in videos:
        for k in range(1, len(v)):
            if config.mode == "base" and k not in v.labels:
                continue
            if config.mode == "kd" and k not in v.teacher:
                continue
            pairs.append(make_pair(v, k, config.registration))
    if not pairs:
        need = "labelled current frames" if config.mode == "base" else "teacher artifacts"
        raise ContractError(f"no training pairs: the data has no {need}")
    return pairs


def train(videos, config, weights=None, layer=None, head=None):
    """Optimise the similarity layer (plus the head when ``config.one_step``).

    Returns a :class:`TrainResult` with the per-epoch mean loss trace.
    """
    weights = weights or LossWeights()
    num_classes = videos[0].num_classes
    if layer is None:
        layer = SimilarityLayer.create(FEATURE_CHANNELS, seed=config.seed, mode=config.similarity)
    if head is None:
        head = LinearHead.zeros(num_classes) if config.one_step else warm_start_head(videos)
    pairs = collect_pairs(videos, config)
    params = dict(layer.params())
    if config.one_step:
        params.update(head.params())
    rng = np.random.default_rng(config.seed)
    velocity = None
    result = TrainResult(layer, head)
    for epoch in range(config.epochs):
        losses = []
        for i in rng.permutation(len(pairs)):
            loss, grads = pair_objective(params, pairs[i], layer, head, config.mode, weights)
            if not np.isfinite(loss):
                raise ContractError(f"loss diverged at epoch {epoch}")
            losses.append(loss)
            if params:
                params, velocity = sgd_step(params, grads, config.lr, config.momentum, velocity)
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d: mean loss %.5f over %d pairs", epoch, result.epoch_losses[-1], len(losses))
    sim = {k: v for k, v in params.items() if k.startswith("sim.")}
    result.layer = layer.with_params(sim) if sim else layer
    result.head = head.with_params(params) if config.one_step else head
    return result
