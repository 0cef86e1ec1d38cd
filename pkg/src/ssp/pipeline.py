"""Glue between the surrogate image model, the propagator and the metrics."""

import numpy as np

from ssp.flow import occlusion_from_flows
from ssp.geometry import estimate_homography_dlt, identity_homography
from ssp.losses import teacher_blend
from ssp.metrics import ConfusionMatrix, confusion_accumulate, miou, tc_pair
from ssp.propagation import Propagator
from ssp.synth import head_forward, logit_noise, make_teacher_logits, upsample_features
from ssp.tensor import argmax_channels


def frame_logits(video, head, k):
    """Surrogate logits for frame ``k`` including its seeded flicker noise."""
    feat = video.features()[k]
    clean = head_forward(head, upsample_features(feat, *video.shape))
    return clean + logit_noise(clean.shape, video.logit_noise, video.noise_seed(k), clean.dtype)


def homography_from_flow(flow, grid=8):
    """Estimate the past -> current homography from a flow on the current grid.

    Correspondences are taken on a regular ``grid`` x ``grid`` lattice.
    """
    h, w = flow.shape[1:]
    ys = np.linspace(0, h - 1, grid).round().astype(int)
    xs = np.linspace(0, w - 1, grid).round().astype(int)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    cur = np.stack([xx.ravel(), yy.ravel()], -1).astype(np.float64)
    past = cur + flow[:, yy.ravel(), xx.ravel()].T
    return estimate_homography_dlt(past, cur)


def pair_homography(video, k):
    """Homography from frame k-1 to frame k, with the documented fallbacks."""
    if video.homographies is not None:
        return video.homographies[k - 1]
    if video.flows_fwd is not None:
        return homography_from_flow(video.flows_fwd[k - 1])
    return identity_homography()


def infer_video(video, layer, head, registration=True, alpha_zero=False):
    """Stream the propagator over a video; returns the per-frame output logits."""
    prop = Propagator(layer, registration=registration, alpha_zero=alpha_zero)
    feats = video.features()
    outs = []
    for k in range(len(video)):
        q = frame_logits(video, head, k)
        hom = pair_homography(video, k) if k > 0 and registration else None
        outs.append(prop.step(q, feats[k], hom))
    return outs


def evaluate_video(preds, video, num_classes=None):
    """mIoU over annotated frames and mean TC over all consecutive pairs.

    ``preds`` are label maps. Returns a dict with the confusion matrix.
    """
    c = num_classes or video.num_classes
    cm = ConfusionMatrix(c)
    for k, lab in sorted(video.labels.items()):
        confusion_accumulate(cm, lab, preds[k])
    tcs = [tc_pair(preds[k], preds[k + 1], video.flows_fwd[k], c) for k in range(len(preds) - 1)]
    return {
        "video": video.name,
        "miou": miou(cm) if cm.total else float("nan"),
        "tc": float(np.mean(tcs)) if tcs else float("nan"),
        "pairs": len(tcs),
        "annotated": len(video.labels),
        "confusion": cm,
    }


def evaluate(videos, preds_per_video, num_classes=None):
    """Per-video records plus the summary (pooled mIoU, video-mean TC)."""
    records = [evaluate_video(p, v, num_classes) for v, p in zip(videos, preds_per_video)]
    pooled = records[0]["confusion"]
    for r in records[1:]:
        pooled = pooled + r["confusion"]
    summary = {
        "miou": miou(pooled) if pooled.total else float("nan"),
        "tc": float(np.mean([r["tc"] for r in records])),
        "videos": len(records),
    }
    return records, summary


def predict_labels(video, layer, head, registration=True, alpha_zero=False):
    return [argmax_channels(o) for o in infer_video(video, layer, head, registration, alpha_zero)]


def blend_teacher_pair(teacher_cur, teacher_past, flow_fwd, flow_bwd):
    """Consistent teacher targets for the pair (k-1, k).

    ``flow_fwd`` lives on frame k pointing into k-1, ``flow_bwd`` the reverse.
    Returns (blended_current, blended_past).
    """
    occ_q = occlusion_from_flows(flow_fwd, flow_bwd)
    occ_p = occlusion_from_flows(flow_bwd, flow_fwd)
    return teacher_blend(teacher_cur, teacher_past, flow_bwd, flow_fwd, occ_q, occ_p)


def prepare_teacher(video, dense_labels, margin=6.0, corruption=0.0, seed=0):
    """Fill ``video.teacher`` from dense ground truth turned into teacher logits."""
    c = video.num_classes
    logits = [
        make_teacher_logits(lab, c, margin, corruption, [int(seed), int(video.seed), 11, k])
        for k, lab in enumerate(dense_labels)
    ]
    video.teacher = {
        k: blend_teacher_pair(logits[k], logits[k - 1], video.flows_fwd[k - 1], video.flows_bwd[k - 1])
        for k in range(1, len(video))
    }
    return video
