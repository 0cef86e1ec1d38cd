"""Training objectives and the consistent-teacher blend.

Every loss returns a Python float and has a ``*_backward`` partner returning
gradients of the same shapes as its array inputs. Losses are means over
pixels, so gradients carry a 1/(H*W) factor.
"""

from dataclasses import dataclass

import numpy as np

from ssp.errors import ContractError, ShapeError
from ssp.flow import warp_flow, warp_flow_backward
from ssp.tensor import log_softmax_channels, softmax_backward, softmax_channels

IGNORE_INDEX = 255


@dataclass(frozen=True)
class LossWeights:
    lambda_base: float = 0.5
    lambda_kd: float = 135000.0
    tau: float = 2.0

    def __post_init__(self):
        if self.lambda_base < 0 or self.lambda_kd < 0:
            raise ContractError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ContractError("temperature must be positive")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def _check_weight_map(o, ref):
    if o.shape != (1,) + ref.shape[1:]:
        raise ShapeError(f"weight map must have shape {(1,) + ref.shape[1:]}, got {o.shape}")


def loss_tc(y, x_hat, weight):
    """Occlusion-weighted squared distance: (1/HW) sum_ij O_ij ||y_ij - x_ij||^2."""
    _same_shape(y, x_hat, "loss_tc")
    _check_weight_map(weight, y)
    hw = y.shape[1] * y.shape[2]
    return float((weight * (y - x_hat) ** 2).sum() / hw)


def loss_tc_backward(y, x_hat, weight):
    """Return (grad_y, grad_x_hat)."""
    hw = y.shape[1] * y.shape[2]
    g = 2.0 * weight * (y - x_hat) / hw
    return g, -g


def _check_labels(logits, labels, ignore_index):
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits grid {logits.shape[1:]}")
    active = labels != ignore_index
    lab = labels[active]
    if lab.size and (lab.min() < 0 or lab.max() >= logits.shape[0]):
        raise ContractError(f"labels must lie in [0, {logits.shape[0] - 1}] or equal {ignore_index}")
    return active


def loss_ce(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean cross-entropy over non-ignored pixels; 0.0 when every pixel is ignored."""
    active = _check_labels(logits, labels, ignore_index)
    n = int(active.sum())
    if n == 0:
        return 0.0
    logp = log_softmax_channels(logits)
    ii, jj = np.nonzero(active)
    return float(-logp[labels[ii, jj], ii, jj].sum() / n)


def loss_ce_backward(logits, labels, ignore_index=IGNORE_INDEX):
    active = _check_labels(logits, labels, ignore_index)
    n = int(active.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return grad
    grad[:] = softmax_channels(logits)
    ii, jj = np.nonzero(active)
    grad[labels[ii, jj], ii, jj] -= 1
    grad *= active[None]
    return grad / n


def loss_kl(student, teacher, tau=2.0):
    """tau^2 * mean over pixels of KL(softmax(T/tau) || softmax(P/tau))."""
    _same_shape(student, teacher, "loss_kl")
    lt = log_softmax_channels(teacher, tau)
    ls = log_softmax_channels(student, tau)
    kl = (np.exp(lt) * (lt - ls)).sum(axis=0)
    # clamp tiny negative rounding so the loss is never below zero
    return float(max(kl.mean(), 0.0) * tau**2)


def loss_kl_backward(student, teacher, tau=2.0):
    """Gradient w.r.t. the student logits."""
    hw = student.shape[1] * student.shape[2]
    return tau * (softmax_channels(student, tau) - softmax_channels(teacher, tau)) / hw


def teacher_blend(t_q, t_p, flow_qp, flow_pq, occ_q, occ_p=None):
    """Make a pair of teacher predictions mutually consistent.

    ``flow_qp`` lives on the past grid and points into the current frame
    (it carries current-frame data back to the past); ``flow_pq`` is the
    reverse. ``occ_q``/``occ_p`` are binary occlusion masks on the current and
    past grids (``occ_p`` defaults to ``occ_q``). Pixels whose warp source
    leaves the frame are treated as occluded.

    Returns (blended_current, blended_past).
    """
    _same_shape(t_q, t_p, "teacher_blend")
    if occ_p is None:
        occ_p = occ_q
    q_on_p, valid_p = warp_flow(t_q, flow_qp)
    p_on_q, valid_q = warp_flow(t_p, flow_pq)
    m_p = np.maximum(np.asarray(occ_p).reshape((1,) + t_p.shape[1:]), 1 - valid_p[None])
    m_q = np.maximum(np.asarray(occ_q).reshape((1,) + t_q.shape[1:]), 1 - valid_q[None])
    blended_p = (t_p + (1 - m_p) * q_on_p) / (2 - m_p)
    blended_q = (t_q + (1 - m_q) * p_on_q) / (2 - m_q)
    return blended_q.astype(t_q.dtype, copy=False), blended_p.astype(t_p.dtype, copy=False)


def _aligned_past_probs(pred_past, flow, weight):
    x = softmax_channels(pred_past)
    if flow is None:
        return x, weight
    x_hat, valid = warp_flow(x, flow)
    return x_hat, weight * valid[None]


def total_loss_base(pred_q, pred_p, labels_q, weight, weights, flow=None, ignore_index=IGNORE_INDEX):
    """Cross-entropy on the current frame plus lambda times the consistency loss.

    The consistency term compares softmax probabilities. When ``flow`` (past
    -> current, on the current grid) is given, the past probabilities are
    warped with it and out-of-frame pixels get weight 0.
    """
    ce = loss_ce(pred_q, labels_q, ignore_index)
    if weights.lambda_base == 0:
        return ce
    x_hat, w = _aligned_past_probs(pred_p, flow, weight)
    return ce + weights.lambda_base * loss_tc(softmax_channels(pred_q), x_hat, w)


def _tc_backward(pred_q, pred_p, weight, flow, scale):
    y = softmax_channels(pred_q)
    x_hat, w = _aligned_past_probs(pred_p, flow, weight)
    gy, gx = loss_tc_backward(y, x_hat, w)
    grad_q = softmax_backward(y, scale * gy)
    gx = scale * gx
    if flow is not None:
        gx = warp_flow_backward(gx, flow)
    grad_p = softmax_backward(softmax_channels(pred_p), gx)
    return grad_q, grad_p


def total_loss_base_backward(pred_q, pred_p, labels_q, weight, weights, flow=None, ignore_index=IGNORE_INDEX):
    """Return (grad_pred_q, grad_pred_p)."""
    grad_q = loss_ce_backward(pred_q, labels_q, ignore_index)
    grad_p = np.zeros_like(pred_p)
    if weights.lambda_base != 0:
        tq, tp = _tc_backward(pred_q, pred_p, weight, flow, weights.lambda_base)
        grad_q = grad_q + tq
        grad_p = grad_p + tp
    return grad_q, grad_p


def total_loss_kd(pred_q, pred_p, teacher_q, teacher_p, weight, weights, flow=None):
    """Distillation on both frames plus lambda_kd times the consistency loss.

    Ground-truth labels play no part here.
    """
    kl = loss_kl(pred_q, teacher_q, weights.tau) + loss_kl(pred_p, teacher_p, weights.tau)
    if weights.lambda_kd == 0:
        return kl
    x_hat, w = _aligned_past_probs(pred_p, flow, weight)
    return kl + weights.lambda_kd * loss_tc(softmax_channels(pred_q), x_hat, w)


def total_loss_kd_backward(pred_q, pred_p, teacher_q, teacher_p, weight, weights, flow=None):
    grad_q = loss_kl_backward(pred_q, teacher_q, weights.tau)
    grad_p = loss_kl_backward(pred_p, teacher_p, weights.tau)
    if weights.lambda_kd != 0:
        tq, tp = _tc_backward(pred_q, pred_p, weight, flow, weights.lambda_kd)
        grad_q = grad_q + tq
        grad_p = grad_p + tp
    return grad_q, grad_p
