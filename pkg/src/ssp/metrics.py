"""Segmentation accuracy (mIoU) and temporal consistency (TC)."""

import numpy as np

from ssp.errors import ContractError, ShapeError
from ssp.flow import warp_labels


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes, ignore_index=255):
        if num_classes < 1:
            raise ContractError("need at least one class")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self):
        return int(self.counts.sum())


def confusion_accumulate(cm, labels_true, labels_pred, valid=None):
    """Add the pixels where ``valid`` is set and the truth is not ignored."""
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape:
        raise ShapeError(f"label maps differ: {labels_true.shape} vs {labels_pred.shape}")
    keep = labels_true != cm.ignore_index
    if valid is not None:
        valid = np.asarray(valid).reshape(labels_true.shape)
        keep &= valid > 0
    t = labels_true[keep].astype(np.int64)
    p = labels_pred[keep].astype(np.int64)
    c = cm.num_classes
    if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
        raise ContractError(f"labels out of range [0, {c - 1}]")
    cm.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return cm


def class_iou(cm):
    """Per-class IoU; NaN for classes absent from both truth and prediction."""
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, diag / np.where(union > 0, union, 1), np.nan)


def miou(cm):
    """Mean IoU over classes with a non-empty union."""
    if cm.total == 0:
        raise ContractError("mIoU of an empty confusion matrix is undefined")
    return float(np.nanmean(class_iou(cm)))


def tc_pair(pred_prev, pred_curr, flow_prev_to_curr, num_classes=None):
    """mIoU between the flow-warped previous prediction and the current one.

    The previous label map is warped with nearest-neighbour sampling; pixels
    whose source leaves the frame are excluded.
    """
    pred_prev = np.asarray(pred_prev)
    pred_curr = np.asarray(pred_curr)
    if pred_prev.shape != pred_curr.shape:
        raise ShapeError(f"predictions differ in shape: {pred_prev.shape} vs {pred_curr.shape}")
    warped, valid = warp_labels(pred_prev, flow_prev_to_curr, fill=0)
    if num_classes is None:
        num_classes = int(max(pred_prev.max(), pred_curr.max())) + 1
    cm = confusion_accumulate(ConfusionMatrix(num_classes, ignore_index=-1), warped, pred_curr, valid)
    if cm.total == 0:
        raise ContractError("no pixel of the previous frame lands inside the current frame")
    return miou(cm)


def tc_video(preds, flows, num_classes=None):
    """Mean of :func:`tc_pair` over consecutive frames; ``flows[k]`` relates k -> k+1."""
    if len(preds) < 2:
        raise ContractError("TC needs at least two frames")
    if len(flows) != len(preds) - 1:
        raise ShapeError(f"expected {len(preds) - 1} flows, got {len(flows)}")
    vals = [tc_pair(a, b, f, num_classes) for a, b, f in zip(preds, preds[1:], flows)]
    return float(np.mean(vals))
