"""Brute-force reference computations shared by several test modules."""

import numpy as np


def set_miou(truth, pred, num_classes, valid=None):
    """Brute-force mIoU from pixel index sets."""
    h, w = truth.shape
    pix = [(i, j) for i in range(h) for j in range(w) if valid is None or valid[i, j]]
    ious = []
    for c in range(num_classes):
        t = {p for p in pix if truth[p] == c}
        q = {p for p in pix if pred[p] == c}
        if t | q:
            ious.append(len(t & q) / len(t | q))
    return sum(ious) / len(ious)


def brute_tc(prev, curr, flow, num_classes):
    """Nearest-neighbour warp done pixel by pixel, then set-based mIoU."""
    h, w = prev.shape
    warped = np.zeros_like(prev)
    valid = np.zeros((h, w), bool)
    for i in range(h):
        for j in range(w):
            x, y = j + flow[0, i, j], i + flow[1, i, j]
            if 0 <= x <= w - 1 and 0 <= y <= h - 1:
                valid[i, j] = True
                warped[i, j] = prev[int(np.floor(y + 0.5)), int(np.floor(x + 0.5))]
    return set_miou(warped, curr, num_classes, valid)
