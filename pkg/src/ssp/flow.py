"""Optical-flow warping and occlusion reasoning.

Flows are (2, H, W) arrays (horizontal, vertical displacement in pixels)
stored on the *target* grid and pointing to the source location, i.e. a flow
tagged a -> b lives on frame b and ``warp_flow(x_a, flow)`` produces a
frame-b-aligned array.
"""

import numpy as np

from ssp.errors import ShapeError
from ssp.tensor import sample_bilinear, sample_bilinear_adjoint, sample_nearest

FB_RELATIVE = 0.01
FB_ABSOLUTE = 0.5


def _check_flow(flow, shape=None):
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must have shape (2, H, W), got {flow.shape}")
    if shape is not None and flow.shape[1:] != tuple(shape):
        raise ShapeError(f"flow grid {flow.shape[1:]} does not match array grid {tuple(shape)}")


def _source_coords(flow):
    h, w = flow.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs + flow[0], ys + flow[1]


def warp_flow(img, flow, fill=0.0, mode="bilinear"):
    """Backward-warp ``img`` with ``flow``: out(i, j) = img at (j + u, i + v).

    Returns (warped, mask) with mask 1.0 where the source point was in frame.
    """
    _check_flow(flow, img.shape[-2:])
    sx, sy = _source_coords(flow)
    if mode == "nearest":
        out, valid = sample_nearest(img, sx, sy, fill)
    elif mode == "bilinear":
        out, valid = sample_bilinear(img, sx, sy, fill)
    else:
        raise ValueError(f"unknown warp mode {mode!r}")
    return out, valid.astype(np.float32)


def warp_flow_backward(grad_out, flow):
    """Adjoint of bilinear :func:`warp_flow` w.r.t. the warped array."""
    _check_flow(flow, grad_out.shape[-2:])
    sx, sy = _source_coords(flow)
    return sample_bilinear_adjoint(grad_out, sx, sy, grad_out.shape)


def warp_labels(labels, flow, fill=-1):
    """Nearest-neighbour warp of an integer label map; invalid pixels get ``fill``."""
    _check_flow(flow, labels.shape)
    sx, sy = _source_coords(flow)
    out, valid = sample_nearest(labels, sx, sy, fill)
    return out, valid


def photometric_weight(current, past_warped):
    """exp(-L1 distance over channels) between two [0, 1] images, shape (1, H, W)."""
    if current.shape != past_warped.shape:
        raise ShapeError(f"image shapes differ: {current.shape} vs {past_warped.shape}")
    dist = np.abs(current - past_warped).sum(axis=0, keepdims=True)
    return np.exp(-dist)


def occlusion_mask_fb(flow_fwd, flow_bwd_warped):
    """Forward/backward consistency check, evaluated per pixel.

    Both flows must already refer to the same pixels. Returns a float (1, H, W)
    mask with 1 marking occluded / inconsistent pixels.
    """
    _check_flow(flow_fwd)
    if flow_fwd.shape != flow_bwd_warped.shape:
        raise ShapeError(f"flow shapes differ: {flow_fwd.shape} vs {flow_bwd_warped.shape}")
    f = flow_fwd.astype(np.float64)
    b = flow_bwd_warped.astype(np.float64)
    lhs = ((f + b) ** 2).sum(axis=0)
    rhs = FB_RELATIVE * ((f**2).sum(axis=0) + (b**2).sum(axis=0)) + FB_ABSOLUTE
    return (lhs > rhs).astype(np.float32)[None]


def occlusion_from_flows(flow_ab, flow_ba):
    """Occlusion mask on frame b's grid from a flow pair.

    ``flow_ab`` lives on b and points into a; ``flow_ba`` lives on a and points
    into b. ``flow_ba`` is resampled onto b before the pointwise check, and
    pixels whose correspondence leaves the frame are marked occluded.
    """
    ba_on_b, valid = warp_flow(flow_ba, flow_ab)
    occ = occlusion_mask_fb(flow_ab, ba_on_b)
    return np.maximum(occ, 1.0 - valid[None]).astype(np.float32)
