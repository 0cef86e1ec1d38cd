"""Dense array primitives with hand-written gradients.

Tensors are plain numpy arrays in channel-height-width layout with no batch
axis. Pipeline code uses float32; every op here preserves the dtype it is
given, so gradient checks can run the same code in float64.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ssp.errors import ContractError, ShapeError


@dataclass
class ConvSpec:
    """Square-kernel 2-D convolution with zero padding.

    ``weight`` has shape (out_channels, in_channels, k, k), ``bias`` (out_channels,).
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight must be (out, in, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {w.shape[2]}")
        if np.shape(self.bias) != (w.shape[0],):
            raise ShapeError(f"bias must have shape ({w.shape[0]},), got {np.shape(self.bias)}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError("stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel_size=3, stride=1, padding=1, dtype=np.float32):
        return cls(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
            stride,
            padding,
        )


def _conv_output_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _conv_windows(x, spec):
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects a (C, H, W) array, got shape {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, spec expects {spec.in_channels}")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho = _conv_output_size(x.shape[1], k, s, p)
    wo = _conv_output_size(x.shape[2], k, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape[1:]} too small for kernel {k} with padding {p}")
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    # (C, Ho, Wo, k, k)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    return win


def conv2d(x, spec):
    win = _conv_windows(x, spec)
    out = np.tensordot(spec.weight, win, axes=([1, 2, 3], [0, 3, 4]))
    out = out + spec.bias[:, None, None]
    return out.astype(np.result_type(x, spec.weight), copy=False)


def conv2d_backward(x, spec, grad_out):
    """Return (grad_input, grad_weight, grad_bias) for ``conv2d(x, spec)``."""
    win = _conv_windows(x, spec)
    if grad_out.shape != (spec.out_channels,) + win.shape[1:3]:
        raise ShapeError(f"conv2d_backward: grad shape {grad_out.shape} does not match output")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    grad_w = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
    grad_b = grad_out.sum(axis=(1, 2))
    # (C_in, Ho, Wo, k, k)
    cols = np.tensordot(spec.weight, grad_out, axes=([0], [0])).transpose(0, 3, 4, 1, 2)
    ho, wo = grad_out.shape[1:]
    _, h, w = x.shape
    gxp = np.zeros((x.shape[0], h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + s * ho:s, dj:dj + s * wo:s] += cols[:, :, :, di, dj]
    grad_x = gxp[:, p:p + h, p:p + w]
    dtype = np.result_type(x, spec.weight)
    return grad_x.astype(dtype), grad_w.astype(dtype), grad_b.astype(dtype)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax_channels(logits, temperature=1.0):
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if logits.ndim < 1 or logits.shape[0] < 1:
        raise ShapeError("softmax needs at least one channel")
    z = logits / np.asarray(temperature, dtype=logits.dtype)
    z = z - z.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def softmax_channels(logits, temperature=1.0):
    """Channel-axis softmax of ``logits / temperature`` with max subtraction."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if logits.ndim < 1 or logits.shape[0] < 1:
        raise ShapeError("softmax needs at least one channel")
    z = logits / np.asarray(temperature, dtype=logits.dtype)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    # keep every probability strictly positive even when exp underflows
    e = np.maximum(e, np.finfo(e.dtype).tiny)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(probs, grad_probs, temperature=1.0):
    """Gradient w.r.t. the logits given the softmax output and upstream gradient."""
    inner = (grad_probs * probs).sum(axis=0, keepdims=True)
    return probs * (grad_probs - inner) / temperature


def argmax_channels(logits):
    """Per-pixel argmax over channels; ties resolve to the lowest channel index."""
    if logits.ndim != 3 or logits.shape[0] < 1:
        raise ShapeError(f"expected (C, H, W) logits, got shape {logits.shape}")
    # np.argmax returns the first occurrence of the maximum
    return np.argmax(logits, axis=0).astype(np.int32)


def _bilinear_taps(xs, ys, h, w):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    return x0, x1, y0, y1, fx, fy, valid


def sample_bilinear(img, xs, ys, fill=0.0):
    """Sample a (C, H, W) array at arbitrary coordinate arrays.

    ``xs`` is the column coordinate, ``ys`` the row coordinate; both must have
    the same shape S. Returns (values of shape (C,) + S, validity of shape S).
    A sample is valid when it lies inside [0, W-1] x [0, H-1]; invalid samples
    take ``fill``.
    """
    _, h, w = img.shape
    x0, x1, y0, y1, fx, fy, valid = _bilinear_taps(xs, ys, h, w)
    a = img[:, y0, x0]
    b = img[:, y0, x1]
    c = img[:, y1, x0]
    d = img[:, y1, x1]
    top = a * (1 - fx) + b * fx
    bottom = c * (1 - fx) + d * fx
    out = top * (1 - fy) + bottom * fy
    out = np.where(valid, out, fill).astype(img.dtype, copy=False)
    return out, valid


def sample_bilinear_adjoint(grad, xs, ys, shape):
    """Adjoint of :func:`sample_bilinear` w.r.t. the sampled image (fill contributes nothing)."""
    c, h, w = shape
    x0, x1, y0, y1, fx, fy, valid = _bilinear_taps(xs, ys, h, w)
    g = np.where(valid, grad, 0)
    out = np.zeros((c, h * w), dtype=grad.dtype)
    for iy, ix, wt in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        flat = (iy * w + ix).reshape(-1)
        contrib = (g * wt).reshape(c, -1)
        for ch in range(c):
            out[ch] += np.bincount(flat, weights=contrib[ch], minlength=h * w)
    return out.reshape(shape)


def sample_nearest(img, xs, ys, fill=0):
    """Nearest-neighbour counterpart of :func:`sample_bilinear` for label-like data."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    # round half up so the rule is the same on both sides of a pixel
    xi = np.clip(np.floor(np.where(valid, xs, 0) + 0.5), 0, w - 1).astype(np.intp)
    yi = np.clip(np.floor(np.where(valid, ys, 0) + 0.5), 0, h - 1).astype(np.intp)
    out = np.where(valid, img[:, yi, xi], fill).astype(img.dtype, copy=False)
    return (out[0] if squeeze else out), valid


def bilinear_sample(img, x, y, fill=0.0):
    """Sample every channel of ``img`` at the single point (x, y).

    Returns (values, valid) where values has one entry per channel.
    """
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    vals, valid = sample_bilinear(img, np.array(x), np.array(y), fill)
    return vals, bool(valid)


def _resize_matrix(n_out, n_in):
    # align_corners=False: src = (i + 0.5) * n_in / n_out - 0.5, clamped to the edge
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m


def bilinear_resize(x, out_h, out_w):
    """Resize a (C, H, W) array with the half-pixel (align_corners=False) convention."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = _resize_matrix(out_h, h).astype(x.dtype)
    rx = _resize_matrix(out_w, w).astype(x.dtype)
    return np.einsum("ah,chw,bw->cab", ry, x, rx)


def bilinear_resize_backward(grad_out, in_h, in_w):
    _, out_h, out_w = grad_out.shape
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    ry = _resize_matrix(out_h, in_h).astype(grad_out.dtype)
    rx = _resize_matrix(out_w, in_w).astype(grad_out.dtype)
    return np.einsum("ah,cab,bw->chw", ry, grad_out, rx)
