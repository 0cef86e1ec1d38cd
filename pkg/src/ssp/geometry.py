"""Planar projective transforms.

A homography is a 3x3 float64 array normalised so that ``H[2, 2] == 1``. It maps
past-frame pixel coordinates (x = column, y = row) to current-frame
coordinates. Warping resamples through the inverse map, so the output has no
holes.
"""

from dataclasses import dataclass, field

import numpy as np

from ssp.errors import DegenerateError, ShapeError
from ssp.tensor import sample_bilinear, sample_bilinear_adjoint, sample_nearest

_EPS_W = 1e-12


def normalize_homography(h):
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(h[2, 2]) < 1e-9:
        raise DegenerateError("homography has h33 ~ 0 and cannot be normalised")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-12:
        raise DegenerateError("homography is singular")
    return h


def identity_homography():
    return np.eye(3)


def translation_homography(tx, ty):
    h = np.eye(3)
    h[0, 2] = tx
    h[1, 2] = ty
    return h


def compose(a, b):
    """Homography applying ``b`` first, then ``a``."""
    return normalize_homography(np.asarray(a) @ np.asarray(b))


def invert(h):
    return normalize_homography(np.linalg.inv(np.asarray(h, dtype=np.float64)))


def apply_homography(h, x, y):
    """Map point(s) through ``h``; works on scalars or arrays of equal shape."""
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if np.any(np.abs(w) < _EPS_W):
        raise DegenerateError("point maps to infinity under the homography")
    xp = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    yp = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    if xp.ndim == 0:
        return float(xp), float(yp)
    return xp, yp


def scale_homography(h, stride):
    """Express a full-resolution homography on a stride-``stride`` feature grid.

    Feature cell (i, j) is centred on pixel ``stride * j + (stride - 1) / 2``.
    """
    s = np.array([[stride, 0, (stride - 1) / 2], [0, stride, (stride - 1) / 2], [0, 0, 1]])
    return normalize_homography(np.linalg.inv(s) @ np.asarray(h) @ s)


def _source_coords(h, height, width):
    hinv = invert(h)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    w = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    # pixels whose preimage lies at infinity have no valid source
    bad = np.abs(w) < _EPS_W
    w = np.where(bad, 1.0, w)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / w
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / w
    sx[bad] = -1.0
    return sx, sy


def warp_homography(img, h, fill=0.0, mode="bilinear"):
    """Resample a past-frame array onto the current frame.

    Output pixel (i, j) samples ``img`` at ``H^-1 (j, i)``. Returns the warped
    array and a float mask that is 1 where the source sample was inside the
    image. ``mode="nearest"`` is for label maps (2-D int arrays allowed).
    """
    h = normalize_homography(h)
    height, width = img.shape[-2:]
    sx, sy = _source_coords(h, height, width)
    if mode == "nearest":
        out, valid = sample_nearest(img, sx, sy, fill)
    elif mode == "bilinear":
        if img.ndim != 3:
            raise ShapeError(f"bilinear warp expects (C, H, W), got {img.shape}")
        out, valid = sample_bilinear(img, sx, sy, fill)
    else:
        raise ValueError(f"unknown warp mode {mode!r}")
    return out, valid.astype(np.float32)


def warp_homography_backward(grad_out, h):
    """Adjoint of the bilinear :func:`warp_homography` w.r.t. its input."""
    sx, sy = _source_coords(normalize_homography(h), *grad_out.shape[1:])
    return sample_bilinear_adjoint(grad_out, sx, sy, grad_out.shape)


def homography_flow(h, height, width):
    """Backward flow on the current grid induced by ``h`` (past -> current).

    Returns a (2, H, W) array whose vectors point from each current pixel to
    its source location in the past frame, matching ``warp_flow``.
    """
    sx, sy = _source_coords(normalize_homography(h), height, width)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([sx - xs, sy - ys])


@dataclass
class CameraPose:
    """Pinhole camera over a world plane.

    ``rotation`` and ``translation`` map world to camera coordinates
    (X_cam = R X_world + t). The ground plane is ``normal . X = offset`` in
    world coordinates, with the normal pointing towards the camera side.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    plane_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    plane_offset: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.plane_normal = np.asarray(self.plane_normal, dtype=np.float64).reshape(3)
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if abs(np.linalg.norm(self.plane_normal) - 1) > 1e-6:
            raise ValueError("plane normal must be a unit vector")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def altitude(self):
        """Signed distance from the camera centre to the ground plane."""
        return float(self.plane_normal @ self.center - self.plane_offset)

    def project(self, points):
        """Project (N, 3) world points to (N, 2) pixel coordinates."""
        cam = points @ self.rotation.T + self.translation
        uvw = cam @ self.K.T
        return uvw[:, :2] / uvw[:, 2:3]

    def backproject_to_plane(self, xs, ys):
        """Intersect the rays through pixels (xs, ys) with the ground plane."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        rays = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], -1)
        rays_w = rays @ self.rotation  # R^T applied to row vectors
        c = self.center
        denom = rays_w @ self.plane_normal
        lam = (self.plane_offset - self.plane_normal @ c) / denom
        return c + lam[..., None] * rays_w


def pose_to_homography(pose_past, pose_current):
    """Ground-plane homography mapping past pixels to current pixels.

    H = K (R_rel - t_rel n^T / d) K^-1 with the plane written as n^T X + d = 0
    in the past camera frame.
    """
    d = pose_past.altitude
    if d <= 0:
        raise DegenerateError(f"camera must lie above the plane (distance {d:.3g})")
    if not np.allclose(pose_past.K, pose_current.K):
        raise ValueError("poses must share intrinsics")
    r1, t1 = pose_past.rotation, pose_past.translation
    r2, t2 = pose_current.rotation, pose_current.translation
    r_rel = r2 @ r1.T
    t_rel = t2 - r_rel @ t1
    n = r1 @ pose_past.plane_normal
    k = pose_past.K
    h = k @ (r_rel - np.outer(t_rel, n) / d) @ np.linalg.inv(k)
    if abs(h[2, 2]) < 1e-9:
        raise DegenerateError("degenerate viewing geometry (h33 ~ 0)")
    return normalize_homography(h)


def _hartley_normalizer(pts):
    c = pts.mean(axis=0)
    dist = np.linalg.norm(pts - c, axis=1).mean()
    if dist < 1e-12:
        raise DegenerateError("all points coincide")
    s = np.sqrt(2) / dist
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def _has_collinear_triple(pts, tol=1e-9):
    n = len(pts)
    scale = max(np.ptp(pts, axis=0).max(), 1e-12) ** 2
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = pts[i], pts[j], pts[k]
                area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
                if abs(area) < tol * scale:
                    return True
    return False


def estimate_homography_dlt(src, dst):
    """Normalised DLT estimate of H with ``dst ~ H src`` from >= 4 correspondences.

    With exactly four points any collinear triple is rejected; for larger sets
    degeneracy is detected from the rank of the design matrix.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ShapeError("source and destination point counts differ")
    if len(src) < 4:
        raise DegenerateError(f"need at least 4 correspondences, got {len(src)}")
    if len(src) == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegenerateError("three of the four points are collinear")
    ts, td = _hartley_normalizer(src), _hartley_normalizer(dst)
    s = np.c_[src, np.ones(len(src))] @ ts.T
    d = np.c_[dst, np.ones(len(dst))] @ td.T
    zeros = np.zeros((len(s), 3))
    rows_x = np.hstack([s, zeros, -d[:, :1] * s])
    rows_y = np.hstack([zeros, s, -d[:, 1:2] * s])
    a = np.vstack([rows_x, rows_y])
    _, sv, vt = np.linalg.svd(a)
    sv = np.pad(sv, (0, 9 - len(sv)))
    # a 1-D null space is required; a second near-zero singular value means degeneracy
    if sv[-2] < 1e-10 * sv[0]:
        raise DegenerateError("correspondences do not determine a unique homography")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return normalize_homography(h)
