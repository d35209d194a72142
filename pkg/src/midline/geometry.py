"""Rigid pose machinery: landmark fitting, sampling grids, bilinear warping, cropping.

Coordinates are pixel indices with x = column, y = row, origin top-left. A pose
``(t_x, t_y, theta)`` acts about the image center ``c = (W/2, H/2)``: output
pixel ``p`` samples the source at ``R(theta) (p - c) + c + t``. Warping is
destination driven, so a source point ``s`` lands at ``R(-theta)(s - c - t) + c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, as_tensor, make_node


@dataclass(frozen=True)
class RigidPose:
    t_x: float = 0.0
    t_y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "t_x", float(self.t_x))
        object.__setattr__(self, "t_y", float(self.t_y))
        th = math.remainder(float(self.theta), 2 * math.pi)
        if th <= -math.pi:
            th += 2 * math.pi
        object.__setattr__(self, "theta", th)

    def as_array(self):
        return np.array([self.t_x, self.t_y, self.theta], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def inverse(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        # R^T t, negated
        return RigidPose(-(c * self.t_x + s * self.t_y), -(-s * self.t_x + c * self.t_y),
                         -self.theta)

    def compose(self, other):
        """Pose whose warp equals warping by ``self`` and then by ``other``."""
        # grid(self) o grid(other): p -> R1(R2 q + t2) + t1 in centered coords
        c1, s1 = math.cos(self.theta), math.sin(self.theta)
        tx = c1 * other.t_x - s1 * other.t_y + self.t_x
        ty = s1 * other.t_x + c1 * other.t_y + self.t_y
        return RigidPose(tx, ty, self.theta + other.theta)

    def magnitude(self):
        return math.hypot(self.t_x, self.t_y), abs(self.theta)


IDENTITY = RigidPose()


@dataclass(frozen=True)
class LandmarkPair:
    p1: tuple  # anterior falx point (x, y)
    p2: tuple  # posterior falx point (x, y)

    def __post_init__(self):
        if np.allclose(self.p1, self.p2, rtol=0.0, atol=0.0):
            raise ValueError(f"landmarks coincide at {self.p1}")


def image_center(extent):
    h, w = extent
    return w / 2.0, h / 2.0


def pose_from_landmarks(lm, image_extent):
    """Pose whose warp puts the landmark midpoint at the image center and P1->P2 vertical.

    theta is ``atan2(-dx, dy)`` of the segment P1->P2, so a segment leaning
    right as it descends (dx > 0 in image coordinates) gives a negative angle.
    """
    if not isinstance(lm, LandmarkPair):
        lm = LandmarkPair(tuple(lm[0]), tuple(lm[1]))
    h, w = image_extent
    for p in (lm.p1, lm.p2):
        if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
            raise ValueError(f"landmark {p} outside {h}x{w} image")
    (x1, y1), (x2, y2) = lm.p1, lm.p2
    cx, cy = image_center(image_extent)
    theta = math.atan2(-(x2 - x1), y2 - y1)
    mx, my = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    return RigidPose(mx - cx, my - cy, theta)


def map_points(points, pose, extent):
    """Where source points land after ``warp_rigid(., pose)`` (inverse of the grid map)."""
    pts = np.asarray(points, dtype=np.float64)
    cx, cy = image_center(extent)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx = pts[..., 0] - cx - pose.t_x
    dy = pts[..., 1] - cy - pose.t_y
    return np.stack([c * dx + s * dy + cx, -s * dx + c * dy + cy], axis=-1)


def make_grid(extent, pose):
    """(H, W, 2) array of source (x, y) coordinates for every output pixel."""
    h, w = extent
    if h <= 0 or w <= 0:
        raise ValueError(f"extent must be positive, got {extent}")
    cx, cy = image_center(extent)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    u, v = xs - cx, ys - cy
    gx = c * u - s * v + cx + pose.t_x
    gy = s * u + c * v + cy + pose.t_y
    return np.stack([gx, gy], axis=-1)


def _pose_batch(pose, n):
    if isinstance(pose, RigidPose):
        return Tensor(np.tile(pose.as_array(), (n, 1)))
    pose = as_tensor(pose)
    if pose.shape == (3,):
        from .autodiff import ops
        return ops.reshape(pose, (1, 3)) if n == 1 else _tile_pose(pose, n)
    if pose.shape != (n, 3):
        raise ValueError(f"pose tensor must be (3,) or ({n}, 3), got {pose.shape}")
    return pose


def _tile_pose(pose, n):
    data = np.tile(pose.data, (n, 1))
    return make_node(data, (pose,), lambda g: (g.sum(axis=0),))


def warp_rigid(img, pose, fill=0.0):
    """Bilinearly resample ``img`` on the grid of ``pose``; out-of-bounds reads take ``fill``.

    ``img`` is (H, W), (C, H, W) or (N, C, H, W) as array or Tensor. ``pose`` is
    a RigidPose, or a (3,) / (N, 3) Tensor ordered (t_x, t_y, theta); with
    Tensors the result is differentiable w.r.t. both image and pose.
    """
    raw = not isinstance(img, Tensor) and not isinstance(pose, Tensor)
    if isinstance(img, Tensor):
        img_t = img
    else:
        arr = np.asarray(img)
        img_t = Tensor(arr, dtype=arr.dtype if arr.dtype.kind == "f" else np.float64)
    orig_shape = img_t.shape
    if img_t.ndim == 2:
        data4 = img_t.data[None, None]
    elif img_t.ndim == 3:
        data4 = img_t.data[None]
    elif img_t.ndim == 4:
        data4 = img_t.data
    else:
        raise ValueError(f"warp_rigid: unsupported image shape {orig_shape}")
    n, ch, h, w = data4.shape
    pose_t = _pose_batch(pose, n)
    p = pose_t.data.astype(np.float64)

    cx, cy = image_center((h, w))
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    u, v = xs - cx, ys - cy
    cos = np.cos(p[:, 2])[:, None, None]
    sin = np.sin(p[:, 2])[:, None, None]
    gx = cos * u - sin * v + cx + p[:, 0, None, None]
    gy = sin * u + cos * v + cy + p[:, 1, None, None]

    dt = data4.dtype
    out = kernels.bilinear_sample(np.ascontiguousarray(data4), gx.astype(dt), gy.astype(dt),
                                  fill)
    if raw:
        return out.reshape(orig_shape) if len(orig_shape) < 4 else out

    def backward(g):
        g4 = g.reshape(out.shape)
        gimg, ggx, ggy = kernels.bilinear_sample_backward(g4, data4, gx.astype(dt),
                                                          gy.astype(dt), fill)
        ggx = ggx.astype(np.float64)
        ggy = ggy.astype(np.float64)
        # d gx / d theta = -sin u - cos v ; d gy / d theta = cos u - sin v
        dth = (ggx * (-sin * u - cos * v) + ggy * (cos * u - sin * v)).sum(axis=(1, 2))
        gpose = np.stack([ggx.sum(axis=(1, 2)), ggy.sum(axis=(1, 2)), dth], axis=1)
        return gimg.reshape(orig_shape), gpose.astype(pose_t.dtype)

    node = make_node(out, (img_t, pose_t), backward)
    if len(orig_shape) < 4:
        from .autodiff import ops
        node = ops.reshape(node, orig_shape)
    return node


def center_crop(img, target):
    """Centered crop of the last two axes; odd slack leaves the extra row/col at the bottom/right."""
    th, tw = target
    h, w = np.shape(img)[-2:]
    if th > h or tw > w:
        raise ValueError(f"crop target {target} larger than source {(h, w)}")
    top = (h - th) // 2
    left = (w - tw) // 2
    return img[..., top:top + th, left:left + tw]


def pad_to(img, extent, fill=0.0):
    """Inverse of :func:`center_crop`: embed ``img`` centered in a larger canvas."""
    h, w = extent
    ih, iw = np.shape(img)[-2:]
    out = np.full(np.shape(img)[:-2] + (h, w), fill, dtype=np.asarray(img).dtype)
    top = (h - ih) // 2
    left = (w - iw) // 2
    out[..., top:top + ih, left:left + iw] = img
    return out


def transform_coords(coords, limits, pose, extent=None):
    """Carry midline labels through ``warp_rigid(., pose)``.

    Present rows ``(coords[y], y)`` are mapped with :func:`map_points` and
    re-rasterized to one x per integer row by linear interpolation along the
    mapped polyline. Rows not covered, or landing outside the image, are
    cleared in the returned limits.
    """
    coords = np.asarray(coords, dtype=np.float64)
    limits = np.asarray(limits)
    h = coords.shape[0]
    if extent is None:
        raise ValueError("transform_coords needs the image extent (H, W)")
    w = extent[1]
    rows = np.flatnonzero(limits > 0.5)
    new_coords = np.zeros(h, dtype=np.float64)
    new_limits = np.zeros(h, dtype=limits.dtype if limits.dtype.kind in "iub" else np.uint8)
    if rows.size == 0:
        return new_coords, new_limits
    if pose == IDENTITY or (pose.t_x == 0 and pose.t_y == 0 and pose.theta == 0):
        new_coords[rows] = coords[rows]
        new_limits[rows] = 1
        return new_coords, new_limits
    pts = np.stack([coords[rows], rows.astype(np.float64)], axis=-1)
    mapped = map_points(pts, pose, extent)
    mx, my = mapped[:, 0], mapped[:, 1]
    order = np.argsort(my, kind="stable")
    mx, my = mx[order], my[order]
    if rows.size == 1:
        y = int(round(my[0]))
        if 0 <= y < h and 0 <= mx[0] <= w - 1:
            new_coords[y] = mx[0]
            new_limits[y] = 1
        return new_coords, new_limits
    y_lo = max(int(math.ceil(my[0] - 1e-9)), 0)
    y_hi = min(int(math.floor(my[-1] + 1e-9)), h - 1)
    if y_hi < y_lo:
        return new_coords, new_limits
    ys = np.arange(y_lo, y_hi + 1)
    xs = np.interp(ys, my, mx)
    inside = (xs >= 0) & (xs <= w - 1)
    new_coords[ys[inside]] = xs[inside]
    new_limits[ys[inside]] = 1
    return new_coords, new_limits
