"""Pose rectification network: strided convnet regressing (t_x, t_y, theta) from a source slice.

Two coordinate channels (x and y ramps) are appended to the image so that the
globally pooled features still carry position, which the translation outputs
need.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry
from .autodiff import Tensor, default_dtype, ops
from .losses import NumericError
from .train import AdamState, adam_step, poly_lr

log = logging.getLogger(__name__)

OUTPUTS = ("t_x", "t_y", "theta")


@dataclass
class RectifierConfig:
    widths: tuple = (8, 16, 32, 32)
    translation_scale: float = 10.0    # px per unit of raw network output
    angle_scale: float = 0.3           # normalizes the angle term of the parameter loss
    lr: float = 2e-3
    betas: tuple = (0.9, 0.99)
    batch_size: int = 8
    epochs: int = 40
    poly_power: float = 0.9
    seed: int = 0
    mode: str = "param"                # "param" or "image"
    repose: bool = True                # draw a fresh perturbation of each canonical slice per epoch
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.betas = tuple(float(b) for b in self.betas)
        if self.mode not in ("param", "image"):
            raise ValueError(f"rectifier mode must be 'param' or 'image', got {self.mode!r}")
        if len(self.widths) != 4:
            raise ValueError("rectifier uses exactly four strided stages")


def init_rectifier(cfg, seed=None, dtype=np.float32):
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed if seed is None else seed), 7]))
    p = {}
    c_in = 3
    for i, c in enumerate(cfg.widths):
        fan = c_in * 9
        p[f"rect.s{i}.conv"] = (rng.standard_normal((c, c_in, 3, 3)) * math.sqrt(2.0 / fan)).astype(dtype)
        p[f"rect.s{i}.b"] = np.zeros(c, dtype=dtype)
        c_in = c
    p["rect.fc.w"] = (rng.standard_normal((3, c_in)) * math.sqrt(1.0 / c_in) * 0.1).astype(dtype)
    p["rect.fc.b"] = np.zeros(3, dtype=dtype)
    return p


def _with_coords(x):
    n, _, h, w = x.shape
    xs = np.broadcast_to((np.arange(w, dtype=x.dtype) / w - 0.5)[None, None, None, :], (n, 1, h, w))
    ys = np.broadcast_to((np.arange(h, dtype=x.dtype) / h - 0.5)[None, None, :, None], (n, 1, h, w))
    return np.concatenate([x, xs, ys], axis=1)


def _t(params, name):
    v = params[name]
    return v if isinstance(v, Tensor) else Tensor(v, dtype=np.asarray(v).dtype)


def forward(images, params, cfg):
    """(N, 1, H, W) images -> (N, 3) pose Tensor ordered (t_x, t_y, theta)."""
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    y = Tensor(_with_coords(x), dtype=x.dtype)
    for i in range(len(cfg.widths)):
        y = ops.conv2d(y, _t(params, f"rect.s{i}.conv"), _t(params, f"rect.s{i}.b"), 2, 1)
        y = ops.relu(y)
    z = ops.fully_connected(ops.global_avg_pool(y), _t(params, "rect.fc.w"), _t(params, "rect.fc.b"))
    n = z.shape[0]
    scale = np.array([cfg.translation_scale, cfg.translation_scale, 0.0], dtype=z.dtype)
    ang = np.array([0.0, 0.0, 1.0], dtype=z.dtype)
    lin = ops.elementwise_mul(z, Tensor(np.broadcast_to(scale, (n, 3)).copy(), dtype=z.dtype))
    th = ops.elementwise_mul(ops.atan(z), Tensor(np.broadcast_to(ang, (n, 3)).copy(), dtype=z.dtype))
    return ops.add(lin, th)


def predict_poses(images, params, cfg, batch_size=32):
    out = []
    with default_dtype(np.float32):
        for i in range(0, len(images), batch_size):
            x = np.asarray(images[i:i + batch_size], dtype=np.float32)
            out.append(forward(x, params, cfg).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, 3))


def rectify(img, params, cfg, canonical_extent=None, iterations=1):
    """Predict the rectifying pose of one image and apply it.

    With ``iterations > 1`` the network is re-applied to its own output and
    the poses are composed.
    """
    img = np.asarray(img, dtype=np.float64)
    pose = geometry.IDENTITY
    current = img
    for _ in range(iterations):
        p = geometry.RigidPose.from_array(predict_poses(current[None], params, cfg)[0])
        pose = pose.compose(p)
        current = geometry.warp_rigid(img, pose, fill=0.0)
    extent = canonical_extent or img.shape
    return pose, geometry.center_crop(current, extent)


def pose_errors(pred, true):
    """Per-sample (translation error px, |angle error| rad)."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    dt = np.hypot(pred[:, 0] - true[:, 0], pred[:, 1] - true[:, 1])
    da = np.abs(np.remainder(pred[:, 2] - true[:, 2] + np.pi, 2 * np.pi) - np.pi)
    return dt, da


def _random_pose(rng, max_shift, max_rotation):
    return geometry.RigidPose(rng.uniform(-max_shift[0], max_shift[0]),
                              rng.uniform(-max_shift[1], max_shift[1]),
                              rng.uniform(-max_rotation, max_rotation))


def _batch(samples, rng, cfg, phantom_spec):
    srcs, targets, canon = [], [], []
    for s in samples:
        if cfg.repose and phantom_spec is not None:
            q = _random_pose(rng, phantom_spec.max_shift, phantom_spec.max_rotation)
            srcs.append(geometry.warp_rigid(s.aligned, q, fill=0.0))
        else:
            q = s.pose
            srcs.append(s.source)
        targets.append(q.inverse().as_array())
        canon.append(s.aligned)
    return np.stack(srcs)[:, None], np.stack(targets), np.stack(canon)[:, None]


def train_rectifier(dataset, cfg, phantom_spec=None, val_set=None):
    """Fit the rectifier; returns (params, log rows).

    ``mode="param"`` regresses the rectifying pose directly; ``mode="image"``
    minimizes the squared intensity error between the warped source and the
    canonical slice, differentiating through the warp.
    """
    t0 = time.perf_counter()
    if not dataset:
        raise ValueError("empty rectifier training set")
    dtype = np.dtype(cfg.dtype).type
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 8]))
    params = init_rectifier(cfg, dtype=dtype)
    n = len(dataset)
    steps = -(-n // cfg.batch_size)
    max_iter = steps * cfg.epochs
    state = AdamState()
    w = np.array([1.0 / cfg.translation_scale ** 2, 1.0 / cfg.translation_scale ** 2,
                  1.0 / cfg.angle_scale ** 2])
    rows = []
    it = 0
    with default_dtype(dtype):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for s in range(steps):
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                src, target, canon = _batch([dataset[i] for i in idx], rng, cfg, phantom_spec)
                tensors = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in params.items()}
                pose = forward(src.astype(dtype), tensors, cfg)
                if cfg.mode == "param":
                    wt = np.broadcast_to(w, pose.shape).astype(dtype)
                    diff = ops.sub(pose, Tensor(target, dtype=dtype))
                    loss = ops.scale(ops.sum_all(ops.elementwise_mul(
                        ops.elementwise_mul(diff, diff), Tensor(wt, dtype=dtype))), 1.0 / len(idx))
                else:
                    warped = geometry.warp_rigid(Tensor(src.astype(dtype), dtype=dtype), pose)
                    loss = ops.l2_loss(warped, canon.astype(dtype))
                if not np.isfinite(loss.data):
                    raise NumericError(f"rectifier loss diverged at epoch {epoch}, batch {s}")
                loss.backward()
                grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
                adam_step(params, grads, state, poly_lr(it, max_iter, cfg.lr, cfg.poly_power),
                          cfg.betas)
                it += 1
                total += float(loss.data)
            row = {"epoch": epoch, "loss": total / steps}
            if val_set:
                dt, da = evaluate_rectifier(params, cfg, val_set)
                row.update(val_translation_px=float(np.median(dt)), val_theta_rad=float(np.median(da)))
            rows.append(row)
            log.info("rectifier epoch %d: %s", epoch, row)
    log.info("rectifier trained in %.1fs", time.perf_counter() - t0)
    return params, rows


def evaluate_rectifier(params, cfg, dataset):
    """Translation and angle errors of the predicted rectifying poses."""
    src = np.stack([s.source for s in dataset])[:, None]
    pred = predict_poses(src, params, cfg)
    true = np.stack([s.pose.inverse().as_array() for s in dataset])
    return pose_errors(pred, true)


def image_mse(params, cfg, dataset, identity=False):
    """Mean squared intensity error between rectified sources and canonical slices."""
    errs = []
    src = np.stack([s.source for s in dataset])[:, None]
    poses = np.zeros((len(dataset), 3)) if identity else predict_poses(src, params, cfg)
    for s, p in zip(dataset, poses):
        out = geometry.warp_rigid(s.source, geometry.RigidPose.from_array(p))
        errs.append(np.mean((out - s.aligned) ** 2))
    return float(np.mean(errs))


def config_dict(cfg):
    return asdict(cfg)
