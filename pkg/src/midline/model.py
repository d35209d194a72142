"""Localization network: U-Net pyramid, CAR refinement module, limits/band/coordinate heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, get_default_dtype, ops
from .autodiff.ops import ShapeError


@dataclass
class CarNetConfig:
    base_width: int = 8
    width_multipliers: tuple = (1, 2, 4, 6, 8)
    se_reduction: int = 4
    blocks: tuple = (1, 1, 2, 2, 3)
    refine_width: int = 4
    convs_per_level: int = 2       # basic blocks per U-Net stage
    refine: bool = True            # False gives the plain U-Net baseline
    limits_hidden: int = 8
    temperature: float = 0.25      # soft-argmax sharpness over band logits
    limits_threshold: float = 0.5

    def __post_init__(self):
        self.width_multipliers = tuple(int(v) for v in self.width_multipliers)
        self.blocks = tuple(int(v) for v in self.blocks)
        if len(self.width_multipliers) != 5:
            raise ValueError("width_multipliers needs one entry per pyramid level (5)")
        if len(self.blocks) < 1 or len(self.blocks) > 5 or min(self.blocks) < 1:
            raise ValueError(f"refinement block counts must be >= 1, got {self.blocks}")
        if any(a > b for a, b in zip(self.blocks, self.blocks[1:])):
            raise ValueError(f"block counts must be non-decreasing with depth, got {self.blocks}")
        if self.refine_width % self.se_reduction:
            raise ValueError(f"SE reduction {self.se_reduction} must divide refine width "
                             f"{self.refine_width}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def widths(self):
        return tuple(self.base_width * m for m in self.width_multipliers)

    @property
    def levels(self):
        """Number of pyramid levels fed to the refinement module."""
        return len(self.blocks)


@dataclass
class PyramidFeatures:
    levels: list = field(default_factory=list)   # f_1 .. f_5, strides 1, 2, 4, 8, 16

    def __getitem__(self, i):
        return self.levels[i]


@dataclass
class ModelOutput:
    limits_logits: Tensor   # (N, H)
    band_logits: Tensor     # (N, H, W)
    coords: Tensor          # (N, H), px

    @property
    def limits(self):
        return ops._sigmoid_np(self.limits_logits.data)

    @property
    def band(self):
        return ops._sigmoid_np(self.band_logits.data)


# ---------------------------------------------------------------- parameters

def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _block_params(params, prefix, c_in, c_out, rng, dtype, k=3):
    params[f"{prefix}.conv"] = _he(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
    params[f"{prefix}.gamma"] = np.ones(c_out, dtype=dtype)
    params[f"{prefix}.beta"] = np.zeros(c_out, dtype=dtype)


def init_params(cfg, seed=0, dtype=None):
    """Ordered dict name -> ndarray with He fan-in initialization."""
    dtype = dtype or get_default_dtype()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    c = cfg.widths
    p = {}
    for i in range(5):
        c_in = 1 if i == 0 else c[i - 1]
        for j in range(cfg.convs_per_level):
            _block_params(p, f"unet.enc{i + 1}.{j}", c_in if j == 0 else c[i], c[i], rng, dtype)
    for i in range(3, -1, -1):
        for j in range(cfg.convs_per_level):
            _block_params(p, f"unet.dec{i + 1}.{j}", c[i + 1] + c[i] if j == 0 else c[i], c[i],
                          rng, dtype)
    if cfg.refine:
        r = cfg.refine_width
        for lvl, n_blocks in enumerate(cfg.blocks):
            _block_params(p, f"car.l{lvl + 1}.b0", c[lvl], r, rng, dtype)
            for b in range(1, n_blocks):
                _block_params(p, f"car.l{lvl + 1}.b{b}", r, r, rng, dtype)
            hid = r // cfg.se_reduction
            p[f"car.l{lvl + 1}.se.w1"] = _he(rng, (hid, r), r, dtype)
            p[f"car.l{lvl + 1}.se.w2"] = _he(rng, (r, hid), hid, dtype)
        _block_params(p, "car.fuse", r * cfg.levels, c[0], rng, dtype)
    p["head.seg.w"] = _he(rng, (1, c[0], 1, 1), c[0], dtype) * dtype(0.1)
    p["head.seg.b"] = np.full(1, -3.0, dtype=dtype)
    p["head.lim.w1"] = _he(rng, (cfg.limits_hidden, c[0]), c[0], dtype)
    p["head.lim.b1"] = np.zeros(cfg.limits_hidden, dtype=dtype)
    p["head.lim.w2"] = _he(rng, (1, cfg.limits_hidden), cfg.limits_hidden, dtype) * dtype(0.1)
    p["head.lim.b2"] = np.zeros(1, dtype=dtype)
    return p


def to_tensors(params, requires_grad=True):
    return {k: Tensor(v, requires_grad=requires_grad, name=k, dtype=v.dtype)
            for k, v in params.items()}


def count_params(params, prefix=None):
    return int(sum(np.asarray(getattr(v, "data", v)).size for k, v in params.items()
                   if prefix is None or k.startswith(prefix)))


def _w(params, name):
    v = params[name]
    return v if isinstance(v, Tensor) else Tensor(v, dtype=np.asarray(v).dtype)


def basic_block(x, params, prefix, stride=1):
    """conv3x3 (zero pad 1) -> instance norm -> relu."""
    y = ops.conv2d(x, _w(params, f"{prefix}.conv"), None, stride, 1)
    y = ops.instance_norm(y, _w(params, f"{prefix}.gamma"), _w(params, f"{prefix}.beta"))
    return ops.relu(y)


# ------------------------------------------------------------------- forward

def _stage(x, params, prefix):
    j = 0
    while f"{prefix}.{j}.conv" in params:
        x = basic_block(x, params, f"{prefix}.{j}")
        j += 1
    return x


def unet_forward(img, params):
    """Five decoder-side feature maps f_1 (input resolution) .. f_5 (stride 16)."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.ndim == 2:
        x = ops.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input extent {h}x{w} must be divisible by 16")
    enc = [_stage(x, params, "unet.enc1")]
    for i in range(1, 5):
        enc.append(_stage(ops.maxpool2(enc[-1]), params, f"unet.enc{i + 1}"))
    feats = [None] * 5
    feats[4] = enc[4]
    for i in range(3, -1, -1):
        up = ops.bilinear_upsample(feats[i + 1], 2)
        feats[i] = _stage(ops.concat_channels([up, enc[i]]), params, f"unet.dec{i + 1}")
    return PyramidFeatures(feats)


def car_refine(pyr, params, cfg):
    """Per-level conv stacks + SE, upsampled to f_1 resolution, concatenated and fused."""
    target = pyr[0].shape[2:]
    refined = []
    for lvl, n_blocks in enumerate(cfg.blocks):
        y = pyr[lvl]
        for b in range(n_blocks):
            y = basic_block(y, params, f"car.l{lvl + 1}.b{b}")
        y = ops.se_recalibrate(y, _w(params, f"car.l{lvl + 1}.se.w1"),
                               _w(params, f"car.l{lvl + 1}.se.w2"))
        factor = target[0] // y.shape[2]
        refined.append(ops.bilinear_upsample(y, factor))
    return basic_block(ops.concat_channels(refined), params, "car.fuse")


def seg_head(feat, params):
    """Band logits (N, H, W) from a 1x1 convolution."""
    z = ops.conv2d(feat, _w(params, "head.seg.w"), _w(params, "head.seg.b"), 1, 0)
    n, _, h, w = z.shape
    return ops.reshape(z, (n, h, w))


def limits_head(feat, params):
    """Row presence logits (N, H): width-pooled features through a per-row two-layer MLP."""
    n, c, h, w = feat.shape
    pooled = ops.mean_axis(feat, 3)                     # (N, C, H)
    rows = ops.reshape(ops.transpose(pooled, (0, 2, 1)), (n * h, c))
    hid = ops.relu(ops.fully_connected(rows, _w(params, "head.lim.w1"),
                                       _w(params, "head.lim.b1")))
    z = ops.fully_connected(hid, _w(params, "head.lim.w2"), _w(params, "head.lim.b2"))
    return ops.reshape(z, (n, h))


def soft_argmax_rows(logits, temperature):
    return ops.row_expectation(ops.row_softmax(logits, temperature))


def regression_head(band, temperature=1.0):
    """Row-wise soft-argmax of the band probabilities (via their logits)."""
    b = band if isinstance(band, Tensor) else Tensor(band)
    return soft_argmax_rows(ops.logit(b), temperature)


def forward(img, params, cfg):
    """Full localization pass; ``img`` is (H, W), (1, H, W) or (N, 1, H, W)."""
    pyr = unet_forward(img, params)
    feat = car_refine(pyr, params, cfg) if cfg.refine else pyr[0]
    band_logits = seg_head(feat, params)
    limits_logits = limits_head(feat, params)
    coords = soft_argmax_rows(band_logits, cfg.temperature)
    return ModelOutput(limits_logits, band_logits, coords)


# ------------------------------------------------------------------ inference

@dataclass
class InferenceResult:
    coords: np.ndarray      # (H,) real coordinates, 0 outside the kept run
    mask: np.ndarray        # (H,) binary limits after run cleanup
    overlay: np.ndarray     # (H, W) image with the midline drawn
    found: bool
    warning: str = ""


def largest_run(binary):
    """Mask of the longest contiguous run of ones (first one on ties)."""
    b = np.asarray(binary, dtype=bool)
    best_start, best_len, start = 0, 0, None
    for i, v in enumerate(np.append(b, False)):
        if v and start is None:
            start = i
        elif not v and start is not None:
            if i - start > best_len:
                best_start, best_len = start, i - start
            start = None
    out = np.zeros(b.shape, dtype=np.uint8)
    out[best_start:best_start + best_len] = 1
    return out


def draw_midline(img, coords, mask, value=1.0):
    over = np.array(img, dtype=np.float64, copy=True)
    w = over.shape[1]
    for y in np.flatnonzero(mask):
        x = int(np.clip(round(float(coords[y])), 0, w - 1))
        over[y, x] = value
    return over


def postprocess(img, limits_prob, coords, threshold):
    """Threshold, keep the largest run, Hadamard-mask the coordinates and draw them."""
    mask = largest_run(np.asarray(limits_prob) > threshold)
    if not mask.any():
        return InferenceResult(np.zeros_like(coords), mask, np.array(img, dtype=np.float64),
                               False, "no midline found: no row above the limits threshold")
    real = np.asarray(coords) * mask
    return InferenceResult(real, mask, draw_midline(img, real, mask), True)


def infer(img, params, cfg):
    img = np.asarray(img, dtype=get_default_dtype())
    out = forward(img, params, cfg)
    return postprocess(img, out.limits[0], out.coords.data[0].astype(np.float64),
                       cfg.limits_threshold)
