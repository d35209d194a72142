"""Training objective: limits BCE, weighted band CE, L1 regression and the connectivity regular loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, make_node, ops


class NumericError(ArithmeticError):
    """A loss term evaluated to NaN or infinity."""


@dataclass
class LossWeights:
    lam: float = 1.0     # limits
    gamma: float = 1.0   # band segmentation
    xi: float = 1.0      # coordinate regression
    mu: float = 0.5      # connectivity regular loss
    delta: float = 1.0   # connectivity margin, px
    pos_weight: float = 10.0

    def __post_init__(self):
        for name in ("lam", "gamma", "xi", "mu", "pos_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")


def phi_matrix(n):
    """Dense adjacent-difference matrix: zero first row, then -1/+1 rows. Oracle only."""
    m = np.zeros((n, n))
    idx = np.arange(1, n)
    m[idx, idx] = 1.0
    m[idx, idx - 1] = -1.0
    return m


def apply_phi(x):
    """Adjacent differences with a leading zero, along the last axis.

    Accepts an array (returns an array) or a Tensor (returns a differentiable Tensor).
    """
    if isinstance(x, Tensor):
        return ops.adjacent_diff(x)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("apply_phi needs at least one coordinate")
    out = np.zeros_like(x)
    out[..., 1:] = x[..., 1:] - x[..., :-1]
    return out


def _pair_mask(mask):
    """Differences are counted only where both adjacent rows are present."""
    m = np.asarray(mask, dtype=bool)
    pm = np.zeros(m.shape, dtype=bool)
    pm[..., 1:] = m[..., 1:] & m[..., :-1]
    return pm


def crl(x, delta=1.0, mask=None):
    """sum_i max(0, |dx_i| - delta) over adjacent differences.

    With a ``mask``, only rows present in it contribute (differences between
    consecutive present rows). Batched input sums over the last axis and
    averages over the rest. Arrays in, float out; Tensors in, Tensor out.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if not isinstance(x, Tensor):
        d = np.abs(apply_phi(x))
        h = np.maximum(d - delta, 0.0)
        if mask is not None:
            h = np.where(_pair_mask(mask), h, 0.0)
        total = h.sum(axis=-1)
        return float(np.mean(total)) if np.ndim(total) else float(total)
    d = ops.absolute(ops.adjacent_diff(x))
    h = ops.hinge(d, delta)
    if mask is not None:
        h = ops.elementwise_mul(h, Tensor(_pair_mask(mask), dtype=x.dtype))
    total = ops.sum_all(h)
    n_curves = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    return ops.scale(total, 1.0 / n_curves)


def crl_subgradient(x, delta=1.0):
    """Subgradient of :func:`crl` (unmasked, single curve): sign(dx) where |dx| > delta."""
    x = np.asarray(x, dtype=np.float64)
    d = apply_phi(x)
    s = np.where(np.abs(d) > delta, np.sign(d), 0.0)
    g = np.zeros_like(x)
    g[1:] += s[1:]
    g[:-1] -= s[1:]
    return g


def check_delta_connectivity(x, delta=1.0):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return True
    return bool(np.all(np.abs(np.diff(x)) <= delta))


@dataclass
class LossTerms:
    total: Tensor
    limits: float
    seg: float
    reg: float
    crl: float

    def as_dict(self):
        return {"total": float(self.total.data), "limits": self.limits, "seg": self.seg,
                "reg": self.reg, "crl": self.crl}


def total_loss(out, target, w=None):
    """Weighted four-term objective.

    ``out`` is a ModelOutput (uses its logits and coordinates); ``target`` any
    object with ``limits`` (N,H), ``band`` (N,H,W) and ``coords`` (N,H) arrays.
    Regression and CRL terms only see rows where the true limits are 1.
    """
    w = w or LossWeights()
    limits_t = np.asarray(target.limits, dtype=np.float64)
    band_t = np.asarray(target.band, dtype=np.float64)
    coords_t = np.asarray(target.coords, dtype=np.float64)
    if out.coords.shape != coords_t.shape or out.band_logits.shape != band_t.shape:
        raise ValueError(f"output shapes {out.coords.shape}/{out.band_logits.shape} do not "
                         f"match target {coords_t.shape}/{band_t.shape}")
    present = limits_t > 0.5

    l_lim = ops.binary_cross_entropy(out.limits_logits, limits_t)
    l_seg = ops.weighted_cross_entropy(out.band_logits, band_t, w.pos_weight)
    l_reg = _per_curve_l1(out.coords, coords_t, present)
    l_cr = crl(out.coords, w.delta, mask=present)

    terms = {"limits": l_lim, "seg": l_seg, "reg": l_reg, "crl": l_cr}
    for name, t in terms.items():
        if not np.isfinite(t.data):
            raise NumericError(f"loss term {name!r} is not finite")
    total = ops.add(ops.add(ops.scale(l_lim, w.lam), ops.scale(l_seg, w.gamma)),
                    ops.add(ops.scale(l_reg, w.xi), ops.scale(l_cr, w.mu)))
    return LossTerms(total, float(l_lim.data), float(l_seg.data), float(l_reg.data),
                     float(l_cr.data))


def _per_curve_l1(pred, target, present):
    """L1 averaged over present rows of each curve, then over the batch."""
    if pred.ndim == 1:
        return ops.l1_loss(pred, target, present)
    cnt = np.maximum(present.sum(axis=-1, keepdims=True), 1).astype(np.float64)
    weights = present / cnt / pred.shape[0]
    d = pred.data - target.astype(pred.dtype)
    g_local = (np.sign(d) * weights).astype(pred.dtype)
    val = np.asarray((np.abs(d) * weights).sum(), dtype=pred.dtype)
    return make_node(val, (pred,), lambda g: (g * g_local,))

