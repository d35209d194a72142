"""Curve distances (LDE, MSDE, HD, ASD) and the connectivity indicator.

All distances are in aligned-frame pixels. A curve is given as a coordinate
vector plus a presence mask (one point ``(x[y], y)`` per present row).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .losses import crl


class UndefinedMetric(ValueError):
    """The metric has no value for these curves (e.g. empty support)."""


@dataclass(frozen=True)
class MidlineCurve:
    rows: np.ndarray   # sorted integer rows
    xs: np.ndarray     # x per row

    @classmethod
    def from_coords(cls, coords, mask):
        rows = np.flatnonzero(np.asarray(mask) > 0.5)
        return cls(rows, np.asarray(coords, dtype=np.float64)[rows])

    def points(self):
        return np.stack([self.xs, self.rows.astype(np.float64)], axis=-1)

    def __len__(self):
        return len(self.rows)


def _curve(c, mask=None):
    if isinstance(c, MidlineCurve):
        return c
    if mask is None:
        c = np.asarray(c, dtype=np.float64)
        return MidlineCurve(np.arange(len(c)), c)
    return MidlineCurve.from_coords(c, mask)


def lde(pred, gt):
    """Mean |x_pred - x_gt| over rows present in both curves."""
    pred, gt = _curve(pred), _curve(gt)
    common, ip, ig = np.intersect1d(pred.rows, gt.rows, return_indices=True)
    if common.size == 0:
        raise UndefinedMetric("LDE undefined: curves share no rows")
    return math.fsum(np.abs(pred.xs[ip] - gt.xs[ig]).tolist()) / common.size


def max_shift(curve):
    """Largest horizontal deviation from the chord joining the curve's end points."""
    curve = _curve(curve)
    if len(curve) < 2:
        raise UndefinedMetric("max shift undefined for fewer than two rows")
    y0, y1 = curve.rows[0], curve.rows[-1]
    x0, x1 = curve.xs[0], curve.xs[-1]
    chord = x0 + (x1 - x0) * (curve.rows - y0) / (y1 - y0)
    return float(np.max(np.abs(curve.xs - chord)))


def msde(pred, gt):
    return abs(max_shift(pred) - max_shift(gt))


def _min_dists(a, b):
    """For each point of a, Euclidean distance to the nearest point of b."""
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    return np.sqrt(np.min(dx * dx + dy * dy, axis=1))


def hd(pred, gt):
    pred, gt = _curve(pred), _curve(gt)
    if len(pred) == 0 or len(gt) == 0:
        raise UndefinedMetric("Hausdorff distance undefined for an empty curve")
    a, b = pred.points(), gt.points()
    return float(max(_min_dists(a, b).max(), _min_dists(b, a).max()))


def asd(pred, gt):
    pred, gt = _curve(pred), _curve(gt)
    if len(pred) == 0 or len(gt) == 0:
        raise UndefinedMetric("ASD undefined for an empty curve")
    a, b = pred.points(), gt.points()
    da, db = _min_dists(a, b), _min_dists(b, a)
    return math.fsum(da.tolist() + db.tolist()) / (len(da) + len(db))


def connectivity_indicator(coords, mask, delta=1.0):
    """CRL of the predicted real coordinates on the predicted limits."""
    return crl(np.asarray(coords, dtype=np.float64), delta, mask=np.asarray(mask) > 0.5)


@dataclass
class MetricReport:
    lde: float | None
    msde: float | None
    hd: float | None
    asd: float | None
    connectivity: float | None

    FIELDS = ("lde", "msde", "hd", "asd", "connectivity")

    def values(self):
        return [getattr(self, f) for f in self.FIELDS]


def score(pred_coords, pred_mask, gt_coords, gt_mask, delta=1.0):
    """All five metrics for one sample; undefined ones come back as None."""
    p = MidlineCurve.from_coords(pred_coords, pred_mask)
    g = MidlineCurve.from_coords(gt_coords, gt_mask)
    out = {}
    for name, fn in (("lde", lde), ("msde", msde), ("hd", hd), ("asd", asd)):
        try:
            out[name] = fn(p, g)
        except UndefinedMetric:
            out[name] = None
    out["connectivity"] = connectivity_indicator(pred_coords, pred_mask, delta) if len(p) else None
    return MetricReport(**out)


@dataclass
class EvalSummary:
    n: int
    mean: dict
    std: dict
    undefined: dict

    def row(self):
        return {k: f"{self.mean[k]:.3f}({self.std[k]:.3f})" if self.mean[k] is not None else "n/a"
                for k in MetricReport.FIELDS}


def summarize(rows):
    """Aggregate per-sample reports; undefined values are counted and excluded."""
    mean, std, undefined = {}, {}, {}
    for f in MetricReport.FIELDS:
        vals = [getattr(r, f) for _, r in rows if getattr(r, f) is not None]
        undefined[f] = len(rows) - len(vals)
        mean[f] = float(np.mean(vals)) if vals else None
        std[f] = float(np.std(vals)) if vals else None
    return EvalSummary(len(rows), mean, std, undefined)


def write_reports(rows, summary, out_dir):
    with open(out_dir / "per_sample.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", *MetricReport.FIELDS, *[f"{f}_valid" for f in MetricReport.FIELDS]])
        for sid, rep in rows:
            vals = rep.values()
            wr.writerow([sid, *["" if v is None else repr(float(v)) for v in vals],
                         *[int(v is not None) for v in vals]])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", *MetricReport.FIELDS, *[f"{f}_undefined" for f in MetricReport.FIELDS]])
        r = summary.row()
        wr.writerow([summary.n, *[r[f] for f in MetricReport.FIELDS],
                     *[summary.undefined[f] for f in MetricReport.FIELDS]])
