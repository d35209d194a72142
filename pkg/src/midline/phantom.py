"""Synthetic brain slices with a deformed midline and exact labels.

A phantom is an elliptical skull rim around two textured hemispheres split by
a dark fissure. The fissure follows ``x(y) = W/2 + a * bump((y - c) / width)``
with a cosine-squared bump of compact support, rounded to whole pixels, so the
ground-truth coordinates satisfy 1-connectivity exactly. The source image is
the canonical slice warped by a random rigid perturbation.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import RigidPose, map_points, transform_coords, warp_rigid


@dataclass
class PhantomSpec:
    extent: tuple = (128, 96)
    skull_axes: tuple = (34.0, 50.0)   # (x, y) semi-axes, px
    skull_thickness: float = 3.0
    amplitude: float = 12.0            # max bump amplitude a, px
    amplitude_jitter: float = 1.0      # per-sample |a| drawn from [a (1 - jitter), a]
    signed: bool = True                # random bump direction
    bump_center: float = 64.0
    center_jitter: float = 8.0
    bump_width: float = 28.0           # half-support of the bump, px
    limits: tuple = (20, 108)
    limits_jitter: int = 4
    band_half_width: int = 2
    noise_sigma: float = 0.03
    faint_prob: float = 0.0            # chance that a run of rows shows only a faint fissure
    faint_rows: tuple = (10, 24)       # length range of that run
    faint_contrast: float = 0.1        # fissure contrast kept inside the run
    max_shift: tuple = (10.0, 10.0)    # +-t_x, +-t_y, px
    max_rotation: float = 0.3          # +-theta, rad
    seed: int = 0

    def __post_init__(self):
        self.extent = tuple(int(v) for v in self.extent)
        self.skull_axes = tuple(float(v) for v in self.skull_axes)
        self.limits = tuple(int(v) for v in self.limits)
        self.max_shift = tuple(float(v) for v in self.max_shift)
        self.faint_rows = tuple(int(v) for v in self.faint_rows)
        self.validate()

    def validate(self):
        h, w = self.extent
        if not (0 <= self.amplitude <= w / 4):
            raise ValueError(f"amplitude {self.amplitude} outside [0, W/4 = {w / 4}]")
        y_top, y_bot = self.limits
        if not (0 <= y_top - self.limits_jitter and y_bot + self.limits_jitter < h
                and y_top < y_bot):
            raise ValueError(f"limits {self.limits} (+-{self.limits_jitter}) not inside 0..{h - 1}")
        if self.band_half_width < 1:
            raise ValueError("band half-width must be >= 1")
        if self.bump_width <= 0:
            raise ValueError("bump width must be positive")
        # steepest slope of a cos^2 bump is a * pi / (2 * width); keep it <= 1 px/row
        if self.amplitude * math.pi / (2 * self.bump_width) > 1.0:
            raise ValueError(f"amplitude {self.amplitude} too steep for bump width "
                             f"{self.bump_width} (ground truth would break 1-connectivity)")
        if not (0 <= self.amplitude_jitter <= 1):
            raise ValueError("amplitude_jitter must be in [0, 1]")
        if not (0 <= self.faint_prob <= 1 and 0 <= self.faint_contrast <= 1):
            raise ValueError("faint_prob and faint_contrast must be in [0, 1]")
        if not (1 <= self.faint_rows[0] <= self.faint_rows[1]):
            raise ValueError(f"faint_rows {self.faint_rows} must be an increasing positive range")


@dataclass
class Sample:
    source: np.ndarray      # I_S (H, W)
    aligned: np.ndarray     # I_A, canonical pose (H, W)
    pose: RigidPose         # perturbation: source = warp_rigid(aligned, pose)
    coords: np.ndarray      # Y_C (H,), canonical frame, defined on every row
    limits: np.ndarray      # Y_L (H,) uint8
    band: np.ndarray        # Y_B (H, W) uint8
    sample_id: str = ""

    @property
    def rectifying_pose(self):
        """Pose that maps the source back onto the canonical image."""
        return self.pose.inverse()

    def landmarks(self):
        """Anterior/posterior falx points (first/last present rows) in the source image."""
        rows = np.flatnonzero(self.limits)
        pts = np.array([[self.coords[rows[0]], rows[0]], [self.coords[rows[-1]], rows[-1]]],
                       dtype=np.float64)
        src = map_points(pts, self.pose, self.source.shape)
        return (tuple(src[0]), tuple(src[1]))

    def source_labels(self):
        return transform_coords(self.coords, self.limits, self.pose, self.source.shape)


def bump(u):
    """cos^2(pi u / 2) on |u| < 1, zero elsewhere."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) < 1.0, np.cos(np.pi * u / 2.0) ** 2, 0.0)


def midline_curve(extent, amplitude, center, width):
    """Rasterized midline x for every row (rounded to whole pixels)."""
    h, w = extent
    y = np.arange(h, dtype=np.float64)
    return np.round(w / 2.0 + amplitude * bump((y - center) / width))


def band_mask(coords, limits, width_px, half_width):
    h = coords.shape[0]
    cols = np.arange(width_px)[None, :]
    mask = np.abs(cols - coords[:, None]) <= half_width
    return (mask & (np.asarray(limits)[:, None] > 0)).astype(np.uint8)


def _sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def render(spec, coords, limits, rng, contrast=None):
    """Canonical-pose image for the given midline.

    ``contrast`` optionally scales the fissure per row (labels are unaffected).
    """
    h, w = spec.extent
    cx, cy = w / 2.0, h / 2.0
    ax, ay = spec.skull_axes
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    r = np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)
    # signed distance to the ellipse, approximated in px along the short axis
    dist = (r - 1.0) * min(ax, ay)
    img = np.zeros((h, w))
    rim = np.clip(1.0 - np.abs(dist + spec.skull_thickness / 2) / (spec.skull_thickness / 2 + 0.5),
                  0.0, 1.0)
    inside = np.clip(-dist - spec.skull_thickness + 0.5, 0.0, 1.0)

    left = xs < coords[:, None]
    f1, f2 = rng.uniform(5.0, 9.0, size=2)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    tex_left = 0.05 * np.sin(2 * np.pi * xs / f1 + ph1) * np.sin(2 * np.pi * ys / (f1 + 2) + ph2)
    tex_right = 0.05 * np.sin(2 * np.pi * (xs + ys) / f2 + ph2)
    base_l, base_r = 0.5 + rng.uniform(-0.04, 0.04, size=2)
    tissue = np.where(left, base_l + tex_left, base_r + tex_right)

    # dark ventricle-like blobs either side of the midline add clutter
    for side in (-1.0, 1.0):
        vy = cy + rng.uniform(-12, 12)
        vx = np.interp(vy, np.arange(h), coords) + side * rng.uniform(7, 12)
        tissue -= 0.15 * np.exp(-(((xs - vx) / 3.0) ** 2 + ((ys - vy) / 6.0) ** 2))

    img = inside * tissue + rim
    present = np.asarray(limits)[:, None] > 0
    fissure = 0.35 * np.exp(-((xs - coords[:, None]) ** 2) / (2 * 0.6 ** 2))
    if contrast is not None:
        fissure = fissure * np.asarray(contrast, dtype=np.float64)[:, None]
    img = img - inside * np.where(present, fissure, 0.0)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _faint_run(spec, index, y_top, y_bot):
    """Per-row fissure contrast, or None. Drawn from its own stream so other draws are unchanged."""
    if spec.faint_prob <= 0:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed) & (2**64 - 1), int(index), 3]))
    if rng.uniform() >= spec.faint_prob:
        return None
    n = int(rng.integers(spec.faint_rows[0], spec.faint_rows[1] + 1))
    n = min(n, max(y_bot - y_top - 1, 1))
    start = int(rng.integers(y_top + 1, max(y_bot - n, y_top + 1) + 1))
    contrast = np.ones(spec.extent[0])
    contrast[start:start + n] = spec.faint_contrast
    return contrast


def generate_one(spec, index):
    rng = _sample_rng(spec.seed, index)
    h, w = spec.extent
    a = spec.amplitude * (1.0 - spec.amplitude_jitter * rng.uniform())
    if spec.signed and rng.uniform() < 0.5:
        a = -a
    y_top = spec.limits[0] + int(rng.integers(-spec.limits_jitter, spec.limits_jitter + 1))
    y_bot = spec.limits[1] + int(rng.integers(-spec.limits_jitter, spec.limits_jitter + 1))
    # keep the bump support strictly inside the limits
    lo, hi = y_top + spec.bump_width, y_bot - spec.bump_width
    c = spec.bump_center + rng.uniform(-spec.center_jitter, spec.center_jitter)
    c = float(np.clip(c, lo, hi)) if lo <= hi else (y_top + y_bot) / 2.0
    coords = midline_curve(spec.extent, a, c, spec.bump_width)
    limits = np.zeros(h, dtype=np.uint8)
    limits[y_top:y_bot + 1] = 1
    band = band_mask(coords, limits, w, spec.band_half_width)
    aligned = render(spec, coords, limits, rng, _faint_run(spec, index, y_top, y_bot))
    pose = RigidPose(rng.uniform(-spec.max_shift[0], spec.max_shift[0]),
                     rng.uniform(-spec.max_shift[1], spec.max_shift[1]),
                     rng.uniform(-spec.max_rotation, spec.max_rotation))
    source = warp_rigid(aligned, pose, fill=0.0)
    return Sample(source=source, aligned=aligned, pose=pose, coords=coords, limits=limits,
                  band=band, sample_id=f"{index:05d}")


def generate(spec, n, start=0):
    """``n`` samples; sample ``i`` depends only on ``(spec.seed, start + i)``."""
    spec.validate()
    return [generate_one(spec, start + i) for i in range(n)]


def stack(samples, image="aligned"):
    """Batch arrays (images (N,1,H,W), coords, limits, band) for a list of samples."""
    imgs = np.stack([getattr(s, image) for s in samples])[:, None]
    return (imgs, np.stack([s.coords for s in samples]), np.stack([s.limits for s in samples]),
            np.stack([s.band for s in samples]))


# ------------------------------------------------------------------ persistence

class ManifestError(ValueError):
    pass


def _write_png16(path, img):
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    PILImage.fromarray(q).save(path)


def _read_png16(path):
    with PILImage.open(path) as im:
        arr = np.array(im, dtype=np.float64)
    return arr / 65535.0


def _write_mask(path, mask):
    PILImage.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def _read_mask(path):
    with PILImage.open(path) as im:
        return (np.array(im) > 127).astype(np.uint8)


def save_manifest(samples, directory):
    """Write images, label CSVs and a JSON-lines manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, s in enumerate(samples):
            sid = s.sample_id or f"{i:05d}"
            rec = {
                "id": sid,
                "source": f"images/{sid}_source.png",
                "aligned": f"images/{sid}_aligned.png",
                "band": f"images/{sid}_band.png",
                "labels": f"labels/{sid}.csv",
                "pose": {"t_x": s.pose.t_x, "t_y": s.pose.t_y, "theta": s.pose.theta},
                "extent": list(s.aligned.shape),
            }
            _write_png16(directory / rec["source"], s.source)
            _write_png16(directory / rec["aligned"], s.aligned)
            _write_mask(directory / rec["band"], s.band)
            with open(directory / rec["labels"], "w", newline="") as lf:
                wr = csv.writer(lf)
                wr.writerow(["row", "coord", "limit"])
                for r in range(len(s.coords)):
                    wr.writerow([r, repr(float(s.coords[r])), int(s.limits[r])])
            fh.write(json.dumps(rec) + "\n")
    return manifest


_REQUIRED = ("id", "source", "aligned", "band", "labels", "pose")


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise ManifestError(f"{path}: line {lineno}: missing keys {missing}")
            for key in ("source", "aligned", "band", "labels"):
                if not (root / rec[key]).exists():
                    raise ManifestError(f"{path}: line {lineno}: missing file {root / rec[key]}")
            coords, limits = [], []
            with open(root / rec["labels"], newline="") as lf:
                rd = csv.reader(lf)
                next(rd)
                for row in rd:
                    coords.append(float(row[1]))
                    limits.append(int(row[2]))
            p = rec["pose"]
            samples.append(Sample(
                source=_read_png16(root / rec["source"]),
                aligned=_read_png16(root / rec["aligned"]),
                pose=RigidPose(p["t_x"], p["t_y"], p["theta"]),
                coords=np.array(coords, dtype=np.float64),
                limits=np.array(limits, dtype=np.uint8),
                band=_read_mask(root / rec["band"]),
                sample_id=str(rec["id"]),
            ))
    return samples


def spec_dict(spec):
    return asdict(spec)
