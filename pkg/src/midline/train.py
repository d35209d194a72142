"""Optimization: Adam, poly schedule, the midline training loop and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, model, phantom
from .autodiff import Tensor, blob, default_dtype
from .losses import LossWeights, NumericError, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    poly_power: float = 0.9
    seed: int = 0
    hflip: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not (0 < self.poly_power <= 2):
            raise ValueError(f"poly power must be in (0, 2], got {self.poly_power}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.betas}")


def poly_lr(it, max_iter, lr0, power=0.9):
    if not (0 <= it <= max_iter):
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * (1.0 - it / max_iter) ** power


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.99), eps=1e-8):
    """In-place Adam update with bias correction. ``params``/``grads`` are name -> ndarray."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return params, state


@dataclass
class Batch:
    images: np.ndarray
    coords: np.ndarray
    limits: np.ndarray
    band: np.ndarray


def make_batch(samples, dtype, flip=None, image="aligned"):
    imgs, coords, limits, band = phantom.stack(samples, image)
    imgs = imgs.astype(dtype)
    coords = coords.astype(np.float64)
    band = band.astype(np.float64)
    if flip is not None and flip.any():
        w = imgs.shape[-1]
        imgs[flip] = imgs[flip][..., ::-1]
        band[flip] = band[flip][..., ::-1]
        coords[flip] = (w - 1) - coords[flip]
    return Batch(imgs, coords, limits, band)


@dataclass
class RunRecord:
    config: dict
    epoch_losses: list
    steps: int
    weights_path: str | None = None
    report_path: str | None = None
    wall_clock: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def train_midline(train_set, tcfg, mcfg, lw=None, log_every=0):
    """Optimize the four-term objective; returns (float32 params, RunRecord)."""
    lw = lw or LossWeights()
    t0 = time.perf_counter()
    dtype = np.dtype(tcfg.dtype).type
    if not train_set:
        raise ValueError("empty training set")
    with default_dtype(dtype):
        params = model.init_params(mcfg, seed=tcfg.seed, dtype=dtype)
        rng = np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 2]))
        n = len(train_set)
        steps_per_epoch = -(-n // tcfg.batch_size)
        max_iter = steps_per_epoch * tcfg.epochs
        state = AdamState()
        history = []
        it = 0
        for epoch in range(tcfg.epochs):
            order = rng.permutation(n)
            sums = {"total": 0.0, "limits": 0.0, "seg": 0.0, "reg": 0.0, "crl": 0.0}
            for s in range(steps_per_epoch):
                idx = order[s * tcfg.batch_size:(s + 1) * tcfg.batch_size]
                flip = rng.uniform(size=len(idx)) < 0.5 if tcfg.hflip else None
                batch = make_batch([train_set[i] for i in idx], dtype, flip)
                tensors = model.to_tensors(params)
                out = model.forward(batch.images, tensors, mcfg)
                try:
                    terms = total_loss(out, batch, lw)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {s}: {exc}") from None
                terms.total.backward()
                grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
                lr = poly_lr(it, max_iter, tcfg.lr, tcfg.poly_power)
                try:
                    adam_step(params, grads, state, lr, tcfg.betas, tcfg.eps)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {s}: {exc}") from None
                it += 1
                for k, v in terms.as_dict().items():
                    sums[k] += v
            epoch_mean = {k: v / steps_per_epoch for k, v in sums.items()}
            epoch_mean["epoch"] = epoch
            history.append(epoch_mean)
            if log_every and (epoch % log_every == 0 or epoch == tcfg.epochs - 1):
                log.info("epoch %d: %s", epoch,
                         " ".join(f"{k}={v:.4f}" for k, v in epoch_mean.items() if k != "epoch"))
    record = RunRecord(config={"train": asdict(tcfg), "model": asdict(mcfg), "loss": asdict(lw)},
                       epoch_losses=history, steps=it,
                       wall_clock=time.perf_counter() - t0)
    return params, record


def predict(params, mcfg, images, batch_size=16, dtype=np.float32):
    """Batched forward without graph tracking; returns (limits probs, coords)."""
    lims, crds = [], []
    with default_dtype(dtype):
        tensors = model.to_tensors(params, requires_grad=False)
        for i in range(0, len(images), batch_size):
            x = np.asarray(images[i:i + batch_size], dtype=dtype)
            if x.ndim == 3:
                x = x[:, None]
            out = model.forward(x, tensors, mcfg)
            lims.append(out.limits.astype(np.float64))
            crds.append(out.coords.data.astype(np.float64))
    if not lims:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.concatenate(lims), np.concatenate(crds)


def evaluate(params, dataset, mcfg, delta=1.0, out_dir=None, worst_k=0, image="aligned",
             predictions=None):
    """Run inference on every sample and score it; optionally write CSVs and overlays.

    Returns a ``metrics.EvalSummary``. ``predictions`` may supply precomputed
    (limits, coords) arrays instead of running the network.
    """
    if predictions is None:
        images = np.stack([getattr(s, image) for s in dataset]) if dataset else np.zeros((0,))
        limits_p, coords_p = predict(params, mcfg, images) if dataset else (None, None)
    else:
        limits_p, coords_p = predictions
    rows = []
    results = []
    for i, s in enumerate(dataset):
        res = model.postprocess(getattr(s, image), limits_p[i], coords_p[i], mcfg.limits_threshold)
        results.append(res)
        rep = metrics.score(res.coords, res.mask, s.coords, s.limits, delta)
        rows.append((s.sample_id or f"{i:05d}", rep))
    summary = metrics.summarize(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.write_reports(rows, summary, out_dir)
        if worst_k:
            _write_overlays(dataset, results, rows, out_dir / "overlays", worst_k, image)
    return summary


def _write_overlays(dataset, results, rows, out_dir, k, image):
    from PIL import Image
    out_dir.mkdir(parents=True, exist_ok=True)
    scored = [(r.lde if r.lde is not None else np.inf, i) for i, (_, r) in enumerate(rows)]
    scored.sort(key=lambda t: -t[0])
    for _, i in scored[:k]:
        s, res = dataset[i], results[i]
        base = np.clip(getattr(s, image), 0, 1)
        rgb = np.stack([base] * 3, axis=-1)
        w = base.shape[1]
        for y in np.flatnonzero(s.limits):
            rgb[y, int(np.clip(round(s.coords[y]), 0, w - 1))] = (0.0, 1.0, 0.0)
        for y in np.flatnonzero(res.mask):
            rgb[y, int(np.clip(round(res.coords[y]), 0, w - 1))] = (1.0, 0.0, 0.0)
        Image.fromarray((rgb * 255).astype(np.uint8)).save(out_dir / f"{rows[i][0]}.png")


def save_weights(path, params):
    blob.save(path, params)


def load_weights(path):
    return blob.load(path)
