"""Command-line entry point: ``midline <command> --config FILE --out DIR``.

Exit codes: 0 success, 2 invalid config or input, 3 numeric failure,
4 empty or undefined result.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import geometry, model, phantom, rectifier, train
from .autodiff import blob
from .losses import LossWeights, NumericError

log = logging.getLogger("midline")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_EMPTY = 0, 2, 3, 4

# phantom index offsets keep the splits disjoint under one seed
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}


class EmptyResult(RuntimeError):
    pass


def _split_size(cfg, split):
    return getattr(cfg.data, f"n_{split}")


def load_split(cfg, split, data_dir=None):
    """Samples of one split: from ``data_dir/split`` when given, else generated."""
    if data_dir is not None:
        return phantom.load_manifest(Path(data_dir) / split)
    return phantom.generate(cfg.phantom, _split_size(cfg, split), start=SPLIT_OFFSETS[split])


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, default=train._json_default) + "\n")


def _write_config(out, cfg):
    (out / "config.txt").write_text(config_mod.dumps(cfg))


def _rectify_samples(samples, r_params, rcfg):
    """Replace each sample's aligned image by the rectified source."""
    out = []
    for s in samples:
        _, aligned = rectifier.rectify(s.source, r_params, rcfg, s.aligned.shape)
        out.append(dataclasses.replace(s, aligned=aligned))
    return out


# ---------------------------------------------------------------- commands

def cmd_phantom_gen(args, cfg, out):
    splits = [args.split] if args.split != "all" else list(SPLIT_OFFSETS)
    counts = {}
    for split in splits:
        samples = load_split(cfg, split)
        phantom.save_manifest(samples, out / split)
        counts[split] = len(samples)
    _write_config(out, cfg)
    _write_json(out / "phantom_spec.json", phantom.spec_dict(cfg.phantom))
    if not any(counts.values()):
        raise EmptyResult("no phantoms generated (all split sizes are 0)")
    return counts


def cmd_train_rectifier(args, cfg, out):
    train_set = load_split(cfg, "train", args.data)
    val_set = load_split(cfg, "val", args.data)
    if not train_set:
        raise EmptyResult("empty training set")
    t0 = time.perf_counter()
    params, rows = rectifier.train_rectifier(train_set, cfg.rectifier, cfg.phantom, val_set)
    wall = time.perf_counter() - t0
    blob.save(out / "rectifier.blob", params)
    with open(out / "rectifier_log.csv", "w", newline="") as fh:
        keys = ["epoch", "loss", "val_translation_px", "val_theta_rad"]
        wr = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        wr.writeheader()
        wr.writerows(rows)
    result = {"config": cfg.rectifier.__dict__, "epochs": rows, "wall_clock": wall,
              "weights_path": str(out / "rectifier.blob")}
    if val_set:
        dt, da = rectifier.evaluate_rectifier(params, cfg.rectifier, val_set)
        result["val_median_translation_px"] = float(np.median(dt))
        result["val_median_theta_rad"] = float(np.median(da))
    _write_config(out, cfg)
    _write_json(out / "run.json", result)
    return {k: v for k, v in result.items() if k.startswith("val_")}


def run_midline(cfg, train_set, val_set, out, worst_k=None):
    """Train, save weights and run record, and evaluate on ``val_set``."""
    params, record = train.train_midline(train_set, cfg.train, cfg.model, cfg.loss, log_every=1)
    weights = out / "weights.blob"
    train.save_weights(weights, params)
    record.weights_path = str(weights)
    summary = None
    if val_set:
        report = out / "report"
        summary = train.evaluate(params, val_set, cfg.model, cfg.data.delta, report,
                                 cfg.data.worst_k if worst_k is None else worst_k)
        record.report_path = str(report)
    record.config["phantom"] = phantom.spec_dict(cfg.phantom)
    record.config["data"] = dataclasses.asdict(cfg.data)
    (out / "run.json").write_text(record.to_json() + "\n")
    _write_config(out, cfg)
    return params, record, summary


def cmd_train_midline(args, cfg, out):
    train_set = load_split(cfg, "train", args.data)
    if not train_set:
        raise EmptyResult("empty training set")
    val_set = load_split(cfg, "val", args.data)
    _, record, summary = run_midline(cfg, train_set, val_set, out)
    res = {"steps": record.steps, "wall_clock": record.wall_clock,
           "final_loss": record.epoch_losses[-1]["total"]}
    if summary is not None:
        res["val"] = summary.row()
    return res


def _load_rectifier(args, cfg):
    if not args.rectifier:
        return None
    return blob.load(args.rectifier)


def cmd_eval(args, cfg, out):
    params = train.load_weights(args.weights)
    samples = load_split(cfg, args.split, args.data)
    if not samples:
        raise EmptyResult(f"empty {args.split} set: nothing to evaluate")
    image = "aligned"
    r_params = _load_rectifier(args, cfg)
    if r_params is not None:
        samples = _rectify_samples(samples, r_params, cfg.rectifier)
    elif args.use_source:
        image = "source"
    summary = train.evaluate(params, samples, cfg.model, cfg.data.delta, out,
                             cfg.data.worst_k, image)
    _write_config(out, cfg)
    if all(summary.mean[k] is None for k in summary.mean):
        raise EmptyResult("every metric is undefined on this set")
    return {"n": summary.n, **summary.row(), "undefined": summary.undefined}


def _read_image(path):
    from PIL import Image
    im = Image.open(path)
    arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    scale = 65535.0 if im.mode.startswith("I") else 255.0
    return arr / scale


def cmd_infer(args, cfg, out):
    from PIL import Image
    params = train.load_weights(args.weights)
    r_params = _load_rectifier(args, cfg)
    paths = [Path(p) for p in args.images]
    found = 0
    rows = []
    for p in paths:
        img = _read_image(p)
        pose = geometry.IDENTITY
        if r_params is not None:
            pose, img = rectifier.rectify(img, r_params, cfg.rectifier, img.shape)
        res = model.infer(img, params, cfg.model)
        over = np.clip(res.overlay, 0, 1)
        Image.fromarray((over * 255).astype(np.uint8)).save(out / f"{p.stem}_overlay.png")
        with open(out / f"{p.stem}_coords.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "coord", "limit"])
            for y in range(len(res.coords)):
                wr.writerow([y, repr(float(res.coords[y])), int(res.mask[y])])
        if res.found:
            found += 1
        else:
            log.warning("%s: %s", p, res.warning)
        rows.append({"image": str(p), "found": res.found, "rows": int(res.mask.sum()),
                     "pose": pose.as_array().tolist()})
    _write_json(out / "infer.json", rows)
    if found == 0:
        raise EmptyResult("no midline found in any input image")
    return {"images": len(paths), "found": found}


ABLATION = (("baseline", False, 0.0), ("baseline", False, None),
            ("carnet", True, 0.0), ("carnet", True, None))


def run_ablation(cfg, out, train_set=None, val_set=None):
    """The {baseline, CAR-Net} x {without, with} CRL quadruple on one seed.

    ``None`` in the table stands for the configured (nonzero) CRL weight.
    Returns a list of row dicts in table order.
    """
    train_set = train_set if train_set is not None else load_split(cfg, "train")
    val_set = val_set if val_set is not None else load_split(cfg, "test")
    if not train_set or not val_set:
        raise EmptyResult("ablation needs non-empty train and test sets")
    mu_on = cfg.loss.mu if cfg.loss.mu > 0 else LossWeights().mu
    rows = []
    for name, refine, mu in ABLATION:
        mu = mu_on if mu is None else mu
        tag = f"{name}_{'crl' if mu > 0 else 'nocrl'}"
        run_cfg = dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, refine=refine),
            loss=dataclasses.replace(cfg.loss, mu=mu))
        run_dir = out / tag
        run_dir.mkdir(parents=True, exist_ok=True)
        params, record, summary = run_midline(run_cfg, train_set, val_set, run_dir)
        rows.append({"model": name, "crl": mu > 0, "mu": mu,
                     "params": model.count_params(params), "wall_clock": record.wall_clock,
                     "mean": summary.mean, "std": summary.std, "undefined": summary.undefined,
                     "table": summary.row()})
        log.info("ablation %s: %s", tag, summary.row())
    with open(out / "table.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model", "crl", "params", "lde", "msde", "hd", "asd", "connectivity"])
        for r in rows:
            t = r["table"]
            wr.writerow([r["model"], "w" if r["crl"] else "w/o", r["params"],
                         t["lde"], t["msde"], t["hd"], t["asd"], t["connectivity"]])
    _write_json(out / "ablation.json", rows)
    _write_config(out, cfg)
    return rows


def cmd_ablate(args, cfg, out):
    rows = run_ablation(cfg, out, load_split(cfg, "train", args.data),
                        load_split(cfg, "test", args.data))
    return {f"{r['model']}_{'w' if r['crl'] else 'wo'}": r["table"] for r in rows}


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP threads (1 gives bit-reproducible runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path,
                      help="directory written by 'phantom gen' (default: generate in memory)")

    p = argparse.ArgumentParser(prog="midline", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic data")
    phs = ph.add_subparsers(dest="action", required=True)
    gen = phs.add_parser("gen", parents=[common], help="write phantom splits as manifests")
    gen.add_argument("--split", choices=["all", *SPLIT_OFFSETS], default="all")
    gen.set_defaults(func=cmd_phantom_gen)

    tr = sub.add_parser("train-rectifier", parents=[common, data], help="fit the pose rectifier")
    tr.set_defaults(func=cmd_train_rectifier)

    tm = sub.add_parser("train-midline", parents=[common, data],
                        help="fit the localization network on canonical-pose slices")
    tm.set_defaults(func=cmd_train_midline)

    ev = sub.add_parser("eval", parents=[common, data], help="score weights on a split")
    ev.add_argument("--weights", type=Path, required=True)
    ev.add_argument("--split", choices=list(SPLIT_OFFSETS), default="test")
    ev.add_argument("--rectifier", type=Path, help="rectifier blob: rectify sources first")
    ev.add_argument("--use-source", action="store_true",
                    help="score on unrectified source images")
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", parents=[common], help="delineate PNG images")
    inf.add_argument("--weights", type=Path, required=True)
    inf.add_argument("--rectifier", type=Path)
    inf.add_argument("images", nargs="+")
    inf.set_defaults(func=cmd_infer)

    ab = sub.add_parser("ablate", parents=[common, data],
                        help="baseline/CAR-Net x without/with CRL on one seed")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, args.overrides)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        with threadpool_limits(limits=args.threads):
            result = args.func(args, cfg, out)
    except (config_mod.ConfigError, phantom.ManifestError, blob.BlobFormatError,
            FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyResult as exc:
        print(f"empty result: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    print(json.dumps(result, default=train._json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
