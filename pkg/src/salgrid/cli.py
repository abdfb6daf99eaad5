"""Command-line interface.

Settings are merged with precedence flags > ``SALGRID_<KEY>`` environment
variables > config file (``--config`` or ``$SALGRID_CONFIG``) > defaults.
``--show-config`` prints the merged settings as canonical JSON and exits; the
printed text is itself a valid ``--config`` file.

Exit codes: 0 success, 1 usage or data error, 2 degenerate metric on some
image, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import fixation_map_from_set, resize_pad, unpad_resize, FixationSet
from .exceptions import ConfigError, SalgridError
from .io import load_tsal, read_fixations_csv, read_ppm, save_tsal, write_pgm
from .losses import LossWeights
from .model import (VARIANTS, ModelConfig, canonical_json, init_params, load_checkpoint,
                    predict, save_checkpoint)
from .trainer import (SaliencyDataset, TrainConfig, ablation_grid, evaluate_model,
                      kfold_split, make_synthetic_dataset, train_loop)

log = logging.getLogger("salgrid")

EXIT_OK, EXIT_USAGE, EXIT_DEGENERATE, EXIT_VERIFY = 0, 1, 2, 3
CSV_COLUMNS = ("image",) + M.CSV_ORDER + ("flags",)

DEFAULTS = {
    "evaluate": {"pred_dir": None, "gt_map_dir": None, "gt_fix_dir": None, "sauc_pool": "batch",
                 "out": "report.csv", "seed": 0, "n_splits": 10, "jobs": 1},
    "train": {"data_dir": None, "synthetic": None, "variant": "TranSalNet_Res", "seed": 0,
              "width": 64, "height": 64, "epochs": 30, "batch_size": 4, "patience": 5,
              "lr": 1e-5, "lr_factor": 0.1, "lr_every": 3, "lambda_nss": -1.0,
              "lambda_kld": 10.0, "lambda_cc": -2.0, "lambda_sim": -1.0, "init_from": None,
              "model": {}, "out": None},
    "predict": {"ckpt_dir": None, "image": None, "out": None},
    "gradcheck": {"scope": "tensor", "seed": 0, "tol": None},
    "ablation": {"synthetic": 12, "seed": 0, "width": 64, "height": 64, "epochs": 5,
                 "batch_size": 4, "lr": 1e-3, "model": {}, "out": "ablation.csv"},
}


class UsageError(SalgridError):
    pass


# ---------------------------------------------------------------------------
# config merging


def _parse_env(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def effective_config(command, args, environ=None):
    environ = os.environ if environ is None else environ
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    path = args.config or environ.get("SALGRID_CONFIG")
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {path}: {err}") from None
        for key, val in loaded.items():
            if key in cfg:
                cfg[key] = val
    for key in cfg:
        env = environ.get(f"SALGRID_{key.upper()}")
        if env is not None:
            cfg[key] = _parse_env(env)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


# ---------------------------------------------------------------------------
# evaluate


def _load_fixations(path, shape):
    if path.suffix == ".csv":
        h, w = shape
        return fixation_map_from_set(read_fixations_csv(path, w, h), w, h)
    return np.asarray(load_tsal(path), dtype=np.float64)


def _find(directory, stem, suffixes):
    for suf in suffixes:
        p = Path(directory) / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def _fmt(v):
    return "" if v is None else f"{v:.8f}"


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, scores, bad in zip(report.names, report.scores, report.degenerate):
        flags = "degenerate:" + ",".join(m for m in M.CSV_ORDER if m in bad) if bad else ""
        w.writerow([name] + [_fmt(scores.get(m)) for m in M.CSV_ORDER] + [flags])
    agg = report.aggregate()
    w.writerow(["mean"] + [_fmt(agg.get(m)) for m in M.CSV_ORDER] + [""])
    return buf.getvalue()


def cmd_evaluate(cfg):
    for key in ("pred_dir", "gt_map_dir", "gt_fix_dir"):
        if not cfg[key]:
            raise UsageError(f"--{key.replace('_', '-')} is required")
    stems = sorted(p.stem for p in Path(cfg["pred_dir"]).glob("*.tsal"))
    if not stems:
        raise UsageError(f"no .tsal predictions in {cfg['pred_dir']}")
    preds, maps, fixes = [], [], []
    for stem in stems:
        pred = np.asarray(load_tsal(Path(cfg["pred_dir"]) / f"{stem}.tsal"), dtype=np.float64)
        gm = _find(cfg["gt_map_dir"], stem, (".tsal",))
        gf = _find(cfg["gt_fix_dir"], stem, (".tsal", ".csv"))
        if gm is None or gf is None:
            raise UsageError(f"missing ground truth for '{stem}'")
        gmap = np.asarray(load_tsal(gm), dtype=np.float64)
        fmap = _load_fixations(gf, pred.shape)
        if gmap.shape != pred.shape or fmap.shape != pred.shape:
            raise UsageError(f"'{stem}': prediction {pred.shape} vs ground truth {gmap.shape}/{fmap.shape}")
        preds.append(pred)
        maps.append(gmap)
        fixes.append(fmap)

    if cfg["sauc_pool"] == "batch":
        pools = [[f for j, f in enumerate(fixes) if j != i and f.shape == fixes[i].shape]
                 for i in range(len(stems))]
    else:
        extra = [_load_fixations(p, preds[0].shape) for p in sorted(Path(cfg["sauc_pool"]).iterdir())
                 if p.suffix in (".tsal", ".csv")]
        pools = [[f for f in extra if f.shape == fixes[i].shape] for i in range(len(stems))]

    def one(i):
        return M.evaluate_pair(preds[i], maps[i], fixes[i], pools[i], seed=cfg["seed"],
                               n_splits=cfg["n_splits"], name=stems[i])

    with ThreadPoolExecutor(max_workers=max(1, int(cfg["jobs"]))) as pool:
        parts = list(pool.map(one, range(len(stems))))
    report = M.MetricReport()
    for part in parts:
        report.extend(part)
    Path(cfg["out"]).write_text(report_csv(report), encoding="utf-8")
    rows = [(n, s) for n, s in zip(report.names, report.scores)] + [("mean", report.aggregate())]
    print(M.format_table(rows, title="image"))
    if report.has_degenerate:
        for n, bad in zip(report.names, report.degenerate):
            if bad:
                print(f"warning: {n}: degenerate {', '.join(sorted(bad))}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def load_dataset_dir(root, width, height):
    """Read ``images/*.ppm``, ``maps/*.tsal`` and ``fixations/*.csv`` paired by stem,
    resized and padded to ``width`` x ``height``."""
    root = Path(root)
    stems = sorted(p.stem for p in (root / "images").glob("*.ppm"))
    if not stems:
        raise UsageError(f"no images in {root / 'images'}")
    images, maps, fixes = [], [], []
    for stem in stems:
        img = read_ppm(root / "images" / f"{stem}.ppm")
        mp = _find(root / "maps", stem, (".tsal",))
        fx = _find(root / "fixations", stem, (".csv",))
        if mp is None or fx is None:
            raise UsageError(f"missing map or fixations for '{stem}'")
        h, w = img.shape[1:]
        padded, rec = resize_pad(img, width, height)
        gmap, _ = resize_pad(np.asarray(load_tsal(mp), dtype=np.float64), width, height)
        gmap = np.maximum(gmap, 0.0)
        gmap /= gmap.sum()
        fset = read_fixations_csv(fx, w, h)
        moved = FixationSet(fset.x * rec.scale + rec.left, fset.y * rec.scale + rec.top, fset.observer)
        images.append(padded)
        maps.append(gmap)
        fixes.append(fixation_map_from_set(moved.clamped(width, height), width, height))
    return SaliencyDataset(np.stack(images), np.stack(maps), np.stack(fixes), stems)


def _train_config(cfg):
    return TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                       patience=cfg["patience"], base_lr=float(cfg["lr"]),
                       lr_factor=float(cfg["lr_factor"]), lr_every=cfg["lr_every"],
                       weights=LossWeights(cfg["lambda_nss"], cfg["lambda_kld"],
                                           cfg["lambda_cc"], cfg["lambda_sim"]),
                       seed=int(cfg["seed"]))


def _model_config(variant, cfg):
    try:
        return ModelConfig.for_variant(variant, input_w=int(cfg["width"]),
                                       input_h=int(cfg["height"]), **cfg.get("model", {}))
    except TypeError as err:
        raise UsageError(f"bad model override: {err}") from None


def cmd_train(cfg):
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant '{cfg['variant']}'; valid: {', '.join(VARIANTS)}")
    if not cfg["out"]:
        raise UsageError("--out is required")
    config = _model_config(cfg["variant"], cfg)
    if cfg["synthetic"]:
        data = make_synthetic_dataset(int(cfg["synthetic"]), config.input_w, config.input_h,
                                      seed=int(cfg["seed"]))
    elif cfg["data_dir"]:
        data = load_dataset_dir(cfg["data_dir"], config.input_w, config.input_h)
    else:
        raise UsageError("give a data directory or --synthetic N")
    if len(data) < 3:
        raise UsageError("need at least 3 items for train/validation/test subsets")
    plan = kfold_split(len(data), min(10, len(data)), seed=int(cfg["seed"]))
    tr, va, te = plan.assignment(0)
    params = None
    if cfg["init_from"]:
        init_cfg, params = load_checkpoint(cfg["init_from"])
        if init_cfg != config:
            raise UsageError("--init-from checkpoint config differs from the requested model")
    result = train_loop(data.subset(tr), data.subset(va), config, _train_config(cfg), params)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", config, result.params)
    (out / "history.csv").write_text(result.history_csv(), encoding="utf-8")
    (out / "config.json").write_text(canonical_json(cfg), encoding="utf-8")
    report = evaluate_model(data.subset(te), config, result.params, seed=int(cfg["seed"]))
    print(M.format_table([(f"{cfg['variant']} (test fold)", report.aggregate())], title="model"))
    print(f"best epoch {result.state.best_epoch}, checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict

_F32_LO = float(np.nextafter(np.float32(0), np.float32(1)))
_F32_HI = float(np.nextafter(np.float32(1), np.float32(0)))


def cmd_predict(cfg):
    if not (cfg["ckpt_dir"] and cfg["image"] and cfg["out"]):
        raise UsageError("predict needs a checkpoint, an image and --out")
    config, params = load_checkpoint(cfg["ckpt_dir"])
    img = read_ppm(cfg["image"])
    padded, rec = resize_pad(img, config.input_w, config.input_h)
    pred = predict(padded[None], config, params)[0]
    smap = np.clip(unpad_resize(pred, rec), _F32_LO, _F32_HI)
    out = Path(cfg["out"])
    if out.suffix == ".pgm":
        write_pgm(out, smap)
    elif out.suffix == ".tsal":
        save_tsal(out, smap)
    else:
        raise UsageError("--out must end in .tsal or .pgm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(cfg):
    from . import verify

    scope = cfg["scope"]
    seeds = range(int(cfg["seed"]), int(cfg["seed"]) + 5)
    default_tol = {"tensor": 1e-6, "loss": 1e-6, "model": 1e-4}
    if scope not in default_tol:
        raise UsageError(f"unknown scope '{scope}'")
    tol = default_tol[scope] if cfg["tol"] is None else float(cfg["tol"])
    suite = {"tensor": verify.tensor_suite, "loss": verify.loss_suite,
             "model": verify.model_suite}[scope]
    worst = suite(seeds=seeds, tol=tol)
    failed = False
    for name, (err, coord) in worst.items():
        ok = err <= tol
        failed |= not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:<22s} {err:.3e}  at {coord}")
    if failed:
        bad = [n for n, (e, _) in worst.items() if e > tol]
        print(f"gradient check failed (tol {tol:g}): {', '.join(bad)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation


def cmd_ablation(cfg):
    base = ModelConfig(input_w=int(cfg["width"]), input_h=int(cfg["height"]), **cfg.get("model", {}))
    data = make_synthetic_dataset(int(cfg["synthetic"]), base.input_w, base.input_h,
                                  seed=int(cfg["seed"]))
    tc = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                     base_lr=float(cfg["lr"]), lr_every=None)
    report = ablation_grid(data, seed=int(cfg["seed"]), base_config=base, train_config=tc)
    Path(cfg["out"]).write_text(report.to_csv(), encoding="utf-8")
    print(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for degenerate metrics here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $SALGRID_CONFIG)")
    common.add_argument("--show-config", action="store_true",
                        help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="salgrid", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    ev.add_argument("pred_dir", nargs="?")
    ev.add_argument("gt_map_dir", nargs="?")
    ev.add_argument("gt_fix_dir", nargs="?")
    ev.add_argument("--sauc-pool", dest="sauc_pool",
                    help="'batch' (other evaluated images) or a directory of fixation maps")
    ev.add_argument("--out")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--n-splits", dest="n_splits", type=int)
    ev.add_argument("--jobs", type=int)

    tr = sub.add_parser("train", parents=[common], help="train one ablation variant")
    tr.add_argument("data_dir", nargs="?")
    tr.add_argument("--synthetic", type=int, metavar="N")
    tr.add_argument("--variant")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--width", type=int)
    tr.add_argument("--height", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--lr-factor", dest="lr_factor", type=float)
    tr.add_argument("--lr-every", dest="lr_every", type=int)
    for term in ("nss", "kld", "cc", "sim"):
        tr.add_argument(f"--lambda-{term}", dest=f"lambda_{term}", type=float)
    tr.add_argument("--init-from", dest="init_from", metavar="CKPT")
    tr.add_argument("--out")

    pr = sub.add_parser("predict", parents=[common], help="predict a saliency map for one image")
    pr.add_argument("ckpt_dir", nargs="?")
    pr.add_argument("image", nargs="?")
    pr.add_argument("--out")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--scope", choices=("tensor", "loss", "model"))
    gc.add_argument("--seed", type=int)
    gc.add_argument("--tol", type=float)

    ab = sub.add_parser("ablation", parents=[common], help="train and score all variants")
    ab.add_argument("--synthetic", type=int, metavar="N")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--width", type=int)
    ab.add_argument("--height", type=int)
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--lr", type=float)
    ab.add_argument("--out")
    return parser


COMMANDS = {"evaluate": cmd_evaluate, "train": cmd_train, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "ablation": cmd_ablation}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args.command, args)
        if args.show_config:
            sys.stdout.write(canonical_json(cfg))
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except (SalgridError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
