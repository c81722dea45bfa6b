"""Command-line entry point.

Exit codes: 0 success, 1 internal or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as X
from . import rejection as R
from . import surrogate as S
from .classifier import load_checkpoint
from .config import LAMBDA_GRID, METHODS, ConfigError, load_config
from .data import export_image, read_image
from .inpaint import inpaint
from .metrics import emit_report, hausdorff_diagnostic

log = logging.getLogger("kirby")


class UsageError(Exception):
    pass


def _out_dir(cfg, override: str | None) -> Path:
    out = Path(override) if override else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def cmd_train_classifier(args) -> int:
    cfg = load_config(args.config)
    data = X.load_data(cfg)
    out = _out_dir(cfg, args.out)
    model, ckpt = X.train_stage(cfg, data, out)
    (out / "train_log.json").write_text(json.dumps(ckpt.meta, indent=2, sort_keys=True) + "\n")
    print(f"checkpoint {out / 'classifier.krby'}  digest {model.digest()[:16]}  "
          f"test accuracy {ckpt.meta['test_accuracy']:.4f}")
    return 0


def cmd_construct_ood(args) -> int:
    cfg = load_config(args.config)
    if args.lam is not None:
        cfg = replace(cfg, surrogate=replace(cfg.surrogate, lam=args.lam))
    model, _ = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = X.load_data(cfg)
    sur = S.construct_ood_set(data.train, model, cfg.surrogate)
    out = Path(args.out) if args.out else _out_dir(cfg, None) / "surrogates"
    S.save_surrogates(sur, out, export=not args.no_export)
    rep = sur.report()
    print(f"{rep['count']} surrogates in {out}: mean coverage {rep['mean_coverage']:.4f}, "
          f"degenerate {rep['degenerate']}, all-erased {rep['all_erased']}")
    return 0


def cmd_train_rejector(args) -> int:
    cfg = load_config(args.config)
    ckpt_path = _require(args.checkpoint, "--checkpoint")
    model, _ = load_checkpoint(ckpt_path)
    sur = S.load_surrogates(_require(args.surrogates, "--surrogates"))
    data = X.load_data(cfg)
    before = model.digest()
    head = R.train_rejector(model, data.train, sur, replace(cfg.rejector, mode=args.mode))
    out = Path(args.out) if args.out else _out_dir(cfg, None) / f"rejector-{args.mode}.krby"
    R.save_with_classifier(ckpt_path, head, out)
    print(f"rejector {out}  mode {args.mode}  outputs {head.out_width}  "
          f"final accuracy {head.history[-1]['accuracy']:.4f}  classifier unchanged {model.digest() == before}")
    return 0


def _parse_seeds(text: str | None, base: int) -> list[int]:
    if not text:
        return [base]
    if "," in text:
        return [int(v) for v in text.split(",")]
    return [base + i for i in range(int(text))]


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    methods = tuple(args.methods) if args.methods else cfg.methods
    kirby = [m for m in methods if m.startswith("kirby")]
    if kirby and not args.rejector:
        raise UsageError(f"{', '.join(kirby)} requested but no --rejector given")
    seeds = _parse_seeds(args.seeds, cfg.seed)
    if kirby and len(seeds) > 1 and not args.surrogates:
        raise UsageError("--seeds retrains rejector heads and needs --surrogates")
    model, _ = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    heads = {}
    for path in args.rejector or []:
        _, head = R.load_with_classifier(_require(path, "--rejector"))
        heads[head.config.mode] = head
    missing = [m for m in kirby if m[-1].upper() not in heads and len(seeds) == 1]
    if missing:
        raise UsageError(f"no rejector checkpoint of the mode needed by {missing}")
    data = X.load_data(cfg)
    feats = X.EvalFeatures.compute(model, data)
    sur = S.load_surrogates(args.surrogates) if args.surrogates else None
    if len(seeds) > 1:
        sf = X.surrogate_features(model, sur, cfg.rejector.crop_p > 0, "post_gap")
        rows = X.evaluate_seeds(cfg, data, feats, sf, seeds, methods)
    else:
        rows = X.evaluate(cfg, data, feats, heads, methods)
    out = _out_dir(cfg, args.out)
    print(emit_report(rows, out / "report.csv"))
    if sur is not None:
        erased = X.features(model, data.train.images * sur.masks[:, None])
        diag = X.distance_diagnostics(feats.train.post_gap, erased, X.features(model, sur.images))
        diag["reference"] = "id_train"
        (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        print(f"directed Hausdorff ID->erased {diag['erased']:.4f}  ID->inpainted {diag['inpainted']:.4f}")
    return 0


def cmd_inpaint_demo(args) -> int:
    image = read_image(_require(args.image, "--image"))
    mask_img = read_image(_require(args.mask, "--mask"))
    mask = (mask_img[0] >= 0.5).astype(np.uint8)  # white = keep, black = fill
    if mask.shape != image.shape[1:]:
        raise UsageError(f"mask {mask.shape} does not match image {image.shape[1:]}")
    out = inpaint(image, mask, args.method, args.radius)
    export_image(out, args.out)
    print(f"filled {int((mask == 0).sum())} pixels with {args.method} -> {args.out}")
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = load_config(args.config)
    values = [float(v) for v in args.values.split(",")] if args.values else list(LAMBDA_GRID)
    if any(not 0 < v <= 1 for v in values):
        raise UsageError("lambda values must lie in (0, 1]")
    model, _ = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = X.load_data(cfg)
    rows = X.sweep_lambda(cfg, data, model, values)
    out = _out_dir(cfg, args.out) / "lambda_sweep.csv"
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        flag = "  (default)" if r["default_lambda"] else ""
        print(f"lambda {r['lambda']:.1f}  coverage {r['mask_coverage']:.4f}  {r['ood_dataset']:<10} "
              f"AUROC {100 * r['auroc']:.2f}  FPR95 {100 * r['fpr95']:.2f}{flag}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kirby", description="Surrogate-OOD rejection pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", help="train the CNN and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("construct-ood", help="build and persist the surrogate OOD set")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out", help="surrogate directory (default: <output_dir>/surrogates)")
    p.add_argument("--no-export", action="store_true", help="skip per-sample image files")
    p.set_defaults(func=cmd_construct_ood)

    p = sub.add_parser("train-rejector", help="train the rejection head on frozen features")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--surrogates", required=True)
    p.add_argument("--mode", choices=("M", "B"), default="M")
    p.add_argument("--out", help="rejector checkpoint path")
    p.set_defaults(func=cmd_train_rejector)

    p = sub.add_parser("evaluate", help="score ID test vs every OOD set")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rejector", action="append", help="rejector checkpoint; repeat for both modes")
    p.add_argument("--surrogates", help="surrogate directory (distance diagnostics, --seeds)")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--seeds", help="count (seed, seed+1, ...) or comma list; rejector heads retrained per seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inpaint-demo", help="inpaint one image with a mask image (black = fill)")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--method", choices=("fm", "mean"), default="fm")
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inpaint_demo)

    p = sub.add_parser("sweep-lambda", help="KIRBY-M metrics and mask coverage over lambda")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--values", help="comma list (default 0.1..0.9)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep_lambda)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # surfaced as an internal failure
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
