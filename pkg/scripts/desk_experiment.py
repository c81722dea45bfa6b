"""Grayscale desk experiment: train, build surrogates, fit both heads and score all methods.

With ``--proxy`` the procedural corpus stands in for Fashion-MNIST / MNIST / KMNIST
(it is generated under ``<data>`` when missing). ``--ablation`` and ``--sweep`` add the
construction ablation and the lambda sweep on top of the main run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
from pathlib import Path

import numpy as np

from kirby import experiment as X
from kirby.config import LAMBDA_GRID, default_layout, from_dict
from kirby.synthetic import write_proxy_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--data", default="data", help="dataset root")
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--proxy", action="store_true", help="use the procedural stand-in corpus")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-size", type=int, default=10000)
    parser.add_argument("--epochs", type=int, help="classifier epochs (default from CnnConfig)")
    parser.add_argument("--ablation", type=int, metavar="SEEDS", default=0, help="run the ablation over N seeds")
    parser.add_argument("--sweep", action="store_true", help="run the lambda sweep")
    parser.add_argument("--export-images", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    root = Path(args.data)
    if args.proxy and not (root / "shapes").exists():
        write_proxy_corpus(root)
    d = default_layout(str(root.resolve()), proxy=args.proxy)
    d["seed"] = args.seed
    d["data"]["train_size"] = args.train_size
    if args.epochs:
        d["classifier"] = {"epochs": args.epochs}
    cfg = from_dict(d)
    cfg.validate_paths()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    res = X.run_desk(cfg, out_dir=out, export_images=args.export_images)
    print(f"classifier test accuracy {res.test_accuracy:.4f} (after rejector training {res.accuracy_after:.4f})")
    print(f"directed Hausdorff erased {res.distances['erased']:.4f} inpainted {res.distances['inpainted']:.4f}")
    print("timings", {k: round(v, 1) for k, v in res.timings.items()})

    model, data, feats = res.extras["model"], res.extras["data"], res.extras["features"]
    if args.ablation:
        seeds = [args.seed + i for i in range(args.ablation)]
        table = X.ablation(cfg, data, model, seeds, feats, res.extras["surrogates"])
        means = [float(np.mean(table[name])) for name in X.ABLATIONS]
        for name, m in zip(X.ABLATIONS, means):
            print(f"{name:<18} mean AUROC {100 * m:.2f}  per seed {[round(100 * v, 2) for v in table[name]]}")
        print("adjacent inversions", X.ordering_inversions(means))
        (out / "ablation.json").write_text(json.dumps({"seeds": seeds, **table}, indent=2) + "\n")
    if args.sweep:
        rows = X.sweep_lambda(cfg, data, model, LAMBDA_GRID, feats)
        with open(out / "lambda_sweep.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        for r in rows:
            print(f"lambda {r['lambda']:.1f} coverage {r['mask_coverage']:.4f} {r['ood_dataset']:<10} "
                  f"AUROC {100 * r['auroc']:.2f}")


if __name__ == "__main__":
    main()
