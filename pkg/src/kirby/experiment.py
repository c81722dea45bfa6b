"""Pipeline stages shared by the CLI, the scripts and the acceptance suite.

Stages persist to the run directory (checkpoint, surrogate set, rejector
checkpoints, CSV report) so each can be re-run on its own.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines as BL
from . import rejection as R
from . import saliency
from . import surrogate as S
from .classifier import Cnn, FeatureBundle, accuracy, build_model, forward_with_features, save_checkpoint, \
    train_classifier
from .config import DatasetSpec, RunConfig
from .data import ImageDataset, load_cifar10_bin, load_idx, resize_dataset, sample
from .metrics import MetricsReport, ScoreSet, hausdorff_diagnostic, mean_rows

log = logging.getLogger(__name__)


@dataclass
class DataBundle:
    train: ImageDataset
    test: ImageDataset
    oods: dict[str, ImageDataset]


def load_dataset(spec: DatasetSpec, root: Path, num_classes: int, split: str, size: int) -> ImageDataset:
    paths = spec.paths(root)
    if spec.format == "cifar":
        ds = load_cifar10_bin(paths[0], spec.name, split)
    else:
        ds = load_idx(paths[0], paths[1], num_classes, spec.name, split)
    if ds.image_shape[1:] != (size, size):
        ds = resize_dataset(ds, size, size)
    return ds


def load_data(cfg: RunConfig) -> DataBundle:
    cfg.validate_paths()
    root, d = cfg.data_root, cfg.data
    # OOD label sets are irrelevant; read them with a permissive class count
    train = load_dataset(d.id_train, root, d.num_classes, "train", d.image_size)
    train = sample(train, d.train_size, cfg.seed)
    test = load_dataset(d.id_test, root, d.num_classes, "test", d.image_size)
    oods = {s.name: load_dataset(s, root, 256, "test", d.image_size) for s in d.ood_tests}
    return DataBundle(train, test, oods)


# ---------------------------------------------------------------------------
# stages

def train_stage(cfg: RunConfig, data: DataBundle, out_dir: Path | None = None):
    model = build_model(cfg.classifier)
    ckpt = train_classifier(model, data.train, cfg.classifier)
    ckpt.meta["test_accuracy"] = accuracy(model, data.test)
    log.info("classifier test accuracy %.4f", ckpt.meta["test_accuracy"])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "classifier.krby", ckpt)
    return model, ckpt


@dataclass
class SurrogateFeatures:
    """Classifier features of one surrogate set and of its distant-patch view."""

    plain: np.ndarray
    patches: np.ndarray | None


def features(model: Cnn, images: np.ndarray, tap: str = "post_gap") -> np.ndarray:
    return R.extract_features(model, images, tap)


def surrogate_features(model: Cnn, sur: S.SurrogateSet, with_patches: bool, tap: str) -> SurrogateFeatures:
    patches = features(model, sur.patch_images(), tap) if with_patches else None
    return SurrogateFeatures(features(model, sur.images, tap), patches)


def fit_rejector(train_feats: np.ndarray, train: ImageDataset, sf: SurrogateFeatures,
                 config: R.RejectorConfig) -> R.RejectionHead:
    alt = sf.patches if config.crop_p > 0 else None
    return R.fit_head(train_feats, train.labels, sf.plain, train.num_classes, config, alt)


@dataclass
class EvalFeatures:
    train: FeatureBundle
    test: FeatureBundle
    oods: dict[str, FeatureBundle]

    @classmethod
    def compute(cls, model: Cnn, data: DataBundle) -> "EvalFeatures":
        return cls(forward_with_features(model, data.train.images),
                   forward_with_features(model, data.test.images),
                   {k: forward_with_features(model, v.images) for k, v in data.oods.items()})


def method_scores(method: str, bundle: FeatureBundle, heads: dict[str, R.RejectionHead],
                  fit: BL.GaussianFit | None) -> np.ndarray:
    if method in ("kirby-m", "kirby-b"):
        head = heads[method[-1].upper()]
        return R.scores_from_logits(head.logits(bundle.post_gap), head.config.mode, head.num_classes)
    if method == "msp":
        return BL.msp_score(bundle.logits)
    if method == "energy":
        return BL.energy_score(bundle.logits)
    if method == "mahalanobis":
        return BL.mahalanobis_score(fit, bundle.post_gap)
    raise ValueError(f"unknown method {method!r}")


def evaluate(cfg: RunConfig, data: DataBundle, feats: EvalFeatures, heads: dict[str, R.RejectionHead],
             methods=None, seed=None) -> list[MetricsReport]:
    methods = methods or cfg.methods
    fit = None
    if "mahalanobis" in methods:
        fit = BL.mahalanobis_fit(feats.train.post_gap, data.train.labels, data.train.num_classes)
    digest = cfg.digest()
    rows = []
    for method in methods:
        id_scores = method_scores(method, feats.test, heads, fit)
        for name, bundle in feats.oods.items():
            ood_scores = method_scores(method, bundle, heads, fit)
            rows.append(MetricsReport.from_scores(method, data.test.name, name, ScoreSet(id_scores, ood_scores),
                                                  cfg.seed if seed is None else seed, digest))
    return rows


def heads_needed(methods) -> list[str]:
    return [m[-1].upper() for m in methods if m.startswith("kirby")]


def train_heads(cfg: RunConfig, train: ImageDataset, train_feats: np.ndarray, sf: SurrogateFeatures,
                seed: int, modes) -> dict[str, R.RejectionHead]:
    return {mode: fit_rejector(train_feats, train, sf, replace(cfg.rejector, mode=mode, seed=seed))
            for mode in modes}


def evaluate_seeds(cfg: RunConfig, data: DataBundle, feats: EvalFeatures, sf: SurrogateFeatures,
                   seeds, methods=None) -> list[MetricsReport]:
    """Per-seed rows (rejector heads retrained per seed) followed by mean rows."""
    methods = methods or cfg.methods
    rows = []
    for seed in seeds:
        heads = train_heads(cfg, data.train, feats.train.post_gap, sf, seed, heads_needed(methods))
        rows += evaluate(cfg, data, feats, heads, methods, seed)
    if len(seeds) > 1:
        rows += mean_rows(rows)
    return rows


# ---------------------------------------------------------------------------
# full desk run

@dataclass
class DeskResult:
    reports: list[MetricsReport]
    test_accuracy: float
    distances: dict
    surrogate_report: dict
    timings: dict
    frozen: bool
    mode_m_accuracy: float
    accuracy_after: float
    out_dir: Path | None = None
    extras: dict = field(default_factory=dict)

    def row(self, method: str, ood: str) -> MetricsReport:
        return next(r for r in self.reports if r.method == method and r.ood_dataset == ood)


def distance_diagnostics(train_feats: np.ndarray, erased_feats: np.ndarray, inpainted_feats: np.ndarray) -> dict:
    """Directed Hausdorff distances from ID features to each surrogate stage."""
    return {
        "erased": hausdorff_diagnostic(train_feats, train_feats, erased_feats),
        "inpainted": hausdorff_diagnostic(train_feats, train_feats, inpainted_feats),
    }


def run_desk(cfg: RunConfig, data: DataBundle | None = None, out_dir: Path | None = None,
             export_images: bool = False) -> DeskResult:
    """Train, construct surrogates, fit both heads, score every method and write the report."""
    from .metrics import emit_report

    timings = {}
    t0 = time.perf_counter()
    data = data or load_data(cfg)
    timings["load"] = time.perf_counter() - t0

    t = time.perf_counter()
    model, ckpt = train_stage(cfg, data, out_dir)
    timings["classifier"] = time.perf_counter() - t
    digest_before = model.digest()

    t = time.perf_counter()
    sur = S.construct_ood_set(data.train, model, cfg.surrogate)
    timings["surrogates"] = time.perf_counter() - t

    t = time.perf_counter()
    feats = EvalFeatures.compute(model, data)
    tap = cfg.rejector.features
    train_feats = feats.train.post_gap if tap == "post_gap" else features(model, data.train.images, tap)
    sf = surrogate_features(model, sur, cfg.rejector.crop_p > 0, tap)
    heads = train_heads(cfg, data.train, train_feats, sf, cfg.seed, ("M", "B"))
    timings["rejector"] = time.perf_counter() - t

    t = time.perf_counter()
    reports = evaluate(cfg, data, feats, heads)
    erased = data.train.images * sur.masks[:, None]
    erased_feats = features(model, erased)
    distances = distance_diagnostics(feats.train.post_gap, erased_feats, sf.plain if tap == "post_gap"
                                     else features(model, sur.images))
    mode_m_acc = float((R.id_class_predictions(heads["M"], feats.test.post_gap) == data.test.labels).mean())
    timings["evaluate"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0

    frozen = model.digest() == digest_before
    result = DeskResult(reports, ckpt.meta["test_accuracy"], distances, sur.report(), timings, frozen,
                        mode_m_acc, accuracy(model, data.test), out_dir)
    result.extras = {"model": model, "surrogates": sur, "heads": heads, "features": feats, "surrogate_features": sf,
                     "data": data, "erased_features": erased_feats}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        S.save_surrogates(sur, out_dir / "surrogates", export=export_images)
        for mode, head in heads.items():
            R.save_with_classifier(out_dir / "classifier.krby", head, out_dir / f"rejector-{mode}.krby")
        print(emit_report(reports, out_dir / "report.csv"))
        summary = {"config_digest": cfg.digest(), "seed": cfg.seed, "test_accuracy": result.test_accuracy,
                   "mode_m_accuracy": mode_m_acc, "distances": distances, "surrogates": sur.report(),
                   "timings": {k: round(v, 1) for k, v in timings.items()}}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# studies

def coverage_curve(model: Cnn, train: ImageDataset, lams, sur_cfg: S.SurrogateConfig) -> list[float]:
    """Mean erased fraction of the CAM masks at each lambda (maps computed once)."""
    _, h, w = train.image_shape
    raw = saliency.raw_maps(model, train.images, train.labels, sur_cfg.saliency_method, sur_cfg.block,
                            sur_cfg.batch_size)
    amaps = saliency.finalize_map(raw, h, w)
    return [float(1.0 - saliency.threshold_mask(amaps, lam).mean()) for lam in lams]


def sweep_lambda(cfg: RunConfig, data: DataBundle, model: Cnn, values, feats: EvalFeatures | None = None) -> list[dict]:
    """KIRBY-M metrics and mask coverage at each lambda."""
    feats = feats or EvalFeatures.compute(model, data)
    coverage = coverage_curve(model, data.train, values, cfg.surrogate)
    rows = []
    for lam, cov in zip(values, coverage):
        sub = replace(cfg, surrogate=replace(cfg.surrogate, lam=lam))
        sur = S.construct_ood_set(data.train, model, sub.surrogate)
        sf = surrogate_features(model, sur, cfg.rejector.crop_p > 0, "post_gap")
        heads = train_heads(sub, data.train, feats.train.post_gap, sf, cfg.seed, ("M",))
        for rep in evaluate(sub, data, feats, heads, ("kirby-m",)):
            rows.append({"lambda": lam, "mask_coverage": round(cov, 6), "ood_dataset": rep.ood_dataset,
                         "auroc": round(rep.auroc, 6), "fpr95": round(rep.fpr95, 6),
                         "default_lambda": int(abs(lam - saliency.DEFAULT_LAMBDA) < 1e-9)})
    return rows


ABLATIONS = ("random-erase", "cam-erase", "cam-inpaint", "cam-inpaint-crop")


def ablation(cfg: RunConfig, data: DataBundle, model: Cnn, seeds, feats: EvalFeatures | None = None,
             inpainted: S.SurrogateSet | None = None) -> dict[str, list[float]]:
    """Average KIRBY-M AUROC over the OOD sets for each construction variant and seed."""
    feats = feats or EvalFeatures.compute(model, data)
    base = cfg.surrogate
    cam_masks = inpainted.masks if inpainted is not None else S.cam_masks(model, data.train, base)
    if inpainted is None:
        inpainted = S.construct_ood_set(data.train, model, base, masks=cam_masks)
    erase_only = replace(base, inpaint_method="none")
    cam_erased = S.construct_ood_set(data.train, model, erase_only, masks=cam_masks)
    sf_inpaint = surrogate_features(model, inpainted, True, "post_gap")
    sf_cam_erased = surrogate_features(model, cam_erased, False, "post_gap")
    out = {name: [] for name in ABLATIONS}
    for seed in seeds:
        rnd = S.construct_ood_set(data.train, None, replace(erase_only, mask_source="random", seed=seed))
        variants = {
            "random-erase": (surrogate_features(model, rnd, False, "post_gap"), 0.0),
            "cam-erase": (sf_cam_erased, 0.0),
            "cam-inpaint": (sf_inpaint, 0.0),
            "cam-inpaint-crop": (sf_inpaint, cfg.rejector.crop_p),
        }
        for name, (sf, crop) in variants.items():
            sub = replace(cfg, rejector=replace(cfg.rejector, crop_p=crop))
            heads = train_heads(sub, data.train, feats.train.post_gap, sf, seed, ("M",))
            reps = evaluate(sub, data, feats, heads, ("kirby-m",), seed)
            out[name].append(float(np.mean([r.auroc for r in reps])))
        log.info("ablation seed %d: %s", seed, {k: v[-1] for k, v in out.items()})
    return out


def ordering_inversions(means: list[float]) -> int:
    """Adjacent pairs that break a non-decreasing order."""
    return sum(a > b for a, b in zip(means, means[1:]))


def result_summary(result: DeskResult) -> dict:
    return {"reports": [asdict(r) for r in result.reports], "test_accuracy": result.test_accuracy,
            "distances": result.distances, "timings": result.timings}
