"""Surrogate OOD construction: erase salient regions, inpaint them, crop distant patches.

A surrogate set holds one sample per training image, index-aligned with the
source set. Masks use the keep/erase convention of :mod:`kirby.saliency`
(1 = keep, 0 = erased and later inpainted).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import saliency
from .classifier import Cnn
from .data import ImageDataset, export_image, resize_bilinear
from .inpaint import inpaint

log = logging.getLogger(__name__)

STAGES = ("erased", "inpainted", "cropped")
FALLBACK_GRAY = 0.5


@dataclass
class SurrogateSample:
    image: np.ndarray  # C x H x W in [0, 1]
    mask: np.ndarray   # H x W, 1 = keep
    source_index: int
    stage: str
    degenerate: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class SurrogateConfig:
    """How surrogates are built. `mask_source="random"` and `inpaint_method="none"` serve the ablations."""

    saliency_method: str = "layer_cam"
    block: int = -1
    lam: float = saliency.DEFAULT_LAMBDA
    inpaint_method: str = "fm"  # fm | mean | none
    radius: float = 3.0
    mask_source: str = "cam"    # cam | random
    random_area: tuple[float, float] = (0.25, 0.5)
    window: str = "area"        # area: H/2 x W/2, side: H/4 x W/4
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.inpaint_method not in ("fm", "mean", "none"):
            raise ValueError(f"unknown inpaint method {self.inpaint_method!r}")
        if self.mask_source not in ("cam", "random"):
            raise ValueError(f"unknown mask source {self.mask_source!r}")
        if self.window not in ("area", "side"):
            raise ValueError(f"unknown window rule {self.window!r}")
        self.random_area = tuple(float(v) for v in self.random_area)

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        return cls(**d)


@dataclass
class SurrogateSet:
    """Index-aligned surrogate images plus the masks that produced them."""

    images: np.ndarray      # N x C x H x W float32
    masks: np.ndarray       # N x H x W uint8
    stage: str
    degenerate: np.ndarray  # nothing erased
    all_erased: np.ndarray  # everything erased, gray fallback used
    config: SurrogateConfig = field(default_factory=SurrogateConfig)
    patches: np.ndarray | None = None  # distant-patch view of each sample, filled lazily

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> SurrogateSample:
        return SurrogateSample(self.images[i], self.masks[i], i, self.stage, bool(self.degenerate[i]))

    @property
    def coverage(self) -> np.ndarray:
        """Erased fraction of each mask."""
        return 1.0 - self.masks.reshape(len(self.masks), -1).mean(axis=1)

    def report(self) -> dict:
        return {
            "count": len(self),
            "stage": self.stage,
            "mean_coverage": float(self.coverage.mean()),
            "degenerate": int(self.degenerate.sum()),
            "all_erased": int(self.all_erased.sum()),
        }

    def patch_images(self) -> np.ndarray:
        if self.patches is None:
            self.patches = np.stack([distant_patch(img, m, self.config.window)
                                     for img, m in zip(self.images, self.masks)])
        return self.patches


def erase(image: np.ndarray, mask: np.ndarray, source_index: int = -1) -> SurrogateSample:
    """Pointwise product of image and keep-mask, broadcast over channels."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} spatial dims differ")
    return SurrogateSample(image * mask[None].astype(image.dtype), mask, source_index, "erased")


def random_masks(n: int, h: int, w: int, area: tuple[float, float], seed: int) -> np.ndarray:
    """Keep-masks each erasing one randomly placed rectangle of the given area fraction range."""
    rng = np.random.default_rng(seed)
    masks = np.ones((n, h, w), np.uint8)
    for i in range(n):
        frac = rng.uniform(*area)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        rh = int(np.clip(round(np.sqrt(frac * h * w * aspect)), 1, h))
        rw = int(np.clip(round(frac * h * w / rh), 1, w))
        top = rng.integers(0, h - rh + 1)
        left = rng.integers(0, w - rw + 1)
        masks[i, top:top + rh, left:left + rw] = 0
    return masks


def cam_masks(model: Cnn, train_set: ImageDataset, config: SurrogateConfig) -> np.ndarray:
    """Erase masks from saliency maps of each image's own label."""
    _, h, w = train_set.image_shape
    out = []
    for s in range(0, len(train_set), config.batch_size):
        raw = saliency.raw_maps(model, train_set.images[s:s + config.batch_size],
                                train_set.labels[s:s + config.batch_size],
                                config.saliency_method, config.block, config.batch_size)
        out.append(saliency.masks_from_raw(raw, h, w, config.lam))
    return np.concatenate(out)


def fill(image: np.ndarray, mask: np.ndarray, method: str, radius: float) -> tuple[np.ndarray, bool]:
    """Inpaint one erased image; returns (image, used_gray_fallback)."""
    if method == "none":
        return image * mask[None], False
    if not mask.any():
        return np.full_like(image, FALLBACK_GRAY), True
    if mask.all():
        return image.copy(), False
    return inpaint(image, mask, method, radius).astype(image.dtype), False


def construct_ood_set(train_set: ImageDataset, model: Cnn | None, config: SurrogateConfig | None = None,
                      masks: np.ndarray | None = None) -> SurrogateSet:
    """One surrogate per training image, in source order."""
    config = config or SurrogateConfig()
    n = len(train_set)
    _, h, w = train_set.image_shape
    if masks is None:
        if config.mask_source == "random":
            masks = random_masks(n, h, w, config.random_area, config.seed)
        else:
            if model is None:
                raise ValueError("CAM masks need a trained classifier")
            masks = cam_masks(model, train_set, config)
    masks = np.asarray(masks, dtype=np.uint8)
    if masks.shape != (n, h, w):
        raise ValueError(f"masks {masks.shape} do not match training set {(n, h, w)}")
    images = np.empty_like(train_set.images)
    all_erased = np.zeros(n, bool)
    for i in range(n):
        images[i], all_erased[i] = fill(train_set.images[i], masks[i], config.inpaint_method, config.radius)
    degenerate = masks.reshape(n, -1).all(axis=1)
    stage = "erased" if config.inpaint_method == "none" else "inpainted"
    out = SurrogateSet(images, masks, stage, degenerate, all_erased, config)
    log.info("surrogates: %s", out.report())
    return out


def window_size(h: int, w: int, rule: str = "area") -> tuple[int, int]:
    div = 2 if rule == "area" else 4
    return max(h // div, 1), max(w // div, 1)


def distant_window(mask: np.ndarray, rule: str = "area") -> tuple[int, int] | None:
    """Top-left corner of the window whose center is farthest from every erased pixel.

    Distances are compared exactly in doubled integer coordinates; ties go to
    the first position in raster order. Returns None when nothing is erased.
    """
    mask = np.asarray(mask)
    holes = np.argwhere(mask == 0)
    if len(holes) == 0:
        return None
    h, w = mask.shape
    wh, ww = window_size(h, w, rule)
    cy = 2 * np.arange(h - wh + 1) + (wh - 1)  # doubled centre coordinates
    cx = 2 * np.arange(w - ww + 1) + (ww - 1)
    dy = (cy[:, None] - 2 * holes[None, :, 0]) ** 2          # rows x holes
    dx = (cx[:, None] - 2 * holes[None, :, 1]) ** 2          # cols x holes
    nearest = (dy[:, None, :] + dx[None, :, :]).min(axis=2)  # rows x cols
    r, c = np.unravel_index(int(np.argmax(nearest)), nearest.shape)
    return int(r), int(c)


def distant_patch(image: np.ndarray, mask: np.ndarray, rule: str = "area") -> np.ndarray:
    """Crop the window farthest from the inpainted region and upscale it to full size."""
    corner = distant_window(mask, rule)
    if corner is None:
        return np.array(image, copy=True)
    _, h, w = image.shape
    wh, ww = window_size(h, w, rule)
    r, c = corner
    return resize_bilinear(image[:, r:r + wh, c:c + ww], h, w).astype(image.dtype)


def augment_for_training(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                         p: float = 0.5, rule: str = "area") -> np.ndarray:
    if rng.random() < p:
        return distant_patch(image, mask, rule)
    return image


def as_dataset(surrogates: SurrogateSet, label: int, num_classes: int, name: str = "surrogate") -> ImageDataset:
    return ImageDataset(surrogates.images, np.full(len(surrogates), label), num_classes, name, "train")


# ---------------------------------------------------------------------------
# persistence

MANIFEST_FIELDS = ("source_index", "stage", "mask_coverage", "degenerate", "all_erased", "image_file", "mask_file")


def save_surrogates(surrogates: SurrogateSet, root, export: bool = True) -> Path:
    """Write arrays (exact) plus a manifest and optional per-sample image/mask files."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    np.savez(root / "surrogates.npz", images=surrogates.images, masks=surrogates.masks,
             degenerate=surrogates.degenerate, all_erased=surrogates.all_erased)
    meta = {"stage": surrogates.stage, "config": asdict(surrogates.config), "report": surrogates.report()}
    (root / "surrogates.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    ext = "pgm" if surrogates.images.shape[1] == 1 else "png"
    coverage = surrogates.coverage
    with open(root / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for i in range(len(surrogates)):
            img_file, mask_file = f"images/{i:06d}.{ext}", f"masks/{i:06d}.pgm"
            if export:
                export_image(surrogates.images[i], root / img_file)
                export_image(surrogates.masks[i].astype(np.float32), root / mask_file)
            writer.writerow([i, surrogates.stage, f"{coverage[i]:.6f}", int(surrogates.degenerate[i]),
                             int(surrogates.all_erased[i]), img_file, mask_file])
    return root


def load_surrogates(root) -> SurrogateSet:
    root = Path(root)
    if not (root / "surrogates.npz").exists():
        raise FileNotFoundError(f"{root} holds no surrogates.npz")
    meta = json.loads((root / "surrogates.json").read_text())
    with np.load(root / "surrogates.npz") as z:
        return SurrogateSet(z["images"], z["masks"], meta["stage"], z["degenerate"], z["all_erased"],
                            SurrogateConfig.from_dict(meta["config"]))
