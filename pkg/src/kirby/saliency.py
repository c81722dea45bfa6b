"""Class activation maps (Grad-CAM, Layer-CAM, CAM) and the erase-mask threshold.

All map functions take a batch of images plus one target class per image and
return raw non-negative maps at the chosen block's spatial resolution. Images
are independent through the network, so one backward pass of the summed
target logits yields every image's own gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .classifier import Cnn
from .data import resize_bilinear
from .tensor import Tape, Tensor

METHODS = ("layer_cam", "grad_cam", "vanilla_cam")
DEFAULT_LAMBDA = 0.3


@dataclass
class ActivationMap:
    values: np.ndarray  # H x W in [0, 1]
    method: str
    target: int


@dataclass
class BinaryMask:
    values: np.ndarray  # H x W, 1 = keep, 0 = erase

    @property
    def erased_fraction(self) -> float:
        return float(1.0 - self.values.mean())


def _check_targets(model: Cnn, images, targets):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) != len(images):
        raise ValueError(f"{len(images)} images but {len(targets)} targets")
    if targets.min() < 0 or targets.max() >= model.config.num_classes:
        raise ValueError(f"target classes must lie in [0, {model.config.num_classes})")
    return targets


def activations_and_gradients(model: Cnn, images: np.ndarray, targets, block: int = -1):
    """Feature maps of `block` and d(target logit)/d(feature maps), per image."""
    targets = _check_targets(model, images, targets)
    with Tape() as tape:
        logits, _, blocks = model.forward(Tensor(images), keep_blocks=True)
        feats = blocks[block]
        score = T.sum_all(T.gather_rows(logits, targets))
    (grad,) = T.backward(tape, score, [feats], accumulate=False)
    return feats.data, grad


def grad_cam(model: Cnn, images: np.ndarray, targets, block: int = -1) -> np.ndarray:
    feats, grad = activations_and_gradients(model, images, targets, block)
    alpha = grad.mean(axis=(2, 3))
    return np.maximum(np.einsum("nk,nkhw->nhw", alpha, feats), 0)


def layer_cam(model: Cnn, images: np.ndarray, targets, block: int = -1) -> np.ndarray:
    feats, grad = activations_and_gradients(model, images, targets, block)
    return np.maximum((np.maximum(grad, 0) * feats).sum(axis=1), 0)


def vanilla_cam(model: Cnn, images: np.ndarray, targets, block: int = -1) -> np.ndarray:
    """CAM from the linear head weights; only defined on the block feeding GAP."""
    if "head.weight" not in model.params:
        raise ValueError("vanilla_cam needs a GAP -> linear head")
    n_blocks = len(model.config.widths)
    if block not in (-1, n_blocks - 1):
        raise ValueError("vanilla_cam is only defined on the block preceding GAP")
    targets = _check_targets(model, images, targets)
    _, feats = model.forward(Tensor(images))
    w = model.params["head.weight"].data[targets]
    if w.shape[1] != feats.shape[1]:
        raise ValueError("head width does not match feature channels")
    return np.maximum(np.einsum("nk,nkhw->nhw", w, feats.data), 0)


def raw_maps(model: Cnn, images: np.ndarray, targets, method: str = "layer_cam",
             block: int = -1, batch_size: int = 256) -> np.ndarray:
    fn = {"layer_cam": layer_cam, "grad_cam": grad_cam, "vanilla_cam": vanilla_cam}.get(method)
    if fn is None:
        raise ValueError(f"unknown saliency method {method!r}; choose from {METHODS}")
    targets = np.asarray(targets)
    out = [fn(model, images[s:s + batch_size], targets[s:s + batch_size], block)
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out)


def normalize(raw: np.ndarray) -> np.ndarray:
    """Per-map min-max to [0, 1]; zero maps stay zero, constant nonzero maps become ones."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw activation maps must be non-negative")
    lo = raw.min(axis=(-2, -1), keepdims=True)
    hi = raw.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (raw - lo) / safe, np.where(hi > 0, 1.0, 0.0))
    return out


def finalize_map(raw: np.ndarray, input_h: int, input_w: int) -> np.ndarray:
    """Normalize, bilinearly upsample to input size, clamp to [0, 1]."""
    return np.clip(resize_bilinear(normalize(raw), input_h, input_w), 0, 1)


def threshold_mask(amap: np.ndarray, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Erase mask: 0 where the map reaches lam, 1 elsewhere."""
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    return (np.asarray(amap) < lam).astype(np.uint8)


def masks_from_raw(raw: np.ndarray, input_h: int, input_w: int, lam: float,
                   upsample_first: bool = True) -> np.ndarray:
    """Batch raw maps to erase masks at input resolution."""
    if upsample_first:
        return threshold_mask(finalize_map(raw, input_h, input_w), lam)
    low = threshold_mask(normalize(raw), lam)
    h, w = low.shape[-2:]
    rows = np.minimum((np.arange(input_h) * h) // input_h, h - 1)
    cols = np.minimum((np.arange(input_w) * w) // input_w, w - 1)
    return low[..., rows[:, None], cols[None, :]]


def activation_map(model: Cnn, image: np.ndarray, target: int, method: str = "layer_cam",
                   block: int = -1) -> ActivationMap:
    raw = raw_maps(model, image[None], [target], method, block)[0]
    _, h, w = image.shape
    return ActivationMap(finalize_map(raw, h, w), method, int(target))


def binary_mask(amap: ActivationMap, lam: float = DEFAULT_LAMBDA) -> BinaryMask:
    return BinaryMask(threshold_mask(amap.values, lam))
