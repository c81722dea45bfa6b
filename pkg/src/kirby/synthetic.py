"""Procedural grayscale datasets used as offline stand-ins for the IDX corpora.

``shapes`` plays the ID role (ten object classes on textured backgrounds);
``segments`` (seven-segment digits) and ``glyphs`` (random pen strokes) play
the OOD roles. All generators are pure functions of (n, seed).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import ImageDataset, write_idx

SHAPE_CLASSES = ("disc", "ring", "square", "frame", "triangle", "plus", "cross", "hbars", "vbars", "diamond")

# segment endpoints on a unit box, (y, x); order a..g
_SEGMENTS = {
    "a": ((0, 0), (0, 1)), "b": ((0, 1), (0.5, 1)), "c": ((0.5, 1), (1, 1)), "d": ((1, 0), (1, 1)),
    "e": ((0.5, 0), (1, 0)), "f": ((0, 0), (0.5, 0)), "g": ((0.5, 0), (0.5, 1)),
}
_DIGITS = ("abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd")


def _segment_dist(yy, xx, p0, p1):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    denom = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0, 1)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _background(rng, size):
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    noise = (noise - noise.min()) / (np.ptp(noise) + 1e-9)
    ramp = np.linspace(0, 1, size)
    angle = rng.uniform(0, 2 * np.pi)
    grad = np.cos(angle) * ramp[None, :] + np.sin(angle) * ramp[:, None]
    grad = (grad - grad.min()) / (np.ptp(grad) + 1e-9)
    level = rng.uniform(0.05, 0.3)
    return level * (0.6 * noise + 0.4 * grad)


def _shape_mask(cls, yy, xx, rng):
    r = rng.uniform(5.5, 8.0)
    ady, adx = np.abs(yy), np.abs(xx)
    rad = np.hypot(yy, xx)
    t = rng.uniform(1.6, 2.4)
    name = SHAPE_CLASSES[cls]
    if name == "disc":
        return rad <= r
    if name == "ring":
        return np.abs(rad - r) <= t
    if name == "square":
        return np.maximum(ady, adx) <= r * 0.85
    if name == "frame":
        return np.abs(np.maximum(ady, adx) - r * 0.85) <= t * 0.8
    if name == "triangle":
        return (yy <= r * 0.8) & (yy >= -r) & (adx <= (yy + r) * 0.6)
    if name == "plus":
        return ((ady <= t) & (adx <= r)) | ((adx <= t) & (ady <= r))
    if name == "cross":
        return (np.abs(yy - xx) <= t * 1.2) & (rad <= r * 1.2) | (np.abs(yy + xx) <= t * 1.2) & (rad <= r * 1.2)
    if name == "hbars":
        return (adx <= r) & (ady <= r) & (np.mod(yy + r, 2 * r / 3 + 0.01) <= t)
    if name == "vbars":
        return (adx <= r) & (ady <= r) & (np.mod(xx + r, 2 * r / 3 + 0.01) <= t)
    return ady + adx <= r * 1.1  # diamond


def _finish(ink, bg, rng):
    ink = gaussian_filter(ink.astype(float), sigma=0.6)
    fg = rng.uniform(0.6, 1.0)
    img = bg * (1 - ink) + fg * ink
    return np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)


def make_shapes(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Ten-class object dataset; returns (uint8 N x H x W, labels)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(SHAPE_CLASSES), n)
    out = np.empty((n, size, size), dtype=np.uint8)
    grid = np.arange(size, dtype=float)
    for i, cls in enumerate(labels):
        cy, cx = size / 2 - 0.5 + rng.uniform(-3, 3, 2)
        yy, xx = np.meshgrid(grid - cy, grid - cx, indexing="ij")
        ink = _shape_mask(int(cls), yy, xx, rng)
        out[i] = np.floor(_finish(ink, _background(rng, size), rng) * 255 + 0.5)
    return out, labels.astype(np.uint8)


def make_segments(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Seven-segment digits on dark backgrounds (digit-like OOD)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    out = np.empty((n, size, size), dtype=np.uint8)
    grid = np.arange(size, dtype=float)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    for i, d in enumerate(labels):
        h, w = rng.uniform(14, 20), rng.uniform(7, 12)
        oy, ox = (size - h) / 2 + rng.uniform(-2, 2), (size - w) / 2 + rng.uniform(-2, 2)
        slant = rng.uniform(-0.25, 0.25)
        width = rng.uniform(1.0, 1.8)
        dist = np.full((size, size), np.inf)
        for seg in _DIGITS[d]:
            (y0, x0), (y1, x1) = _SEGMENTS[seg]
            p0 = (oy + y0 * h, ox + x0 * w + slant * (0.5 - y0) * h)
            p1 = (oy + y1 * h, ox + x1 * w + slant * (0.5 - y1) * h)
            dist = np.minimum(dist, _segment_dist(yy, xx, p0, p1))
        ink = dist <= width
        out[i] = np.floor(_finish(ink, np.zeros((size, size)), rng) * 255 + 0.5)
    return out, labels.astype(np.uint8)


def make_glyphs(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Random multi-stroke glyphs (cursive-script-like OOD)."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size), dtype=np.uint8)
    grid = np.arange(size, dtype=float)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    for i in range(n):
        dist = np.full((size, size), np.inf)
        for _ in range(rng.integers(2, 5)):
            pts = rng.uniform(5, size - 5, (rng.integers(2, 4), 2))
            for p0, p1 in zip(pts[:-1], pts[1:]):
                dist = np.minimum(dist, _segment_dist(yy, xx, p0, p1))
        ink = dist <= rng.uniform(1.0, 1.8)
        out[i] = np.floor(_finish(ink, np.zeros((size, size)), rng) * 255 + 0.5)
    return out, np.zeros(n, dtype=np.uint8)


def as_dataset(images: np.ndarray, labels: np.ndarray, num_classes: int, name: str, split: str) -> ImageDataset:
    return ImageDataset(images.astype(np.float32)[:, None] / np.float32(255), labels, num_classes, name, split)


def write_proxy_corpus(root, n_train: int = 10000, n_test: int = 2000, seed: int = 0) -> dict[str, Path]:
    """Write IDX files laid out like the real corpora; returns dataset name -> directory."""
    root = Path(root)
    made = {}
    jobs = [
        ("shapes", "train", make_shapes, n_train, seed),
        ("shapes", "t10k", make_shapes, n_test, seed + 1),
        ("segments", "t10k", make_segments, n_test, seed + 2),
        ("glyphs", "t10k", make_glyphs, n_test, seed + 3),
    ]
    for name, prefix, fn, n, s in jobs:
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        imgs, labels = fn(n, s)
        write_idx(d / f"{prefix}-images-idx3-ubyte", imgs)
        write_idx(d / f"{prefix}-labels-idx1-ubyte", labels)
        made[name] = d
    return made
