"""Fast-marching (Telea) and mean-fill inpainting.

Masks follow the erase convention: 1 = known pixel, 0 = pixel to fill.
Known pixels that touch the hole start the march at distance 0; hole pixels
are accepted in order of increasing arrival time T and filled on acceptance
from already-known pixels within ``radius`` of them.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

KNOWN, BAND, INSIDE = 0, 1, 2
WEIGHT_FLOOR = 1e-6
DEFAULT_RADIUS = 3


class InpaintError(ValueError):
    pass


def _validate(image: np.ndarray, mask: np.ndarray):
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or mask.shape != image.shape[1:]:
        raise InpaintError(f"image {image.shape} and mask {mask.shape} spatial dims differ")
    return image, mask


def _eikonal(a: float, b: float) -> float:
    """Arrival time from two axis neighbours' times (inf when unknown)."""
    if a == math.inf and b == math.inf:
        return math.inf
    if a == math.inf or b == math.inf or abs(a - b) >= 1.0:
        return 1.0 + min(a, b)
    return 0.5 * (a + b + math.sqrt(2.0 - (a - b) * (a - b)))


class _March:
    """Fast-marching state over one mask."""

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask)
        if not (mask == 1).any():
            raise InpaintError("mask has no known pixels; nothing to march from")
        self.h, self.w = mask.shape
        hole = (mask == 0).tolist()
        self.flags = [[INSIDE if v else KNOWN for v in row] for row in hole]
        self.T = [[math.inf if v else 0.0 for v in row] for row in hole]
        self.heap: list[tuple[float, int, int]] = []
        h, w = self.h, self.w
        for y in range(h):
            for x in range(w):
                if hole[y][x]:
                    continue
                if ((y > 0 and hole[y - 1][x]) or (y < h - 1 and hole[y + 1][x])
                        or (x > 0 and hole[y][x - 1]) or (x < w - 1 and hole[y][x + 1])):
                    self.flags[y][x] = BAND
                    self.heap.append((0.0, y, x))
        heapq.heapify(self.heap)
        self.pops: list[float] = []

    def _known_t(self, y, x):
        if 0 <= y < self.h and 0 <= x < self.w and self.flags[y][x] == KNOWN:
            return self.T[y][x]
        return math.inf

    def _solve(self, y, x):
        kt = self._known_t
        up, down, left, right = kt(y - 1, x), kt(y + 1, x), kt(y, x - 1), kt(y, x + 1)
        return min(_eikonal(up, left), _eikonal(down, left), _eikonal(up, right), _eikonal(down, right))

    def run(self, on_accept=None):
        flags, T, heap = self.flags, self.T, self.heap
        h, w = self.h, self.w
        while heap:
            t, y, x = heapq.heappop(heap)
            if flags[y][x] == KNOWN or t > T[y][x]:
                continue  # stale entry
            flags[y][x] = KNOWN
            self.pops.append(t)
            if on_accept is not None and t > 0:  # hole pixels always arrive after 0
                on_accept(y, x)
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and flags[ny][nx] != KNOWN:
                    nt = self._solve(ny, nx)
                    if nt < T[ny][nx]:
                        T[ny][nx] = nt
                        flags[ny][nx] = BAND
                        heapq.heappush(heap, (nt, ny, nx))


def fmm_distance(mask: np.ndarray, return_pops: bool = False):
    """Arrival-time field T: 0 on known pixels, approximate distance to the hole edge inside it."""
    march = _March(mask)
    march.run()
    T = np.array(march.T, dtype=np.float64)
    return (T, march.pops) if return_pops else T


def _axis_gradient(vals, ok, y, x, h, w):
    """Central difference where both neighbours are usable, one-sided otherwise, else zero."""
    def diff(ya, xa, yb, xb):
        a_ok = 0 <= ya < h and 0 <= xa < w and ok[ya][xa]
        b_ok = 0 <= yb < h and 0 <= xb < w and ok[yb][xb]
        if a_ok and b_ok:
            return 0.5 * (vals[yb][xb] - vals[ya][xa])
        if b_ok:
            return vals[yb][xb] - vals[y][x]
        if a_ok:
            return vals[y][x] - vals[ya][xa]
        return 0.0

    return diff(y - 1, x, y + 1, x), diff(y, x - 1, y, x + 1)


def telea_inpaint(image: np.ndarray, mask: np.ndarray, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """Fill mask==0 pixels by FMM-ordered weighted first-order extrapolation."""
    if radius < 1:
        raise InpaintError(f"radius must be at least 1 pixel, got {radius}")
    image, mask = _validate(image, mask)
    out = np.array(image, dtype=np.float64, copy=True)
    if (mask == 1).all():
        return out.astype(image.dtype)
    march = _March(mask)
    h, w = march.h, march.w
    flags, T = march.flags, march.T
    chans = [out[c].tolist() for c in range(out.shape[0])]
    filled = (mask == 1).tolist()  # image-known pixels
    r = int(math.floor(radius))
    offsets = [(dy, dx, math.hypot(dy, dx)) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
               if (dy or dx) and dy * dy + dx * dx <= radius * radius]

    done = [[f == KNOWN for f in row] for row in flags]  # T is final here

    def accept(y, x):
        done[y][x] = True
        gy, gx = _axis_gradient(T, done, y, x, h, w)
        norm = math.hypot(gy, gx)
        if norm > 0:
            gy, gx = gy / norm, gx / norm
        tp = T[y][x]
        acc = [0.0] * len(chans)
        wsum = 0.0
        for dy, dx, dist in offsets:
            qy, qx = y - dy, x - dx
            if not (0 <= qy < h and 0 <= qx < w) or not filled[qy][qx]:
                continue
            # r = p - q = (dy, dx)
            direction = abs(dy * gy + dx * gx) / dist
            if direction < WEIGHT_FLOOR:
                direction = WEIGHT_FLOOR
            level = 1.0 / (1.0 + abs(tp - T[qy][qx]))
            wt = direction * level / (dist * dist)
            wsum += wt
            for c, ch in enumerate(chans):
                iy, ix = _axis_gradient(ch, filled, qy, qx, h, w)
                acc[c] += wt * (ch[qy][qx] + iy * dy + ix * dx)
        for c, ch in enumerate(chans):
            ch[y][x] = acc[c] / wsum if wsum > 0 else 0.0
        filled[y][x] = True

    march.run(on_accept=accept)
    result = np.array(chans, dtype=np.float64)
    result = np.clip(result, 0.0, 1.0)
    keep = mask == 1
    result[:, keep] = image[:, keep]
    return result.astype(image.dtype)


def mean_inpaint(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill mask==0 pixels with the per-channel mean of known pixels."""
    image, mask = _validate(image, mask)
    known = mask == 1
    if not known.any():
        raise InpaintError("mean fill needs at least one known pixel")
    out = np.array(image, copy=True)
    for c in range(out.shape[0]):
        out[c][~known] = image[c][known].mean()
    return out


def inpaint(image: np.ndarray, mask: np.ndarray, method: str = "fm", radius: float = DEFAULT_RADIUS) -> np.ndarray:
    if method == "fm":
        return telea_inpaint(image, mask, radius)
    if method == "mean":
        return mean_inpaint(image, mask)
    raise ValueError(f"unknown inpainting method {method!r}; choose 'fm' or 'mean'")
