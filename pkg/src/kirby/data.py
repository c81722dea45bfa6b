"""Dataset loading (IDX, CIFAR-10 binary), resizing, splitting and image export."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # C x H x W in [0, 1]
    label: int


@dataclass
class ImageDataset:
    """Ordered image collection stored as one N x C x H x W float32 block."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(self.images[indices], self.labels[indices], self.num_classes,
                            name or self.name, self.split)


def _open(path):
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as f:
        return f.read()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _open(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise BadMagicError(f"{path}: magic 0x{magic:08x} is not an unsigned-byte IDX file")
    if expected_magic is not None and magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header declares {ndim} dims but file ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "",
             split: str = "train") -> ImageDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    pixels = images.astype(np.float32)[:, None] / np.float32(255)
    return ImageDataset(pixels, labels, num_classes, name or Path(images_path).stem, split)


def load_cifar10_bin(path, name: str = "cifar10", split: str = "train") -> ImageDataset:
    raw = _open(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return ImageDataset(pixels, rec[:, 0], 10, name, split)


def resize_bilinear(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (..., H, W) array."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if (h, w) == (new_h, new_w):
        return image.copy()

    def axis(n_in, n_out):
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, new_h)
    x0, x1, fx = axis(w, new_w)
    fy = fy[:, None].astype(image.dtype)
    fx = fx[None, :].astype(image.dtype)
    top = image[..., y0, :][..., x0] * (1 - fx) + image[..., y0, :][..., x1] * fx
    bot = image[..., y1, :][..., x0] * (1 - fx) + image[..., y1, :][..., x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0, 1) if np.issubdtype(out.dtype, np.floating) else out


def resize_dataset(ds: ImageDataset, new_h: int, new_w: int) -> ImageDataset:
    return ImageDataset(resize_bilinear(ds.images, new_h, new_w), ds.labels, ds.num_classes, ds.name, ds.split)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)


def export_image(image: np.ndarray, path, fmt: str | None = None) -> Path:
    """Write a single image (H x W or C x H x W) as 8-bit PGM or PNG."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "pgm").lower()
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0] if image.shape[0] == 1 else image.transpose(1, 2, 0)
    data = to_bytes(image)
    if fmt == "pgm":
        if data.ndim != 2:
            raise ValueError("PGM export needs a single-channel image")
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
            f.write(data.tobytes())
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(data).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")
    return path


def read_image(path) -> np.ndarray:
    """Read an 8-bit PGM (P5) or PNG into a C x H x W float array in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        fields, pos = [], 2
        while len(fields) < 3:
            while raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while not raw[end:end + 1].isspace():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        w, h, maxval = fields
        if maxval != 255:
            raise DataFormatError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(1, h, w)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path))
        data = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return data.astype(np.float32) / np.float32(255)


def split(ds: ImageDataset, fraction: float, seed: int) -> tuple[ImageDataset, ImageDataset]:
    """Seeded partition into (first, second); each side keeps at least one item."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    if len(ds) < 2:
        raise ValueError("cannot split fewer than two items")
    perm = np.random.default_rng(seed).permutation(len(ds))
    k = min(max(int(round(fraction * len(ds))), 1), len(ds) - 1)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def sample(ds: ImageDataset, n: int, seed: int) -> ImageDataset:
    """Seeded subset of n items kept in original order."""
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.subset(idx)
