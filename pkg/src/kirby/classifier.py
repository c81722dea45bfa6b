"""Small CNN classifier: blocks of conv-relu-conv-relu-maxpool, then GAP and a linear head."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ImageDataset
from .tensor import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"KRBY"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class CnnConfig:
    input_shape: tuple[int, int, int] = (1, 32, 32)
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 10
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        if not self.widths or min(self.widths) <= 0:
            raise ValueError(f"need at least one block with positive width, got {self.widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        return cls(**d)


@dataclass
class FeatureBundle:
    """Batched features: pre-GAP maps, post-GAP vectors and logits."""

    pre_gap: np.ndarray   # N x C' x H' x W'
    post_gap: np.ndarray  # N x C'
    logits: np.ndarray    # N x K


@dataclass
class Checkpoint:
    config: CnnConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    sections: dict[str, bytes] = field(default_factory=dict)


class Cnn:
    def __init__(self, config: CnnConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    @property
    def feature_width(self) -> int:
        return self.config.widths[-1]

    def forward(self, x: Tensor, keep_blocks: bool = False):
        """Return (logits, pre_gap) and optionally every block output."""
        p = self.params
        h = x
        blocks = []
        for b in range(len(self.config.widths)):
            h = T.relu(T.conv2d(h, p[f"block{b}.conv1.weight"], p[f"block{b}.conv1.bias"]))
            h = T.relu(T.conv2d(h, p[f"block{b}.conv2.weight"], p[f"block{b}.conv2.bias"]))
            h = T.maxpool2x2(h)
            blocks.append(h)
        logits = T.linear(T.global_avg_pool(h), p["head.weight"], p["head.bias"])
        if keep_blocks:
            return logits, h, blocks
        return logits, h

    def digest(self) -> str:
        return param_digest(self.params)


def param_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        arr = p.data if isinstance(p, Parameter) else np.asarray(p)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _param_shapes(config: CnnConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = config.input_shape[0]
    for b, width in enumerate(config.widths):
        shapes[f"block{b}.conv1.weight"] = (width, c_in, 3, 3)
        shapes[f"block{b}.conv1.bias"] = (width,)
        shapes[f"block{b}.conv2.weight"] = (width, width, 3, 3)
        shapes[f"block{b}.conv2.bias"] = (width,)
        c_in = width
    shapes["head.weight"] = (config.num_classes, c_in)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def build_model(config: CnnConfig) -> Cnn:
    """Fresh model with Kaiming-uniform (fan-in) weights and zero biases."""
    _, h, w = config.input_shape
    factor = 2 ** len(config.widths)
    if h % factor or w % factor:
        raise ValueError(f"input {h}x{w} is not divisible by 2^{len(config.widths)} = {factor}")
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("bias"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, shape)
        params[name] = Parameter(value.astype(np.float32), name=name, dtype=np.float32)
    return Cnn(config, params)


def parameter_count(model: Cnn) -> int:
    return sum(p.data.size for p in model.parameters())


def lr_at(epoch: int, epochs: int, base: float) -> float:
    """Step schedule: /10 at 50% and again at 75% of training."""
    if epoch < 0.5 * epochs:
        return base
    if epoch < 0.75 * epochs:
        return base / 10
    return base / 100


def _check_input(model: Cnn, images: np.ndarray) -> None:
    if images.ndim != 4 or tuple(images.shape[1:]) != model.config.input_shape:
        raise T.ShapeError(f"batch shape {images.shape[1:]} does not match model input {model.config.input_shape}")


def train_classifier(model: Cnn, train_set: ImageDataset, config: CnnConfig | None = None,
                     progress=None) -> Checkpoint:
    config = config or model.config
    _check_input(model, train_set.images)
    if train_set.labels.max() >= config.num_classes:
        raise ValueError(f"labels exceed class count {config.num_classes}")
    rng = np.random.default_rng(config.seed + 1)
    n = len(train_set)
    history = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config.epochs, config.lr)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = Tensor(train_set.images[idx])
            y = train_set.labels[idx]
            try:
                with Tape() as tape:
                    logits, _ = model.forward(x)
                    loss = T.softmax_cross_entropy(logits, y)
                T.backward(tape, loss)
                T.sgd_step(model.parameters(), lr, config.momentum, config.weight_decay)
            except (T.NonFiniteError, FloatingPointError) as err:
                raise TrainingDivergedError(f"epoch {epoch}, batch {bi}: {err}") from err
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        row = {"epoch": epoch, "lr": lr, "loss": total_loss / n, "accuracy": correct / n}
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, row["loss"], row["accuracy"])
        if progress is not None:
            progress(row)
    meta = {
        "epochs": config.epochs,
        "train_accuracy": history[-1]["accuracy"] if history else None,
        "seed": config.seed,
        "history": history,
    }
    return Checkpoint(model.config, {k: p.data.copy() for k, p in model.params.items()}, meta)


def forward_with_features(model: Cnn, images: np.ndarray, batch_size: int = 256) -> FeatureBundle:
    images = np.asarray(images, dtype=np.float32)
    _check_input(model, images)
    pre, logits = [], []
    for start in range(0, len(images), batch_size):
        lg, fm = model.forward(Tensor(images[start:start + batch_size]))
        pre.append(fm.data)
        logits.append(lg.data)
    pre = np.concatenate(pre)
    return FeatureBundle(pre, pre.mean(axis=(2, 3)), np.concatenate(logits))


def predict(model: Cnn, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return forward_with_features(model, images, batch_size).logits.argmax(axis=1)


def accuracy(model: Cnn, ds: ImageDataset) -> float:
    return float((predict(model, ds.images) == ds.labels).mean())


# ---------------------------------------------------------------------------
# checkpoint format

def _write_params(buf, params: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_params(buf) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode()
        tag, ndim = struct.unpack("<BB", buf.read(2))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        dtype = _TAG_DTYPES[tag].newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(buf.read(nbytes), dtype=dtype).reshape(shape).astype(_TAG_DTYPES[tag])
    return out


def encode_params(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    _write_params(buf, params)
    return buf.getvalue()


def decode_params(raw: bytes) -> dict[str, np.ndarray]:
    return _read_params(io.BytesIO(raw))


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    blob = json.dumps({"config": asdict(ckpt.config), "meta": ckpt.meta}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_params(buf, ckpt.params)
    for tag, body in ckpt.sections.items():
        t = tag.encode()
        if len(t) != 4:
            raise ValueError(f"section tag must be 4 bytes, got {tag!r}")
        buf.write(t)
        buf.write(struct.pack("<I", len(body)))
        buf.write(body)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 5 or raw[4] != VERSION:
        raise CheckpointVersionError(f"{path}: version {raw[4] if len(raw) > 4 else None}, expected {VERSION}")
    buf = io.BytesIO(raw[5:])
    (blen,) = struct.unpack("<I", buf.read(4))
    blob = json.loads(buf.read(blen))
    params = _read_params(buf)
    sections = {}
    while True:
        tag = buf.read(4)
        if not tag:
            break
        (slen,) = struct.unpack("<I", buf.read(4))
        sections[tag.decode()] = buf.read(slen)
    return Checkpoint(CnnConfig.from_dict(blob["config"]), params, blob["meta"], sections)


def model_from_checkpoint(ckpt: Checkpoint, config: CnnConfig | None = None) -> Cnn:
    config = config or ckpt.config
    expected = _param_shapes(config)
    for name, shape in expected.items():
        if name not in ckpt.params:
            raise CheckpointShapeError(f"parameter {name} missing from checkpoint")
        if ckpt.params[name].shape != shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {ckpt.params[name].shape}, config expects {shape}")
    extra = set(ckpt.params) - set(expected)
    if extra:
        raise CheckpointShapeError(f"checkpoint has parameters unknown to the config: {sorted(extra)}")
    params = {k: Parameter(ckpt.params[k], name=k, dtype=ckpt.params[k].dtype) for k in expected}
    return Cnn(config, params)


def load_checkpoint(path, config: CnnConfig | None = None) -> tuple[Cnn, Checkpoint]:
    ckpt = read_checkpoint(path)
    return model_from_checkpoint(ckpt, config), ckpt
