"""Shallow rejection head trained on frozen classifier features.

Mode "M" learns K+1 classes (the ID classes plus a reject class); mode "B"
learns ID vs surrogate. Scores are oriented so that higher means more ID.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .classifier import Cnn, decode_params, encode_params, forward_with_features, read_checkpoint, \
    model_from_checkpoint, save_checkpoint
from .data import ImageDataset
from .surrogate import SurrogateSet
from .tensor import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

SECTION = "RJCT"
MODES = ("M", "B")


class FrozenClassifierError(RuntimeError):
    pass


@dataclass
class RejectorConfig:
    mode: str = "M"
    hidden: int = 256
    epochs: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    crop_p: float = 0.5
    features: str = "post_gap"  # or pre_gap (flattened maps)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.hidden, self.epochs, self.batch_size) <= 0 or self.lr <= 0:
            raise ValueError("hidden width, epochs, batch size and lr must be positive")
        if not 0 <= self.crop_p <= 1:
            raise ValueError(f"crop probability must lie in [0, 1], got {self.crop_p}")
        if self.features not in ("post_gap", "pre_gap"):
            raise ValueError(f"unknown feature tap {self.features!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RejectorConfig":
        return cls(**d)


@dataclass
class RejectionHead:
    config: RejectorConfig
    num_classes: int  # K of the ID task
    params: dict[str, Parameter]
    history: list = field(default_factory=list)

    @property
    def in_width(self) -> int:
        return self.params["fc1.weight"].data.shape[1]

    @property
    def out_width(self) -> int:
        return self.num_classes + 1 if self.config.mode == "M" else 2

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        return T.linear(T.relu(T.linear(x, p["fc1.weight"], p["fc1.bias"])), p["fc2.weight"], p["fc2.bias"])

    def logits(self, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != self.in_width:
            raise ValueError(f"features {features.shape} do not match head input width {self.in_width}")
        return np.concatenate([self.forward(Tensor(features[s:s + batch_size])).data
                               for s in range(0, len(features), batch_size)])


def build_head(in_width: int, num_classes: int, config: RejectorConfig) -> RejectionHead:
    out = num_classes + 1 if config.mode == "M" else 2
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in (("fc1.weight", (config.hidden, in_width)), ("fc1.bias", (config.hidden,)),
                        ("fc2.weight", (out, config.hidden)), ("fc2.bias", (out,))):
        if name.endswith("bias"):
            value = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / shape[1])
            value = rng.uniform(-bound, bound, shape)
        params[name] = Parameter(value.astype(np.float32), name=name, dtype=np.float32)
    return RejectionHead(config, num_classes, params)


def extract_features(classifier: Cnn, images: np.ndarray, tap: str = "post_gap") -> np.ndarray:
    bundle = forward_with_features(classifier, images)
    if tap == "post_gap":
        return bundle.post_gap
    return bundle.pre_gap.reshape(len(images), -1)


def fit_head(id_features: np.ndarray, id_labels: np.ndarray, ood_features: np.ndarray,
             num_classes: int, config: RejectorConfig, ood_alt_features: np.ndarray | None = None,
             progress=None) -> RejectionHead:
    """SGD on ID features plus surrogate features.

    Each epoch every surrogate independently uses its alternative (cropped)
    feature vector with probability ``config.crop_p`` when one is given.
    """
    id_features = np.asarray(id_features, dtype=np.float32)
    ood_features = np.asarray(ood_features, dtype=np.float32)
    if id_features.shape[1] != ood_features.shape[1]:
        raise ValueError("ID and surrogate features differ in width")
    head = build_head(id_features.shape[1], num_classes, config)
    if config.mode == "M":
        y_id = np.asarray(id_labels, dtype=np.int64)
        y_ood = np.full(len(ood_features), num_classes, dtype=np.int64)
    else:
        y_id = np.zeros(len(id_features), dtype=np.int64)
        y_ood = np.ones(len(ood_features), dtype=np.int64)
    labels = np.concatenate([y_id, y_ood])
    rng = np.random.default_rng(config.seed + 1)
    params = list(head.params.values())
    n = len(labels)
    for epoch in range(config.epochs):
        ood = ood_features
        if ood_alt_features is not None and config.crop_p > 0:
            swap = rng.random(len(ood_features)) < config.crop_p
            ood = np.where(swap[:, None], ood_alt_features, ood_features)
        feats = np.concatenate([id_features, ood])
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with Tape() as tape:
                logits = head.forward(Tensor(feats[idx]))
                loss = T.softmax_cross_entropy(logits, labels[idx])
            T.backward(tape, loss)
            T.sgd_step(params, config.lr, config.momentum, config.weight_decay)
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        row = {"epoch": epoch, "loss": total / n, "accuracy": correct / n}
        head.history.append(row)
        log.info("rejector epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        if progress is not None:
            progress(row)
    return head


def train_rejector(classifier: Cnn, train_set: ImageDataset, surrogates: SurrogateSet,
                   config: RejectorConfig | None = None, progress=None) -> RejectionHead:
    config = config or RejectorConfig()
    if len(surrogates) != len(train_set):
        raise ValueError(f"{len(surrogates)} surrogates for {len(train_set)} training images")
    before = classifier.digest()
    f_id = extract_features(classifier, train_set.images, config.features)
    f_sur = extract_features(classifier, surrogates.images, config.features)
    f_alt = None
    if config.crop_p > 0:
        f_alt = extract_features(classifier, surrogates.patch_images(), config.features)
    head = fit_head(f_id, train_set.labels, f_sur, train_set.num_classes, config, f_alt, progress)
    if classifier.digest() != before:
        raise FrozenClassifierError("classifier parameters changed during rejector training")
    return head


def scores_from_logits(logits: np.ndarray, mode: str, num_classes: int) -> np.ndarray:
    probs = T.softmax(np.asarray(logits, dtype=np.float64))
    if mode == "M":
        return 1.0 - probs[:, num_classes]
    return probs[:, 0]


def kirby_score(classifier: Cnn, head: RejectionHead, images: np.ndarray) -> np.ndarray:
    """ID-ness in [0, 1]: 1 - p(reject) for mode M, p(ID) for mode B."""
    feats = extract_features(classifier, images, head.config.features)
    return scores_from_logits(head.logits(feats), head.config.mode, head.num_classes)


def id_class_predictions(head: RejectionHead, features: np.ndarray) -> np.ndarray:
    """Mode M only: argmax over the K ID classes."""
    if head.config.mode != "M":
        raise ValueError("only mode M heads predict ID classes")
    return head.logits(features)[:, :head.num_classes].argmax(axis=1)


def detect(score, threshold: float):
    """'ID' where score >= threshold, else 'OOD'."""
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    out = np.where(np.asarray(score) >= threshold, "ID", "OOD")
    return str(out) if out.ndim == 0 else out


def threshold_for_tpr(id_scores: np.ndarray, tpr: float = 0.95) -> float:
    """Largest threshold keeping at least `tpr` of the given ID scores at or above it."""
    s = np.sort(np.asarray(id_scores, dtype=np.float64))[::-1]
    k = max(int(math.ceil(tpr * len(s) - 1e-9)), 1)
    return float(s[k - 1])


# ---------------------------------------------------------------------------
# checkpoint section

def encode_head(head: RejectionHead) -> bytes:
    blob = json.dumps({"config": asdict(head.config), "num_classes": head.num_classes,
                       "history": head.history}, sort_keys=True).encode()
    return struct.pack("<I", len(blob)) + blob + encode_params({k: p.data for k, p in head.params.items()})


def decode_head(raw: bytes) -> RejectionHead:
    buf = io.BytesIO(raw)
    (n,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(n))
    params = {k: Parameter(v, name=k, dtype=v.dtype) for k, v in decode_params(buf.read()).items()}
    return RejectionHead(RejectorConfig.from_dict(meta["config"]), meta["num_classes"], params, meta["history"])


def save_with_classifier(classifier_path, head: RejectionHead, out_path) -> Path:
    """Copy a classifier checkpoint and append the head as its own section."""
    ckpt = read_checkpoint(classifier_path)
    ckpt.sections[SECTION] = encode_head(head)
    return save_checkpoint(out_path, ckpt)


def load_with_classifier(path) -> tuple[Cnn, RejectionHead]:
    ckpt = read_checkpoint(path)
    if SECTION not in ckpt.sections:
        raise ValueError(f"{path} carries no rejector section")
    return model_from_checkpoint(ckpt), decode_head(ckpt.sections[SECTION])
