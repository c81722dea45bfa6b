"""Run configuration: one JSON file describing data, models and the seed.

Relative paths resolve against ``data.root``, which itself resolves against
the config file's directory. ``KIRBY_DATA_DIR`` overrides ``data.root`` and
``KIRBY_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .classifier import CnnConfig
from .rejection import RejectorConfig
from .surrogate import SurrogateConfig

DATA_ENV = "KIRBY_DATA_DIR"
OUTPUT_ENV = "KIRBY_OUTPUT_DIR"
METHODS = ("kirby-m", "kirby-b", "msp", "energy", "mahalanobis")
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    """An IDX image/label pair, or a CIFAR-10 binary batch when `format` is "cifar"."""

    name: str
    images: str
    labels: str = ""
    format: str = "idx"

    def __post_init__(self):
        if self.format not in ("idx", "cifar"):
            raise ConfigError(f"dataset {self.name}: unknown format {self.format!r}")
        if self.format == "idx" and not self.labels:
            raise ConfigError(f"dataset {self.name}: IDX data needs a labels file")

    def paths(self, root: Path) -> list[Path]:
        files = [self.images] + ([self.labels] if self.format == "idx" else [])
        return [resolve_file(root / f) for f in files]


def resolve_file(path: Path) -> Path:
    """Accept either the plain or the gzipped name of a file."""
    if path.exists():
        return path
    alt = path.with_suffix("") if path.suffix == ".gz" else path.with_name(path.name + ".gz")
    return alt if alt.exists() else path


@dataclass
class DataConfig:
    id_train: DatasetSpec
    id_test: DatasetSpec
    ood_tests: list[DatasetSpec]
    root: str = "."
    num_classes: int = 10
    train_size: int = 10000
    image_size: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        for key in ("id_train", "id_test"):
            d[key] = DatasetSpec(**d[key])
        d["ood_tests"] = [DatasetSpec(**s) for s in d.get("ood_tests", [])]
        return cls(**d)


@dataclass
class RunConfig:
    data: DataConfig
    classifier: CnnConfig = field(default_factory=CnnConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    rejector: RejectorConfig = field(default_factory=RejectorConfig)
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    output_dir: str = "runs/default"
    base_dir: str = field(default=".", compare=False)  # directory of the config file

    def __post_init__(self):
        self.methods = tuple(self.methods)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if not self.data.ood_tests:
            raise ConfigError("at least one OOD test set is required")
        # every stage draws randomness from the single run seed
        self.classifier = replace(self.classifier, seed=self.seed,
                                  input_shape=(self.classifier.input_shape[0], self.data.image_size,
                                               self.data.image_size),
                                  num_classes=self.data.num_classes)
        self.surrogate = replace(self.surrogate, seed=self.seed)
        self.rejector = replace(self.rejector, seed=self.seed)

    @property
    def data_root(self) -> Path:
        root = os.environ.get(DATA_ENV) or self.data.root
        return (Path(self.base_dir) / root).resolve()

    @property
    def out_dir(self) -> Path:
        return (Path(self.base_dir) / (os.environ.get(OUTPUT_ENV) or self.output_dir)).resolve()

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["classifier"].pop("seed")
        d["surrogate"].pop("seed")
        d["rejector"].pop("seed")
        return d

    def digest(self) -> str:
        """Short hash of everything that affects results (not output location)."""
        d = self.to_dict()
        d.pop("output_dir")
        d["data"].pop("root")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def validate_paths(self) -> None:
        root = self.data_root
        specs = [self.data.id_train, self.data.id_test, *self.data.ood_tests]
        missing = [str(p) for s in specs for p in s.paths(root) if not p.exists()]
        if missing:
            raise ConfigError("missing dataset files: " + ", ".join(missing))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def from_dict(d: dict, base_dir=".") -> RunConfig:
    d = dict(d)
    try:
        data = DataConfig.from_dict(d.pop("data"))
        clf = d.pop("classifier", {})
        return RunConfig(
            data=data,
            classifier=CnnConfig.from_dict({k: v for k, v in clf.items() if k != "seed"}),
            surrogate=SurrogateConfig.from_dict({k: v for k, v in d.pop("surrogate", {}).items() if k != "seed"}),
            rejector=RejectorConfig.from_dict({k: v for k, v in d.pop("rejector", {}).items() if k != "seed"}),
            base_dir=str(base_dir),
            **d,
        )
    except KeyError as err:
        raise ConfigError(f"config is missing required key {err}") from err
    except TypeError as err:
        raise ConfigError(f"bad config field: {err}") from err


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return from_dict(raw, base_dir=path.parent.resolve())


def default_layout(root: str = ".", proxy: bool = False) -> dict:
    """Config dict for the Fashion-MNIST desk run, or its procedural stand-in."""
    if proxy:
        ds = {"id": "shapes", "ood": ("segments", "glyphs")}
    else:
        ds = {"id": "fashion", "ood": ("mnist", "kmnist")}

    def idx(name, split):
        return {"name": name, "images": f"{name}/{split}-images-idx3-ubyte",
                "labels": f"{name}/{split}-labels-idx1-ubyte"}

    return {
        "data": {
            "root": root,
            "id_train": idx(ds["id"], "train"),
            "id_test": idx(ds["id"], "t10k"),
            "ood_tests": [idx(n, "t10k") for n in ds["ood"]],
        },
        "seed": 0,
        "output_dir": "runs/proxy" if proxy else "runs/desk",
    }
