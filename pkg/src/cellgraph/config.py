"""Run configuration: one flat, validated set of keys shared by file and CLI."""
from __future__ import annotations

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .cpc import CpcConfig
from .gnn import GnnConfig

DATA_ROOT_ENV = "CELLGRAPH_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # locations
    data_root: str | None = None
    output_dir: str = "runs/default"
    # graph construction
    k: int = 5
    radius: float = 100.0
    crop_size: int = 1550
    tissue_fraction: float = 0.01
    glcm_levels: int = 16
    glcm_offsets: list = field(default_factory=lambda: [[0, 1], [1, 0], [1, 1], [1, -1]])
    # CPC
    use_cpc: bool = True
    cpc_patch: int = 64
    cpc_cell: int = 16
    cpc_stride: int = 8
    cpc_hidden: int = 64
    cpc_dz: int = 32
    cpc_dc: int = 32
    cpc_kmax: int = 3
    cpc_negatives: int = 15
    cpc_epochs: int = 10
    cpc_batch: int = 16
    cpc_lr: float = 1e-3
    cpc_patches: int = 8192
    cpc_window: int = 64
    cpc_rgb: bool = False
    # GNN
    gnn_layers: int = 3
    gnn_hidden: int = 64
    pool_ratio: float = 0.5
    head_hidden: int = 64
    dropout: float = 0.0
    score_activation: str = "sigmoid"
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 16
    patience: int = 10
    # evaluation
    folds: int = 5
    val_fraction: float = 0.1
    group_split: bool = True
    seed: int = 0
    # synthetic data
    synth_per_class: int = 200
    synth_side: int = 512
    workers: int = 0  # 0: one per CPU core

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (self.radius > 0, "radius must be positive"),
            (self.crop_size >= 1, "crop_size must be positive"),
            (0 <= self.tissue_fraction <= 1, "tissue_fraction must lie in [0, 1]"),
            (self.glcm_levels >= 2, "glcm_levels must be >= 2"),
            (len(self.glcm_offsets) > 0, "glcm_offsets must not be empty"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be 'adam' or 'sgd'"),
            (self.lr > 0, "lr must be positive"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.folds >= 2, "folds must be >= 2"),
            (0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)"),
            (self.cpc_patches >= 2, "cpc_patches must be >= 2"),
            (self.workers >= 0, "workers must be >= 0 (0 = one per core)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for off in self.glcm_offsets:
            if len(off) != 2 or tuple(off) == (0, 0):
                raise ConfigError(f"invalid GLCM offset {off!r}")
        try:
            self.cpc_config()
            self.gnn_config(in_dim=12)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.cpc_window < self.cpc_cell or (self.cpc_window - self.cpc_cell) % self.cpc_stride:
            raise ConfigError("cpc_window must be tiled by cpc_cell cells at cpc_stride")

    @property
    def feature_dim(self) -> int:
        return 12 + (self.cpc_dz if self.use_cpc else 0)

    def cpc_config(self) -> CpcConfig:
        return CpcConfig(patch=self.cpc_patch, cell=self.cpc_cell, stride=self.cpc_stride,
                         hidden=self.cpc_hidden, dz=self.cpc_dz, dc=self.cpc_dc, kmax=self.cpc_kmax,
                         negatives=self.cpc_negatives, epochs=self.cpc_epochs, batch=self.cpc_batch,
                         lr=self.cpc_lr, seed=self.seed, rgb=self.cpc_rgb, window=self.cpc_window)

    def gnn_config(self, in_dim: int | None = None) -> GnnConfig:
        return GnnConfig(in_dim=self.feature_dim if in_dim is None else in_dim, layers=self.gnn_layers,
                         hidden=self.gnn_hidden, pool_ratio=self.pool_ratio, head_hidden=self.head_hidden,
                         dropout=self.dropout, score_activation=self.score_activation, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_data_root(self) -> Path:
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
        path = Path(root)
        if not path.is_dir():
            raise FileNotFoundError(f"data root {path} does not exist")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for name, value in d.items():
            kwargs[name] = _coerce(name, value, _default_of(known[name]))
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _coerce(name: str, value, default):
    """Coerce file/CLI values to the type of the key's default."""
    if value is None:
        if name == "data_root":
            return None
        raise ConfigError(f"{name} may not be null")
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)):
                return bool(value)
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, list):
                raise ValueError(value)
            return [list(map(int, v)) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {name}: {value!r}") from None


def config_keys() -> list[tuple[str, object]]:
    return [(f.name, _default_of(f)) for f in fields(RunConfig)]
