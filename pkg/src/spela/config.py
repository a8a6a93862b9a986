"""Experiment configuration files and the bundled presets.

Configs are INI-style: ``[section]`` headers followed by ``key = value``
lines. Values are validated when an :class:`ExperimentConfig` is built, so a
bad file fails before any data is loaded. ``$VAR`` references in paths are
expanded from the environment.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .cnn import CnnTrainConfig
from .datasets import (LabeledDataset, load_cifar, load_features, load_idx_dir, subsample,
                       train_test_split)
from .embeddings import Provenance
from .linalg import make_rng
from .losses import LossKind
from .mlp import TrainConfig

ALGORITHMS = {"spela", "spela_ch", "bp", "bp_ch", "bp_bin", "spela_cnn"}
DATA_KINDS = {"idx", "cifar", "features", "mnist_subset", "digits"}


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    kind: str = "idx"
    path: str = "$SPELA_DATA_DIR/mnist"
    test_path: str = ""
    variant: str = "C10"
    n_classes: int = 10
    fraction: float = 1.0
    test_fraction: float = 0.2
    split_seed: int = 0
    max_train: int = 0
    max_test: int = 0


@dataclass
class CnnSpec:
    channels: tuple = (32, 32)
    kernel_size: int = 5
    stride: int = 1
    padding: int = 2
    head_dim: int = 32
    m_max: int = 5
    lr_kernel: float = 0.1
    lr_head: float = 0.1
    block_epochs: tuple = (15, 10)
    batch_size: int = 64


@dataclass
class SweepSpec:
    param: str = ""
    values: tuple = ()


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    algorithm: str = "spela"
    sizes: tuple = (784, 1024, 10)
    loss: LossKind = LossKind.COSINE_LOG
    slope: float = 0.001
    use_bias: bool = True
    embedding: Provenance = Provenance.SYMMETRIC
    embedding_seed: int = 0
    embedding_tol: float = 1e-9
    seeds: tuple = (0,)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    cnn: CnnSpec = field(default_factory=CnnSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    source: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        if self.data.kind not in DATA_KINDS:
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.algorithm != "spela_cnn":
            if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
                raise ConfigError("sizes needs an input width and at least one positive layer width")
        if not 0 < self.data.fraction <= 1:
            raise ConfigError("data fraction must be in (0, 1]")
        if not 0 <= self.train.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if len(self.cnn.block_epochs) != len(self.cnn.channels):
            raise ConfigError("cnn block_epochs needs one entry per channel count")
        if self.cnn.m_max < 2:
            raise ConfigError("cnn m_max must be at least 2")
        if self.sweep.param and not self.sweep.values:
            raise ConfigError("sweep needs values")
        return self

    @property
    def cnn_train_config(self) -> CnnTrainConfig:
        return CnnTrainConfig(tuple(self.cnn.block_epochs), self.cnn.batch_size,
                              self.train.seed, self.train.eval_every)

    def to_flat(self) -> dict:
        """Flat ``section.key`` view used for manifests and checkpoint echoes."""
        out = {"experiment.name": self.name, "experiment.algorithm": self.algorithm,
               "experiment.seeds": _fmt(self.seeds)}
        for k in ("sizes", "loss", "slope", "use_bias", "embedding", "embedding_seed",
                  "embedding_tol"):
            out[f"model.{k}"] = _fmt(getattr(self, k))
        for sec, obj in (("train", self.train), ("data", self.data), ("cnn", self.cnn),
                         ("sweep", self.sweep)):
            for f in fields(obj):
                out[f"{sec}.{f.name}"] = _fmt(getattr(obj, f.name))
        out["sweep.values"] = "; ".join(_fmt(v) for v in self.sweep.values)
        return out


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return "; ".join(_fmt(x) for x in v)
        return ", ".join(str(x) for x in v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(target, raw: str):
    """Convert ``raw`` to the type of the existing default ``target``."""
    if isinstance(target, bool):
        return _bool(raw)
    if isinstance(target, int):
        f = float(raw)
        if not f.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(f)
    if isinstance(target, float):
        return float(raw)
    if isinstance(target, tuple):
        return _ints(raw)
    if isinstance(target, LossKind):
        return LossKind(raw.strip())
    if isinstance(target, Provenance):
        return Provenance(raw.strip())
    return raw.strip()


def _apply(obj, items: dict, section: str) -> None:
    names = {f.name for f in fields(obj)}
    for k, v in items.items():
        if k not in names:
            raise ConfigError(f"unknown key {k!r} in [{section}]")
        cur = getattr(obj, k)
        try:
            val = _coerce(cur, v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {k}: {exc}") from None
        setattr(obj, k, val)


def _sweep_values(param: str, raw: str) -> tuple:
    items = [x.strip() for x in raw.split(";") if x.strip()]
    if param == "model.sizes":
        return tuple(_ints(x) for x in items)
    return tuple(float(x) for x in items)


def parse_config(text: str, source: str = "") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(source=source)
    known = {"experiment", "model", "train", "data", "cnn", "sweep"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    if cp.has_section("experiment"):
        exp = dict(cp["experiment"])
        cfg.name = exp.pop("name", cfg.name)
        cfg.algorithm = exp.pop("algorithm", cfg.algorithm).strip()
        if "seeds" in exp:
            cfg.seeds = _ints(exp.pop("seeds"))
        if exp:
            raise ConfigError(f"unknown keys in [experiment]: {sorted(exp)}")
    if cp.has_section("model"):
        model = dict(cp["model"])
        for k, v in model.items():
            if k not in ("sizes", "loss", "slope", "use_bias", "embedding", "embedding_seed",
                         "embedding_tol"):
                raise ConfigError(f"unknown key {k!r} in [model]")
            try:
                setattr(cfg, k, _coerce(getattr(cfg, k), v))
            except ValueError as exc:
                raise ConfigError(f"[model] {k}: {exc}") from None
    if cp.has_section("train"):
        _apply(cfg.train, dict(cp["train"]), "train")
    if cp.has_section("data"):
        _apply(cfg.data, dict(cp["data"]), "data")
    if cp.has_section("cnn"):
        _apply(cfg.cnn, dict(cp["cnn"]), "cnn")
    if cp.has_section("sweep"):
        sw = dict(cp["sweep"])
        param = sw.pop("param", "").strip()
        values = sw.pop("values", "")
        if sw:
            raise ConfigError(f"unknown keys in [sweep]: {sorted(sw)}")
        cfg.sweep = SweepSpec(param, _sweep_values(param, values) if param else ())
    if cfg.algorithm == "spela_ch":
        cfg.loss = LossKind.CROSS_ENTROPY_HEAD
    cfg.train.loss_kind = cfg.loss
    if cfg.algorithm == "bp_bin":
        cfg.train.binarize_weights = True
    return cfg.validate()


def config_from_flat(flat: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_flat`."""
    sections: dict = {}
    for key, val in flat.items():
        sec, k = key.split(".", 1)
        sections.setdefault(sec, []).append(f"{k} = {val}")
    text = "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items())
    return parse_config(text, "checkpoint")


def load_config(path) -> ExperimentConfig:
    """Read a config file; a bare name is looked up among the presets."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        return load_preset(str(path))
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def preset_names() -> list:
    return sorted(r.name[:-4] for r in resources.files("spela.presets").iterdir()
                  if r.name.endswith(".cfg"))


def load_preset(name: str) -> ExperimentConfig:
    res = resources.files("spela.presets") / f"{name}.cfg"
    if not res.is_file():
        raise ConfigError(f"no preset named {name!r}; available: {', '.join(preset_names())}")
    return parse_config(res.read_text(encoding="utf-8"), f"preset:{name}")


def with_override(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one ``section.key`` replaced (used by sweeps)."""
    new = config_from_flat(cfg.to_flat())
    new.source = cfg.source
    sec, key = param.split(".", 1)
    if sec == "model":
        if key == "sizes":
            value = tuple(int(v) for v in value)
        setattr(new, key, _coerce(getattr(new, key), _fmt(value)))
    elif sec in ("train", "data", "cnn"):
        obj = getattr(new, sec)
        if not hasattr(obj, key):
            raise ConfigError(f"unknown sweep parameter {param!r}")
        cur = getattr(obj, key)
        setattr(obj, key, _coerce(cur, _fmt(value)))
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    new.train.loss_kind = new.loss
    new.sweep = SweepSpec()
    return new.validate()


# -- data -------------------------------------------------------------------

def _path(p: str) -> Path:
    expanded = os.path.expandvars(p)
    if "$" in expanded:
        raise ConfigError(f"unset environment variable in path {p!r}")
    return Path(expanded).expanduser()


def mnist_subset() -> LabeledDataset:
    """The 5000-digit MNIST sample bundled with mlxtend (500 per class)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ConfigError("data kind 'mnist_subset' needs the mlxtend package") from exc
    X, y = mnist_data()
    return LabeledDataset((X / 255.0).astype(np.float32), y, 10, "scale01", (1, 28, 28),
                          "mnist_subset")


def digits() -> LabeledDataset:
    """scikit-learn's 8x8 digits, scaled from 0..16 to [0, 1]."""
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover
        raise ConfigError("data kind 'digits' needs scikit-learn") from exc
    d = load_digits()
    return LabeledDataset((d.data / 16.0).astype(np.float32), d.target, 10, "scale01",
                          (1, 8, 8), "digits")


def load_data(spec: DataSpec, seed: int = 0) -> tuple:
    """(train, test) datasets for a data section."""
    kind = spec.kind
    if kind == "idx":
        root = _path(spec.path)
        train = load_idx_dir(root, "train", spec.n_classes)
        test = load_idx_dir(root, "test", spec.n_classes)
    elif kind == "cifar":
        root = _path(spec.path)
        train = load_cifar(root, spec.variant, "train")
        test = load_cifar(root, spec.variant, "test")
    elif kind == "features":
        train = load_features(_path(spec.path))
        if not spec.test_path:
            raise ConfigError("feature data needs test_path")
        test = load_features(_path(spec.test_path))
    else:
        full = mnist_subset() if kind == "mnist_subset" else digits()
        train, test = train_test_split(full, spec.test_fraction, make_rng(spec.split_seed))
    if spec.max_train:
        train = train.take(np.arange(min(spec.max_train, len(train))))
    if spec.max_test:
        test = test.take(np.arange(min(spec.max_test, len(test))))
    if spec.fraction < 1:
        train = subsample(train, spec.fraction, make_rng(seed + 17))
    return train, test
