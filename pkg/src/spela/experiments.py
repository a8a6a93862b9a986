"""Turn an :class:`ExperimentConfig` into trained networks and metrics."""

from __future__ import annotations

import hashlib
import platform
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bp import BpNetwork, bp_binarized_train, bp_evaluate, bp_train
from .cnn import SpelaCNN, cnn_evaluate, cnn_train
from .config import ExperimentConfig, load_data, with_override
from .datasets import LabeledDataset
from .metrics import RunMetrics
from .mlp import SpelaNetwork, evaluate, train
from .profiler import CostLedger, attach, model_memory


@dataclass
class RunResult:
    metrics: RunMetrics
    net: object
    seed: int
    ledger: CostLedger | None = None


def data_digest(data: LabeledDataset) -> str:
    """Content hash for datasets that do not come from files."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.samples).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()


def dataset_checksums(*sets: LabeledDataset) -> dict:
    out = {}
    for i, d in enumerate(sets):
        if d.checksums:
            out.update(d.checksums)
        else:
            out[f"{d.name or 'data'}[{i}]"] = data_digest(d)
    return out


def code_version() -> str:
    """Package version plus a hash over the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".cfg") and p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return f"{__version__}+src.{h.hexdigest()[:12]}"


def build_network(cfg: ExperimentConfig, seed: int, n_classes: int, in_shape=None,
                  cache_dir=None):
    if cfg.algorithm in ("spela", "spela_ch"):
        return SpelaNetwork.build(list(cfg.sizes), n_classes, cfg.loss, cfg.slope, seed,
                                  cfg.train.dropout, cfg.train.binarize_weights, cfg.use_bias,
                                  cfg.embedding, cfg.embedding_seed, cfg.embedding_tol,
                                  cache_dir)
    if cfg.algorithm in ("bp", "bp_ch", "bp_bin"):
        return BpNetwork.build(list(cfg.sizes), seed, cfg.slope, cfg.train.dropout,
                               cfg.train.binarize_weights, use_bias=cfg.use_bias)
    c = cfg.cnn
    return SpelaCNN.build(in_shape, n_classes, tuple(c.channels), c.kernel_size, c.stride,
                          c.padding, c.head_dim, c.m_max, cfg.loss, seed, c.lr_kernel,
                          c.lr_head, cfg.slope, cache_dir)


def run_once(cfg: ExperimentConfig, seed: int, data=None, profile: bool = False,
             cache_dir=None, callback=None) -> RunResult:
    """Train one network for one seed. ``data`` is an optional (train, test) pair."""
    train_set, test_set = data if data is not None else load_data(cfg.data, seed)
    tcfg = replace(cfg.train, seed=seed, loss_kind=cfg.loss)
    if cfg.algorithm == "spela_cnn":
        if train_set.image_shape is None:
            raise ValueError("the CNN needs image-shaped data")
        net = build_network(cfg, seed, train_set.n_classes, train_set.image_shape, cache_dir)
        ccfg = replace(cfg.cnn_train_config, seed=seed)
        fit = lambda: cnn_train(net, train_set, ccfg, test_set, callback)  # noqa: E731
    else:
        if cfg.sizes[0] != train_set.dim:
            raise ValueError(f"config input width {cfg.sizes[0]} != data dim {train_set.dim}")
        net = build_network(cfg, seed, train_set.n_classes, cache_dir=cache_dir)
        if cfg.algorithm in ("spela", "spela_ch"):
            trainer = train
        elif cfg.algorithm == "bp_bin":
            trainer = bp_binarized_train
        else:
            trainer = bp_train
        fit = lambda: trainer(net, train_set, tcfg, test_set, callback)  # noqa: E731
    ledger = None
    if profile:
        with attach(CostLedger(model_param_scalars=model_memory(net))) as ledger:
            metrics = fit()
    else:
        metrics = fit()
    metrics.info["checksums"] = dataset_checksums(train_set, test_set)
    return RunResult(metrics, net, seed, ledger)


def evaluate_exits(net, data: LabeledDataset, exit_layer: int | None = None) -> list:
    """(exit, accuracy) pairs; all exits unless ``exit_layer`` picks one."""
    if isinstance(net, SpelaNetwork):
        res = [(k + 1, acc) for k, (acc, _, _) in enumerate(evaluate(net, data))]
    elif isinstance(net, SpelaCNN):
        res = [(k + 1, acc) for k, (acc, _) in enumerate(cnn_evaluate(net, data))]
    else:
        acc, _, _ = bp_evaluate(net, data)
        res = [(len(net.weights), acc)]
    if exit_layer is None:
        return res
    valid = [k for k, _ in res]
    if exit_layer not in valid:
        raise ValueError(f"exit layer {exit_layer} not available; valid exits: {valid}")
    return [r for r in res if r[0] == exit_layer]


def sweep_points(cfg: ExperimentConfig) -> list:
    """(label, config) for every sweep value; a config without a sweep is one point."""
    if not cfg.sweep.param:
        return [("base", cfg)]
    out = []
    for v in cfg.sweep.values:
        label = "-".join(str(x) for x in v) if isinstance(v, tuple) else f"{v:g}"
        out.append((label, with_override(cfg, cfg.sweep.param, v)))
    return out


def summarize(rows: list) -> list:
    """Mean and population std of final test accuracy per (label, layer)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["label"], r["layer"]), []).append(r["accuracy"])
    out = []
    order = []
    for r in rows:
        if r["label"] not in order:
            order.append(r["label"])
    for (label, layer), accs in sorted(groups.items(), key=lambda kv: (order.index(kv[0][0]), kv[0][1])):
        a = np.asarray(accs)
        out.append({"label": label, "layer": layer, "mean": float(a.mean()),
                    "std": float(a.std()), "n": len(a)})
    return out


def profile_row(cfg: ExperimentConfig, res: RunResult, batch_size: int) -> dict:
    per = res.ledger.per_sample()
    hidden = len(cfg.sizes) - 2
    return {
        "algorithm": "spela" if cfg.algorithm.startswith("spela") else "bp",
        "depth": hidden,
        "batch_size": batch_size,
        "peak_activation_scalars": res.ledger.peak_stored_activation_scalars / batch_size,
        "forward_maccs": per["forward_maccs"],
        "update_maccs": per["update_maccs"],
        "train_maccs": per["train_maccs"],
        "model_param_scalars": res.ledger.model_param_scalars,
    }


def manifest(cfg: ExperimentConfig, seeds, checksums: dict, argv=None) -> str:
    lines = [f"code_version={code_version()}",
             f"python={platform.python_version()}",
             f"numpy={np.__version__}",
             f"seeds={', '.join(str(s) for s in seeds)}"]
    if argv is not None:
        lines.append("argv=" + " ".join(argv))
    lines += [f"checksum.{k}={v}" for k, v in sorted(checksums.items())]
    lines += [f"config.{k}={v}" for k, v in cfg.to_flat().items()]
    return "\n".join(lines) + "\n"
