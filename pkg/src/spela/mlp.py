"""Single-forward-pass training of dense networks against fixed class embeddings.

Each layer normalizes its input, applies an affine map and a leaky ReLU, and
immediately updates itself from a local loss between its activation and the
embedding vector of the true class. The updated activation then moves on to
the next layer; nothing is propagated backwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .embeddings import EmbeddingSet, Provenance, make_embeddings
from .linalg import (EPS, batch_affine, binarize_view, he_uniform_init, leaky_relu,
                     leaky_relu_grad, make_rng, normalize_rows)
from .losses import LossKind, head_logits_batch, loss_and_grad
from .metrics import RunMetrics, TrainingDivergedError
from .profiler import active_ledger, suspended

log = logging.getLogger(__name__)

LR_MIN = 0.01

__all__ = [
    "DenseLayer", "SpelaNetwork", "TrainConfig", "LayerCache", "LossKind",
    "layer_forward", "local_update", "train", "predict", "predict_batch",
    "evaluate", "head_logits", "binarize_view", "learning_rate",
]


class StaleCacheError(RuntimeError):
    pass


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    embeddings: EmbeddingSet
    slope: float = 0.001
    dropout: float = 0.0
    binarize: bool = False
    use_bias: bool = True
    index: int = 0
    _pending: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.embeddings.dim != self.W.shape[0]:
            raise ValueError(f"embedding dim {self.embeddings.dim} != layer width {self.W.shape[0]}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    @property
    def latent_W(self) -> np.ndarray | None:
        return self.W if self.binarize else None

    def effective_weights(self) -> np.ndarray:
        return binarize_view(self.W) if self.binarize else self.W

    def param_count(self) -> int:
        return self.W.size + (self.b.size if self.use_bias else 0) + self.embeddings.vectors.size


@dataclass
class LayerCache:
    layer: int
    X: np.ndarray      # normalized input
    Z: np.ndarray      # pre-activation
    H: np.ndarray      # activation after dropout
    mask: np.ndarray | None

    @property
    def scalars(self) -> int:
        return self.Z.size


@dataclass
class SpelaNetwork:
    layers: list
    loss_kind: LossKind = LossKind.COSINE_LOG
    trace: list | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def n_classes(self) -> int:
        return self.layers[0].embeddings.n_vectors

    @property
    def sizes(self) -> list:
        return [self.input_dim] + [l.n_out for l in self.layers]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    @classmethod
    def build(cls, sizes, n_classes: int, loss_kind=LossKind.COSINE_LOG, slope: float = 0.001,
              seed: int = 0, dropout: float = 0.0, binarize: bool = False, use_bias: bool = True,
              embedding_kind=Provenance.SYMMETRIC, embedding_seed: int = 0,
              embedding_tol: float = 1e-9, cache_dir=None, use_cache: bool = True):
        """Fresh network with He-uniform weights and one embedding set per layer.

        ``sizes`` lists every width including the input, e.g. [784, 1024, 10].
        Layer k gets embedding seed ``embedding_seed + k`` so no two layers
        share a set.
        """
        if len(sizes) < 2:
            raise ValueError("need an input width and at least one layer")
        rng = make_rng(seed)
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            e = make_embeddings(n_classes, n_out, embedding_kind, embedding_seed + k,
                                embedding_tol, cache_dir, use_cache)
            W = he_uniform_init(n_out, n_in, rng)
            layers.append(DenseLayer(W, np.zeros(n_out), e, slope, dropout, binarize,
                                     use_bias, index=k))
        net = cls(layers, LossKind(loss_kind))
        net.check()
        return net

    def check(self) -> None:
        for prev, cur in zip(self.layers[:-1], self.layers[1:]):
            if cur.n_in != prev.n_out:
                raise ValueError("layer widths do not chain")
        if len({l.embeddings.n_vectors for l in self.layers}) != 1:
            raise ValueError("every layer needs the same number of class embeddings")

    def _log(self, event: str, layer: int) -> None:
        if self.trace is not None:
            self.trace.append((event, layer))


def learning_rate(cfg: "TrainConfig", epoch: int) -> float:
    """Learning rate for a zero-based epoch index."""
    steps = epoch // cfg.decay_every if cfg.decay_every > 0 else 0
    if cfg.decay_mode == "multiply":
        lr = cfg.lr0 * cfg.decay_amount ** steps
    else:
        lr = cfg.lr0 - cfg.decay_amount * steps
    return max(lr, cfg.lr_min) if cfg.decay_amount else lr


@dataclass
class TrainConfig:
    lr0: float = 2.5
    decay_amount: float = 0.1
    decay_every: int = 10
    decay_mode: str = "subtract"
    lr_min: float = LR_MIN
    batch_size: int = 50
    epochs: int = 200
    dropout: float = 0.0
    seed: int = 0
    binarize_weights: bool = False
    loss_kind: LossKind = LossKind.COSINE_LOG
    momentum: float = 0.0
    schedule: str = "sequential"
    eval_every: int = 1

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_mode not in ("subtract", "multiply"):
            raise ValueError("decay_mode is 'subtract' or 'multiply'")
        if self.schedule not in ("sequential", "pipelined"):
            raise ValueError("schedule is 'sequential' or 'pipelined'")


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def layer_forward(layer: DenseLayer, h_prev, training: bool = False,
                  rng: np.random.Generator | None = None):
    """Forward one layer. Returns (h, cache); cache is None outside training.

    Input rows are L2-normalized first. Dropout (inverted) is applied to the
    activation only in training mode.
    """
    single = np.ndim(h_prev) == 1
    H_prev = _as_batch(h_prev)
    if H_prev.shape[1] != layer.n_in:
        raise ValueError(f"layer {layer.index} expects width {layer.n_in}, got {H_prev.shape[1]}")
    X = normalize_rows(H_prev)
    Z = batch_affine(layer.effective_weights(), X, layer.b if layer.use_bias else None)
    H = leaky_relu(Z, layer.slope)
    mask = None
    if training and layer.dropout > 0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        mask = (rng.random(H.shape) >= layer.dropout) / (1.0 - layer.dropout)
        H = H * mask
    cache = None
    if training:
        cache = LayerCache(layer.index, X, Z, H, mask)
        layer._pending = cache
        ledger = active_ledger()
        if ledger is not None:
            ledger.add_forward(0, layer.index, calls=H.shape[0])
            ledger.allocate(cache.scalars)
    return (H[0] if single else H), cache


def local_update(layer: DenseLayer, cache: LayerCache, labels, lr: float,
                 kind: LossKind = LossKind.COSINE_LOG) -> float:
    """Apply one SGD step to ``layer`` from its own cache and local loss.

    Gradients are averaged over the rows of the cache. Returns the mean loss
    before the step. The cache is consumed.
    """
    if cache is None or layer._pending is not cache or cache.layer != layer.index:
        raise StaleCacheError(f"layer {layer.index}: cache missing or not from its last forward")
    labels = np.atleast_1d(np.asarray(labels))
    if labels.min() < 0 or labels.max() >= layer.embeddings.n_vectors:
        raise ValueError("label out of range")
    losses, G_h = loss_and_grad(cache.H, labels, layer.embeddings.vectors, kind)
    if cache.mask is not None:
        G_h = G_h * cache.mask
    G_z = G_h * leaky_relu_grad(cache.Z, layer.slope)
    B = G_z.shape[0]
    if lr != 0:
        layer.W -= (lr / B) * (G_z.T @ cache.X)
        if layer.use_bias:
            layer.b -= (lr / B) * G_z.sum(axis=0)
    ledger = active_ledger()
    if ledger is not None:
        ledger.add_update(B * layer.n_out * layer.n_in)
        ledger.release(cache.scalars)
    layer._pending = None
    return float(losses.mean())


def head_logits(h, e: EmbeddingSet) -> np.ndarray:
    """Cosine similarity of ``h`` (vector or batch) against each embedding."""
    single = np.ndim(h) == 1
    H = _as_batch(h)
    if H.shape[1] != e.dim:
        raise ValueError("activation and embedding dimensions differ")
    S = head_logits_batch(H, e.vectors)
    return S[0] if single else S


def _forward_layers(net: SpelaNetwork, X: np.ndarray, upto: int):
    H = X
    for layer in net.layers[:upto]:
        H, _ = layer_forward(layer, H)
        yield H


def predict_batch(net: SpelaNetwork, X, exit_layer: int | None = None):
    K = len(net.layers)
    exit_layer = K if exit_layer is None else exit_layer
    if not 1 <= exit_layer <= K:
        raise ValueError(f"exit layer must be in 1..{K}")
    H = _as_batch(X)
    for H in _forward_layers(net, H, exit_layer):
        pass
    S = _scores(H, net.layers[exit_layer - 1].embeddings.vectors)
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(S, axis=1), S


def _scores(H, E):
    O = normalize_rows(H)
    return O @ E.T


def predict(net: SpelaNetwork, x, exit_layer: int | None = None):
    """Class id and per-class cosine scores for one input, exiting at ``exit_layer``."""
    preds, S = predict_batch(net, np.asarray(x)[None, :], exit_layer)
    return int(preds[0]), S[0]


def evaluate(net: SpelaNetwork, data: LabeledDataset, batch_size: int = 1000,
             topk: int = 1, kind: LossKind | None = None):
    """Per-layer (accuracy, mean loss, top-k accuracy) from one forward sweep."""
    kind = LossKind(kind or net.loss_kind)
    K = len(net.layers)
    correct = np.zeros(K)
    correct_k = np.zeros(K)
    loss_sum = np.zeros(K)
    X_all = data.flat()
    with suspended():
        for s in range(0, len(data), batch_size):
            _eval_batch(net, X_all[s:s + batch_size], data.labels[s:s + batch_size], K, kind,
                        topk, correct, correct_k, loss_sum)
    n = len(data)
    return [(correct[k] / n, loss_sum[k] / n, (correct_k[k] if topk > 1 else correct[k]) / n)
            for k in range(K)]


def _eval_batch(net, X, y, K, kind, topk, correct, correct_k, loss_sum):
    X = X.astype(np.float64)
    for k, H in enumerate(_forward_layers(net, X, K)):
        E = net.layers[k].embeddings.vectors
        S = _scores(H, E)
        correct[k] += np.sum(np.argmax(S, axis=1) == y)
        if topk > 1:
            top = np.argsort(-S, axis=1, kind="stable")[:, :topk]
            correct_k[k] += np.sum(np.any(top == y[:, None], axis=1))
        losses, _ = loss_and_grad(H, y, E, kind)
        loss_sum[k] += losses.sum()


def _check_finite(layer: DenseLayer, epoch: int, batch: int) -> None:
    if not (np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.b))):
        raise TrainingDivergedError(
            f"non-finite parameters in layer {layer.index + 1} at epoch {epoch}, batch {batch}; "
            f"|W| max={np.nanmax(np.abs(layer.W)):.3g}")


def _step_layer(net, k, H, y, lr, rng, stats, epoch, batch):
    layer = net.layers[k]
    net._log("forward", k)
    H, cache = layer_forward(layer, H, training=True, rng=rng)
    # training accuracy from the activation that drives this update
    pred = np.argmax(_scores(H, layer.embeddings.vectors), axis=1)
    net._log("update", k)
    loss = local_update(layer, cache, y, lr, net.loss_kind)
    _check_finite(layer, epoch, batch)
    stats[k][0] += np.sum(pred == y)
    stats[k][1] += loss * len(y)
    return H


def train(net: SpelaNetwork, data: LabeledDataset, cfg: TrainConfig,
          test: LabeledDataset | None = None, callback=None) -> RunMetrics:
    """Train ``net`` in place; every layer sees each batch exactly once per epoch."""
    if data.dim != net.input_dim:
        raise ValueError(f"data dim {data.dim} != network input {net.input_dim}")
    if data.labels.max() >= net.n_classes:
        raise ValueError("label out of range for the network's embeddings")
    net.loss_kind = cfg.loss_kind
    for layer in net.layers:
        layer.dropout = cfg.dropout if layer is not net.layers[-1] else 0.0
        layer.binarize = cfg.binarize_weights
    rng = make_rng(cfg.seed + 1_000_003)
    metrics = RunMetrics(info={"checksums": dict(data.checksums)})
    ledger = active_ledger()
    metrics.ledger = ledger
    X_all = data.flat()
    n = len(data)
    K = len(net.layers)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(n)
        stats = [[0.0, 0.0] for _ in range(K)]
        batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
        if cfg.schedule == "sequential":
            for bi, idx in enumerate(batches):
                H = X_all[idx].astype(np.float64)
                y = data.labels[idx]
                if ledger is not None:
                    ledger.count_samples(len(idx))
                for k in range(K):
                    H = _step_layer(net, k, H, y, lr, rng, stats, epoch, bi)
        else:
            _pipelined_epoch(net, batches, X_all, data.labels, lr, rng, stats, epoch, ledger)
        for k in range(K):
            metrics.add(epoch + 1, k + 1, "train", stats[k][0] / n, stats[k][1] / n)
        if ledger is not None:
            ledger.snapshot(epoch + 1)
        if test is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            for k, (acc, loss, _) in enumerate(evaluate(net, test)):
                metrics.add(epoch + 1, k + 1, "test", acc, loss)
        log.info("epoch %d lr %.3f train acc %s", epoch + 1, lr,
                 " ".join(f"{s[0] / n:.4f}" for s in stats))
        if callback is not None:
            callback(epoch + 1, net, metrics)
    return metrics


def _pipelined_epoch(net, batches, X_all, labels, lr, rng, stats, epoch, ledger):
    """Layer k works on batch t - k at tick t.

    Each layer still sees batches in order and only its own parameters
    change, so the result matches the sequential schedule exactly when
    dropout is off (dropout draws happen in a different order).
    """
    K = len(net.layers)
    inflight = {}
    for tick in range(len(batches) + K - 1):
        # deepest layer first so a batch never skips a tick
        for k in reversed(range(K)):
            t = tick - k
            if not 0 <= t < len(batches):
                continue
            idx = batches[t]
            H = X_all[idx].astype(np.float64) if k == 0 else inflight.pop((t, k))
            if k == 0 and ledger is not None:
                ledger.count_samples(len(idx))
            H = _step_layer(net, k, H, labels[idx], lr, rng, stats, epoch, t)
            if k + 1 < K:
                inflight[(t, k + 1)] = H
