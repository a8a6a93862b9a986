"""Convolutional SPELA: every kernel owns a tiny dense head that classifies
the kernel's feature map into one of a few class groups.

A kernel's predicted group casts one vote for every class in that group, and
a block's prediction is the class with the most votes. Kernel, PReLU slope and
head are trained together from the head's local loss; nothing crosses block
boundaries backwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import LabeledDataset
from .embeddings import make_embeddings
from .linalg import he_uniform_init, leaky_relu, leaky_relu_grad, make_rng, normalize_rows
from .losses import LossKind, loss_and_grad
from .metrics import RunMetrics, TrainingDivergedError
from .profiler import active_ledger, suspended

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupAssignment:
    kernel_id: int
    groups: tuple

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, label: int) -> int:
        for g, members in enumerate(self.groups):
            if label in members:
                return g
        raise ValueError(f"class {label} is in no group of kernel {self.kernel_id}")


def make_group_assignments(n_kernels: int, n_classes: int, rng: np.random.Generator,
                           m_max: int = 5, m: int | None = None) -> list:
    """Random class partitions, one per kernel.

    The group count is drawn from {2, ..., min(n_classes, m_max)} unless
    ``m`` fixes it; shuffled classes are dealt round-robin so group sizes
    differ by at most one.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    hi = min(n_classes, m_max)
    out = []
    for j in range(n_kernels):
        mj = m if m is not None else int(rng.integers(2, hi + 1))
        if not 2 <= mj <= n_classes:
            raise ValueError("group count must be in [2, n_classes]")
        perm = rng.permutation(n_classes)
        groups = tuple(tuple(sorted(int(c) for c in perm[g::mj])) for g in range(mj))
        out.append(GroupAssignment(j, groups))
    return out


def membership(assignments: list, n_classes: int) -> np.ndarray:
    """(n_kernels, max_groups, n_classes) 0/1 tensor of group membership."""
    m_max = max(a.n_groups for a in assignments)
    M = np.zeros((len(assignments), m_max, n_classes), dtype=np.int64)
    for a in assignments:
        for g, members in enumerate(a.groups):
            M[a.kernel_id, g, list(members)] = 1
    return M


def tally_scores(predicted_groups, assignments: list, n_classes: int | None = None) -> np.ndarray:
    """Class votes from per-kernel group predictions.

    ``predicted_groups`` is (n_kernels,) or (batch, n_kernels); the result is
    (n_classes,) or (batch, n_classes).
    """
    if n_classes is None:
        n_classes = 1 + max(c for a in assignments for g in a.groups for c in g)
    P = np.asarray(predicted_groups)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    if P.shape[1] != len(assignments):
        raise ValueError("need one predicted group per kernel")
    M = membership(assignments, n_classes)
    S = M[np.arange(len(assignments))[None, :], P].sum(axis=1)
    return S[0] if single else S


# -- convolution ------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 5
    stride: int = 1
    padding: int = 2

    def out_hw(self, h: int, w: int) -> tuple:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def im2col(X: np.ndarray, spec: ConvSpec) -> tuple:
    """(batch, out_h*out_w, C*k*k) patch matrix and the output size."""
    B, C, H, W = X.shape
    if C != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {C}")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    Xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p))) if p else X
    win = sliding_window_view(Xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, oh * ow, C * k * k)
    return cols, (oh, ow)


def conv_pre(X: np.ndarray, K: np.ndarray, b: np.ndarray, spec: ConvSpec):
    """Cross-correlation without activation. Returns (maps, cols)."""
    cols, (oh, ow) = im2col(X, spec)
    ledger = active_ledger()
    if ledger is not None:
        ledger.add_forward(cols.shape[0] * cols.shape[1] * cols.shape[2] * K.shape[0])
    Y = cols @ K.reshape(K.shape[0], -1).T + b
    return Y.transpose(0, 2, 1).reshape(X.shape[0], K.shape[0], oh, ow), cols


def prelu(Y: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.where(Y > 0, Y, a[None, :, None, None] * Y)


def conv_forward(spec: ConvSpec, X: np.ndarray, K: np.ndarray, b: np.ndarray,
                 a: np.ndarray | None = None) -> np.ndarray:
    """PReLU(cross-correlation) over a (batch, C, H, W) or (C, H, W) input.

    ``a=None`` skips the activation.
    """
    single = X.ndim == 3
    X4 = X[None] if single else X
    Y, _ = conv_pre(np.asarray(X4, dtype=np.float64), K, b, spec)
    if a is not None:
        Y = prelu(Y, a)
    return Y[0] if single else Y


def max_pool2(X: np.ndarray) -> np.ndarray:
    B, C, H, W = X.shape
    return X[:, :, :H - H % 2, :W - W % 2].reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))


# -- blocks -----------------------------------------------------------------

class Adam:
    """Adam over parameters that share a leading kernel axis.

    The step count is kept per kernel so that stepping kernels one at a time
    gives the same result as one vectorized step.
    """

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = np.zeros(len(next(iter(params.values()))), dtype=np.int64)

    def step(self, params: dict, grads: dict, lr: float | None = None, index=None) -> None:
        """In-place Adam update; ``index`` restricts it to one kernel."""
        lr = self.lr if lr is None else lr
        sl = slice(None) if index is None else index
        self.t[sl] += 1
        t = self.t[sl]
        c1 = 1 - self.b1 ** t
        c2 = 1 - self.b2 ** t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m[sl] = self.b1 * m[sl] + (1 - self.b1) * g
            v[sl] = self.b2 * v[sl] + (1 - self.b2) * g * g
            shape = (-1,) + (1,) * (m[sl].ndim - 1) if index is None else ()
            ch1 = np.reshape(c1, shape)
            ch2 = np.reshape(c2, shape)
            params[k][sl] -= lr * (m[sl] / ch1) / (np.sqrt(v[sl] / ch2) + self.eps)


@dataclass
class ConvBlock:
    spec: ConvSpec
    in_hw: tuple
    K: np.ndarray
    b: np.ndarray
    a: np.ndarray
    head_W: np.ndarray          # (n_kernels, d, out_h*out_w)
    head_b: np.ndarray          # (n_kernels, d)
    group_E: list               # per kernel (m_j, d) embedding matrix
    assignments: list
    n_classes: int
    head_slope: float = 0.001
    loss_kind: LossKind = LossKind.COSINE_LOG
    pool: bool = True
    lr_kernel: float = 0.1
    lr_head: float = 0.1
    kernel_opt: Adam | None = field(default=None, repr=False)
    head_opt: Adam | None = field(default=None, repr=False)

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        self.group_of = np.array([[a.group_of(c) for c in range(self.n_classes)]
                                  for a in self.assignments])
        if self.kernel_opt is None:
            self.kernel_opt = Adam(self.kernel_params(), self.lr_kernel)
            self.head_opt = Adam(self.head_params(), self.lr_head)

    @property
    def n_kernels(self) -> int:
        return self.K.shape[0]

    @property
    def out_hw(self) -> tuple:
        return self.spec.out_hw(*self.in_hw)

    @property
    def next_hw(self) -> tuple:
        oh, ow = self.out_hw
        return (oh // 2, ow // 2) if self.pool else (oh, ow)

    def kernel_params(self) -> dict:
        return {"K": self.K, "b": self.b, "a": self.a}

    def head_params(self) -> dict:
        return {"W": self.head_W, "hb": self.head_b}

    def param_count(self) -> int:
        emb = sum(E.size for E in self.group_E)
        return self.K.size + self.b.size + self.a.size + self.head_W.size + self.head_b.size + emb

    def output(self, X: np.ndarray) -> np.ndarray:
        """Activation handed to the next block (PReLU maps, pooled if configured)."""
        Y, _ = conv_pre(X, self.K, self.b, self.spec)
        O = prelu(Y, self.a)
        return max_pool2(O) if self.pool else O


def build_block(spec: ConvSpec, in_hw: tuple, assignments: list, n_classes: int,
                rng: np.random.Generator, head_dim: int = 32, head_slope: float = 0.001,
                loss_kind=LossKind.COSINE_LOG, pool: bool = True, lr_kernel: float = 0.1,
                lr_head: float = 0.1, prelu_init: float = 0.25, embedding_seed: int = 0,
                cache_dir=None, use_cache: bool = True) -> ConvBlock:
    n_k = spec.out_channels
    if len(assignments) != n_k:
        raise ValueError("need one group assignment per kernel")
    fan_in = spec.in_channels * spec.kernel_size ** 2
    K = he_uniform_init(n_k, fan_in, rng).reshape(n_k, spec.in_channels,
                                                  spec.kernel_size, spec.kernel_size)
    oh, ow = spec.out_hw(*in_hw)
    P = oh * ow
    head_W = np.stack([he_uniform_init(head_dim, P, rng) for _ in range(n_k)])
    group_E = [make_embeddings(a.n_groups, head_dim, "symmetric", embedding_seed,
                               cache_dir=cache_dir, use_cache=use_cache).vectors
               for a in assignments]
    return ConvBlock(spec, tuple(in_hw), K, np.zeros(n_k), np.full(n_k, prelu_init), head_W,
                     np.zeros((n_k, head_dim)), group_E, assignments, n_classes, head_slope,
                     loss_kind, pool, lr_kernel, lr_head)


def _head_forward(block: ConvBlock, j: int, Oj: np.ndarray):
    F = normalize_rows(Oj)
    Z = F @ block.head_W[j].T + block.head_b[j]
    return F, Z, leaky_relu(Z, block.head_slope)


def kernel_loss_and_grads(block: ConvBlock, j: int, cols: np.ndarray, Yj: np.ndarray,
                          labels: np.ndarray):
    """Local loss of kernel ``j`` and its gradients.

    ``cols`` is the block's im2col matrix and ``Yj`` (batch, P) the kernel's
    pre-activation map. Returns (mean loss, predicted groups, grads) where
    grads holds dK (C*k*k,), db, da, dW (d, P), dhb (d,).
    """
    aj = block.a[j]
    Oj = np.where(Yj > 0, Yj, aj * Yj)
    F, Z, H = _head_forward(block, j, Oj)
    E = block.group_E[j]
    targets = block.group_of[j][labels]
    losses, G_h = loss_and_grad(H, targets, E, block.loss_kind)
    pred = np.argmax(normalize_rows(H) @ E.T, axis=1)
    B = len(labels)
    G_z = G_h * leaky_relu_grad(Z, block.head_slope) / B
    dW = G_z.T @ F
    dhb = G_z.sum(axis=0)
    G_F = G_z @ block.head_W[j]
    # back through row normalization of the flattened map
    n = np.linalg.norm(Oj, axis=1, keepdims=True)
    n = np.where(n > 1e-12, n, 1.0)
    G_O = (G_F - np.einsum("ij,ij->i", G_F, F)[:, None] * F) / n
    neg = Yj <= 0
    da = np.sum(G_O * np.where(neg, Yj, 0.0))
    G_Y = np.where(neg, aj * G_O, G_O)
    dK = np.einsum("bp,bpq->q", G_Y, cols)
    db = G_Y.sum()
    return float(losses.mean()), pred, {"dK": dK, "db": db, "da": da, "dW": dW, "dhb": dhb}


def block_step(block: ConvBlock, X: np.ndarray, labels: np.ndarray, training: bool = True):
    """Forward a batch through ``block``; update every kernel and head when training.

    Returns (per-kernel predicted groups (batch, n_kernels), mean loss over
    kernels, block output for the next block).
    """
    Y, cols = conv_pre(X, block.K, block.b, block.spec)
    B = X.shape[0]
    Yf = Y.reshape(B, block.n_kernels, -1)
    ledger = active_ledger()
    if ledger is not None and training:
        ledger.allocate(Yf.size)
    preds = np.empty((B, block.n_kernels), dtype=np.int64)
    losses = np.empty(block.n_kernels)
    grads = {"K": np.empty_like(block.K), "b": np.empty_like(block.b),
             "a": np.empty_like(block.a), "W": np.empty_like(block.head_W),
             "hb": np.empty_like(block.head_b)}
    for j in range(block.n_kernels):
        losses[j], preds[:, j], g = kernel_loss_and_grads(block, j, cols, Yf[:, j], labels)
        grads["K"][j] = g["dK"].reshape(block.K.shape[1:])
        grads["b"][j], grads["a"][j] = g["db"], g["da"]
        grads["W"][j], grads["hb"][j] = g["dW"], g["dhb"]
    if ledger is not None and training:
        P = Yf.shape[2]
        d = block.head_W.shape[1]
        ledger.add_forward(B * block.n_kernels * d * P)
        ledger.add_update(B * block.n_kernels * (cols.shape[1] * cols.shape[2] + d * P))
        ledger.release(Yf.size)
    if training:
        block.kernel_opt.step(block.kernel_params(), {"K": grads["K"], "b": grads["b"], "a": grads["a"]})
        block.head_opt.step(block.head_params(), {"W": grads["W"], "hb": grads["hb"]})
        if not np.all(np.isfinite(block.K)) or not np.all(np.isfinite(block.head_W)):
            raise TrainingDivergedError("non-finite CNN parameters")
    O = prelu(Y, block.a)
    return preds, float(losses.mean()), (max_pool2(O) if block.pool else O)


def kernel_step(block: ConvBlock, j: int, X: np.ndarray, labels, lr: float | None = None,
                training: bool = True):
    """Single-kernel version of :func:`block_step` touching only kernel ``j``."""
    labels = np.atleast_1d(labels)
    Y, cols = conv_pre(X, block.K[j:j + 1], block.b[j:j + 1], block.spec)
    loss, pred, g = kernel_loss_and_grads(block, j, cols, Y.reshape(len(labels), -1), labels)
    if training:
        block.kernel_opt.step(block.kernel_params(),
                              {"K": g["dK"].reshape(block.K.shape[1:]), "b": g["db"], "a": g["da"]},
                              lr=lr, index=j)
        block.head_opt.step(block.head_params(), {"W": g["dW"], "hb": g["dhb"]}, lr=lr, index=j)
    return pred, loss


@dataclass
class SpelaCNN:
    blocks: list
    n_classes: int

    def param_count(self) -> int:
        return sum(b.param_count() for b in self.blocks)

    @classmethod
    def build(cls, in_shape, n_classes: int, channels=(32, 32), kernel_size: int = 5,
              stride: int = 1, padding: int = 2, head_dim: int = 32, m_max: int = 5,
              loss_kind=LossKind.COSINE_LOG, seed: int = 0, lr_kernel: float = 0.1,
              lr_head: float = 0.1, head_slope: float = 0.001, cache_dir=None,
              use_cache: bool = True):
        """Blocks share one list of group assignments; block b uses the first
        ``channels[b]`` entries of it."""
        rng = make_rng(seed)
        C, H, W = in_shape
        assignments = make_group_assignments(max(channels), n_classes, rng, m_max)
        blocks = []
        hw = (H, W)
        for bi, ch in enumerate(channels):
            spec = ConvSpec(C, ch, kernel_size, stride, padding)
            blk = build_block(spec, hw, assignments[:ch], n_classes, rng, head_dim, head_slope,
                              loss_kind, pool=bi < len(channels) - 1, lr_kernel=lr_kernel,
                              lr_head=lr_head, cache_dir=cache_dir, use_cache=use_cache)
            blocks.append(blk)
            C, hw = ch, blk.next_hw
        return cls(blocks, n_classes)

    def predict(self, X: np.ndarray, exit_block: int | None = None) -> tuple:
        """Class prediction and vote tallies at ``exit_block`` (1-based)."""
        exit_block = len(self.blocks) if exit_block is None else exit_block
        if not 1 <= exit_block <= len(self.blocks):
            raise ValueError(f"exit block must be in 1..{len(self.blocks)}")
        H = np.asarray(X, dtype=np.float64)
        with suspended():
            for blk in self.blocks[:exit_block - 1]:
                H = blk.output(H)
            blk = self.blocks[exit_block - 1]
            preds, _, _ = block_step(blk, H, np.zeros(len(H), dtype=np.int64), training=False)
        S = tally_scores(preds, blk.assignments, self.n_classes)
        return np.argmax(S, axis=1), S


def cnn_evaluate(net: SpelaCNN, data: LabeledDataset, batch_size: int = 500) -> list:
    """Per-block (accuracy, mean local loss)."""
    imgs = data.images()
    nb = len(net.blocks)
    correct = np.zeros(nb)
    loss = np.zeros(nb)
    with suspended():
        for s in range(0, len(data), batch_size):
            H = imgs[s:s + batch_size].astype(np.float64)
            y = data.labels[s:s + batch_size]
            for bi, blk in enumerate(net.blocks):
                preds, l, H = block_step(blk, H, y, training=False)
                S = tally_scores(preds, blk.assignments, net.n_classes)
                correct[bi] += np.sum(np.argmax(S, axis=1) == y)
                loss[bi] += l * len(y)
    return [(correct[i] / len(data), loss[i] / len(data)) for i in range(nb)]


@dataclass
class CnnTrainConfig:
    epochs: tuple = (15, 10)
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1
    max_batches: int | None = None


def cnn_train(net: SpelaCNN, data: LabeledDataset, cfg: CnnTrainConfig,
              test: LabeledDataset | None = None, callback=None) -> RunMetrics:
    """Train blocks one after another; earlier blocks stay frozen."""
    if len(cfg.epochs) != len(net.blocks):
        raise ValueError("need an epoch count per block")
    rng = make_rng(cfg.seed + 1_000_003)
    imgs = data.images()
    metrics = RunMetrics(info={"checksums": dict(data.checksums)})
    ledger = active_ledger()
    metrics.ledger = ledger
    n = len(data)
    done = 0
    for bi, (blk, n_epochs) in enumerate(zip(net.blocks, cfg.epochs)):
        for ep in range(n_epochs):
            order = rng.permutation(n)
            correct, loss_sum, seen = 0, 0.0, 0
            for t, s in enumerate(range(0, n, cfg.batch_size)):
                if cfg.max_batches is not None and t >= cfg.max_batches:
                    break
                idx = order[s:s + cfg.batch_size]
                H = imgs[idx].astype(np.float64)
                y = data.labels[idx]
                with suspended():
                    for frozen in net.blocks[:bi]:
                        H = frozen.output(H)
                if ledger is not None:
                    ledger.count_samples(len(idx))
                preds, loss, _ = block_step(blk, H, y, training=True)
                S = tally_scores(preds, blk.assignments, net.n_classes)
                correct += np.sum(np.argmax(S, axis=1) == y)
                loss_sum += loss * len(idx)
                seen += len(idx)
            done += 1
            metrics.add(done, bi + 1, "train", correct / seen, loss_sum / seen)
            if test is not None and (done % cfg.eval_every == 0 or ep + 1 == n_epochs):
                for k, (acc, l) in enumerate(cnn_evaluate(net, test)[:bi + 1]):
                    metrics.add(done, k + 1, "test", acc, l)
            log.info("cnn block %d epoch %d train acc %.4f", bi + 1, ep + 1, correct / seen)
            if callback is not None:
                callback(done, net, metrics)
    return metrics
