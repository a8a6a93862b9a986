"""Conventional backpropagation MLP used as the comparison baseline.

Hidden layers use the same leaky ReLU as the SPELA networks; the last layer
is a trainable linear classifier followed by softmax cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .linalg import (batch_affine, binarize_view, he_uniform_init, leaky_relu,
                     leaky_relu_grad, make_rng, normalize_rows)
from .metrics import RunMetrics, TrainingDivergedError
from .mlp import TrainConfig, learning_rate
from .profiler import active_ledger, suspended

log = logging.getLogger(__name__)


@dataclass
class BpNetwork:
    weights: list
    biases: list
    slope: float = 0.001
    dropout: float = 0.0
    binarize: bool = False
    normalize_inputs: bool = False
    use_bias: bool = True
    velocity: list = field(default_factory=list, repr=False)
    # per-layer activations held between the forward and backward pass
    cache: list = field(default_factory=list, repr=False)

    @classmethod
    def build(cls, sizes, seed: int = 0, slope: float = 0.001, dropout: float = 0.0,
              binarize: bool = False, normalize_inputs: bool = False, use_bias: bool = True):
        rng = make_rng(seed)
        Ws = [he_uniform_init(o, i, rng) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(o) for o in sizes[1:]]
        return cls(Ws, bs, slope, dropout, binarize, normalize_inputs, use_bias)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def param_count(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def effective(self, k: int) -> np.ndarray:
        return binarize_view(self.weights[k]) if self.binarize else self.weights[k]

    def forward(self, X: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        """Logits for a batch. In training mode every layer's input,
        pre-activation and dropout mask are kept for the backward pass."""
        ledger = active_ledger()
        self.cache = []
        A = X
        L = len(self.weights)
        for k in range(L):
            A_in = normalize_rows(A) if self.normalize_inputs else A
            Z = batch_affine(self.effective(k), A_in, self.biases[k])
            mask = None
            if k < L - 1:
                A = leaky_relu(Z, self.slope)
                if training and self.dropout > 0:
                    mask = (rng.random(A.shape) >= self.dropout) / (1.0 - self.dropout)
                    A = A * mask
            else:
                A = Z
            if training:
                self.cache.append((A_in, Z, mask, A))
                if ledger is not None:
                    ledger.add_forward(0, k, calls=X.shape[0])
                    ledger.allocate(Z.size)
        return A

    def backward(self, Y_idx: np.ndarray) -> tuple[list, list, float]:
        """Gradients of mean softmax cross-entropy; consumes the forward cache."""
        if len(self.cache) != len(self.weights):
            raise RuntimeError("backward needs the cache of a training forward pass")
        ledger = active_ledger()
        logits = self.cache[-1][1]
        B = logits.shape[0]
        S = logits - logits.max(axis=1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=1, keepdims=True)
        idx = np.arange(B)
        loss = float(-np.log(np.maximum(P[idx, Y_idx], 1e-300)).mean())
        G = P
        G[idx, Y_idx] -= 1.0
        G /= B
        L = len(self.weights)
        gW, gb = [None] * L, [None] * L
        for k in reversed(range(L)):
            A_in, Z, mask, _ = self.cache[k]
            gW[k] = G.T @ A_in
            gb[k] = G.sum(axis=0)
            if ledger is not None:
                n_out, n_in = self.weights[k].shape
                # one outer product per layer, plus one transposed mat-vec
                # for every layer except the final one
                ledger.add_update(B * n_out * n_in * (1 if k == L - 1 else 2))
            if k > 0:
                G = G @ self.effective(k)
                _, Zp, maskp, Ap = self.cache[k - 1]
                if self.normalize_inputs:
                    G = _normalize_backward(Ap, G)
                if maskp is not None:
                    G = G * maskp
                G = G * leaky_relu_grad(Zp, self.slope)
        if ledger is not None:
            ledger.release(sum(c[1].size for c in self.cache))
        self.cache = []
        return gW, gb, loss

    def step(self, gW, gb, lr: float, momentum: float = 0.0) -> None:
        if momentum and not self.velocity:
            self.velocity = [(np.zeros_like(W), np.zeros_like(b))
                             for W, b in zip(self.weights, self.biases)]
        for k in range(len(self.weights)):
            if momentum:
                vW, vb = self.velocity[k]
                vW *= momentum
                vW += gW[k]
                vb *= momentum
                vb += gb[k]
                dW, db = vW, vb
            else:
                dW, db = gW[k], gb[k]
            self.weights[k] -= lr * dW
            if self.use_bias:
                self.biases[k] -= lr * db


def _normalize_backward(A: np.ndarray, G_out: np.ndarray) -> np.ndarray:
    """Chain rule through row-wise x/||x||."""
    n = np.linalg.norm(A, axis=1, keepdims=True)
    n = np.where(n > 1e-12, n, 1.0)
    O = A / n
    return (G_out - np.einsum("ij,ij->i", G_out, O)[:, None] * O) / n


def bp_evaluate(net: BpNetwork, data: LabeledDataset, batch_size: int = 1000, topk: int = 1):
    """(accuracy, mean cross-entropy, top-k accuracy) on ``data``."""
    correct = correct_k = 0
    loss = 0.0
    X_all = data.flat()
    with suspended():
        for s in range(0, len(data), batch_size):
            X = X_all[s:s + batch_size].astype(np.float64)
            y = data.labels[s:s + batch_size]
            logits = net.forward(X)
            S = logits - logits.max(axis=1, keepdims=True)
            logp = S - np.log(np.exp(S).sum(axis=1, keepdims=True))
            loss -= logp[np.arange(len(y)), y].sum()
            correct += np.sum(np.argmax(logits, axis=1) == y)
            if topk > 1:
                top = np.argsort(-logits, axis=1, kind="stable")[:, :topk]
                correct_k += np.sum(np.any(top == y[:, None], axis=1))
    n = len(data)
    return correct / n, loss / n, (correct_k if topk > 1 else correct) / n


def bp_train(net: BpNetwork, data: LabeledDataset, cfg: TrainConfig,
             test: LabeledDataset | None = None, callback=None) -> RunMetrics:
    if data.dim != net.input_dim:
        raise ValueError(f"data dim {data.dim} != network input {net.input_dim}")
    if data.labels.max() >= net.n_classes:
        raise ValueError("label out of range")
    net.dropout = cfg.dropout
    net.binarize = cfg.binarize_weights
    rng = make_rng(cfg.seed + 1_000_003)
    metrics = RunMetrics(info={"checksums": dict(data.checksums)})
    ledger = active_ledger()
    metrics.ledger = ledger
    X_all = data.flat()
    n = len(data)
    L = len(net.weights)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(n)
        correct, loss_sum = 0, 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            X = X_all[idx].astype(np.float64)
            y = data.labels[idx]
            if ledger is not None:
                ledger.count_samples(len(idx))
            logits = net.forward(X, training=True, rng=rng)
            correct += np.sum(np.argmax(logits, axis=1) == y)
            gW, gb, loss = net.backward(y)
            loss_sum += loss * len(idx)
            if lr != 0:
                net.step(gW, gb, lr, cfg.momentum)
            if not all(np.all(np.isfinite(W)) for W in net.weights):
                raise TrainingDivergedError(f"non-finite BP weights at epoch {epoch + 1}")
        metrics.add(epoch + 1, L, "train", correct / n, loss_sum / n)
        if ledger is not None:
            ledger.snapshot(epoch + 1)
        if test is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            acc, tl, _ = bp_evaluate(net, test)
            metrics.add(epoch + 1, L, "test", acc, tl)
        log.info("bp epoch %d lr %.3f train acc %.4f", epoch + 1, lr, correct / n)
        if callback is not None:
            callback(epoch + 1, net, metrics)
    return metrics


def bp_binarized_train(net: BpNetwork, data: LabeledDataset, cfg: TrainConfig,
                       test: LabeledDataset | None = None, callback=None) -> RunMetrics:
    """Straight-through binarized training: latent real weights, sign() forward."""
    cfg = TrainConfig(**{**cfg.__dict__, "binarize_weights": True})
    return bp_train(net, data, cfg, test, callback)
