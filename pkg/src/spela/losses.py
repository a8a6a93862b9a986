"""Layer-local losses against fixed embedding vectors and their closed-form
gradients with respect to the layer activation."""

from __future__ import annotations

import enum

import numpy as np

from .linalg import EPS
from .profiler import active_ledger

ARCCOS_CLIP = 1.0 - 1e-12


class LossKind(enum.Enum):
    COSINE_LOG = "cosine_log"
    ANGULAR_LOG = "angular_log"
    EUCLIDEAN = "euclidean"
    NORMALIZED_EUCLIDEAN = "normalized_euclidean"
    CROSS_ENTROPY_HEAD = "cross_entropy_head"

    @property
    def angle_based(self) -> bool:
        return self is not LossKind.EUCLIDEAN


def _unit(H):
    norms = np.linalg.norm(H, axis=1)
    alive = norms > EPS
    O = np.zeros_like(H)
    O[alive] = H[alive] / norms[alive, None]
    return O, norms, alive


def _through_normalization(O, norms, alive, G_o):
    """Map dL/do to dL/dh for o = h/||h||: (I - o o^T) g_o / ||h||."""
    G_h = np.zeros_like(G_o)
    proj = G_o - np.einsum("ij,ij->i", G_o, O)[:, None] * O
    G_h[alive] = proj[alive] / norms[alive, None]
    return G_h


def head_logits_batch(H: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Cosine similarity of every activation row against every embedding row."""
    O, _, alive = _unit(H)
    if not np.all(alive):
        raise ValueError("head logits of a zero-norm activation are undefined")
    ledger = active_ledger()
    if ledger is not None:
        ledger.add_head(H.shape[0] * E.shape[0] * E.shape[1])
    return np.clip(O @ E.T, -1.0, 1.0)


def loss_and_grad(H: np.ndarray, labels: np.ndarray, E: np.ndarray, kind: LossKind,
                  strict: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample local losses and dL/dh for a batch of activations.

    ``H`` is (batch, dim), ``E`` the (N, dim) unit embedding matrix and
    ``labels`` the target row of ``E`` for each sample. Rows of ``H`` with
    zero norm get zero gradient under angle-based losses, or raise when
    ``strict`` is set.
    """
    H = np.asarray(H, dtype=np.float64)
    labels = np.asarray(labels)
    V = E[labels]
    kind = LossKind(kind)

    if kind is LossKind.EUCLIDEAN:
        R = H - V
        d = np.linalg.norm(R, axis=1)
        G = np.where(d[:, None] > 0, R / np.where(d > 0, d, 1.0)[:, None], 0.0)
        return d, G

    O, norms, alive = _unit(H)
    if strict and not np.all(alive):
        raise ValueError(f"{kind.value} loss is undefined for a zero-norm activation")

    if kind is LossKind.COSINE_LOG:
        c = np.clip(np.einsum("ij,ij->i", O, V), -1.0, 1.0)
        loss = np.log(2.0 - c)
        G_o = (-1.0 / (2.0 - c))[:, None] * V
    elif kind is LossKind.ANGULAR_LOG:
        c = np.clip(np.einsum("ij,ij->i", O, V), -ARCCOS_CLIP, ARCCOS_CLIP)
        s = 1.0 - np.arccos(c) / np.pi
        loss = np.log(2.0 - s)
        ds_dc = 1.0 / (np.pi * np.sqrt(1.0 - c * c))
        G_o = (-ds_dc / (2.0 - s))[:, None] * V
    elif kind is LossKind.NORMALIZED_EUCLIDEAN:
        R = O - V
        d = np.linalg.norm(R, axis=1)
        loss = d
        G_o = np.where(d[:, None] > 0, R / np.where(d > 0, d, 1.0)[:, None], 0.0)
    elif kind is LossKind.CROSS_ENTROPY_HEAD:
        ledger = active_ledger()
        if ledger is not None:
            ledger.add_head(H.shape[0] * E.shape[0] * E.shape[1])
        S = O @ E.T
        S -= S.max(axis=1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=1, keepdims=True)
        idx = np.arange(len(labels))
        loss = -np.log(P[idx, labels])
        P[idx, labels] -= 1.0
        G_o = P @ E
    else:  # pragma: no cover
        raise ValueError(kind)

    return loss, _through_normalization(O, norms, alive, G_o)


def local_loss(h: np.ndarray, target: np.ndarray, kind: LossKind,
               embeddings: np.ndarray | None = None, label: int | None = None) -> float:
    """Loss of a single activation vector against its target embedding.

    The cross-entropy head needs the full embedding matrix and the label;
    the other kinds only look at ``target``.
    """
    kind = LossKind(kind)
    h = np.asarray(h, dtype=np.float64)[None, :]
    if kind is LossKind.CROSS_ENTROPY_HEAD:
        if embeddings is None or label is None:
            raise ValueError("cross-entropy head loss needs the embedding matrix and label")
        E, lab = np.asarray(embeddings), np.array([label])
    else:
        E, lab = np.asarray(target, dtype=np.float64)[None, :], np.array([0])
    if E.shape[1] != h.shape[1]:
        raise ValueError("activation and embedding dimensions differ")
    loss, _ = loss_and_grad(h, lab, E, kind, strict=True)
    return float(loss[0])
