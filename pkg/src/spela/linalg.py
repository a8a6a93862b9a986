"""Dense numeric helpers shared by every training path.

Everything is float64. Vectors are 1-D arrays; batches of vectors are 2-D
arrays with one sample per row.
"""

from __future__ import annotations

import numpy as np

from .profiler import active_ledger

EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator (counter-based, platform independent)."""
    return np.random.Generator(np.random.Philox(int(seed)))


def matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ValueError(f"matvec shape mismatch: W{W.shape} x{x.shape}")
    ledger = active_ledger()
    if ledger is not None:
        ledger.add_forward(W.shape[0] * W.shape[1])
    return W @ x


def batch_affine(W: np.ndarray, X: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Row-wise ``W @ x + b`` for every sample row of ``X``.

    Counts ``batch * out * in`` forward MACCs on the active ledger.
    """
    if X.ndim != 2 or W.shape[1] != X.shape[1]:
        raise ValueError(f"affine shape mismatch: W{W.shape} X{X.shape}")
    ledger = active_ledger()
    if ledger is not None:
        ledger.add_forward(X.shape[0] * W.shape[0] * W.shape[1])
    Z = X @ W.T
    if b is not None:
        Z += b
    return Z


def normalize(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """L2-normalize a vector; vectors with norm <= eps are returned unchanged."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x)
    if n <= eps:
        return x.copy()
    return x / n


def normalize_rows(X: np.ndarray, eps: float = EPS) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.where(n > eps, X / np.where(n > eps, n, 1.0), X)


def cos_sim(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cos_sim shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise ValueError("cos_sim of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    if slope < 0:
        raise ValueError("slope must be non-negative")
    return np.where(z > 0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float) -> np.ndarray:
    if slope < 0:
        raise ValueError("slope must be non-negative")
    return np.where(z > 0, 1.0, slope)


def he_uniform_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on [-sqrt(6/fan_in), sqrt(6/fan_in)] with fan_in = cols."""
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be positive")
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def binarize_view(W: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(W) >= 0, 1.0, -1.0)
