"""Fixed class-embedding vectors on the unit hypersphere.

Symmetric sets come from an electron-repulsion simulation: every point is
pushed along the net inverse-square force from all others and then put back
on the sphere, until the relative change of the 1/r energy drops below a
tolerance.
"""

from __future__ import annotations

import enum
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import make_rng, normalize_rows

log = logging.getLogger(__name__)

SPEV_MAGIC = b"SPEV"
_SPEV_HEADER = struct.Struct("<4sIIQ")


class Provenance(enum.Enum):
    SYMMETRIC = "symmetric"
    RAND_NORMAL = "rand_normal"
    RAND_UNIFORM = "rand_uniform"


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    step_size: float = 0.1
    energy_rel_tolerance: float = 1e-9
    max_iterations: int = 100_000
    rng_seed: int = 0
    max_halvings: int = 20
    # accepted steps grow by this factor so convergence doesn't stall on a
    # step that was halved early
    step_growth: float = 1.2

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.energy_rel_tolerance <= 0:
            raise ValueError("energy_rel_tolerance must be positive")


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    provenance: Provenance = Provenance.SYMMETRIC
    seed: int = 0
    tolerance: float = 0.0
    converged: bool = True
    initial_energy: float = float("nan")
    iterations: int = 0
    energy_trace: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"embedding set needs N >= 2 vectors of dim >= 2, got {v.shape}")
        if not np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9):
            raise ValueError("embedding vectors must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.vectors[i]

    @property
    def key(self) -> tuple:
        return (self.provenance.value, self.n_vectors, self.dim, self.seed, self.tolerance)


def _pair_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def energy_of(X: np.ndarray) -> float:
    """Sum over ordered pairs u != v of 1/||u - v||."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    iu = np.triu_indices(n, 1)
    diff = X[iu[0]] - X[iu[1]]
    d = np.linalg.norm(diff, axis=1)
    if np.any(d <= 1e-15):
        raise ValueError("coincident vectors have infinite energy")
    return float(2.0 * np.sum(1.0 / d))


def energy(e: EmbeddingSet) -> float:
    return energy_of(e.vectors)


def _forces(X: np.ndarray) -> np.ndarray:
    d = _pair_distances(X)
    np.fill_diagonal(d, np.inf)
    w = 1.0 / d**3
    F = w.sum(axis=1)[:, None] * X - w @ X
    # keep only the tangential component; the radial part is undone by the
    # re-projection anyway
    return F - np.einsum("ij,ij->i", F, X)[:, None] * X


def generate_symmetric(n: int, dim: int, cfg: SimulationConfig | None = None,
                       record: bool = False) -> EmbeddingSet:
    cfg = cfg or SimulationConfig()
    if n < 2 or dim < 2:
        raise ValueError("need n >= 2 and dim >= 2")
    rng = make_rng(cfg.rng_seed)
    X = normalize_rows(rng.standard_normal((n, dim)))
    E = energy_of(X)
    E0 = E
    trace = [E] if record else None
    step = cfg.step_size
    converged = False
    it = 0
    while it < cfg.max_iterations:
        it += 1
        F = _forces(X)
        fmax = np.max(np.linalg.norm(F, axis=1))
        if fmax == 0.0:
            converged = True
            break
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            Xn = normalize_rows(X + (step / fmax) * F)
            En = energy_of(Xn)
            if En <= E:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no descent direction left at floating point resolution
            converged = True
            break
        rel = (E - En) / E
        X, E = Xn, En
        if record:
            trace.append(E)
        step *= cfg.step_growth
        if rel < cfg.energy_rel_tolerance:
            converged = True
            break
    if not converged:
        warnings.warn(f"symmetric embedding ({n}x{dim}) did not converge in "
                      f"{cfg.max_iterations} iterations", ConvergenceWarning)
    log.debug("symmetric embedding n=%d dim=%d: energy %.6g -> %.6g in %d iterations",
              n, dim, E0, E, it)
    return EmbeddingSet(X, Provenance.SYMMETRIC, cfg.rng_seed, cfg.energy_rel_tolerance,
                        converged, E0, it, tuple(trace) if record else ())


def generate_random(n: int, dim: int, kind: Provenance | str, rng: np.random.Generator,
                    seed: int = 0) -> EmbeddingSet:
    kind = Provenance(kind)
    if n < 2 or dim < 2:
        raise ValueError("need n >= 2 and dim >= 2")
    if kind is Provenance.RAND_NORMAL:
        X = rng.standard_normal((n, dim))
    elif kind is Provenance.RAND_UNIFORM:
        X = rng.uniform(-1.0, 1.0, size=(n, dim))
    else:
        raise ValueError("generate_random needs a random provenance")
    return EmbeddingSet(normalize_rows(X), kind, seed)


def write_spev(path, e: EmbeddingSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_SPEV_HEADER.pack(SPEV_MAGIC, e.n_vectors, e.dim, e.seed))
        f.write(np.ascontiguousarray(e.vectors, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_spev(path) -> tuple[np.ndarray, int]:
    """Return (vectors, seed) from an SPEV file."""
    raw = Path(path).read_bytes()
    if len(raw) < _SPEV_HEADER.size:
        raise ValueError("truncated SPEV file")
    magic, n, dim, seed = _SPEV_HEADER.unpack_from(raw)
    if magic != SPEV_MAGIC:
        raise ValueError(f"bad SPEV magic {magic!r}")
    body = raw[_SPEV_HEADER.size:]
    if len(body) != n * dim * 8:
        raise ValueError("SPEV payload size does not match header")
    return np.frombuffer(body, dtype="<f8").reshape(n, dim).astype(np.float64), seed


def default_cache_dir() -> Path:
    env = os.environ.get("SPELA_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "spela" / "embeddings"


def cache_path(n: int, dim: int, seed: int, tol: float, cache_dir=None) -> Path:
    base = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    return base / f"sym_n{n}_d{dim}_s{seed}_t{tol:g}.spev"


def symmetric_cached(n: int, dim: int, seed: int = 0, tol: float = 1e-9, cache_dir=None,
                     use_cache: bool = True) -> tuple[EmbeddingSet, bool]:
    """Symmetric set for (n, dim, seed, tol), read from or written to the disk cache.

    Returns the set and whether it was a cache hit.
    """
    path = cache_path(n, dim, seed, tol, cache_dir)
    if use_cache and path.exists():
        X, _ = read_spev(path)
        return EmbeddingSet(X, Provenance.SYMMETRIC, seed, tol), True
    e = generate_symmetric(n, dim, SimulationConfig(energy_rel_tolerance=tol, rng_seed=seed))
    if use_cache:
        write_spev(path, e)
    return e, False


def make_embeddings(n: int, dim: int, kind: Provenance | str = Provenance.SYMMETRIC,
                    seed: int = 0, tol: float = 1e-9, cache_dir=None,
                    use_cache: bool = True) -> EmbeddingSet:
    """Build an embedding set from its identifying key."""
    kind = Provenance(kind)
    if kind is Provenance.SYMMETRIC:
        return symmetric_cached(n, dim, seed, tol, cache_dir, use_cache)[0]
    return generate_random(n, dim, kind, make_rng(seed), seed=seed)
