"""Fixed, public feature maps with an appended bias coordinate.

Two kinds are supported:

* ``identity``: ``phi(x) = (x, 1)``
* ``rff``: ``phi(x)_i = sqrt(2 / D) cos(W_i . x + b_i)`` for ``i < D`` and
  ``phi(x)_D = 1``, with ``D = output_dim - 1``, ``W_ij ~ N(0, gamma^2)`` and
  ``b_i ~ U[0, 2 pi)``. The inner product of the random part approximates the
  Gaussian kernel ``exp(-gamma^2 |x - x'|^2 / 2)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import rng_from_seed

EMBEDDING_MAGIC = b"UREM"
EMBEDDING_VERSION = 1
_KINDS = ("identity", "rff")


@dataclass(frozen=True, eq=False)
class Embedding:
    kind: str
    input_dim: int
    output_dim: int
    frequencies: np.ndarray | None = None
    phases: np.ndarray | None = None
    bandwidth: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "identity":
            if self.output_dim != self.input_dim + 1:
                raise ValueError("identity embedding must have output_dim = input_dim + 1")
            return
        W = np.array(self.frequencies, dtype=np.float64)
        b = np.array(self.phases, dtype=np.float64)
        if W.shape != (self.output_dim - 1, self.input_dim) or b.shape != (self.output_dim - 1,):
            raise ValueError("rff frequencies/phases do not match the declared dimensions")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "frequencies", W)
        object.__setattr__(self, "phases", b)

    @property
    def n_random(self) -> int:
        return self.output_dim - 1

    @property
    def amplitude(self) -> float:
        return float(np.sqrt(2.0 / self.n_random)) if self.kind == "rff" else 1.0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return embed(self, X)

    def to_bytes(self) -> bytes:
        """Serialize as: magic, u32 version, u8 kind, u64 d, u64 d', f64 gamma,
        u64 seed, then (rff only) W row-major and b, all little-endian f64."""
        head = struct.pack(
            "<4sIBQQdQ", EMBEDDING_MAGIC, EMBEDDING_VERSION, _KINDS.index(self.kind),
            self.input_dim, self.output_dim, float(self.bandwidth), int(self.seed),
        )
        if self.kind == "identity":
            return head
        return head + self.frequencies.astype("<f8").tobytes() + self.phases.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> Embedding:
        size = struct.calcsize("<4sIBQQdQ")
        magic, version, kind, d, dp, gamma, seed = struct.unpack("<4sIBQQdQ", raw[:size])
        if magic != EMBEDDING_MAGIC or version != EMBEDDING_VERSION:
            raise ValueError("not a serialized embedding")
        if _KINDS[kind] == "identity":
            return cls("identity", d, dp, bandwidth=gamma, seed=seed)
        D = dp - 1
        W = np.frombuffer(raw, dtype="<f8", count=D * d, offset=size).reshape(D, d)
        b = np.frombuffer(raw, dtype="<f8", count=D, offset=size + 8 * D * d)
        return cls("rff", d, dp, W, b, gamma, seed)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Embedding:
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def identity_embedding(d: int) -> Embedding:
    return Embedding("identity", d, d + 1)


def make_rff(d: int, output_dim: int, bandwidth: float, seed: int = 0) -> Embedding:
    if output_dim < 2:
        raise ValueError("rff output_dim must be >= 2 (random features plus bias)")
    if not bandwidth > 0:
        raise ValueError("rff bandwidth must be > 0")
    rng = rng_from_seed(seed)
    W = bandwidth * rng.standard_normal((output_dim - 1, d))
    b = rng.uniform(0.0, 2.0 * np.pi, size=output_dim - 1)
    return Embedding("rff", d, output_dim, W, b, float(bandwidth), int(seed))


def median_bandwidth(X: np.ndarray, max_samples: int = 1000) -> float:
    """``1 / median`` pairwise Euclidean distance over the first ``max_samples`` rows."""
    X = np.asarray(X, dtype=np.float64)[:max_samples]
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    iu = np.triu_indices(len(X), k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    if not med > 0:
        raise ValueError("median pairwise distance is zero; cannot pick a bandwidth")
    return 1.0 / med


def _check_dim(emb: Embedding, X: np.ndarray) -> None:
    if X.shape[-1] != emb.input_dim:
        raise ValueError(f"expected input dimension {emb.input_dim}, got {X.shape[-1]}")


def embed(emb: Embedding, X: np.ndarray) -> np.ndarray:
    """Map a vector ``(d,)`` or a batch ``(n, d)`` to ``(..., d')``."""
    X = np.asarray(X, dtype=np.float64)
    _check_dim(emb, X)
    if emb.kind == "identity":
        ones = np.ones(X.shape[:-1] + (1,))
        return np.concatenate([X, ones], axis=-1)
    proj = X @ emb.frequencies.T + emb.phases
    out = np.empty(X.shape[:-1] + (emb.output_dim,))
    out[..., :-1] = emb.amplitude * np.cos(proj)
    out[..., -1] = 1.0
    return out


def embed_gradient(emb: Embedding, x: np.ndarray) -> np.ndarray:
    """Jacobian ``d phi / d x`` at a single point, shape ``(d', d)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(emb, x)
    if x.ndim != 1:
        raise ValueError("embed_gradient takes a single feature vector")
    J = np.zeros((emb.output_dim, emb.input_dim))
    if emb.kind == "identity":
        J[:-1] = np.eye(emb.input_dim)
        return J
    s = np.sin(emb.frequencies @ x + emb.phases)
    J[:-1] = -emb.amplitude * s[:, None] * emb.frequencies
    return J
