"""Public-data baselines: the public mean, and the public sample whose
prediction changes most between the two models."""

from __future__ import annotations

import numpy as np

from .embeddings import Embedding, embed


def _weights(beta) -> np.ndarray:
    W = getattr(beta, "weights", beta)
    W = np.asarray(W, dtype=np.float64)
    return W[:, None] if W.ndim == 1 else W


def avg_baseline(X_pub: np.ndarray) -> np.ndarray:
    X_pub = np.asarray(X_pub, dtype=np.float64)
    if X_pub.ndim != 2 or len(X_pub) == 0:
        raise ValueError("avg baseline needs a non-empty public set")
    return X_pub.mean(axis=0)


def maxdiff_scores(X_pub, beta_plus, beta_minus, embedding: Embedding,
                   Z_pub: np.ndarray | None = None) -> np.ndarray:
    """``|phi(x)^T (B+ - B-)|`` per public row, Euclidean across classes."""
    if Z_pub is None:
        Z_pub = embed(embedding, X_pub)
    return np.linalg.norm(Z_pub @ (_weights(beta_plus) - _weights(beta_minus)), axis=1)


def maxdiff_index(X_pub, beta_plus, beta_minus, embedding: Embedding,
                  Z_pub: np.ndarray | None = None) -> int:
    if len(X_pub) == 0:
        raise ValueError("maxdiff baseline needs a non-empty public set")
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(maxdiff_scores(X_pub, beta_plus, beta_minus, embedding, Z_pub)))


def maxdiff_baseline(X_pub, beta_plus, beta_minus, embedding: Embedding,
                     Z_pub: np.ndarray | None = None) -> np.ndarray:
    X_pub = np.asarray(X_pub, dtype=np.float64)
    return X_pub[maxdiff_index(X_pub, beta_plus, beta_minus, embedding, Z_pub)].copy()
