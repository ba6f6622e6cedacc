"""Recover an input whose embedding best matches a reconstructed embedding."""

from __future__ import annotations

import numpy as np

from ..embeddings import Embedding, embed


def _residual_and_grad(emb: Embedding, target: np.ndarray, x: np.ndarray):
    """``f = |target - phi(x)|^2`` and its gradient ``-2 J^T (target - phi(x))``,
    without forming the Jacobian."""
    proj = emb.frequencies @ x + emb.phases
    r = target[:-1] - emb.amplitude * np.cos(proj)
    f = float(r @ r + (target[-1] - 1.0) ** 2)
    g = 2.0 * emb.amplitude * (emb.frequencies.T @ (np.sin(proj) * r))
    return f, g


def _projected_descent(emb, target, x0, lower, upper, max_iter, tol):
    x = np.clip(x0, lower, upper)
    f, g = _residual_and_grad(emb, target, x)
    step = 1.0
    x_prev = g_prev = None
    for _ in range(max_iter):
        if x_prev is not None:
            s, yv = x - x_prev, g - g_prev
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy  # Barzilai-Borwein trial step
        while True:
            x_new = np.clip(x - step * g, lower, upper)
            dx = x_new - x
            f_new, g_new = _residual_and_grad(emb, target, x_new)
            if f_new <= f + 1e-4 * float(g @ dx):
                break
            step *= 0.5
            if step < 1e-20:
                return x, f
        x_prev, g_prev = x, g
        x, f, g = x_new, f_new, g_new
        if np.max(np.abs(dx)) <= tol * (1.0 + np.max(np.abs(x))) or f <= 1e-30:
            break
    return x, f


def invert_embedding(z_tilde: np.ndarray, embedding: Embedding, X_pub: np.ndarray, *,
                     extra_starts=(), n_starts: int = 8, max_iter: int = 1000,
                     tol: float = 1e-12, Z_pub: np.ndarray | None = None,
                     bounds: tuple[float, float] = (-1.0, 1.0)) -> tuple[np.ndarray, float]:
    """Minimize ``|z_tilde - phi(x)|`` over the box by projected gradient descent.

    Starts from the ``n_starts`` public rows whose embeddings are nearest to
    ``z_tilde`` plus any ``extra_starts``; returns the best ``x`` and its
    residual norm. An identity embedding is inverted directly.
    """
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    if embedding.kind == "identity":
        x = z_tilde[: embedding.input_dim].copy()
        return x, float(np.linalg.norm(z_tilde - embed(embedding, x)))
    X_pub = np.asarray(X_pub, dtype=np.float64)
    if Z_pub is None:
        Z_pub = embed(embedding, X_pub)
    dist = np.sum((Z_pub - z_tilde) ** 2, axis=1)
    nearest = np.argsort(dist, kind="stable")[:n_starts]
    starts = [X_pub[i] for i in nearest] + [np.asarray(s, dtype=np.float64) for s in extra_starts]

    best_x, best_f = None, np.inf
    for x0 in starts:
        x, f = _projected_descent(embedding, z_tilde, x0, bounds[0], bounds[1], max_iter, tol)
        if f < best_f:
            best_x, best_f = x, f
    return best_x, float(np.sqrt(best_f))
