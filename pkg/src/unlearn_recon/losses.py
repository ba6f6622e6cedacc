"""Per-sample losses over embedded inputs and their derivatives.

Parameters are always a matrix ``B`` of shape ``(d', c)``: ``c = 1`` for the
scalar losses and ``c = k`` for softmax (and for one-hot ridge). Conventions:

=================  ==========================================  ==================
kind               per-sample loss, ``s = z . B``              Hessian
=================  ==========================================  ==================
ridge              ``sum_j (s_j - y_j)^2``                     ``2 z z^T`` per column
logistic           ``log(1 + e^s) - y s``, ``y in {0,1}``      ``sig(s)(1-sig(s)) z z^T``
svm_squared_hinge  ``max(0, 1 - t s)^2``, ``t in {-1,+1}``     ``2 1[1 - t s >= 0] z z^T``
softmax_ce         ``logsumexp(s) - s_y``                      ``(diag f - f f^T) (x) z z^T``
=================  ==========================================  ==================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

LOSS_KINDS = ("ridge", "logistic", "svm_squared_hinge", "softmax_ce")


@dataclass(frozen=True)
class LossSpec:
    kind: str
    lam: float = 0.0
    n_classes: int = 1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("regularization strength must be >= 0")
        if self.kind == "softmax_ce" and self.n_classes < 2:
            raise ValueError("softmax_ce requires n_classes >= 2")

    @property
    def n_outputs(self) -> int:
        if self.kind == "softmax_ce":
            return self.n_classes
        if self.kind == "ridge" and self.n_classes > 1:
            return self.n_classes
        return 1

    @property
    def averaged(self) -> bool:
        """Iterative losses use the mean over samples; ridge uses the sum."""
        return self.kind != "ridge"


def encode_targets(loss: LossSpec, y: np.ndarray) -> np.ndarray:
    """Targets in the form each loss consumes.

    ridge: float column(s); one-hot when ``n_classes > 1``.
    logistic: 0/1 floats. svm: -1/+1 floats. softmax: int class indices.
    """
    y = np.asarray(y)
    if loss.kind == "ridge":
        if loss.n_classes > 1:
            return np.eye(loss.n_classes)[y.astype(np.int64)]
        return y.astype(np.float64).reshape(-1, 1)
    if loss.kind == "logistic":
        return (y > 0).astype(np.float64)
    if loss.kind == "svm_squared_hinge":
        return np.where(y > 0, 1.0, -1.0)
    return y.astype(np.int64)


def per_sample_losses(loss: LossSpec, B: np.ndarray, Z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Loss of every row; ``t`` already encoded."""
    S = Z @ B
    if loss.kind == "ridge":
        return np.sum((S - t) ** 2, axis=1)
    s = S[:, 0] if loss.kind != "softmax_ce" else None
    if loss.kind == "logistic":
        return np.logaddexp(0.0, s) - t * s
    if loss.kind == "svm_squared_hinge":
        return np.maximum(0.0, 1.0 - t * s) ** 2
    return logsumexp(S, axis=1) - S[np.arange(len(t)), t]


def output_residuals(loss: LossSpec, B: np.ndarray, Z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``dl/ds`` for every row, shape ``(n, c)``; the gradient is ``z (x) dl/ds``."""
    S = Z @ B
    if loss.kind == "ridge":
        return 2.0 * (S - t)
    if loss.kind == "logistic":
        return (expit(S[:, 0]) - t)[:, None]
    if loss.kind == "svm_squared_hinge":
        return (-2.0 * t * np.maximum(0.0, 1.0 - t * S[:, 0]))[:, None]
    R = softmax(S, axis=1)
    R[np.arange(len(t)), t] -= 1.0
    return R


def objective(loss: LossSpec, B: np.ndarray, Z: np.ndarray, t: np.ndarray) -> float:
    """Training objective: data term (mean, or sum for ridge) plus ``lam |B|^2``."""
    data = per_sample_losses(loss, B, Z, t)
    total = data.mean() if loss.averaged else data.sum()
    return float(total + loss.lam * np.sum(B * B))


def objective_gradient(loss: LossSpec, B: np.ndarray, Z: np.ndarray, t: np.ndarray) -> np.ndarray:
    G = Z.T @ output_residuals(loss, B, Z, t)
    if loss.averaged:
        G /= len(Z)
    return G + 2.0 * loss.lam * B


def sample_gradient(loss: LossSpec, B: np.ndarray, z: np.ndarray, t) -> np.ndarray:
    """Gradient of one sample's loss (no regularization), shape ``(d', c)``."""
    z = np.asarray(z, dtype=np.float64)
    r = output_residuals(loss, B, z[None, :], np.asarray(t)[None, ...])
    return np.outer(z, r[0])


def curvature_weights(loss: LossSpec, B: np.ndarray, Z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-sample curvature data.

    logistic: ``D_ii = sig(s)(1 - sig(s))``; svm: ``D_ii = 1[1 - t s >= 0]``;
    softmax: the probability matrix ``F`` ``(n, k)``; ridge: ones.
    """
    S = Z @ B
    if loss.kind == "logistic":
        p = expit(S[:, 0])
        return p * (1.0 - p)
    if loss.kind == "svm_squared_hinge":
        return (1.0 - t * S[:, 0] >= 0).astype(np.float64)
    if loss.kind == "softmax_ce":
        return softmax(S, axis=1)
    return np.ones(len(Z))


# second derivative of the scalar link, multiplying D
CURVATURE_FACTOR = {"ridge": 2.0, "logistic": 1.0, "svm_squared_hinge": 2.0, "softmax_ce": 1.0}


def data_hvp(kind: str, Z: np.ndarray, weights: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Unnormalized ``sum_i H_i V`` for the data term, ``V`` shaped ``(d', c)``."""
    U = Z @ V
    if kind == "softmax_ce":
        F = weights
        R = F * U
        R -= F * R.sum(axis=1, keepdims=True)
    else:
        R = (CURVATURE_FACTOR[kind] * weights)[:, None] * U
    return Z.T @ R
