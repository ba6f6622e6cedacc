"""Matrix-free curvature estimates built from public data.

Only products ``H v`` are ever needed by the attack (never ``H^{-1}``), so the
operators keep the embedded public matrix and the per-sample weights and apply
``Z^T (D (Z v))`` on demand. Small operators are materialized once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .. import losses
from ..models import ModelParams

MATERIALIZE_LIMIT = 512

_KIND_FOR_LOSS = {
    "ridge": "ridge_covariance",
    "logistic": "logistic_weighted",
    "svm_squared_hinge": "svm_weighted",
    "softmax_ce": "softmax_blockwise",
}


@dataclass(eq=False)
class CurvatureOperator:
    """``V -> factor * sum_i H_i V + shift * V`` for ``V`` of shape ``(d', c)``.

    ``factor`` folds in both the normalization (1 or ``1/m``) and the loss's
    second-derivative constant (2 for squared losses).

    ``weights`` is the diagonal ``D`` (logistic/svm), the probability matrix
    (softmax) or ``None`` (ridge covariance). ``shift`` is nonzero only when the
    regularization strength is assumed known.
    """

    kind: str
    Z: np.ndarray
    n_outputs: int
    weights: np.ndarray | None = None
    factor: float = 1.0
    shift: float = 0.0
    normalization: str = "sum"
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.Z) == 0:
            raise ValueError("curvature estimate needs at least one public sample")
        dp = self.Z.shape[1]
        if self.kind != "softmax_blockwise" and dp <= MATERIALIZE_LIMIT:
            w = np.ones(len(self.Z)) if self.weights is None else self.weights
            M = (self.Z * (self.factor * w)[:, None]).T @ self.Z
            M[np.diag_indices_from(M)] += self.shift
            self._dense = M

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        p = self.dim * self.n_outputs
        return p, p

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        V = v.reshape(self.dim, -1)
        if self._dense is not None:
            out = self._dense @ V
        else:
            if self.kind == "softmax_blockwise":
                out = losses.data_hvp("softmax_ce", self.Z, self.weights, V)
            else:
                w = np.ones(len(self.Z)) if self.weights is None else self.weights
                out = self.Z.T @ (w[:, None] * (self.Z @ V))
            out = self.factor * out + self.shift * V
        return out.reshape(v.shape)

    def __matmul__(self, v):
        return self.matvec(v)

    def to_dense(self) -> np.ndarray:
        """Explicit ``(p, p)`` matrix in row-major ``(d', c)`` ordering."""
        p = self.shape[0]
        return np.column_stack([self.matvec(e) for e in np.eye(p)])

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=lambda v: self.matvec(np.ravel(v)),
                              rmatvec=lambda v: self.matvec(np.ravel(v)), dtype=np.float64)


def estimate_covariance(Z_pub: np.ndarray, lam: float = 0.0) -> CurvatureOperator:
    """``C_hat = Z_pub^T Z_pub (+ lam I when lambda is assumed known)``."""
    Z_pub = np.asarray(Z_pub, dtype=np.float64)
    if Z_pub.ndim != 2 or len(Z_pub) == 0:
        raise ValueError("estimate_covariance needs a non-empty (m, d') matrix")
    return CurvatureOperator("ridge_covariance", Z_pub, 1, None, 1.0, float(lam), "sum")


def estimate_hessian(params: ModelParams, Z_pub: np.ndarray, y_pub: np.ndarray,
                     lam: float = 0.0) -> CurvatureOperator:
    """Mean per-sample loss Hessian over the public set, evaluated at ``params``.

    ``lam`` adds the regularizer's curvature (``2 lam`` for averaged losses,
    ``2 lam / m`` for the summed ridge objective); the attack proper uses 0.
    """
    loss = params.loss
    if loss.kind not in _KIND_FOR_LOSS:
        raise ValueError(f"unsupported loss kind {loss.kind!r}")
    Z_pub = np.asarray(Z_pub, dtype=np.float64)
    m = len(Z_pub)
    if m == 0:
        raise ValueError("estimate_hessian needs at least one public sample")
    B = params.weights
    if not np.all(np.isfinite(B)):
        raise ValueError("parameters must be finite")
    kind = _KIND_FOR_LOSS[loss.kind]
    if loss.kind == "ridge":
        return CurvatureOperator(kind, Z_pub, B.shape[1], None, 2.0 / m, 2.0 * lam / m, "mean")
    t = losses.encode_targets(loss, y_pub)
    w = losses.curvature_weights(loss, B, Z_pub, t)
    factor = losses.CURVATURE_FACTOR[loss.kind] / m
    return CurvatureOperator(kind, Z_pub, B.shape[1], w, factor, 2.0 * lam, "mean")
