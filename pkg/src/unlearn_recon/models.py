"""Model zoo training, exact unlearning by retraining, and the rank-one oracle."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.special import expit, softmax

from . import losses
from .datasets import Dataset, SplitSpec, split_private_public
from .embeddings import Embedding, embed
from .losses import LossSpec

MODEL_MAGIC = b"URMP"
MODEL_VERSION = 1
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


class SingularDowndateWarning(RuntimeWarning):
    """The downdated covariance is singular; a pseudoinverse was used."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Trained parameters ``(d', c)``; the last row multiplies the bias coordinate."""

    weights: np.ndarray
    loss: LossSpec
    embedding_hash: str = ""

    def __post_init__(self):
        W = np.array(self.weights, dtype=np.float64)
        if W.ndim == 1:
            W = W[:, None]
        if W.shape[1] != self.loss.n_outputs:
            raise ValueError(f"weights have {W.shape[1]} columns, loss expects {self.loss.n_outputs}")
        if not np.all(np.isfinite(W)):
            raise ValueError("model weights must be finite")
        W.flags.writeable = False
        object.__setattr__(self, "weights", W)

    def to_bytes(self) -> bytes:
        """Little-endian: magic, u32 version, u8 loss kind, u32 n_classes,
        f64 lambda, u64 rows, u64 cols, 64-byte hex embedding digest, then
        the weights row-major as f64."""
        digest = self.embedding_hash.encode("ascii").ljust(64, b"\0")[:64]
        head = struct.pack(
            "<4sIBIdQQ", MODEL_MAGIC, MODEL_VERSION, losses.LOSS_KINDS.index(self.loss.kind),
            self.loss.n_classes, self.loss.lam, *self.weights.shape,
        )
        return head + digest + self.weights.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> ModelParams:
        size = struct.calcsize("<4sIBIdQQ")
        magic, version, kind, k, lam, rows, cols = struct.unpack("<4sIBIdQQ", raw[:size])
        if magic != MODEL_MAGIC or version != MODEL_VERSION:
            raise ValueError("not a serialized model")
        digest = raw[size:size + 64].rstrip(b"\0").decode("ascii")
        W = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=size + 64).reshape(rows, cols)
        return cls(W, LossSpec(losses.LOSS_KINDS[kind], lam, k), digest)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> ModelParams:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class TrainReport:
    objective: float
    grad_max_norm: float
    iterations: int
    status: str  # "converged" | "max_iter" | "stalled" | "closed_form"

    @property
    def converged(self) -> bool:
        return self.status in ("converged", "closed_form")


# --------------------------------------------------------------------------
# Ridge (closed form)
# --------------------------------------------------------------------------


def ridge_covariance(Z: np.ndarray, lam: float) -> np.ndarray:
    """``C = Z^T Z + lam I``."""
    C = Z.T @ Z
    C[np.diag_indices_from(C)] += lam
    return C


def train_ridge(Z: np.ndarray, y: np.ndarray, lam: float, n_classes: int = 1,
                embedding_hash: str = "") -> ModelParams:
    """Minimize ``|Z B - y|^2 + lam |B|^2``; ``lam == 0`` takes the
    minimum-norm (Moore-Penrose) solution."""
    Z = np.asarray(Z, dtype=np.float64)
    loss = LossSpec("ridge", lam, n_classes)
    t = losses.encode_targets(loss, y)
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(t))):
        raise ValueError("ridge inputs must be finite")
    if lam == 0:
        B = np.linalg.lstsq(Z, t, rcond=None)[0]
    else:
        B = scipy.linalg.solve(ridge_covariance(Z, lam), Z.T @ t, assume_a="pos")
    return ModelParams(B, loss, embedding_hash)


# --------------------------------------------------------------------------
# Iterative losses: damped Newton
# --------------------------------------------------------------------------


def _dense_hessian(loss: LossSpec, Z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, dp = Z.shape
    if loss.kind == "softmax_ce":
        F = weights
        k = F.shape[1]
        # block (j, l) is Z^T diag(F_j 1[j=l] - F_j F_l) Z, row-major (d', k) layout
        H4 = np.empty((dp, k, dp, k))
        for j in range(k):
            for l in range(j, k):
                w = F[:, j] * ((j == l) - F[:, l])
                block = (Z * w[:, None]).T @ Z
                H4[:, j, :, l] = block
                H4[:, l, :, j] = block
        H = H4.reshape(dp * k, dp * k)
    else:
        H = (Z * (losses.CURVATURE_FACTOR[loss.kind] * weights)[:, None]).T @ Z
    H /= n
    H[np.diag_indices_from(H)] += 2.0 * loss.lam
    return H


class _KroneckerPreconditioner:
    """Approximate ``H ~ (Z^T Z / n) (x) A_bar + 2 lam I`` and invert it in the
    eigenbases of both factors. ``Z^T Z`` is factored once via a thin SVD."""

    def __init__(self, Z: np.ndarray, lam: float):
        n = Z.shape[0]
        _, s, Vt = np.linalg.svd(Z, full_matrices=False)
        self.V = Vt.T
        self.s2 = s * s / n
        self.reg = 2.0 * lam
        self.full_rank = self.V.shape[1] == Z.shape[1]

    def update(self, A_bar: np.ndarray) -> None:
        sa, self.Ua = np.linalg.eigh(A_bar)
        self.den = np.outer(self.s2, np.maximum(sa, 0.0)) + self.reg
        self.den[self.den <= 0] = np.inf

    def __call__(self, R: np.ndarray) -> np.ndarray:
        VR = self.V.T @ R
        out = self.V @ (((VR @ self.Ua) / self.den) @ self.Ua.T)
        if not self.full_rank and self.reg > 0:
            out += (R - self.V @ VR) / self.reg
        return out


def _pcg(hvp, rhs: np.ndarray, precond, rtol: float, max_iter: int) -> np.ndarray:
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = precond(r)
    p = z.copy()
    rz = np.sum(r * z)
    target = rtol * np.linalg.norm(rhs)
    for _ in range(max_iter):
        Hp = hvp(p)
        curv = np.sum(p * Hp)
        if curv <= 0:
            break
        a = rz / curv
        x += a * p
        r -= a * Hp
        if np.linalg.norm(r) <= target:
            break
        z = precond(r)
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _newton_direction(loss, Z, B, G, weights, precond, dense_limit):
    n = Z.shape[0]
    p = G.size
    if p <= dense_limit:
        H = _dense_hessian(loss, Z, weights)
        g = G.ravel()
        try:
            step = -scipy.linalg.solve(H, g, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        return step.reshape(G.shape)

    if loss.kind == "softmax_ce":
        F = weights
        A_bar = np.diag(F.mean(axis=0)) - F.T @ F / n
    else:
        A_bar = np.array([[np.mean(losses.CURVATURE_FACTOR[loss.kind] * weights)]])
    precond.update(A_bar)

    def hvp(V):
        return losses.data_hvp(loss.kind, Z, weights, V) / n + 2.0 * loss.lam * V

    gnorm = np.linalg.norm(G)
    rtol = min(0.5, math.sqrt(gnorm)) if gnorm < 1 else 0.5
    return _pcg(hvp, -G, precond, rtol=max(rtol, 1e-12), max_iter=min(p, 2000))


def train_iterative(Z: np.ndarray, y: np.ndarray, loss: LossSpec, *, tol: float = 1e-9,
                    max_iter: int = 500, embedding_hash: str = "",
                    dense_limit: int = 1024) -> tuple[ModelParams, TrainReport]:
    """Damped Newton with Armijo backtracking from ``B = 0``.

    Minimizes ``mean_i l(B; z_i, y_i) + lam |B|^2`` until the gradient
    max-norm is ``<= tol``. Problems with more than ``dense_limit`` parameters
    solve the Newton system matrix-free with preconditioned CG.
    """
    if loss.kind == "ridge":
        raise ValueError("ridge is trained in closed form; use train_ridge")
    Z = np.asarray(Z, dtype=np.float64)
    t = losses.encode_targets(loss, y)
    B = np.zeros((Z.shape[1], loss.n_outputs))
    precond = _KroneckerPreconditioner(Z, loss.lam) if B.size > dense_limit else None

    f = losses.objective(loss, B, Z, t)
    G = losses.objective_gradient(loss, B, Z, t)
    status = "max_iter"
    it = 0
    for it in range(max_iter + 1):
        gmax = float(np.abs(G).max())
        if gmax <= tol:
            status = "converged"
            break
        if it == max_iter:
            break
        weights = losses.curvature_weights(loss, B, Z, t)
        P = _newton_direction(loss, Z, B, G, weights, precond, dense_limit)
        slope = float(np.sum(G * P))
        if not slope < 0:
            P, slope = -G, -float(np.sum(G * G))

        step = 1.0
        while True:
            B_new = B + step * P
            f_new = losses.objective(loss, B_new, Z, t)
            if f_new <= f + 1e-4 * step * slope:
                G_new = losses.objective_gradient(loss, B_new, Z, t)
                break
            if step == 1.0 and abs(f_new - f) <= 1e-12 * max(1.0, abs(f)):
                # objective change is below roundoff: judge the step by the gradient
                G_new = losses.objective_gradient(loss, B_new, Z, t)
                if np.abs(G_new).max() < gmax:
                    break
            step *= 0.5
            if step < 1e-12:
                B_new = None
                break
        if B_new is None:
            status = "stalled"
            break
        B, f, G = B_new, f_new, G_new

    report = TrainReport(f, float(np.abs(G).max()), it, status)
    return ModelParams(B, loss, embedding_hash), report


def train(Z: np.ndarray, y: np.ndarray, loss: LossSpec, *, embedding_hash: str = "",
          **kwargs) -> tuple[ModelParams, TrainReport]:
    """Dispatch on the loss kind; ridge returns a closed-form report."""
    if loss.kind == "ridge":
        params = train_ridge(Z, y, loss.lam, loss.n_classes, embedding_hash)
        t = losses.encode_targets(loss, y)
        G = losses.objective_gradient(loss, params.weights, Z, t)
        f = losses.objective(loss, params.weights, Z, t)
        return params, TrainReport(f, float(np.abs(G).max()), 0, "closed_form")
    return train_iterative(Z, y, loss, embedding_hash=embedding_hash, **kwargs)


# --------------------------------------------------------------------------
# Unlearning
# --------------------------------------------------------------------------


def retrain_without(Z: np.ndarray, y: np.ndarray, index: int, loss: LossSpec, **kwargs):
    """Full retraining on the embedded private set minus row ``index``."""
    n = len(Z)
    if not 0 <= index < n:
        raise IndexError(f"deletion index {index} out of range for n={n}")
    if n < 2:
        raise ValueError("cannot delete the only remaining sample")
    keep = np.arange(n) != index
    return train(Z[keep], np.asarray(y)[keep], loss, **kwargs)


def unlearn_exact(private: Dataset, index: int, loss: LossSpec, embedding: Embedding,
                  **kwargs) -> ModelParams:
    """Retrain from scratch without sample ``index``, same loss and lambda."""
    Z = embed(embedding, private.features)
    params, _ = retrain_without(Z, private.targets, index, loss,
                                embedding_hash=embedding.digest(), **kwargs)
    return params


def sherman_morrison_unlearn(beta_plus: np.ndarray, C: np.ndarray, x: np.ndarray,
                             y) -> np.ndarray:
    """Ridge parameters after removing ``(x, y)`` without retraining.

    Solves ``(C - x x^T) beta_minus = C beta_plus - x y`` (``C beta_plus`` is
    ``Z^T y``) through the rank-one downdate of ``C^{-1}``. If the downdated
    matrix is singular, falls back to a pseudoinverse and warns with
    :class:`SingularDowndateWarning`.
    """
    beta_plus = np.asarray(beta_plus, dtype=np.float64)
    vector = beta_plus.ndim == 1
    Bp = beta_plus[:, None] if vector else beta_plus
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    residual = y - x @ Bp  # (c,)
    try:
        u = scipy.linalg.cho_solve(scipy.linalg.cho_factor(C), x)
        h = float(x @ u)
        if 1.0 - h <= 1e-10:
            raise np.linalg.LinAlgError("downdate is singular")
        Bm = Bp - np.outer(u, residual) / (1.0 - h)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        warnings.warn("singular downdate; using the Moore-Penrose inverse",
                      SingularDowndateWarning, stacklevel=2)
        Bm = np.linalg.pinv(C - np.outer(x, x), hermitian=True) @ (C @ Bp - np.outer(x, y))
    return Bm[:, 0] if vector else Bm


# --------------------------------------------------------------------------
# Prediction and model selection
# --------------------------------------------------------------------------


def predict(params: ModelParams, embedding: Embedding, x: np.ndarray) -> np.ndarray:
    """ridge: score(s); logistic: P(y=1); svm: margin; softmax: probability vector."""
    S = embed(embedding, x) @ params.weights
    kind = params.loss.kind
    if kind == "softmax_ce":
        return softmax(S, axis=-1)
    if params.weights.shape[1] > 1:
        return S
    s = S[..., 0]
    return expit(s) if kind == "logistic" else s


def predict_class(params: ModelParams, embedding: Embedding, x: np.ndarray) -> np.ndarray:
    out = predict(params, embedding, x)
    if out.ndim == np.ndim(x):  # one score per class
        return np.argmax(out, axis=-1)
    threshold = 0.0 if params.loss.kind == "svm_squared_hinge" else 0.5
    return (out > threshold).astype(np.int64)


def select_lambda(private: Dataset, embedding: Embedding, loss: LossSpec,
                  grid=LAMBDA_GRID, holdout_fraction: float = 0.2, seed: int = 0,
                  **train_kwargs) -> float:
    """Pick lambda on a seeded holdout of the private set (accuracy, or
    negative MSE for regression). Ties go to the earlier grid entry."""
    fit, hold = split_private_public(private, SplitSpec(holdout_fraction, seed))
    Z = embed(embedding, fit.features)
    best, best_score = None, -np.inf
    for lam in grid:
        spec = LossSpec(loss.kind, float(lam), loss.n_classes)
        params, _ = train(Z, fit.targets, spec, **train_kwargs)
        if private.task == "regression":
            score = -float(np.mean((predict(params, embedding, hold.features) - hold.targets) ** 2))
        else:
            score = float(np.mean(predict_class(params, embedding, hold.features) == hold.targets))
        if score > best_score:
            best, best_score = float(lam), score
    return best
