"""Reconstruction of a deleted sample from a before/after parameter pair.

The parameter difference times a curvature estimate is proportional to the
deleted sample's loss gradient, ``n H (B+ - B-) ~ -grad l(B+; x, y)``, and for
linear models that gradient is ``z (x) r`` for some output residual ``r``.
Dividing by the bias coordinate of ``z`` (always 1) removes the unknown scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..baselines import maxdiff_baseline
from ..embeddings import Embedding, embed
from ..losses import LossSpec
from ..models import ModelParams
from .curvature import CurvatureOperator, estimate_covariance, estimate_hessian
from .inversion import invert_embedding

NO_UPDATE_TOL = 1e-12
DEGENERATE_BIAS_TOL = 1e-12


class AttackError(Exception):
    """Base class; ``stage`` names the pipeline step that failed."""

    def __init__(self, message: str, stage: str = ""):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class NoUpdateError(AttackError):
    pass


class DegenerateBiasError(AttackError):
    pass


class LabelUndeterminedError(AttackError):
    pass


@dataclass
class Reconstruction:
    """Output of an attack.

    ``direction`` is the raw ``(d', c)`` curvature-times-difference matrix,
    ``embedded`` the normalized embedding (bias coordinate exactly 1),
    ``features`` the input-space estimate and ``scale`` the bias coordinate
    that was divided out.
    """

    direction: np.ndarray
    scale: float
    embedded: np.ndarray
    features: np.ndarray
    label: int | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def flags(self) -> list[str]:
        return self.diagnostics.setdefault("flags", [])

    @property
    def reliable(self) -> bool:
        return "degenerate_bias" not in self.flags


def _difference(beta_plus, beta_minus) -> np.ndarray:
    Bp = beta_plus.weights if isinstance(beta_plus, ModelParams) else np.asarray(beta_plus, float)
    Bm = beta_minus.weights if isinstance(beta_minus, ModelParams) else np.asarray(beta_minus, float)
    if Bp.shape != Bm.shape:
        raise ValueError(f"parameter shapes differ: {Bp.shape} vs {Bm.shape}")
    delta = Bp - Bm
    if not np.max(np.abs(delta)) > NO_UPDATE_TOL:
        raise NoUpdateError("parameters before and after deletion are identical", "direction")
    return delta.reshape(Bp.shape[0], -1)


def _normalize_columns(z_hat: np.ndarray, strict: bool, stage: str):
    """Intercept normalization of a rank-one ``(d', c)`` direction.

    One column: ``z_hat / z_hat[-1]``. Several columns ``alpha_j z``: the
    least-squares ``z = z_hat g / |g|^2`` with ``g`` the bias row, which is the
    same thing when ``c == 1``.
    """
    g = z_hat[-1]
    if z_hat.shape[1] == 1:
        scale = float(g[0])
        bias_mag = abs(scale)
    else:
        bias_mag = float(np.linalg.norm(g))
        scale = bias_mag
    degenerate = bias_mag <= DEGENERATE_BIAS_TOL * np.linalg.norm(z_hat)
    if degenerate and strict:
        raise DegenerateBiasError("bias coordinate of the recovered direction vanishes", stage)
    if z_hat.shape[1] == 1:
        embedded = z_hat[:, 0] / scale if scale != 0 else z_hat[:, 0].copy()
    else:
        embedded = z_hat @ g / (g @ g) if bias_mag > 0 else z_hat[:, 0].copy()
    return embedded, scale, bias_mag, degenerate


def hrec_linear(beta_plus, beta_minus, covariance: CurvatureOperator, *,
                strict: bool = False) -> Reconstruction:
    """``z_hat = C_hat (B+ - B-)`` normalized so its bias coordinate is 1."""
    delta = _difference(beta_plus, beta_minus)
    z_hat = covariance @ delta
    embedded, scale, bias_mag, degenerate = _normalize_columns(z_hat, strict, "normalize")
    rec = Reconstruction(z_hat, scale, embedded, embedded[:-1].copy(),
                         diagnostics={"bias_magnitude": bias_mag, "flags": []})
    if degenerate:
        rec.flags.append("degenerate_bias")
    return rec


def hrec_general(beta_plus, beta_minus, hessian: CurvatureOperator) -> np.ndarray:
    """``z_hat = H_hat (B+ - B-)``, proportional (by the unknown ``n``) to
    ``-grad l(B+; x, y)``; shape ``(d', c)``."""
    return hessian @ _difference(beta_plus, beta_minus)


def infer_label(z_hat: np.ndarray) -> int:
    """Deleted label for a softmax model: the only class whose bias-gradient
    ``f_j - 1[j = y]`` is negative, i.e. the largest entry of ``-grad``."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.ndim != 2 or z_hat.shape[1] < 2:
        raise ValueError("label inference needs a (d', k) direction with k >= 2")
    bias = z_hat[-1]
    if np.all(np.abs(bias) < 1e-12):
        raise LabelUndeterminedError("all bias-row entries vanish", "label")
    return int(np.argmax(bias))


def reconstruct_from_softmax(z_hat: np.ndarray, label: int, *, strict: bool = False):
    """Per-class intercept normalization; returns ``(embedding, diagnostics)``.

    Every column of the exact gradient is ``(f_j - 1[j = y]) z``, so each
    column divided by its bias entry is ``z``. The column of the inferred
    label is returned; the largest relative deviation of the other valid
    columns from it is reported as ``class_spread``.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.ndim != 2 or z_hat.shape[1] < 2:
        raise ValueError("scalar-output models have no per-class columns; use hrec_linear")
    bias = z_hat[-1]
    valid = np.abs(bias) > 1e-12
    diag = {"bias_magnitude": float(abs(bias[label])), "flags": []}
    if not valid[label]:
        if strict:
            raise DegenerateBiasError(f"bias entry of class {label} vanishes", "normalize")
        diag["flags"].append("degenerate_bias")
        return z_hat[:, label].copy(), diag
    chosen = z_hat[:, label] / bias[label]
    spread = 0.0
    ref = np.linalg.norm(chosen)
    for j in np.flatnonzero(valid):
        if j != label:
            spread = max(spread, float(np.linalg.norm(z_hat[:, j] / bias[j] - chosen) / ref))
    diag["class_spread"] = spread
    return chosen, diag


def generalized_attack(beta_plus: ModelParams, beta_minus: ModelParams, X_pub: np.ndarray,
                       y_pub: np.ndarray, loss: LossSpec, embedding: Embedding, *,
                       known_lambda: float | None = None, curvature_data=None,
                       Z_pub: np.ndarray | None = None, strict: bool = False,
                       inversion_kwargs: dict | None = None) -> Reconstruction:
    """Full attack: curvature estimate, direction, label, normalization, inversion.

    ``known_lambda`` and ``curvature_data`` (an ``(X, y)`` pair replacing the
    public data for the curvature estimate) exist for oracle experiments only.
    """
    X_pub = np.asarray(X_pub, dtype=np.float64)
    if Z_pub is None:
        Z_pub = embed(embedding, X_pub)
    if curvature_data is None:
        Z_cur, y_cur = Z_pub, y_pub
    else:
        Z_cur, y_cur = embed(embedding, curvature_data[0]), curvature_data[1]
    lam = 0.0 if known_lambda is None else float(known_lambda)

    try:
        if loss.kind == "ridge":
            rec = hrec_linear(beta_plus, beta_minus, estimate_covariance(Z_cur, lam), strict=strict)
        else:
            H = estimate_hessian(beta_plus, Z_cur, y_cur, lam)
            z_hat = hrec_general(beta_plus, beta_minus, H)
            if loss.kind == "softmax_ce":
                label = infer_label(z_hat)
                embedded, diag = reconstruct_from_softmax(z_hat, label, strict=strict)
                rec = Reconstruction(z_hat, float(z_hat[-1, label]), embedded,
                                     embedded[:-1].copy(), label, diag)
            else:
                embedded, scale, bias_mag, degenerate = _normalize_columns(z_hat, strict, "normalize")
                # -grad has sign (y - sig) for logistic and t for svm on the bias row
                rec = Reconstruction(z_hat, scale, embedded, embedded[:-1].copy(),
                                     int(scale > 0), {"bias_magnitude": bias_mag, "flags": []})
                if degenerate:
                    rec.flags.append("degenerate_bias")
    except ValueError as exc:
        raise AttackError(str(exc), "curvature") from exc

    if embedding.kind == "rff":
        start = maxdiff_baseline(X_pub, beta_plus, beta_minus, embedding, Z_pub=Z_pub)
        x, residual = invert_embedding(rec.embedded, embedding, X_pub, extra_starts=[start],
                                       Z_pub=Z_pub, **(inversion_kwargs or {}))
        rec.features = x
        rec.diagnostics["inversion_residual"] = residual
    return rec
