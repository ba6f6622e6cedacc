"""Reconstruction attack on exactly-unlearned models."""

from .curvature import CurvatureOperator, estimate_covariance, estimate_hessian
from .hrec import (
    AttackError,
    DegenerateBiasError,
    LabelUndeterminedError,
    NoUpdateError,
    Reconstruction,
    generalized_attack,
    hrec_general,
    hrec_linear,
    infer_label,
    reconstruct_from_softmax,
)
from .inversion import invert_embedding

__all__ = [
    "AttackError",
    "CurvatureOperator",
    "DegenerateBiasError",
    "LabelUndeterminedError",
    "NoUpdateError",
    "Reconstruction",
    "estimate_covariance",
    "estimate_hessian",
    "generalized_attack",
    "hrec_general",
    "hrec_linear",
    "infer_label",
    "invert_embedding",
    "reconstruct_from_softmax",
]
