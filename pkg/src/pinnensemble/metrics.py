"""Accuracy measures on an evaluation grid."""

import numpy as np

from .errors import ContractViolation


def relative_l2(pred, truth):
    """``||pred - truth||_2 / ||truth||_2``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {truth.shape}")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ContractViolation("truth has zero norm")
    return float(np.linalg.norm(pred - truth) / norm)


def r_squared(pred, truth):
    """Coefficient of determination of ``pred`` against ``truth``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {truth.shape}")
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        raise ContractViolation("truth is constant")
    return float(1.0 - np.sum((pred - truth) ** 2) / ss_tot)


def band_coverage(lower, upper, truth):
    """Fraction of truth values inside ``[lower, upper]``."""
    truth = np.asarray(truth, dtype=float)
    return float(np.mean((truth >= lower) & (truth <= upper)))
