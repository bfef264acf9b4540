"""
Loss terms shared by the recurrent network, SDE learning and the metrics.

All functions accept plain arrays; ``ce_loss`` and ``outcome_probability`` also
accept ``Dual`` arrays.
"""

from typing import Any, Optional

import numpy as np

from .autodiff import Dual, log, where

PROB_CLIP = 1e-6


def clip_probability(p: Any) -> Any:
    """Clip into [1e-6, 1 - 1e-6]; clipped entries carry no gradient."""
    if isinstance(p, Dual):
        low = p.value < PROB_CLIP
        high = p.value > 1.0 - PROB_CLIP
        return where(low, PROB_CLIP, where(high, 1.0 - PROB_CLIP, p))
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def outcome_probability(
    r_final: Any, axis: np.ndarray, visibility: Optional[np.ndarray] = None
) -> Any:
    """
    Probability of outcome +1 when measuring sigma_axis on the state r_final.

    Pi = (1 + f_axis * r_axis) / 2, clipped.

    Args:
        r_final: Bloch vectors, shape (B, 3).
        axis: Readout axis per shot, shape (B,).
        visibility: Per-axis readout visibilities f (default all 1).
    """
    axis = np.asarray(axis)
    component = r_final[np.arange(axis.shape[0]), axis]
    if visibility is not None:
        component = component * np.asarray(visibility)[axis]
    return clip_probability(0.5 * (1.0 + component))


def ce_terms(pi: Any, y: np.ndarray) -> Any:
    """Per-shot binary cross entropy of outcomes y in {+1, -1}."""
    y = np.asarray(y, dtype=float)
    return -(0.5 * (1.0 + y) * log(pi) + 0.5 * (1.0 - y) * log(1.0 - pi))


def ce_loss(pi: Any, y: np.ndarray) -> Any:
    """Mean binary cross entropy (negative log-likelihood) of a batch."""
    return ce_terms(pi, y).mean()


def posit_loss(r: np.ndarray) -> float:
    """Mean over all states of ReLU(|r|^2 - 1); r has shape (..., 3)."""
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        return 0.0
    return float(np.maximum((r * r).sum(axis=-1) - 1.0, 0.0).mean())


def prep_loss(r0: np.ndarray, target: np.ndarray) -> float:
    """Mean squared distance of initial states from their targets."""
    diff = np.asarray(r0, dtype=float) - np.asarray(target, dtype=float)
    return float((diff * diff).sum(axis=-1).mean())


def pred_loss(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Mean squared error of next-record predictions over all entries."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise ValueError(f"prediction shape {predicted.shape} != record shape {actual.shape}")
    if predicted.size == 0:
        return 0.0
    diff = predicted - actual
    return float((diff * diff).mean())
