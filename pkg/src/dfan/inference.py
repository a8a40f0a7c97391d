"""Class scores and CZSL/GZSL decisions with calibrated stacking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassSplit, SemanticMatrix

BETA_PRESETS = {
    "fine": (0.5, 0.5),
    "coarse": (0.0, 1.0),
}


@dataclass(frozen=True)
class CombineConfig:
    beta1: float = 0.5
    beta2: float = 0.5
    gamma: float = 0.0

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError(f"combination weights must be >= 0, got ({self.beta1}, {self.beta2})")
        if self.beta1 == 0 and self.beta2 == 0:
            raise ValueError("combination weights cannot both be zero")
        if self.gamma < 0:
            raise ValueError(f"calibration factor must be >= 0, got {self.gamma}")


def class_scores(a_hat_local, a_hat_global, sm: SemanticMatrix, cfg: CombineConfig) -> np.ndarray:
    """``a_j . (beta1 * a_l + beta2 * a_g)`` for every class j.

    Works on single vectors (M,) or stacks (n, M); returns (C,) or (n, C).
    """
    a_l = np.asarray(a_hat_local, dtype=np.float64)
    a_g = np.asarray(a_hat_global, dtype=np.float64)
    M = sm.n_attributes
    if a_l.shape != a_g.shape or a_l.shape[-1] != M:
        raise ValueError(
            f"attribute predictions {a_l.shape} / {a_g.shape} do not match {M} attributes"
        )
    combined = cfg.beta1 * a_l + cfg.beta2 * a_g
    return combined @ sm.values.astype(np.float64).T


def _restricted_argmax(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index
    sub = scores[..., candidates]
    return candidates[np.argmax(sub, axis=-1)]


def czsl_predict(scores, split: ClassSplit):
    """Highest-scoring unseen class; ties go to the lowest class index."""
    scores = np.asarray(scores)
    if not split.unseen:
        raise ValueError("no unseen classes to predict")
    out = _restricted_argmax(scores, np.asarray(split.unseen))
    return int(out) if np.ndim(out) == 0 else out


def gzsl_predict(scores, split: ClassSplit, gamma: float):
    """Argmax over all split classes after subtracting ``gamma`` from seen
    classes; ties go to the lowest class index."""
    if gamma < 0:
        raise ValueError(f"calibration factor must be >= 0, got {gamma}")
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.asarray(split.all_classes)
    shifted = scores.copy()
    shifted[..., list(split.seen)] -= gamma
    out = _restricted_argmax(shifted, candidates)
    return int(out) if np.ndim(out) == 0 else out
