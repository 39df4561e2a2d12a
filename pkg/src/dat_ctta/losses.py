"""Pixel-level objectives used for selection, adaptation and the baselines."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor

EMPTY_MASK = "empty_mask"


def consistency_loss(student_probs: Tensor, pseudo_label: np.ndarray, pixel_mask: np.ndarray | None = None) -> Tensor:
    """Mean over the included pixels of ``-log p_student[pseudo class]``.

    Probabilities are clamped to [1e-7, 1] before the log. Because the pseudo
    label is one-hot, this is the full pixel cross-entropy between teacher and
    student. A mask that selects no pixel yields a constant 0 tensor named
    ``EMPTY_MASK`` which carries no gradient.
    """
    weights = None if pixel_mask is None else np.asarray(pixel_mask, dtype=bool)
    loss = nx.pixel_nll(student_probs, pseudo_label, weights)
    if weights is not None and not weights.any():
        loss.name = EMPTY_MASK
    return loss


def entropy_loss(probs: Tensor) -> Tensor:
    return nx.pixel_entropy(probs)
