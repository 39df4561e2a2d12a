"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


class ConfusionMatrix:
    """C x C pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, label: np.ndarray) -> "ConfusionMatrix":
        prediction, label = np.asarray(prediction), np.asarray(label)
        if prediction.shape != label.shape:
            raise ContractError(f"prediction shape {prediction.shape} != label shape {label.shape}")
        C = self.num_classes
        for name, arr in (("prediction", prediction), ("label", label)):
            if arr.size and (arr.min() < 0 or arr.max() >= C):
                raise ContractError(f"{name} values must lie in [0, {C})")
        idx = label.astype(np.int64).ravel() * C + prediction.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=C * C).reshape(C, C)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def miou(self) -> float:
        iou = self.per_class_iou()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")

    def pixel_acc(self) -> float:
        total = self.total
        return float(np.trace(self.counts) / total) if total else float("nan")


def update_confusion(cm: ConfusionMatrix, prediction: np.ndarray, label: np.ndarray) -> ConfusionMatrix:
    return cm.update(prediction, label)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def pixel_acc(cm: ConfusionMatrix) -> float:
    return cm.pixel_acc()


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    return cm.per_class_iou()
