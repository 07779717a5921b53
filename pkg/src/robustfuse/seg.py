"""Tiny segmentation head T(u; omega), cross-entropy and mIoU."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSpec, Var
from .fusion import conv, conv_specs


class SegHead:
    prefix = "seg"

    def __init__(self, num_classes: int = 4, width: int = 16, depth: int = 3, in_ch: int = 1):
        if num_classes < 2:
            raise ValueError("a segmentation head needs at least 2 classes")
        self.K, self.width, self.depth, self.in_ch = num_classes, width, depth, in_ch

    def param_specs(self) -> dict:
        specs = {}
        cin = self.in_ch
        for i in range(self.depth):
            specs.update(conv_specs(f"{self.prefix}.block{i}", cin, self.width, 3))
            cin = self.width
        specs.update(conv_specs(f"{self.prefix}.cls", cin, self.K, 1))
        return specs

    def __call__(self, p: dict, u: Var) -> Var:
        h = u
        for i in range(self.depth):
            h = ad.relu(conv(p, f"{self.prefix}.block{i}", h))
        return conv(p, f"{self.prefix}.cls", h)

    def to_json(self) -> dict:
        return {"num_classes": self.K, "width": self.width, "depth": self.depth}


def seg_forward(head: SegHead, p: dict, u: Var) -> Var:
    return head(p, u)


def one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label ids must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    if np.any(labels != np.round(labels)):
        raise ValueError("label ids must be integers")
    oh = np.zeros((labels.shape[0], K) + labels.shape[1:])
    np.put_along_axis(oh, labels.astype(np.int64)[:, None], 1.0, axis=1)
    return oh


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean over pixels of -log softmax at the true class; labels are (B, H, W)."""
    B, K = logits.shape[0], logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (B,) + logits.shape[2:]:
        raise ad.ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    oh = logits.tape.const(one_hot(labels, K))
    # mean over B*K*H*W entries, times K, is the mean over pixels
    return ad.mean(oh * ad.log_softmax(logits, axis=1)) * (-float(K))


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, K: int) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64).ravel()
    truth = np.asarray(truth).astype(np.int64).ravel()
    return np.bincount(truth * K + pred, minlength=K * K).reshape(K, K)


def iou_from_confusion(cm: np.ndarray) -> tuple[list, float]:
    """Per-class IoU (None for classes absent from both maps) and their mean."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in per_class if v is not None]
    return per_class, (float(np.mean(present)) if present else float("nan"))


def miou(pred: np.ndarray, truth: np.ndarray, K: int) -> tuple[list, float]:
    if K < 2:
        raise ValueError("mIoU needs K >= 2")
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return iou_from_confusion(confusion_matrix(pred, truth, K))
