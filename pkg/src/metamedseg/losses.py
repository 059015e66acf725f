"""Segmentation losses over probability maps, plus the exact IoU metric.

Convention: ``target`` is the binary ground truth ``y`` and ``pred`` the
sigmoid probability ``y'``.  Overlap sums run over every pixel of the batch.
"""
import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS
from .errors import ConfigurationError, DimensionError

IOU_EPS = 1e-6
POS_WEIGHT_RANGE = (1e-3, 1e3)


class LossKind(str, enum.Enum):
    WEIGHTED_BCE = "bce"
    SOFT_IOU = "iou"
    BCE_LOG_DICE = "bce_iou"
    DICE = "dice"
    TVERSKY_FOCAL = "tversky"


@dataclass(frozen=True)
class LossSpec:
    """A loss kind together with its parameters."""

    kind: LossKind = LossKind.WEIGHTED_BCE
    eps: float = IOU_EPS
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    focal_gamma: float = 0.75
    invert_pos_weight: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.eps <= 0:
            raise ConfigurationError("loss eps must be positive")
        if self.tversky_alpha + self.tversky_beta <= 0:
            raise ConfigurationError("tversky alpha + beta must be positive")

    def __call__(self, pred, target):
        if self.kind is LossKind.WEIGHTED_BCE:
            return weighted_bce(pred, target, invert=self.invert_pos_weight)
        if self.kind is LossKind.SOFT_IOU:
            return 1.0 - soft_iou(pred, target, self.eps)
        if self.kind is LossKind.BCE_LOG_DICE:
            return bce_plus_log_dice(pred, target, self.eps, invert=self.invert_pos_weight)
        if self.kind is LossKind.DICE:
            return dice_loss(pred, target, self.eps)
        return tversky_focal_loss(pred, target, self.tversky_alpha, self.tversky_beta,
                                  self.focal_gamma, self.eps)


def _operands(pred, target):
    pred = ad.as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, ad.Tensor) else target)
    if pred.shape != t.shape:
        raise DimensionError(f"prediction {pred.shape} and target {t.shape} differ")
    return pred, t.astype(pred.dtype, copy=False)


def positive_weight(target, invert=False):
    """Object-to-background pixel ratio of a batch, clamped to a sane range."""
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("target mask must be binary")
    n_obj = float(t.sum())
    n_bg = float(t.size - n_obj)
    if n_bg == 0 or n_obj == 0:
        warnings.warn("batch lacks object or background pixels; positive weight clamped",
                      RuntimeWarning, stacklevel=3)
    num, den = (n_bg, n_obj) if invert else (n_obj, n_bg)
    ratio = num / den if den else np.inf
    return float(np.clip(ratio, *POS_WEIGHT_RANGE))


def weighted_bce(pred, target, pos_weight=None, invert=False):
    pred, t = _operands(pred, target)
    if pos_weight is None:
        pos_weight = positive_weight(t, invert=invert)
    elif not np.all((t == 0) | (t == 1)):
        raise ValueError("target mask must be binary")
    p = ad.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(ad.log(p), pos_weight * t)
    neg = ad.mul(ad.log(1.0 - p), 1.0 - t)
    return -ad.mean(pos + neg)


def _overlap(pred, t):
    inter = ad.total(ad.mul(pred, t))
    union = ad.total(pred + t - ad.mul(pred, t))
    return inter, union


def soft_iou(pred, target, eps=IOU_EPS):
    """Differentiable IoU value ``(X + eps) / (U + eps)``; the loss is ``1 - IoU``."""
    pred, t = _operands(pred, target)
    inter, union = _overlap(pred, t)
    return (inter + eps) / (union + eps)


def bce_plus_log_dice(pred, target, eps=IOU_EPS, pos_weight=None, invert=False):
    pred, t = _operands(pred, target)
    iou = soft_iou(pred, t, eps)
    dice = (2.0 * iou) / (iou + 1.0)
    return weighted_bce(pred, t, pos_weight=pos_weight, invert=invert) - ad.log(dice)


def dice_loss(pred, target, eps=IOU_EPS):
    pred, t = _operands(pred, target)
    inter, union = _overlap(pred, t)
    return 1.0 - (2.0 * inter + eps) / (inter + union + eps)


def tversky_index(pred, target, alpha=0.3, beta=0.7, eps=IOU_EPS):
    pred, t = _operands(pred, target)
    tp = ad.total(ad.mul(pred, t))
    fp = ad.total(ad.mul(pred, 1.0 - t))
    fn = ad.total(ad.mul(1.0 - pred, t))
    return (tp + eps) / (tp + alpha * fp + beta * fn + eps)


def tversky_focal_loss(pred, target, alpha=0.3, beta=0.7, gamma=0.75, eps=IOU_EPS):
    ti = tversky_index(pred, target, alpha, beta, eps)
    # (1 - TI)**gamma has an unbounded slope at TI == 1
    return ad.power(ad.clamp(1.0 - ti, 1e-12, 1.0), gamma)


def eval_iou(pred, target, threshold=0.5):
    """Mean exact per-image IoU in percent; empty-vs-empty scores 100."""
    p = np.asarray(pred) >= threshold
    t = np.asarray(target) > 0.5
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and target {t.shape} differ")
    if p.ndim == 2:
        p, t = p[None], t[None]
    p = p.reshape(p.shape[0], -1)
    t = t.reshape(t.shape[0], -1)
    inter = (p & t).sum(axis=1)
    union = (p | t).sum(axis=1)
    scores = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(100.0 * scores.mean())
