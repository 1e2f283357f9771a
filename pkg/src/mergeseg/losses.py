"""Supervision terms and their weighted combination.

Three supervised outputs, each with its own pair of losses: the deep path's
segmentation logits get focal + boundary-relaxed cross-entropy, the auxiliary
boundary logits get dice + binary cross-entropy, and the fused final logits
get focal + plain cross-entropy. The total is a fixed-weight sum of the three
pairs. All losses take logits as graph tensors and targets as numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .boundary import BoundaryMask, dilate
from .errors import DataError, NumericError
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda1: float = 0.3
    lambda2: float = 0.3
    lambda3: float = 0.4
    alpha1: float = 0.6
    beta1: float = 0.4
    alpha2: float = 0.3
    beta2: float = 0.7
    alpha3: float = 0.5
    beta3: float = 0.5
    focal_gamma: float = 2.0
    relaxation_margin: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise DataError(f"loss weight {f.name} must be >= 0")


def _class_log_probs(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel log-probability of the true class; logits (K,H,W), labels (H,W)."""
    k = logits.data.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[1:]:
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = labels.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= k):
        raise DataError(f"labels outside [0, {k})")
    x = T.transpose(T.reshape(logits, (k, flat.size)))   # (Npix, K)
    return T.take_per_row(T.log_softmax(x, axis=1), flat)


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return T.mul_const(T.sum_all(x), 1.0 / x.data.size)
    keep = mask.reshape(-1).astype(x.data.dtype)
    return T.mul_const(T.sum_all(T.mul(x, T.constant(keep, dtype=x.data.dtype))),
                       1.0 / float(keep.sum()))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax probability at the true class."""
    return T.mul_const(_masked_mean(_class_log_probs(logits, labels), None), -1.0)


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float) -> Tensor:
    """Mean of -(1 - p_true)^gamma * log p_true; gamma=0 reduces to cross-entropy."""
    if gamma < 0:
        raise DataError(f"focal gamma must be >= 0, got {gamma}")
    logp = _class_log_probs(logits, labels)
    miss = T.add_const(T.mul_const(T.exp(logp), -1.0), 1.0)       # 1 - p_true
    weighted = T.mul(T.power_const(miss, gamma), T.mul_const(logp, -1.0))
    return _masked_mean(weighted, None)


def bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free log-sigmoid form."""
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape:
        raise DataError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not np.isin(targets, (0, 1)).all():
        raise DataError("bce targets must be binary")
    flat = T.reshape(logits, (logits.data.size,))
    t = T.constant(targets.reshape(-1), dtype=logits.data.dtype)
    return _masked_mean(T.sub(T.softplus(flat), T.mul(flat, t)), None)


def dice_loss(probs: Tensor, targets: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2 * overlap + smooth) / (mass(probs) + mass(targets) + smooth)."""
    targets = np.asarray(targets)
    if targets.shape != probs.data.shape:
        raise DataError(f"targets {targets.shape} do not match probs {probs.shape}")
    t = T.constant(targets, dtype=probs.data.dtype)
    inter = T.sum_all(T.mul(probs, t))
    numer = T.add_const(T.mul_const(inter, 2.0), smooth)
    denom = T.add_const(T.sum_all(probs), float(targets.sum()) + smooth)
    return T.add_const(T.mul_const(T.mul(numer, T.recip(denom)), -1.0), 1.0)


def relaxed_ce(logits: Tensor, labels: np.ndarray, boundary: BoundaryMask, d: int) -> Tensor:
    """Cross-entropy restricted to pixels farther than d from the boundary mask.

    Pixels within distance d of any mask pixel are exactly those covered by a
    further disk dilation of radius d, so the interior is its complement. If
    nothing survives, the loss is 0.
    """
    interior = ~dilate(boundary.mask, d)
    if not interior.any():
        return T.constant(np.zeros(()), dtype=logits.data.dtype)
    logp = _class_log_probs(logits, labels)
    return T.mul_const(_masked_mean(logp, interior), -1.0)


@dataclass
class LossParts:
    """The six scalar terms entering the total, already evaluated."""

    focal_semantic: Tensor
    relaxed_semantic: Tensor
    dice_boundary: Tensor
    bce_boundary: Tensor
    focal_final: Tensor
    ce_final: Tensor


def total_loss(parts: LossParts, cfg: LossConfig) -> Tensor:
    """lambda1*(a1*FL + b1*RL) + lambda2*(a2*DL + b2*BCE) + lambda3*(a3*FL + b3*CE)."""
    for f in fields(LossParts):
        value = getattr(parts, f.name).data
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite loss part: {f.name}")
    semantic = T.add(T.mul_const(parts.focal_semantic, cfg.alpha1),
                     T.mul_const(parts.relaxed_semantic, cfg.beta1))
    bnd = T.add(T.mul_const(parts.dice_boundary, cfg.alpha2),
                T.mul_const(parts.bce_boundary, cfg.beta2))
    final = T.add(T.mul_const(parts.focal_final, cfg.alpha3),
                  T.mul_const(parts.ce_final, cfg.beta3))
    return T.add(T.add(T.mul_const(semantic, cfg.lambda1), T.mul_const(bnd, cfg.lambda2)),
                 T.mul_const(final, cfg.lambda3))
