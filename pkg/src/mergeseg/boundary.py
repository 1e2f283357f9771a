"""Boundary supervision targets, the auxiliary boundary head, and feature fusion.

Boundary masks come straight from the label map: on integer class labels any
class transition is an edge, so the gradient-threshold stage of a classical
edge detector degenerates to a 4-neighbor transition test, which is then
dilated by a disk. The auxiliary head predicts per-patch boundary logits from
low-level tokens and is dropped entirely at inference. The fusion module
reconciles the recovered deep path with the low-level path through per-channel
token-to-token affinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, StateError
from .patches import TokenSet
from .tensor import Tensor

# Gradient-magnitude thresholds kept for completeness; on integer label maps
# every transition clears them, so they never change the mask.
CANNY_LOW = 0.1
CANNY_HIGH = 0.3


@dataclass
class BoundaryMask:
    mask: np.ndarray          # (H, W) uint8 in {0, 1}
    dilation_radius: int
    canny_low: float = CANNY_LOW
    canny_high: float = CANNY_HIGH


def _transition_edges(labels: np.ndarray) -> np.ndarray:
    """A pixel is an edge seed iff any 4-neighbor has a different class."""
    e = np.zeros(labels.shape, dtype=bool)
    e[:-1, :] |= labels[:-1, :] != labels[1:, :]
    e[1:, :] |= labels[1:, :] != labels[:-1, :]
    e[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    e[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return e


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    """Row-major (dy, dx) offsets of the closed disk dy^2 + dx^2 <= r^2."""
    return [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation by a disk structuring element."""
    if radius < 0:
        raise ConfigurationError(f"dilation radius must be >= 0, got {radius}")
    src = mask.astype(bool)
    if radius == 0:
        return src.copy()
    h, w = src.shape
    out = np.zeros_like(src)
    for dy, dx in disk_offsets(radius):
        ys = slice(max(0, dy), min(h, h + dy))
        yd = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, dx), min(w, w + dx))
        xd = slice(max(0, -dx), min(w, w - dx))
        out[yd, xd] |= src[ys, xs]
    return out


def make_boundary_mask(labels: np.ndarray, radius: int) -> BoundaryMask:
    """Class-transition edges of an integer label map, dilated by a disk."""
    if radius < 0:
        raise ConfigurationError(f"dilation radius must be >= 0, got {radius}")
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ConfigurationError(f"labels must be 2-D, got shape {labels.shape}")
    edges = _transition_edges(labels)
    return BoundaryMask(mask=dilate(edges, radius).astype(np.uint8), dilation_radius=radius)


def patch_boundary_targets(mask: BoundaryMask, patch_size: int, tau: float = 0.05) -> np.ndarray:
    """(H_p, W_p) binary targets: a patch is positive iff >= tau of it is boundary."""
    m = mask.mask
    h, w = m.shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(f"mask {h}x{w} not divisible by patch size {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    frac = m.reshape(hp, patch_size, wp, patch_size).mean(axis=(1, 3))
    return (frac >= tau).astype(np.uint8)


@dataclass
class BoundaryHeadWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_boundary_head_weights(make, dim: int, hidden: int) -> BoundaryHeadWeights:
    return BoundaryHeadWeights(
        w1=make("w1", (dim, hidden), "proj"),
        b1=make("b1", (hidden,), "zeros"),
        w2=make("w2", (hidden, 1), "proj"),
        b2=make("b2", (1,), "zeros"),
    )


def boundary_head(low_level: TokenSet, w: BoundaryHeadWeights) -> Tensor:
    """Per-patch binary boundary logits from the pre-merge low-level tokens."""
    hp, wp = low_level.grid
    if low_level.num_tokens != hp * wp:
        raise StateError("boundary head needs the full pre-merge grid")
    h = T.gelu(T.add_bias(T.matmul(low_level.features, w.w1), w.b1))
    logits = T.add_bias(T.matmul(h, w.w2), w.b2)
    return T.reshape(logits, (hp, wp))


@dataclass
class FusionWeights:
    """Relationship weights (per-channel affinities) plus the output projection.

    ``out_base`` and ``out_delta`` are the two row blocks of the projection of
    [concatenated features, affinity-aggregated features] back to D channels.
    """

    rel_u: Tensor     # (2D, C)
    rel_v: Tensor     # (2D, C)
    out_base: Tensor  # (2D, D)
    out_delta: Tensor # (C, D)


def init_fusion_weights(make, dim: int) -> FusionWeights:
    c = 2 * dim
    return FusionWeights(
        rel_u=make("rel_u", (c, c), "proj"),
        rel_v=make("rel_v", (c, c), "proj"),
        out_base=make("out_base", (c, dim), "proj"),
        out_delta=make("out_delta", (c, dim), "proj"),
    )


def ffm(f_deep: TokenSet, f_low: TokenSet, w: FusionWeights) -> TokenSet:
    """Fuse the recovered deep path with the low-level path.

    Channel-concatenates the two paths, derives a per-channel row-stochastic
    token-to-token affinity volume from the concatenation, aggregates each
    channel through its own affinity, and projects [concat, aggregated] back
    to D channels.
    """
    if f_deep.grid != f_low.grid or f_deep.num_tokens != f_low.num_tokens:
        raise StateError("fusion inputs must share the same full grid")
    cat = T.concat(f_deep.features, f_low.features, axis=1)
    u = T.matmul(cat, w.rel_u)
    v = T.matmul(cat, w.rel_v)
    agg = T.channel_affinity(u, v, cat)
    out = T.add(T.matmul(cat, w.out_base), T.matmul(agg, w.out_delta))
    return f_deep.with_features(out)
