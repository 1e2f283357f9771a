"""Image <-> patch-token conversion, patch embedding, and the base transformer block.

Tokens live on a regular patch grid in row-major order. The transformer block
is pre-norm self-attention with optional spatial reduction (keys/values come
from the token grid average-pooled by a factor r) followed by a two-layer MLP,
both with residual connections, so all-zero weights make it the identity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, StateError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TokenSet:
    """Patch-feature rows plus the grid geometry they came from.

    ``features`` row i corresponds to ``coords`` entry i. For an unmerged set
    the coords cover the (H_p, W_p) grid exactly once in row-major order. A
    merged set carries fewer rows; ``cell_owner`` then maps every grid cell to
    the row that currently represents it (None means the identity map).
    """

    features: Tensor                      # (N, D)
    coords: list[tuple[int, int]]
    grid: tuple[int, int]
    patch_size: int
    pad: tuple[int, int] = (0, 0)         # (rows, cols) of reflection padding
    cell_owner: np.ndarray | None = None  # (H_p * W_p,) row index per grid cell

    @property
    def num_tokens(self) -> int:
        return self.features.data.shape[0]

    @property
    def dim(self) -> int:
        return self.features.data.shape[1]

    def owner_map(self) -> np.ndarray:
        if self.cell_owner is not None:
            return self.cell_owner
        return np.arange(self.grid[0] * self.grid[1], dtype=np.int64)

    def with_features(self, features: Tensor) -> TokenSet:
        return TokenSet(features, self.coords, self.grid, self.patch_size,
                        self.pad, self.cell_owner)


def patchify(image: Tensor, patch_size: int) -> TokenSet:
    """Split a (C, H, W) image into non-overlapping patch tokens.

    Each feature row is the flattened raw patch (length C * P * P). Extents
    not divisible by P are reflection-padded up; the padding is recorded so
    unpatchify can undo it (the padded path detaches from the graph, the
    divisible path stays differentiable).
    """
    if image.data.ndim != 3:
        raise DimensionError(f"patchify: expected (C,H,W), got {image.shape}")
    c, h, w = image.data.shape
    if patch_size <= 0 or patch_size > min(h, w):
        raise ConfigurationError(f"patch size {patch_size} invalid for {h}x{w} image")
    pad_r = (-h) % patch_size
    pad_c = (-w) % patch_size
    if pad_r or pad_c:
        image = Tensor(np.pad(image.data, ((0, 0), (0, pad_r), (0, pad_c)), mode="reflect"))
        h, w = h + pad_r, w + pad_c
    hp, wp = h // patch_size, w // patch_size
    x = T.reshape(image, (c, hp, patch_size, wp, patch_size))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    feats = T.reshape(x, (hp * wp, c * patch_size * patch_size))
    coords = [(r, q) for r in range(hp) for q in range(wp)]
    return TokenSet(feats, coords, (hp, wp), patch_size, pad=(pad_r, pad_c))


def unpatchify(tokens: TokenSet, patch_size: int) -> Tensor:
    """Scatter full-grid tokens back to a (C', H, W) map; inverse of patchify."""
    hp, wp = tokens.grid
    n, d = tokens.features.data.shape
    if n != hp * wp:
        raise StateError(f"unpatchify: {n} tokens cannot fill a {hp}x{wp} grid")
    if d % (patch_size * patch_size) != 0:
        raise DimensionError(f"feature dim {d} not divisible by {patch_size}^2")
    if set(tokens.coords) != {(r, q) for r in range(hp) for q in range(wp)}:
        raise StateError("unpatchify: coords do not cover the grid exactly once")
    feats = tokens.features
    row_major = [(r, q) for r in range(hp) for q in range(wp)]
    if tokens.coords != row_major:
        perm = np.argsort([r * wp + q for r, q in tokens.coords])
        feats = T.gather_rows(feats, perm)
    c = d // (patch_size * patch_size)
    x = T.reshape(feats, (hp, wp, c, patch_size, patch_size))
    x = T.transpose(x, (2, 0, 3, 1, 4))
    x = T.reshape(x, (c, hp * patch_size, wp * patch_size))
    pad_r, pad_c = tokens.pad
    if pad_r:
        x = T.slice_axis(x, 1, 0, hp * patch_size - pad_r)
    if pad_c:
        x = T.slice_axis(x, 2, 0, wp * patch_size - pad_c)
    return x


@dataclass
class EmbedWeights:
    proj: Tensor  # (flat_patch_dim, D)
    pos: Tensor   # (N, D) learned per-grid-position table


def embed(tokens: TokenSet, weights: EmbedWeights) -> TokenSet:
    """Linear projection of raw patches plus an additive positional table."""
    n, d_in = tokens.features.data.shape
    if weights.proj.data.shape[0] != d_in:
        raise DimensionError(f"embed: projection expects dim {weights.proj.data.shape[0]}, got {d_in}")
    if weights.pos.data.shape != (n, weights.proj.data.shape[1]):
        raise DimensionError("embed: positional table does not match token count / dim")
    out = T.add(T.matmul(tokens.features, weights.proj), weights.pos)
    return tokens.with_features(out)


@dataclass
class BlockWeights:
    """Everything one pre-norm attention + MLP block owns."""

    norm1_gain: Tensor
    norm1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    num_heads: int = 1
    sr_ratio: int = 1


def init_block_weights(make, dim: int, num_heads: int = 1, sr_ratio: int = 1,
                       mlp_ratio: int = 2) -> BlockWeights:
    """Build block weights through a ``make(name, shape, init)`` factory."""
    if dim % num_heads != 0:
        raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
    hidden = dim * mlp_ratio
    return BlockWeights(
        norm1_gain=make("norm1.gain", (dim,), "ones"),
        norm1_bias=make("norm1.bias", (dim,), "zeros"),
        wq=make("attn.wq", (dim, dim), "proj"),
        bq=make("attn.bq", (dim,), "zeros"),
        wk=make("attn.wk", (dim, dim), "proj"),
        bk=make("attn.bk", (dim,), "zeros"),
        wv=make("attn.wv", (dim, dim), "proj"),
        bv=make("attn.bv", (dim,), "zeros"),
        wo=make("attn.wo", (dim, dim), "proj"),
        bo=make("attn.bo", (dim,), "zeros"),
        norm2_gain=make("norm2.gain", (dim,), "ones"),
        norm2_bias=make("norm2.bias", (dim,), "zeros"),
        mlp_w1=make("mlp.w1", (dim, hidden), "proj"),
        mlp_b1=make("mlp.b1", (hidden,), "zeros"),
        mlp_w2=make("mlp.w2", (hidden, dim), "proj"),
        mlp_b2=make("mlp.b2", (dim,), "zeros"),
        num_heads=num_heads,
        sr_ratio=sr_ratio,
    )


def _pool_grid(x: Tensor, grid: tuple[int, int], r: int) -> Tensor:
    """Average-pool row-major grid tokens by r in both grid directions."""
    hp, wp = grid
    d = x.data.shape[1]
    y = T.reshape(x, (hp // r, r, wp // r, r, d))
    y = T.transpose(y, (0, 2, 4, 1, 3))
    y = T.reshape(y, ((hp // r) * (wp // r), d, r * r))
    return T.mul_const(T.sum_axis(y, 2), 1.0 / (r * r))


def transformer_block(tokens: TokenSet, w: BlockWeights) -> TokenSet:
    """Pre-norm spatially-reduced self-attention, then a residual MLP."""
    x = tokens.features
    n, d = x.data.shape
    heads = w.num_heads
    hd = d // heads
    r = w.sr_ratio
    hp, wp = tokens.grid
    if r > 1 and (n != hp * wp or hp % r or wp % r):
        log.warning("spatial reduction %d does not tile %dx%d grid of %d tokens; using r=1",
                    r, hp, wp, n)
        r = 1

    h = T.layer_norm(x, w.norm1_gain, w.norm1_bias)
    q = T.add_bias(T.matmul(h, w.wq), w.bq)
    src = h if r == 1 else _pool_grid(h, tokens.grid, r)
    k = T.add_bias(T.matmul(src, w.wk), w.bk)
    v = T.add_bias(T.matmul(src, w.wv), w.bv)

    scale = 1.0 / math.sqrt(hd)
    merged = None
    for hi in range(heads):
        lo, hi_col = hi * hd, (hi + 1) * hd
        qh = T.slice_cols(q, lo, hi_col)
        kh = T.slice_cols(k, lo, hi_col)
        vh = T.slice_cols(v, lo, hi_col)
        attn = T.softmax(T.mul_const(T.matmul(qh, T.transpose(kh)), scale), axis=1)
        oh = T.matmul(attn, vh)
        merged = oh if merged is None else T.concat(merged, oh, axis=1)
    x = T.add(x, T.add_bias(T.matmul(merged, w.wo), w.bo))

    h2 = T.layer_norm(x, w.norm2_gain, w.norm2_bias)
    inner = T.gelu(T.add_bias(T.matmul(h2, w.mlp_w1), w.mlp_b1))
    x = T.add(x, T.add_bias(T.matmul(inner, w.mlp_w2), w.mlp_b2))
    return tokens.with_features(x)
