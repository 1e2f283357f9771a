"""Patch merging and recovery.

A merge stage clusters the current tokens, collapses each cluster into one
feature via an importance-weighted softmax over the cluster's density-peak
scores, refines the merged features against the originals through a small
cross-attention residual, broadcasts the result back onto the full patch grid
(all cells of a cluster carry identical features) for a Norm -> DWConv -> MLP
refinement, and records the token->cluster map. Recovery replays those maps
in reverse, copying each merged feature to every cell it absorbed and mixing
in the matching pre-merge skip features.

Cluster structure (neighbor sets, centers, assignments) is recomputed each
forward pass and treated as a constant: gradients flow through the weighted
sums and the attention, never through the discrete selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cluster import ClusterResult, cluster_tokens, singleton_cluster
from .errors import ConfigurationError, StateError
from .patches import (BlockWeights, TokenSet, init_block_weights,
                      transformer_block)
from .tensor import Tensor


@dataclass
class MergeRecord:
    """Per-stage surjections original-token-index -> merged-token-index."""

    stage_maps: list[np.ndarray]
    token_counts: list[int]

    @classmethod
    def from_maps(cls, stage_maps: list[np.ndarray]) -> MergeRecord:
        maps = [np.asarray(m, dtype=np.int64) for m in stage_maps]
        counts = []
        for i, m in enumerate(maps):
            n_in = m.shape[0]
            n_out = int(m.max()) + 1 if m.size else 0
            if sorted(set(m.tolist())) != list(range(n_out)):
                raise StateError(f"stage map {i} is not surjective onto [0, {n_out})")
            if counts and counts[-1] != n_in:
                raise StateError(f"stage map {i} input size {n_in} != previous output {counts[-1]}")
            if not counts:
                counts.append(n_in)
            counts.append(n_out)
        return cls(stage_maps=maps, token_counts=counts)

    def compose(self) -> np.ndarray:
        """Total map from initial tokens to final tokens."""
        total = np.arange(self.token_counts[0], dtype=np.int64)
        for m in self.stage_maps:
            total = m[total]
        return total


@dataclass
class PMBWeights:
    """Weights of one merge stage: cross-attention update plus refinement."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    dw_kernels: Tensor   # (D, k, k)
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


def init_pmb_weights(make, dim: int, dw_kernel: int = 3, mlp_ratio: int = 4) -> PMBWeights:
    hidden = dim * mlp_ratio
    return PMBWeights(
        wq=make("update.wq", (dim, dim), "proj"),
        wk=make("update.wk", (dim, dim), "proj"),
        wv=make("update.wv", (dim, dim), "proj"),
        wo=make("update.wo", (dim, dim), "proj"),
        norm_gain=make("refine.norm.gain", (dim,), "ones"),
        norm_bias=make("refine.norm.bias", (dim,), "zeros"),
        dw_kernels=make("refine.dw", (dim, dw_kernel, dw_kernel), "proj"),
        mlp_w1=make("refine.mlp.w1", (dim, hidden), "proj"),
        mlp_b1=make("refine.mlp.b1", (hidden,), "zeros"),
        mlp_w2=make("refine.mlp.w2", (hidden, dim), "proj"),
        mlp_b2=make("refine.mlp.b2", (dim,), "zeros"),
    )


def merge_weight_matrix(cluster: ClusterResult) -> np.ndarray:
    """(M, N) float64 matrix of within-cluster softmax weights over scores.

    Row c holds softmax(score[j] for j in cluster c) at the member columns,
    zero elsewhere, so row sums are 1 and y = W @ x realizes the merge.
    Members accumulate in ascending token index.
    """
    m = cluster.num_clusters
    n = cluster.assignment.shape[0]
    w = np.zeros((m, n))
    for cid in range(m):
        members = np.flatnonzero(cluster.assignment == cid)
        s = cluster.score[members]
        e = np.exp(s - s.max())
        w[cid, members] = e / e.sum()
    return w


def merge_features(features: Tensor, cluster: ClusterResult) -> Tensor:
    """Importance-weighted merge: one output row per cluster, center order.

    The softmax weights are constants of the forward pass; gradients reach
    the original features through the weighted sum only.
    """
    w = merge_weight_matrix(cluster)
    return T.matmul(T.constant(w, dtype=features.data.dtype), features)


# Floor for the per-merged-token mass in the pooling denominator: S normalizes
# over the merged index, so a row can underflow to exactly zero in float32 when
# every original token routes its mass elsewhere; the floored denominator keeps
# the (then all-zero) numerator finite without measurably changing live rows.
POOL_EPS = 1e-12


def update_merged(merged: Tensor, original: Tensor, w: PMBWeights) -> Tensor:
    """Add back detail from the originals via merged-vs-original attention.

    The similarity matrix S is softmax-normalized over the merged index, so
    each original token distributes exactly unit weight across the merged
    set; each merged feature then receives the value-projected originals
    weighted by its row of S and re-normalized by that row's mass.
    """
    q = T.matmul(merged, w.wq)                     # (M, D)
    k = T.matmul(original, w.wk)                   # (N, D)
    logits = T.matmul(q, T.transpose(k))           # (M, N)
    s = T.softmax(logits, axis=0)
    v = T.matmul(original, w.wv)
    den = T.add_const(T.sum_axis(s, 1), POOL_EPS)
    pooled = T.row_scale(T.matmul(s, v), T.recip(den))
    return T.add(merged, T.matmul(pooled, w.wo))


@dataclass
class PMBStageResult:
    tokens: TokenSet          # merged set: M rows anchored at cluster centers
    stage_map: np.ndarray     # (N,) token -> cluster id
    broadcast: Tensor         # (H_p*W_p, D) grid features right after the merge


def pmb_stage(tokens: TokenSet, w: PMBWeights, m: int, k: int) -> PMBStageResult:
    """One merge stage: cluster, merge, update, broadcast, refine, re-anchor.

    ``m`` is the target cluster count, ``k`` the density neighborhood size
    (clamped to N-1 for small sets). The refinement runs on the full-grid
    broadcast so the depthwise convolution sees a spatially complete map;
    the returned set keeps one feature per cluster, read back at the cluster
    center's anchor cell.
    """
    feats = tokens.features
    n, d = feats.data.shape
    if not 1 <= m <= n:
        raise ConfigurationError(f"merge target {m} outside [1, {n}]")
    if n == 1:
        cluster = singleton_cluster(1)
    else:
        cluster = cluster_tokens(feats.data, min(k, n - 1), m)

    merged = merge_features(feats, cluster)
    updated = update_merged(merged, feats, w)

    owner = tokens.owner_map()
    new_owner = cluster.assignment[owner]
    broadcast = T.gather_rows(updated, new_owner)

    hp, wp = tokens.grid
    h = T.layer_norm(broadcast, w.norm_gain, w.norm_bias)
    grid = T.reshape(T.transpose(h), (d, hp, wp))
    grid = T.dwconv2d(grid, w.dw_kernels)
    back = T.transpose(T.reshape(grid, (d, hp * wp)))
    inner = T.gelu(T.add_bias(T.matmul(back, w.mlp_w1), w.mlp_b1))
    refined = T.add(broadcast, T.add_bias(T.matmul(inner, w.mlp_w2), w.mlp_b2))

    anchors = [tokens.coords[c] for c in cluster.centers]
    anchor_cells = np.array([r * wp + q for r, q in anchors], dtype=np.int64)
    out_feats = T.gather_rows(refined, anchor_cells)
    out = TokenSet(out_feats, anchors, tokens.grid, tokens.patch_size,
                   tokens.pad, new_owner)
    return PMBStageResult(tokens=out, stage_map=cluster.assignment, broadcast=broadcast)


@dataclass
class RecoverStageWeights:
    skip_proj: Tensor   # projects the stage's pre-merge skip features
    mix_proj: Tensor    # residual second linear
    block: BlockWeights


def init_recover_weights(make, dim: int, num_heads: int = 1, mlp_ratio: int = 2) -> RecoverStageWeights:
    return RecoverStageWeights(
        skip_proj=make("skip", (dim, dim), "proj"),
        mix_proj=make("mix", (dim, dim), "proj"),
        block=init_block_weights_under(make, "block", dim, num_heads, 1, mlp_ratio),
    )


def init_block_weights_under(make, prefix: str, dim: int, num_heads: int,
                             sr_ratio: int, mlp_ratio: int) -> BlockWeights:
    def sub(name, shape, init):
        return make(f"{prefix}.{name}", shape, init)
    return init_block_weights(sub, dim, num_heads, sr_ratio, mlp_ratio)


def recover(final_tokens: TokenSet, record: MergeRecord, skips: list[TokenSet],
            weights: list[RecoverStageWeights]) -> TokenSet:
    """Undo the merge stages in reverse using the recorded maps.

    Per stage: copy each merged feature to all token slots mapped to it, add
    the linearly-projected skip features, apply the residual second linear,
    then one transformer block. Ends on the full grid.
    """
    stages = len(record.stage_maps)
    if len(skips) != stages or len(weights) != stages:
        raise StateError(f"recover: {stages} stage maps vs {len(skips)} skips / {len(weights)} weights")
    x = final_tokens.features
    for s in reversed(range(stages)):
        smap = record.stage_maps[s]
        expected = int(smap.max()) + 1 if smap.size else 0
        if x.data.shape[0] != expected:
            raise StateError(f"recover: stage {s} expects {expected} merged tokens, got {x.data.shape[0]}")
        x = T.gather_rows(x, smap)
        x = T.add(x, T.matmul(skips[s].features, weights[s].skip_proj))
        x = T.add(x, T.matmul(x, weights[s].mix_proj))
        ts = skips[s].with_features(x)
        x = transformer_block(ts, weights[s].block).features
    return skips[0].with_features(x)


def stage_token_counts(n: int, ratio: float, num_stages: int) -> list[int]:
    """[N, M_1, ..., M_S] under M_s = max(1, ceil(N_s * ratio))."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigurationError(f"merge ratio {ratio} outside (0, 1]")
    counts = [n]
    for _ in range(num_stages):
        counts.append(max(1, int(np.ceil(counts[-1] * ratio))))
    return counts
