"""Boundary masks vs a brute-force oracle, the auxiliary head, and fusion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergeseg import tensor as T
from mergeseg.boundary import (BoundaryHeadWeights, FusionWeights, boundary_head,
                               dilate, ffm, init_boundary_head_weights,
                               init_fusion_weights, make_boundary_mask,
                               patch_boundary_targets)
from mergeseg.errors import ConfigurationError, StateError
from mergeseg.patches import TokenSet


def oracle_boundary(labels: np.ndarray, radius: int) -> np.ndarray:
    """Brute force: 4-neighbor transitions, then disk dilation, pixel by pixel."""
    h, w = labels.shape
    edges = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] != labels[y, x]:
                    edges[y, x] = True
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            if not edges[y, x]:
                continue
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dy * dy + dx * dx <= radius * radius:
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            out[yy, xx] = True
    return out.astype(np.uint8)


def tokens_on_grid(rng, side, dim):
    feats = T.Tensor(rng.standard_normal((side * side, dim)))
    coords = [(r, c) for r in range(side) for c in range(side)]
    return TokenSet(feats, coords, (side, side), 1)


class TestBoundaryMask:
    def test_constant_labels_empty_mask(self):
        mask = make_boundary_mask(np.full((16, 16), 3), radius=2)
        assert mask.mask.sum() == 0

    def test_square_matches_oracle(self):
        labels = np.zeros((32, 32), dtype=int)
        labels[12:20, 12:20] = 1
        mask = make_boundary_mask(labels, radius=1)
        assert np.array_equal(mask.mask, oracle_boundary(labels, 1))
        # seeds sit on both sides of the transition, so the radius-1 band is 4 wide
        assert mask.mask[10:14, 15].tolist() == [1, 1, 1, 1]
        assert mask.mask[9, 15] == 0 and mask.mask[14, 15] == 0

    def test_half_planes_radius_zero(self):
        labels = np.zeros((8, 8), dtype=int)
        labels[:, 4:] = 1
        mask = make_boundary_mask(labels, radius=0)
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[:, 3:5] = 1
        assert np.array_equal(mask.mask, expected)

    def test_negative_radius_rejected(self):
        with pytest.raises(ConfigurationError):
            make_boundary_mask(np.zeros((4, 4), dtype=int), radius=-1)

    def test_random_maps_match_oracle(self):
        """Acceptance criterion 8 core: exact equality on random label maps."""
        rng = np.random.default_rng(0)
        for trial in range(50):
            h = int(rng.integers(4, 65))
            w = int(rng.integers(4, 65))
            labels = rng.integers(0, 4, size=(h, w))
            radius = int(rng.integers(0, 4))
            mask = make_boundary_mask(labels, radius)
            assert np.array_equal(mask.mask, oracle_boundary(labels, radius)), f"trial {trial}"

    def test_values_binary(self):
        rng = np.random.default_rng(1)
        mask = make_boundary_mask(rng.integers(0, 3, (20, 20)), radius=2)
        assert set(np.unique(mask.mask)) <= {0, 1}

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 1000))
    def test_dilation_monotone_in_radius(self, radius, seed):
        labels = np.random.default_rng(seed).integers(0, 3, (24, 24))
        smaller = make_boundary_mask(labels, radius).mask
        larger = make_boundary_mask(labels, radius + 1).mask
        assert (smaller <= larger).all()


class TestBoundaryHead:
    def test_zero_weights_zero_logits(self):
        rng = np.random.default_rng(0)
        tokens = tokens_on_grid(rng, 4, 8)
        w = BoundaryHeadWeights(w1=T.Tensor(np.zeros((8, 4))), b1=T.Tensor(np.zeros(4)),
                                w2=T.Tensor(np.zeros((4, 1))), b2=T.Tensor(np.zeros(1)))
        out = boundary_head(tokens, w)
        assert out.shape == (4, 4)
        assert np.array_equal(out.data, np.zeros((4, 4)))
        # zero logit means probability one half everywhere
        assert np.allclose(T.sigmoid(out).data, 0.5)

    def test_empty_mask_pools_to_all_negative(self):
        mask = make_boundary_mask(np.zeros((32, 32), dtype=int), radius=1)
        targets = patch_boundary_targets(mask, patch_size=8, tau=0.05)
        assert np.array_equal(targets, np.zeros((4, 4), dtype=np.uint8))

    def test_pooling_threshold(self):
        labels = np.zeros((16, 16), dtype=int)
        labels[:, 8:] = 1
        mask = make_boundary_mask(labels, radius=1)
        targets = patch_boundary_targets(mask, patch_size=8, tau=0.05)
        assert np.array_equal(targets, np.array([[1, 1], [1, 1]], dtype=np.uint8))

    def test_gradient_of_head_weights(self):
        rng = np.random.default_rng(1)
        tokens = tokens_on_grid(rng, 3, 6)

        def fn(w1, b1, w2, b2):
            return boundary_head(tokens, BoundaryHeadWeights(w1, b1, w2, b2))
        err = T.grad_check(fn, [T.Tensor(rng.standard_normal((6, 4))),
                                T.Tensor(rng.standard_normal(4)),
                                T.Tensor(rng.standard_normal((4, 1))),
                                T.Tensor(rng.standard_normal(1))])
        assert err <= 1e-6


class TestFusion:
    def test_zero_relationship_gives_uniform_affinity(self):
        n = 6
        u = np.zeros((n, 4))
        attn = T.affinity_volume(u, u)
        assert np.allclose(attn, 1.0 / n, atol=1e-15)

    def test_zero_delta_reduces_to_projected_concat(self):
        rng = np.random.default_rng(0)
        dim = 4
        a, b = tokens_on_grid(rng, 3, dim), tokens_on_grid(rng, 3, dim)
        base = rng.standard_normal((2 * dim, dim))
        w = FusionWeights(rel_u=T.Tensor(np.zeros((2 * dim, 2 * dim))),
                          rel_v=T.Tensor(np.zeros((2 * dim, 2 * dim))),
                          out_base=T.Tensor(base),
                          out_delta=T.Tensor(np.zeros((2 * dim, dim))))
        out = ffm(a, b, w)
        cat = np.concatenate([a.features.data, b.features.data], axis=1)
        assert np.allclose(out.features.data, cat @ base, atol=1e-12)

    def test_swap_symmetry_for_equal_inputs(self):
        rng = np.random.default_rng(1)
        dim = 4
        a = tokens_on_grid(rng, 3, dim)
        twin = TokenSet(T.Tensor(a.features.data.copy()), a.coords, a.grid, a.patch_size)

        def make(name, shape, init):
            return T.Tensor(rng.standard_normal(shape) * 0.2)
        w = init_fusion_weights(make, dim)
        assert np.array_equal(ffm(a, twin, w).features.data,
                              ffm(twin, a, w).features.data)

    def test_affinity_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        u = rng.standard_normal((8, 5))
        v = rng.standard_normal((8, 5))
        attn = T.affinity_volume(u, v)       # (P, Q, C), rows over Q
        assert np.abs(attn.sum(axis=1) - 1.0).max() <= 1e-12

    def test_grid_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        a = tokens_on_grid(rng, 3, 4)
        b = tokens_on_grid(rng, 2, 4)
        w = init_fusion_weights(lambda n, s, i: T.Tensor(np.zeros(s)), 4)
        with pytest.raises(StateError):
            ffm(a, b, w)

    def test_fused_primitive_matches_volume_aggregation(self):
        rng = np.random.default_rng(4)
        u, v, f = (rng.standard_normal((7, 3)) for _ in range(3))
        got = T.channel_affinity(T.Tensor(u), T.Tensor(v), T.Tensor(f)).data
        attn = T.affinity_volume(u, v)
        expected = (attn * f[None, :, :]).sum(axis=1)
        assert np.allclose(got, expected, atol=1e-14)
