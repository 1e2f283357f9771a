"""Density-peaks clustering against an exhaustive brute-force oracle.

The oracle re-implements every step with plain Python loops and the documented
tie rules / summation orders, so equality assertions are exact, not
approximate.
"""

import math

import numpy as np
import pytest

from mergeseg.cluster import (assign, cluster_tokens, distance_indicator,
                              local_density, select_centers)
from mergeseg.errors import ConfigurationError


def oracle_sq_dists(x):
    n, d = x.shape
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for dim in range(d):
                diff = x[i, dim] - x[j, dim]
                acc += diff * diff
            out[i][j] = acc
    return out


def oracle_density(x, k):
    n = x.shape[0]
    d2 = oracle_sq_dists(x)
    args = []
    for i in range(n):
        neighbors = sorted((j for j in range(n) if j != i), key=lambda j: (d2[i][j], j))[:k]
        acc = 0.0
        for j in neighbors:  # ascending sorted-neighbor position
            acc += d2[i][j]
        args.append(-(acc / k))
    return np.exp(np.asarray(args))


def oracle_indicator(x, rho):
    n = x.shape[0]
    d2 = oracle_sq_dists(x)
    order = sorted(range(n), key=lambda i: (-rho[i], i))
    rank = {tok: pos for pos, tok in enumerate(order)}
    delta = []
    for i in range(n):
        denser = [j for j in range(n) if rank[j] < rank[i]]
        if denser:
            delta.append(min(math.sqrt(d2[i][j]) for j in denser))
        else:
            others = [math.sqrt(d2[i][j]) for j in range(n) if j != i]
            delta.append(max(others) if others else 0.0)
    return np.asarray(delta)


def oracle_centers(rho, delta, m):
    n = len(rho)
    score = [rho[i] * delta[i] for i in range(n)]
    picked = sorted(range(n), key=lambda i: (-score[i], i))[:m]
    return sorted(picked)


def oracle_assign(x, centers):
    d2 = oracle_sq_dists(x)
    ids = []
    for i in range(x.shape[0]):
        best = min(range(len(centers)), key=lambda c: (d2[i][centers[c]], c))
        ids.append(best)
    for cid, tok in enumerate(centers):
        ids[tok] = cid
    return np.asarray(ids)


class TestLocalDensity:
    def test_identical_tokens(self):
        x = np.ones((5, 3))
        assert np.array_equal(local_density(x, 2), np.ones(5))

    def test_three_point_line(self):
        x = np.array([[0.0], [1.0], [3.0]])
        rho = local_density(x, 1)
        assert np.array_equal(rho, [math.exp(-1.0), math.exp(-1.0), math.exp(-4.0)])

    def test_k_out_of_range(self):
        x = np.zeros((4, 2))
        with pytest.raises(ConfigurationError):
            local_density(x, 0)
        with pytest.raises(ConfigurationError):
            local_density(x, 4)
        with pytest.raises(ConfigurationError):
            local_density(np.zeros((1, 2)), 1)


class TestDistanceIndicator:
    def test_identical_tokens_tie_order(self):
        x = np.ones((4, 2))
        rho = local_density(x, 1)
        delta = distance_indicator(x, rho)
        # token 0 is the tie-order maximum; its max distance to others is 0
        assert np.array_equal(delta, np.zeros(4))

    def test_three_point_line(self):
        x = np.array([[0.0], [1.0], [3.0]])
        rho = local_density(x, 1)
        delta = distance_indicator(x, rho)
        assert np.array_equal(delta, [3.0, 1.0, 2.0])

    def test_exactly_one_max_branch(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((10, 3))
        rho = local_density(x, 3)
        order = sorted(range(10), key=lambda i: (-rho[i], i))
        # only the first token in the order takes the max-distance branch
        d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
        delta = distance_indicator(x, rho)
        top = order[0]
        assert delta[top] == np.delete(d[top], top).max()


class TestSelectCenters:
    def test_all_tokens(self):
        assert select_centers(np.ones(4), np.ones(4), 4) == [0, 1, 2, 3]

    def test_direct(self):
        rho = np.array([2.0, 1.0, 3.0])
        delta = np.array([3.0, 2.0, 3.0])  # scores 6, 2, 9
        assert select_centers(rho, delta, 2) == [0, 2]

    def test_tie_rule(self):
        assert select_centers(np.ones(4), np.ones(4), 2) == [0, 1]

    def test_m_out_of_range(self):
        with pytest.raises(ConfigurationError):
            select_centers(np.ones(3), np.ones(3), 0)
        with pytest.raises(ConfigurationError):
            select_centers(np.ones(3), np.ones(3), 4)


class TestAssign:
    def test_single_center(self):
        x = np.random.default_rng(1).standard_normal((6, 2))
        assert np.array_equal(assign(x, [3]), np.zeros(6, dtype=int))

    def test_equidistant_tie(self):
        x = np.array([[0.0], [2.0], [1.0]])
        assert np.array_equal(assign(x, [0, 1]), [0, 1, 0])

    def test_duplicate_center_maps_to_itself(self):
        x = np.array([[0.0], [0.0], [5.0]])
        assert np.array_equal(assign(x, [0, 1]), [0, 1, 0])


class TestOracleEquivalence:
    def test_pipeline_matches_brute_force(self):
        """Acceptance criterion 1: 200 random sets, exact equality."""
        rng = np.random.default_rng(42)
        for trial in range(200):
            n = int(rng.integers(2, 65))
            d = int(rng.integers(1, 9))
            scale = float(rng.choice([0.1, 1.0, 10.0]))
            x = rng.standard_normal((n, d)) * scale
            k = int(rng.integers(1, n))
            m = int(rng.integers(1, n + 1))

            res = cluster_tokens(x, k, m)
            rho = oracle_density(x, k)
            assert np.array_equal(res.rho, rho), f"trial {trial}: rho"
            delta = oracle_indicator(x, rho)
            assert np.array_equal(res.delta, delta), f"trial {trial}: delta"
            centers = oracle_centers(rho, delta, m)
            assert res.centers == centers, f"trial {trial}: centers"
            assert np.array_equal(res.assignment, oracle_assign(x, centers)), \
                f"trial {trial}: assignment"

    def test_assignment_is_total_and_centers_self_assign(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.standard_normal((24, 4))
            res = cluster_tokens(x, 4, 6)
            assert sorted(set(res.assignment.tolist())) == list(range(6))
            for cid, tok in enumerate(res.centers):
                assert res.assignment[tok] == cid

    def test_permutation_consistency(self):
        """Permuting tokens permutes the result, up to index tie rules."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((20, 5))  # continuous data: ties have measure zero
        perm = rng.permutation(20)
        base = cluster_tokens(x, 4, 5)
        permuted = cluster_tokens(x[perm], 4, 5)
        assert np.array_equal(permuted.rho, base.rho[perm])
        assert np.array_equal(permuted.delta, base.delta[perm])
        assert sorted(perm[permuted.centers].tolist()) == base.centers
        # cluster ids are ordered by center index, so compare as partitions
        base_parts = {frozenset(np.flatnonzero(base.assignment == c).tolist())
                      for c in range(5)}
        perm_parts = {frozenset(perm[np.flatnonzero(permuted.assignment == c)].tolist())
                      for c in range(5)}
        assert base_parts == perm_parts
