"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from mergeseg import tensor as T
from mergeseg.checks import (PIPELINE_TOL, PRIMITIVE_TOL, primitive_checks,
                             stage_pipeline_check)
from mergeseg.merge import init_pmb_weights, pmb_stage
from mergeseg.patches import TokenSet


def test_linear_map_is_exact():
    rng = np.random.default_rng(1)
    b = T.constant(rng.standard_normal((6, 4)))
    err = T.grad_check(lambda x: T.matmul(x, b), [T.Tensor(rng.standard_normal((3, 6)))])
    assert err <= 1e-10


def test_softmax_matmul_composite():
    rng = np.random.default_rng(2)
    inputs = [T.Tensor(rng.standard_normal((4, 5))), T.Tensor(rng.standard_normal((5, 4)))]
    err = T.grad_check(lambda a, b: T.softmax(T.matmul(a, b), axis=1), inputs)
    assert err <= 1e-6


def test_every_primitive():
    for name, err in primitive_checks().items():
        assert err <= PRIMITIVE_TOL, f"{name}: {err:.3e}"


def test_merge_stage_on_16_tokens():
    """One merge stage alone, gradients wrt all its weights."""
    rng = np.random.default_rng(3)

    def make(name, shape, init):
        data = np.ones(shape) if init == "ones" else (
            np.zeros(shape) if init == "zeros" else rng.standard_normal(shape) * 0.1)
        return T.Tensor(data, requires_grad=True)

    w = init_pmb_weights(make, 8, dw_kernel=3, mlp_ratio=2)
    feats = rng.standard_normal((16, 8))
    coords = [(r, c) for r in range(4) for c in range(4)]
    tensors = [v for v in vars(w).values() if isinstance(v, T.Tensor)]

    def fn(*weights):
        for new, old in zip(weights, tensors):
            old.data = new.data
        tokens = TokenSet(T.Tensor(feats), coords, (4, 4), 1)
        return pmb_stage(tokens, w, m=4, k=3).tokens.features

    assert T.grad_check(fn, tensors) <= 1e-4


def test_full_stage_plus_recovery():
    assert stage_pipeline_check() <= PIPELINE_TOL


def test_nondifferentiable_point_is_reported():
    # |x| probed across its kink: the checker must surface the disagreement
    # as a large error instead of passing silently.
    def absval(x):
        return T.mul(x, T.constant(np.sign(x.data)))
    err = T.grad_check(absval, [T.Tensor(np.array([1e-7, 1.0]))])
    assert err > 1e-2
