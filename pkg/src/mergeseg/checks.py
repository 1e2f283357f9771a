"""Gradient verification suite: every primitive, then a full merge+recover stage.

Thresholds: primitives must agree with central finite differences to 1e-6
relative error, the composite stage to 1e-4 (float64, 16 tokens, cluster
assignments recomputed from the fixed inputs and therefore constant).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .merge import (MergeRecord, init_pmb_weights, init_recover_weights,
                    pmb_stage, recover)
from .patches import TokenSet

PRIMITIVE_TOL = 1e-6
PIPELINE_TOL = 1e-4
LINEAR_TOL = 1e-10


def _t(rng, *shape, positive=False, scale=1.0):
    data = rng.uniform(0.2, 1.5, shape) if positive else rng.standard_normal(shape) * scale
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error per primitive."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    results["matmul"] = T.grad_check(T.matmul, [_t(rng, 4, 5), _t(rng, 5, 3)])
    results["add"] = T.grad_check(T.add, [_t(rng, 3, 4), _t(rng, 3, 4)])
    results["sub"] = T.grad_check(T.sub, [_t(rng, 3, 4), _t(rng, 3, 4)])
    results["mul"] = T.grad_check(T.mul, [_t(rng, 3, 4), _t(rng, 3, 4)])
    results["div"] = T.grad_check(T.div, [_t(rng, 3, 4), _t(rng, 3, 4, positive=True)])
    results["add_const"] = T.grad_check(lambda x: T.add_const(x, 0.7), [_t(rng, 6)])
    results["mul_const"] = T.grad_check(lambda x: T.mul_const(x, -1.3), [_t(rng, 6)])
    results["recip"] = T.grad_check(T.recip, [_t(rng, 3, 3, positive=True)])
    results["add_bias"] = T.grad_check(T.add_bias, [_t(rng, 4, 5), _t(rng, 5)])
    results["row_scale"] = T.grad_check(T.row_scale, [_t(rng, 4, 5), _t(rng, 4)])
    results["reshape"] = T.grad_check(lambda x: T.reshape(x, (2, 6)), [_t(rng, 3, 4)])
    results["transpose"] = T.grad_check(lambda x: T.transpose(x, (2, 0, 1)), [_t(rng, 2, 3, 4)])
    results["concat"] = T.grad_check(lambda a, b: T.concat(a, b, 1), [_t(rng, 3, 2), _t(rng, 3, 4)])
    results["slice_cols"] = T.grad_check(lambda x: T.slice_cols(x, 1, 4), [_t(rng, 3, 5)])
    results["slice_axis"] = T.grad_check(lambda x: T.slice_axis(x, 1, 0, 2), [_t(rng, 2, 4, 3)])
    idx = np.array([2, 0, 2, 1])
    results["gather_rows"] = T.grad_check(lambda x: T.gather_rows(x, idx), [_t(rng, 3, 4)])
    cols = np.array([1, 0, 2])
    results["take_per_row"] = T.grad_check(lambda x: T.take_per_row(x, cols), [_t(rng, 3, 4)])
    results["sum_all"] = T.grad_check(T.sum_all, [_t(rng, 3, 4)])
    results["sum_axis"] = T.grad_check(lambda x: T.sum_axis(x, 1), [_t(rng, 3, 4, 2)])
    results["exp"] = T.grad_check(T.exp, [_t(rng, 3, 3)])
    results["log"] = T.grad_check(T.log, [_t(rng, 3, 3, positive=True)])
    results["tanh"] = T.grad_check(T.tanh, [_t(rng, 3, 3)])
    results["sigmoid"] = T.grad_check(T.sigmoid, [_t(rng, 3, 3)])
    results["gelu"] = T.grad_check(T.gelu, [_t(rng, 3, 3)])
    results["softplus"] = T.grad_check(T.softplus, [_t(rng, 3, 3)])
    results["power_const"] = T.grad_check(lambda x: T.power_const(x, 2.0), [_t(rng, 4, positive=True)])
    results["softmax"] = T.grad_check(lambda x: T.softmax(x, 1), [_t(rng, 4, 5)])
    results["log_softmax"] = T.grad_check(lambda x: T.log_softmax(x, 1), [_t(rng, 4, 5)])
    results["layer_norm"] = T.grad_check(T.layer_norm, [_t(rng, 4, 6), _t(rng, 6), _t(rng, 6)])
    results["dwconv2d"] = T.grad_check(T.dwconv2d, [_t(rng, 3, 5, 5), _t(rng, 3, 3, 3)])
    results["channel_affinity"] = T.grad_check(
        T.channel_affinity, [_t(rng, 4, 3), _t(rng, 4, 3), _t(rng, 4, 3)])
    return results


def _f64_weight_maker(rng):
    def make(name, shape, init):
        if init == "ones":
            data = np.ones(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) * 0.1
        return T.Tensor(data.astype(np.float64), requires_grad=True)
    return make


def stage_pipeline_check(seed: int = 0, n_side: int = 4, dim: int = 8) -> float:
    """Finite-difference check of one merge stage plus its recovery.

    16 tokens on a 4x4 grid, float64; weights are the checked inputs, token
    features stay fixed so the cluster structure is constant under the probe.
    """
    rng = np.random.default_rng(seed)
    make = _f64_weight_maker(rng)
    pmb = init_pmb_weights(make, dim, dw_kernel=3, mlp_ratio=2)
    rec = init_recover_weights(make, dim, num_heads=2, mlp_ratio=2)

    feats = rng.standard_normal((n_side * n_side, dim))
    coords = [(r, c) for r in range(n_side) for c in range(n_side)]
    structs = (pmb, rec)
    inputs: list[T.Tensor] = []
    for struct in structs:
        for name in vars(struct):
            value = getattr(struct, name)
            if isinstance(value, T.Tensor):
                inputs.append(value)
            elif hasattr(value, "__dataclass_fields__"):
                inputs.extend(v for v in vars(value).values() if isinstance(v, T.Tensor))

    def fn(*weights):
        for w_new, w_old in zip(weights, inputs):
            w_old.data = w_new.data  # rebind the probed value into the structs
        tokens = TokenSet(T.Tensor(feats), coords, (n_side, n_side), 1)
        res = pmb_stage(tokens, pmb, m=4, k=3)
        record = MergeRecord.from_maps([res.stage_map])
        return recover(res.tokens, record, [tokens], [rec]).features

    return T.grad_check(fn, inputs)
