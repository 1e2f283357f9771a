"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are immutable numpy arrays (float32 for the training runtime, float64
for tests and oracles). Every operation builds a graph node recording its
parents, a replayable forward function, and a backward closure; calling
``backward()`` on a scalar walks the recorded graph in reverse and accumulates
gradients into the ``grad`` field of every node that requires them.

Two operations carry a contractual summation order so that naive-loop oracles
can reproduce them bit-for-bit:

* ``matmul`` accumulates each output element over the contraction index in
  ascending order (out[i,j] = (((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)).
* ``dwconv2d`` accumulates kernel taps in ascending row-major (di, dj) order.

Everything else only promises run-to-run determinism for identical inputs.
No general broadcasting: binary operations require equal shapes except for the
documented ``add_bias`` / ``row_scale`` helpers.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import ConfigurationError, DimensionError

SUPPORTED_DTYPES = (np.float32, np.float64)


@njit(cache=True)
def _mm_kernel(a, b, out):
    # Row-wise saxpy accumulation: each out[i, j] sums a[i, k] * b[k, j]
    # strictly in ascending k, matching the naive triple-loop oracle bit
    # for bit while letting LLVM vectorize across j.
    m, kdim = a.shape
    n = b.shape[1]
    for i in range(m):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    return _mm_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b), out)


class Tensor:
    """A dense n-dimensional value plus its place in the recorded graph.

    ``data`` is a C-contiguous numpy array and must never be mutated after
    construction; ``grad`` is populated by ``backward()``. Leaves created with
    ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_op_fn", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple[Tensor, ...] = (), op_fn=None, backward=None):
        arr = np.asarray(data)
        if arr.dtype.type not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.op = op
        self.parents = parents
        self._op_fn = op_fn
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; accumulates into ``grad``."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar root, got shape {self.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)

    # Small amount of operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=np.float64) -> Tensor:
    """A graph leaf that never receives gradients."""
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, dtype=np.float32) -> Tensor:
    """A trainable graph leaf."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def topo_order(root: Tensor) -> list[Tensor]:
    """Ancestors of ``root`` in dependency order (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def replay(root: Tensor) -> np.ndarray:
    """Re-execute the recorded graph and return the recomputed root value.

    Raises NumericError-free AssertionError never; callers compare the result
    against ``root.data`` to check the bit-for-bit replay contract.
    """
    recomputed: dict[int, np.ndarray] = {}
    for node in topo_order(root):
        if node._op_fn is None:
            recomputed[id(node)] = node.data
        else:
            recomputed[id(node)] = node._op_fn(*[recomputed[id(p)] for p in node.parents])
    return recomputed[id(root)]


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data, op="add", parents=(a, b), op_fn=lambda x, y: x + y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g)
        if b.requires_grad:
            _acc(b, g)
    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    out = Tensor(a.data - b.data, op="sub", parents=(a, b), op_fn=lambda x, y: x - y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g)
        if b.requires_grad:
            _acc(b, -g)
    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    out = Tensor(a.data * b.data, op="mul", parents=(a, b), op_fn=lambda x, y: x * y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)
    out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    out = Tensor(a.data / b.data, op="div", parents=(a, b), op_fn=lambda x, y: x / y)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g / b.data)
        if b.requires_grad:
            _acc(b, -g * out.data / b.data)
    out._backward = bwd
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data + c, op="add_const", parents=(a,), op_fn=lambda x: x + c)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g)
    out._backward = bwd
    return out


def mul_const(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c, op="mul_const", parents=(a,), op_fn=lambda x: x * c)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * c)
    out._backward = bwd
    return out


def recip(a: Tensor) -> Tensor:
    out = Tensor(1.0 / a.data, op="recip", parents=(a,), op_fn=lambda x: 1.0 / x)

    def bwd(g):
        if a.requires_grad:
            _acc(a, -g * out.data * out.data)
    out._backward = bwd
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the one sanctioned broadcast for bias vectors."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match {x.shape}")
    if x.data.dtype != b.data.dtype:
        raise TypeError("add_bias: dtype mismatch")
    out = Tensor(x.data + b.data, op="add_bias", parents=(x, b), op_fn=lambda xd, bd: xd + bd)

    def bwd(g):
        if x.requires_grad:
            _acc(x, g)
        if b.requires_grad:
            _acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    out._backward = bwd
    return out


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """x[i, :] * s[i] for 2-D x; the one sanctioned per-row broadcast."""
    if x.data.ndim != 2 or s.data.shape != (x.data.shape[0],):
        raise DimensionError(f"row_scale: scale {s.shape} does not match {x.shape}")
    out = Tensor(x.data * s.data[:, None], op="row_scale", parents=(x, s),
                 op_fn=lambda xd, sd: xd * sd[:, None])

    def bwd(g):
        if x.requires_grad:
            _acc(x, g * s.data[:, None])
        if s.requires_grad:
            _acc(s, (g * x.data).sum(axis=1))
    out._backward = bwd
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), op="reshape", parents=(a,),
                 op_fn=lambda x: x.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            _acc(a, g.reshape(a.data.shape))
    out._backward = bwd
    return out


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), op="transpose", parents=(a,),
                 op_fn=lambda x: np.ascontiguousarray(x.transpose(axes)))

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(g.transpose(inverse)))
    out._backward = bwd
    return out


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.data.dtype != b.data.dtype:
        raise TypeError("concat: dtype mismatch")
    na = a.data.shape[axis]
    out = Tensor(np.concatenate([a.data, b.data], axis=axis), op="concat", parents=(a, b),
                 op_fn=lambda x, y: np.concatenate([x, y], axis=axis))

    def bwd(g):
        ga, gb = np.split(g, [na], axis=axis)
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(ga))
        if b.requires_grad:
            _acc(b, np.ascontiguousarray(gb))
    out._backward = bwd
    return out


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.data.shape[1]):
        raise DimensionError(f"slice_cols: [{lo}:{hi}] invalid for {a.shape}")
    out = Tensor(a.data[:, lo:hi].copy(), op="slice_cols", parents=(a,),
                 op_fn=lambda x: x[:, lo:hi].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            _acc(a, full)
    out._backward = bwd
    return out


def slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise DimensionError(f"slice_axis: axis {axis} out of range for {a.shape}")
    axis = axis % a.data.ndim
    if not (0 <= lo < hi <= a.data.shape[axis]):
        raise DimensionError(f"slice_axis: [{lo}:{hi}] invalid for {a.shape} axis {axis}")
    sel = tuple(slice(None) if ax != axis else slice(lo, hi) for ax in range(a.data.ndim))
    out = Tensor(a.data[sel].copy(), op="slice_axis", parents=(a,),
                 op_fn=lambda x: x[sel].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sel] = g
            _acc(a, full)
    out._backward = bwd
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    """out[i] = a[idx[i]]; backward scatter-adds in ascending output index."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or a.data.ndim < 1:
        raise DimensionError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError("gather_rows: index out of range")
    out = Tensor(a.data[idx].copy(), op="gather_rows", parents=(a,),
                 op_fn=lambda x: x[idx].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _acc(a, full)
    out._backward = bwd
    return out


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for 2-D a; used to pick true-class log-probs."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.data.shape[0]
    if a.data.ndim != 2 or idx.shape != (n,):
        raise DimensionError("take_per_row: needs 2-D input and one index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise DimensionError("take_per_row: column index out of range")
    rows = np.arange(n)
    out = Tensor(a.data[rows, idx].copy(), op="take_per_row", parents=(a,),
                 op_fn=lambda x: x[rows, idx].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            _acc(a, full)
    out._backward = bwd
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), op="sum_all", parents=(a,), op_fn=lambda x: np.asarray(x.sum()))

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
    out._backward = bwd
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise DimensionError(f"sum_axis: axis {axis} out of range for {a.shape}")
    axis = axis % a.data.ndim
    out = Tensor(a.data.sum(axis=axis), op="sum_axis", parents=(a,),
                 op_fn=lambda x: x.sum(axis=axis))

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis=axis)))
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), op="exp", parents=(a,), op_fn=np.exp)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * out.data)
    out._backward = bwd
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), op="log", parents=(a,), op_fn=np.log)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g / a.data)
    out._backward = bwd
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), op="tanh", parents=(a,), op_fn=np.tanh)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * (1.0 - out.data * out.data))
    out._backward = bwd
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    return z


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_sigmoid(a.data), op="sigmoid", parents=(a,), op_fn=_sigmoid)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * out.data * (1.0 - out.data))
    out._backward = bwd
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu_fwd(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * (x * x * x))))


def gelu(a: Tensor) -> Tensor:
    """Smooth gate x * Phi(x), tanh form; gelu(0) = 0 exactly."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    out = Tensor(0.5 * x * (1.0 + t), op="gelu", parents=(a,), op_fn=_gelu_fwd)

    def bwd(g):
        if a.requires_grad:
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            _acc(a, g * d)
    out._backward = bwd
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow-free form; derivative is sigmoid."""
    def fwd(x):
        return np.logaddexp(x.dtype.type(0.0), x)
    out = Tensor(fwd(a.data), op="softplus", parents=(a,), op_fn=fwd)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * _sigmoid(a.data))
    out._backward = bwd
    return out


def power_const(a: Tensor, p: float) -> Tensor:
    """Elementwise x ** p for constant p >= 0; inputs must be non-negative."""
    p = float(p)
    out = Tensor(np.power(a.data, p), op="power_const", parents=(a,),
                 op_fn=lambda x: np.power(x, p))

    def bwd(g):
        if a.requires_grad:
            if p == 0.0:
                _acc(a, np.zeros_like(a.data))
            else:
                _acc(a, g * p * np.power(a.data, p - 1.0))
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _softmax_fwd(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax; outputs in (0, 1] and sum to 1 along ``axis``."""
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise DimensionError(f"softmax: axis {axis} out of range for {a.shape}")
    axis = axis % a.data.ndim
    out = Tensor(_softmax_fwd(a.data, axis), op="softmax", parents=(a,),
                 op_fn=lambda x: _softmax_fwd(x, axis))

    def bwd(g):
        if a.requires_grad:
            y = out.data
            _acc(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    out._backward = bwd
    return out


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise DimensionError(f"log_softmax: axis {axis} out of range for {a.shape}")
    axis = axis % a.data.ndim

    def fwd(x):
        shifted = x - x.max(axis=axis, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(fwd(a.data), op="log_softmax", parents=(a,), op_fn=fwd)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# normalization and convolution
# ---------------------------------------------------------------------------

LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},)")
    eps = float(eps)

    def fwd(xd, gd, bd):
        mean = xd.mean(axis=-1, keepdims=True)
        var = ((xd - mean) ** 2).mean(axis=-1, keepdims=True)
        xhat = (xd - mean) / np.sqrt(var + eps)
        return xhat * gd + bd

    mean = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gain.data + bias.data, op="layer_norm", parents=(x, gain, bias), op_fn=fwd)

    def bwd(g):
        if gain.requires_grad:
            _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _acc(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _acc(x, gx)
    out._backward = bwd
    return out


def dwconv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Depthwise 2-D convolution, zero padding, no cross-channel mixing.

    x: (C, H, W); kernels: (C, k, k) with odd k. Kernel taps accumulate in
    ascending row-major (di, dj) order so a sliding-window oracle matches
    exactly.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 3:
        raise DimensionError("dwconv2d: expects (C,H,W) input and (C,k,k) kernels")
    c, h, w = x.data.shape
    ck, kh, kw = kernels.data.shape
    if ck != c or kh != kw:
        raise DimensionError(f"dwconv2d: kernels {kernels.shape} do not match input {x.shape}")
    if kh % 2 == 0:
        raise ConfigurationError(f"dwconv2d: kernel size must be odd, got {kh}")
    pad = kh // 2

    def fwd(xd, kd):
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad)))
        out = np.zeros_like(xd)
        for di in range(kh):
            for dj in range(kw):
                out += kd[:, di, dj][:, None, None] * xp[:, di:di + h, dj:dj + w]
        return out

    out = Tensor(fwd(x.data, kernels.data), op="dwconv2d", parents=(x, kernels), op_fn=fwd)

    def bwd(g):
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
        if kernels.requires_grad:
            dk = np.zeros_like(kernels.data)
            for di in range(kh):
                for dj in range(kw):
                    dk[:, di, dj] = (g * xp[:, di:di + h, dj:dj + w]).sum(axis=(1, 2))
            _acc(kernels, dk)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gp[:, di:di + h, dj:dj + w] += kernels.data[:, di, dj][:, None, None] * g
            _acc(x, gp[:, pad:pad + h, pad:pad + w])
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# fused channel-wise affinity aggregation (used by the feature fusion module)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _chan_affinity_fwd(u, v, f):
    p, c = u.shape
    attn = np.empty((p, p, c), dtype=u.dtype)
    out = np.zeros((p, c), dtype=u.dtype)
    for ci in range(c):
        for pi in range(p):
            amax = u[pi, ci] * v[0, ci]
            for qi in range(1, p):
                logit = u[pi, ci] * v[qi, ci]
                if logit > amax:
                    amax = logit
            denom = 0.0
            for qi in range(p):
                e = np.exp(u[pi, ci] * v[qi, ci] - amax)
                attn[pi, qi, ci] = e
                denom += e
            acc = 0.0
            for qi in range(p):
                attn[pi, qi, ci] = attn[pi, qi, ci] / denom
                acc += attn[pi, qi, ci] * f[qi, ci]
            out[pi, ci] = acc
    return out, attn


@njit(cache=True)
def _chan_affinity_bwd(g, attn, u, v, f):
    p, c = u.shape
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    df = np.zeros_like(f)
    for ci in range(c):
        for pi in range(p):
            gval = g[pi, ci]
            inner = 0.0
            for qi in range(p):
                a = attn[pi, qi, ci]
                df[qi, ci] += a * gval
                inner += gval * f[qi, ci] * a
            for qi in range(p):
                a = attn[pi, qi, ci]
                dlogit = a * (gval * f[qi, ci] - inner)
                du[pi, ci] += dlogit * v[qi, ci]
                dv[qi, ci] += dlogit * u[pi, ci]
    return du, dv, df


def channel_affinity(u: Tensor, v: Tensor, f: Tensor) -> Tensor:
    """Per-channel token-to-token reweighting.

    For each channel c the affinity A_c = softmax_q(u[p,c] * v[q,c]) is a
    row-stochastic (P, P) matrix, and the output aggregates channel c of f
    through it: out[p,c] = sum_q A_c[p,q] * f[q,c]. Implemented fused because
    the (P, P, C) logits volume would otherwise dominate the graph.
    """
    if u.data.shape != v.data.shape or u.data.shape != f.data.shape or u.data.ndim != 2:
        raise DimensionError("channel_affinity: u, v, f must share a 2-D (P, C) shape")

    def fwd(ud, vd, fd):
        return _chan_affinity_fwd(ud, vd, fd)[0]

    data, attn = _chan_affinity_fwd(u.data, v.data, f.data)
    out = Tensor(data, op="channel_affinity", parents=(u, v, f), op_fn=fwd)

    def bwd(g):
        needs = (u.requires_grad, v.requires_grad, f.requires_grad)
        if not any(needs):
            return
        du, dv, df = _chan_affinity_bwd(np.ascontiguousarray(g), attn,
                                        u.data, v.data, f.data)
        if u.requires_grad:
            _acc(u, du)
        if v.requires_grad:
            _acc(v, dv)
        if f.requires_grad:
            _acc(f, df)
    out._backward = bwd
    return out


def affinity_volume(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """The (P, P, C) row-stochastic affinity tensor channel_affinity aggregates with."""
    logits = u[:, None, :] * v[None, :, :]
    amax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - amax)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product with contractual ascending-k summation order."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    out = Tensor(_mm(a.data, b.data), op="matmul", parents=(a, b), op_fn=_mm)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _mm(g, b.data.T))
        if b.requires_grad:
            _acc(b, _mm(a.data.T, g))
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` must be pure. A fixed weighting tensor reduces non-scalar outputs
    to the scalar L(inputs) = sum(w * fn(inputs)); the relative step for
    element x is h * max(1, |x|). Returns the max relative error over all
    input elements, where rel = |ad - fd| / max(|ad|, |fd|, 1). A large
    return value is the reported symptom of a kink or discontinuity under
    the probe; callers decide the threshold.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ConfigurationError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    out0 = fn(*inputs)
    w = np.random.default_rng(2718281828).standard_normal(out0.data.shape)

    def scalar_value(*datas: np.ndarray) -> float:
        probes = [Tensor(d) for d in datas]
        return float((fn(*probes).data * w).sum())

    loss = sum_all(mul(out0, constant(w, dtype=np.float64)))
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    base = [t.data.copy() for t in inputs]
    for which, t in enumerate(inputs):
        flat = base[which].reshape(-1)
        for i in range(flat.size):
            step = h * max(1.0, abs(flat[i]))
            saved = flat[i]
            flat[i] = saved + step
            up = scalar_value(*base)
            flat[i] = saved - step
            down = scalar_value(*base)
            flat[i] = saved
            fd = (up - down) / (2.0 * step)
            ad = analytic[which].reshape(-1)[i]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
            worst = max(worst, rel)
    return worst
