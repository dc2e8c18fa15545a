"""Dense float tensors with reverse-mode automatic differentiation.

Tensors are rank 0-3, row-major, float32 or float64.  Operations build a
computation graph when any input has ``requires_grad``; :func:`backward`
walks it once in reverse topological order and accumulates gradients into
the leaves.  Gradients keep accumulating across calls until zeroed, which
is what makes gradient accumulation over micro-batches work.

A process-wide :data:`alloc_stats` counter tracks the bytes of live,
buffer-owning tensors (views are free), so benchmark code can observe peak
allocation of a measured region.  Only forward data buffers are counted;
leaf gradient buffers and transient numpy scratch are not.

No broadcasting is supported beyond adding a bias row vector; anything
else is a shape error.  This keeps every gradient rule short enough to
audit by eye.

A computation graph belongs to one logical thread; distinct graphs may
run on distinct threads.  Bit-exact reproducibility is claimed only for
the single-threaded configuration.
"""

from __future__ import annotations

import math
import weakref
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import Rng

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)

GELU_COEF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible with an operation."""


class AllocStats:
    """Live/peak byte counters for tensor buffers.

    ``peak_bytes`` is monotone within a measured region; ``reset_peak``
    starts a new region by collapsing the peak onto the current level.
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0

    def _add(self, n: int) -> None:
        self.current_bytes += n
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def _release(self, n: int) -> None:
        self.current_bytes -= n

    def reset_peak(self) -> None:
        self.peak_bytes = self.current_bytes


alloc_stats = AllocStats()


class Node:
    """Graph record: producing op name, input tensors, gradient rule."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = F32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (F32, F64):
            arr = arr.astype(F32)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 3): shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        if arr.base is None:
            alloc_stats._add(arr.nbytes)
            weakref.finalize(self, alloc_stats._release, arr.nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def zeros(shape, dtype=F32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dts)}")


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_same_dtype("matmul", a, b)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got shape {a.shape}")
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient through c)."""
    c = float(c)
    return _result("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def scale_rows(a: Tensor, row_scales: np.ndarray) -> Tensor:
    """Scale each row of a rank-2 tensor by a constant per-row factor."""
    r = np.asarray(row_scales, dtype=a.dtype)
    if a.data.ndim != 2 or r.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: tensor {a.shape} vs row factors {r.shape}")
    col = r[:, None]
    return _result("scale_rows", a.data * col, (a,), lambda g: (g * col,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an [m, n] tensor.

    This is the single supported broadcast; db sums over rows.
    """
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    _check_same_dtype("add_bias", x, b)
    return _result("add_bias", x.data + b.data[None, :], (x, b),
                   lambda g: (g, g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a rank-0 tensor."""

    def backward_fn(g):
        return (np.full(a.data.shape, float(g), dtype=a.dtype),)

    return _result("sum_all", np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward_fn)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a rank-2 tensor; the forward value is a view."""
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] of shape {a.shape}")

    def backward_fn(g):
        full = np.zeros(a.data.shape, dtype=a.dtype)
        full[:, lo:hi] = g
        return (full,)

    return _result("slice_cols", a.data[:, lo:hi], (a,), backward_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: incompatible shapes {[p.shape for p in parts]}")
    _check_same_dtype("concat_cols", *parts)
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result("concat_cols", np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), backward_fn)


def concat_vec(parts: Sequence[Tensor]) -> Tensor:
    if any(p.data.ndim != 1 for p in parts):
        raise ShapeError(f"concat_vec: non rank-1 parts {[p.shape for p in parts]}")
    _check_same_dtype("concat_vec", *parts)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result("concat_vec", np.concatenate([p.data for p in parts]), tuple(parts), backward_fn)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into a rank-2 [len(parts), n]."""
    if any(p.data.ndim != 1 for p in parts) or len({p.shape[0] for p in parts}) != 1:
        raise ShapeError(f"stack_rows: incompatible parts {[p.shape for p in parts]}")
    _check_same_dtype("stack_rows", *parts)

    def backward_fn(g):
        return tuple(g[i] for i in range(len(parts)))

    return _result("stack_rows", np.stack([p.data for p in parts]), tuple(parts), backward_fn)


def row_at(x: Tensor, i: int) -> Tensor:
    """Row i of a rank-2 tensor as a rank-1 tensor."""
    if x.data.ndim != 2 or not (0 <= i < x.shape[0]):
        raise ShapeError(f"row_at({i}) of shape {x.shape}")

    def backward_fn(g):
        full = np.zeros(x.data.shape, dtype=x.dtype)
        full[i] = g
        return (full,)

    return _result("row_at", x.data[i], (x,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    # one fresh buffer, transformed in place (x itself is never touched)
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    return _result("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    # explicit products: numpy's float32 integer-power path is very slow
    u = SQRT_2_OVER_PI * (xd + GELU_COEF * (xd * xd * xd))
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * (xd * xd))
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result("gelu", y.astype(x.dtype, copy=False), (x,), backward_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation, kind in {"gelu", "relu"}."""
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (population var),
    then apply the learned affine gamma * xhat + beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} vs last dim {d}")
    _check_same_dtype("layer_norm", x, gamma, beta)
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    y = gamma.data * xhat + beta.data

    def backward_fn(g):
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbeta = g.sum(axis=axes) if axes else g
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return _result("layer_norm", y.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[Rng] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity when not training or p == 0.
    """
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.uniform(x.data.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# lookup and loss
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of [V, D] table; gradient scatter-adds into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: table {table.shape}, ids rank {ids.ndim}")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = int(ids.max() if ids.max() >= v else ids.min())
        raise ValueError(f"token id {bad} out of vocabulary (size {v})")

    def backward_fn(g):
        d = np.zeros(table.data.shape, dtype=table.dtype)
        np.add.at(d, ids, g)
        return (d,)

    return _result("embedding_lookup", table.data[ids], (table,), backward_fn)


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_mean: logits {logits.shape}, labels {labels.shape}")
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label {int(labels.max())} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), labels].mean()
    sm = np.exp(logp)

    def backward_fn(g):
        d = sm.copy()
        d[np.arange(b), labels] -= 1.0
        return (d * (float(g) / b),)

    return _result("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from a scalar loss.

    Gradients accumulate: calling backward twice on the same graph doubles
    the leaf gradients.  Each graph node's rule runs exactly once per call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += np.ones_like(loss.data)
            return
        raise ValueError("loss is not connected to a computation graph")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, ig in zip(t.node.inputs, t.node.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += ig
            else:
                held = grads.get(id(inp))
                # fresh array on second contribution; never mutate a stored one
                grads[id(inp)] = ig if held is None else held + ig


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function, (f(x+h)-f(x-h))/2h.

    The independent oracle for every backward rule; requires float64 input.
    """
    if x.dtype != F64:
        raise ValueError("finite_difference_gradient requires a float64 tensor")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        probe = base.copy().reshape(-1)
        probe[i] = orig + h
        fp = f(Tensor(probe.reshape(base.shape), dtype=F64)).item()
        probe[i] = orig - h
        fm = f(Tensor(probe.reshape(base.shape), dtype=F64)).item()
        flat_grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad, dtype=F64)


def gradient_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative disagreement between two gradients.

    When both gradients are essentially zero the comparison is absolute,
    so exact structural zeros (softmax shift invariance, unused rows) do
    not divide noise by noise.
    """
    if analytic.size == 0:
        return 0.0
    diff = float(np.max(np.abs(analytic - numeric)))
    ref = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if ref < 1e-8:
        return diff
    return diff / ref
