"""Reverse-mode automatic differentiation on dense float64 arrays.

A small define-by-run tape: every operation allocates a fresh ``Tensor`` and
records a backward closure, so the graph is rebuilt on each forward pass and
is acyclic by construction.  Enough coverage for MLPs, a one-block causal
transformer, softmax/cross-entropy, and gradients with respect to inputs and
learned perturbations.

Conventions:

* float64 everywhere; finite-difference probes downstream need the headroom.
* no implicit broadcasting between tensors: shapes must conform exactly, and
  the only shape-changing primitives are explicit (``reshape``, ``concat``,
  ``narrow``, ``expand_last``, ``tile_first``, matmul with documented batch
  forms).
* reductions and row-wise ops (``softmax``, ``log_softmax``, ``layer_norm``,
  ``mean_last`` ...) act along the last axis.
* inputs to every op must be finite; producing a non-finite value from finite
  inputs is a bug in the op, not the caller.
* ``clamp`` passes gradients through strictly inside the interval and zeroes
  them at or outside the boundary.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """An operation received or would produce non-finite values."""


class TapeError(RuntimeError):
    """The autodiff tape is malformed (non-scalar loss, cycle, ...)."""


def _shape_err(op: str, *shapes) -> ShapeError:
    described = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: shapes do not conform: {described}")


def _check_finite(op: str, *tensors: "Tensor") -> None:
    # each tensor is verified once: op outputs at creation, leaves on first use
    for t in tensors:
        if t._fin:
            continue
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input")
        t._fin = True


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves whose gradient should be accumulated by
    :func:`backward`.  Non-leaf tensors produced by ops carry the backward
    closure needed to propagate through them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_fin")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._fin = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def grad_array(self) -> np.ndarray:
        """Gradient of this leaf, zeros if the last backward never reached it."""
        if not self.requires_grad:
            raise ValueError("grad_array: tensor does not require grad")
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar for the common same-shape / scalar cases.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = False  # grad accumulates on leaves only
        out._parents = tuple(parents)
        out._backward = backward
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out._fin = True
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) onto every reachable leaf with requires_grad.

    ``loss`` must be a scalar produced by taped ops.  Leaves that are not on
    the path from ``loss`` are left untouched (their ``grad_array`` is zero).
    """
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    # Iterative topological sort with cycle detection.
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = visiting, 1 = done
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 1
            order.append(node)
            continue
        st = state.get(nid)
        if st == 1:
            continue
        if st == 0:
            raise TapeError("backward: cycle detected in tape")
        state[nid] = 0
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None or p.requires_grad:
                if state.get(id(p)) != 1:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if parent._backward is None and not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)
    _check_finite("add", a, b)
    return _node("add", a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    _check_finite("sub", a, b)
    return _node("sub", a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    _check_finite("mul", a, b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: ((a, g * b.data), (b, g * a.data)))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("div", a.shape, b.shape)
    _check_finite("div", a, b)
    out = a.data / b.data

    def bw(g):
        return ((a, g / b.data), (b, -g * a.data / (b.data * b.data)))

    return _node("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    _check_finite("neg", a)
    return _node("neg", -a.data, (a,), lambda g: ((a, -g),))


def add_tail(a: Tensor, b: Tensor) -> Tensor:
    """Add a lower-rank tensor along the trailing axes of a higher-rank one.

    ``b.shape`` must equal ``a.shape[k:]`` for some k >= 1 (e.g. a bias (d,)
    onto (B, T, d), or a (T, T) mask onto (B, T, T)); the gradient of ``b``
    sums over the leading axes.  This is the one sanctioned broadcast, with
    the alignment stated rather than inferred.
    """
    if b.ndim >= a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise _shape_err("add_tail", a.shape, b.shape)
    _check_finite("add_tail", a, b)
    lead = tuple(range(a.ndim - b.ndim))
    return _node("add_tail", a.data + b.data, (a, b),
                 lambda g: ((a, g), (b, g.sum(axis=lead))))


def add_scalar(a: Tensor, c: float) -> Tensor:
    _check_finite("add_scalar", a)
    c = float(c)
    return _node("add_scalar", a.data + c, (a,), lambda g: ((a, g),))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    _check_finite("mul_scalar", a)
    c = float(c)
    return _node("mul_scalar", a.data * c, (a,), lambda g: ((a, g * c),))


def power_scalar(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p.  Non-integer p requires strictly positive inputs."""
    _check_finite("power_scalar", a)
    p = float(p)
    if p != int(p) and np.any(a.data <= 0):
        raise ValueError("power_scalar: non-integer exponent needs positive inputs")
    out = a.data**p
    return _node("power_scalar", out, (a,),
                 lambda g: ((a, g * p * a.data ** (p - 1.0)),))


def square(a: Tensor) -> Tensor:
    _check_finite("square", a)
    return _node("square", a.data * a.data, (a,), lambda g: ((a, 2.0 * g * a.data),))


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a)
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    _check_finite("log", a)
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive")
    return _node("log", np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def sqrt(a: Tensor) -> Tensor:
    _check_finite("sqrt", a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: inputs must be non-negative")
    out = np.sqrt(a.data)

    def bw(g):
        denom = np.maximum(out, 1e-300)
        return ((a, g * 0.5 / denom),)

    return _node("sqrt", out, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    _check_finite("abs", a)
    return _node("abs", np.abs(a.data), (a,), lambda g: ((a, g * np.sign(a.data)),))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a)
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0.0), (a,),
                 lambda g: ((a, g * mask),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably via logaddexp."""
    _check_finite("softplus", a)
    out = np.logaddexp(0.0, a.data)
    return _node("softplus", out, (a,), lambda g: ((a, g * expit(a.data)),))


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", a)
    out = expit(a.data)
    return _node("sigmoid", out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def clamp(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clip to [lo, hi]; gradient is identity strictly inside, zero at/outside."""
    _check_finite("clamp", a)
    if lo is not None and hi is not None and lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    out = np.clip(a.data, lo, hi)
    interior = np.ones(a.shape, dtype=bool)
    if lo is not None:
        interior &= a.data > lo
    if hi is not None:
        interior &= a.data < hi
    return _node("clamp", out, (a,), lambda g: ((a, g * interior),))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with three documented forms.

    (m,k)@(k,n), (B,m,k)@(k,n) with a shared right operand, and the fully
    batched (B,m,k)@(B,k,n).  Anything else is a shape error.
    """
    _check_finite("matmul", a, b)
    sa, sb = a.shape, b.shape
    if a.ndim == 2 and b.ndim == 2:
        if sa[1] != sb[0]:
            raise _shape_err("matmul", sa, sb)
        out = a.data @ b.data

        def bw(g):
            return ((a, g @ b.data.T), (b, a.data.T @ g))

    elif a.ndim == 3 and b.ndim == 2:
        if sa[2] != sb[0]:
            raise _shape_err("matmul", sa, sb)
        out = a.data @ b.data

        def bw(g):
            return ((a, g @ b.data.T),
                    (b, np.tensordot(a.data, g, axes=([0, 1], [0, 1]))))

    elif a.ndim == 3 and b.ndim == 3:
        if sa[0] != sb[0] or sa[2] != sb[1]:
            raise _shape_err("matmul", sa, sb)
        out = a.data @ b.data

        def bw(g):
            return ((a, g @ b.data.transpose(0, 2, 1)),
                    (b, a.data.transpose(0, 2, 1) @ g))

    else:
        raise _shape_err("matmul", sa, sb)
    return _node("matmul", out, (a, b), bw)


def swap_last2(a: Tensor) -> Tensor:
    """Transpose the trailing two axes (rank 2 or 3)."""
    _check_finite("swap_last2", a)
    if a.ndim == 2:
        axes = (1, 0)
    elif a.ndim == 3:
        axes = (0, 2, 1)
    else:
        raise _shape_err("swap_last2", a.shape)
    return _node("swap_last2", a.data.transpose(axes).copy(), (a,),
                 lambda g: ((a, g.transpose(axes)),))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    _check_finite("reshape", a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise _shape_err("reshape", a.shape, shape)
    old = a.shape
    return _node("reshape", a.data.reshape(shape), (a,),
                 lambda g: ((a, g.reshape(old)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    _check_finite("concat", *tensors)
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise _shape_err("concat", tensors[0].shape, t.shape)
        for ax in range(ndim):
            if ax != axis % ndim and t.shape[ax] != tensors[0].shape[ax]:
                raise _shape_err("concat", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis % ndim] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * ndim
            idx[axis % ndim] = slice(start, stop)
            pieces.append((t, g[tuple(idx)]))
        return pieces

    return _node("concat", out, tensors, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    _check_finite("narrow", a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise _shape_err("narrow", a.shape, (axis, start, length))
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _node("narrow", a.data[idx].copy(), (a,), bw)


def expand_last(a: Tensor, n: int) -> Tensor:
    """Repeat each entry n times along a new trailing axis: (...,) -> (..., n)."""
    _check_finite("expand_last", a)
    out = np.repeat(a.data[..., None], n, axis=-1)
    return _node("expand_last", out, (a,), lambda g: ((a, g.sum(axis=-1)),))


def tile_first(a: Tensor, n: int) -> Tensor:
    """Stack n copies along a new leading axis: (...) -> (n, ...)."""
    _check_finite("tile_first", a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _node("tile_first", out, (a,), lambda g: ((a, g.sum(axis=0)),))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    _check_finite("sum", a)
    shape = a.shape
    return _node("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: ((a, np.broadcast_to(g, shape).copy()),))


def mean(a: Tensor) -> Tensor:
    _check_finite("mean", a)
    shape, n = a.shape, a.size
    return _node("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: ((a, np.broadcast_to(g / n, shape).copy()),))


def sum_last(a: Tensor) -> Tensor:
    _check_finite("sum_last", a)
    n = a.shape[-1]
    return _node("sum_last", a.data.sum(axis=-1), (a,),
                 lambda g: ((a, np.repeat(g[..., None], n, axis=-1)),))


def mean_last(a: Tensor) -> Tensor:
    _check_finite("mean_last", a)
    n = a.shape[-1]
    return _node("mean_last", a.data.mean(axis=-1), (a,),
                 lambda g: ((a, np.repeat(g[..., None] / n, n, axis=-1)),))


def var_last(a: Tensor) -> Tensor:
    """Population variance along the last axis (divides by n)."""
    _check_finite("var_last", a)
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    out = (centered * centered).mean(axis=-1)

    def bw(g):
        return ((a, (2.0 / n) * g[..., None] * centered),)

    return _node("var_last", out, (a,), bw)


# ---------------------------------------------------------------------------
# Softmax family (stable log-sum-exp forms) and lookups
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax along the last axis; rows sum to 1 within 1e-12."""
    _check_finite("softmax", a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((a, out * (g - dot)),)

    return _node("softmax", out, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    _check_finite("log_softmax", a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return ((a, g - probs * g.sum(axis=-1, keepdims=True)),)

    return _node("log_softmax", out, (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: (V, d) table indexed by an integer array -> (*ids.shape, d)."""
    _check_finite("embedding", table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _node("embedding", out, (table,), bw)


def gather_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select entries along the last axis.

    ``ids`` of shape ``a.shape[:-1]`` picks one entry per row (output drops
    the last axis); shape ``a.shape[:-1] + (k,)`` picks k entries per row.
    """
    _check_finite("gather_last", a)
    ids = np.asarray(ids)
    if ids.shape == a.shape[:-1]:
        idx, squeeze = ids[..., None], True
    elif ids.shape[:-1] == a.shape[:-1]:
        idx, squeeze = ids, False
    else:
        raise _shape_err("gather_last", a.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[-1]):
        raise IndexError("gather_last: ids out of range")
    out = np.take_along_axis(a.data, idx, axis=-1)
    if squeeze:
        out = out[..., 0]

    def bw(g):
        ga = np.zeros_like(a.data)
        flat = ga.reshape(-1, a.shape[-1])
        k = idx.shape[-1]
        rows = np.repeat(np.arange(flat.shape[0]), k)
        np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        return ((a, ga),)

    return _node("gather_last", out, (a,), bw)


def take_flat(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select arbitrary entries of a 1-D tensor by index array."""
    if a.ndim != 1:
        raise _shape_err("take_flat", a.shape)
    ids = np.asarray(ids, dtype=np.int64)
    picked = gather_last(reshape(a, (1, a.shape[0])), ids[None, :])
    return reshape(picked, (ids.size,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale + shift."""
    _check_finite("layer_norm", x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_err("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return ((x, dx), (gain, dgain), (bias, dbias))

    return _node("layer_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# Norms and composite losses
# ---------------------------------------------------------------------------

def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor; subgradient 0 at the origin."""
    _check_finite("l2_norm", a)
    out = np.asarray(np.sqrt((a.data * a.data).sum()))

    def bw(g):
        denom = max(float(out), 1e-300)
        return ((a, g * a.data / denom),)

    return _node("l2_norm", out, (a,), bw)


def l2_norm_last(a: Tensor) -> Tensor:
    """Euclidean norm along the last axis: (..., d) -> (...)."""
    _check_finite("l2_norm_last", a)
    out = np.sqrt((a.data * a.data).sum(axis=-1))

    def bw(g):
        denom = np.maximum(out, 1e-300)[..., None]
        return ((a, g[..., None] * a.data / denom),)

    return _node("l2_norm_last", out, (a,), bw)


def lp_norm_last(a: Tensor, p: float) -> Tensor:
    """p-norm along the last axis for p >= 1 (p = 1, 2 use dedicated paths)."""
    p = float(p)
    if p < 1:
        raise ValueError(f"lp_norm_last: p must be >= 1, got {p}")
    if p == 1.0:
        return sum_last(absolute(a))
    if p == 2.0:
        return l2_norm_last(a)
    _check_finite("lp_norm_last", a)
    absd = np.abs(a.data)
    inner = (absd**p).sum(axis=-1)
    out = inner ** (1.0 / p)

    def bw(g):
        denom = np.maximum(out, 1e-300) ** (p - 1.0)
        grad = np.sign(a.data) * absd ** (p - 1.0) / denom[..., None]
        return ((a, g[..., None] * grad),)

    return _node("lp_norm_last", out, (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood in stable log-sum-exp form."""
    targets = np.asarray(targets)
    return neg(mean(gather_last(log_softmax(logits), targets)))


def input_gradient(loss_fn, x) -> np.ndarray:
    """Gradient of a scalar-valued model loss with respect to the input array.

    ``loss_fn`` receives a leaf Tensor built from ``x`` and must return a
    scalar Tensor; parameters of any frozen model inside stay untouched.
    """
    leaf = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = loss_fn(leaf)
    backward(loss)
    return leaf.grad_array().copy()
