"""Reverse-mode autodiff over dense float32 tensors.

A Tensor wraps a C-contiguous float32 ndarray. Ops record a backward
closure and their forward execution order on the output tensor; backward()
replays the reachable closures in exact reverse order of forward execution
and accumulates gradients into every unfrozen tensor that requires them.
The graph is single-use: running backward consumes it, and a second call
without a fresh forward raises GraphError.

Numerics policy: parameters and activations are float32 end to end;
softmax subtracts the row max before exponentiation; logarithms in loss
code go through log_eps (additive 1e-9 floor). Hot elementwise/reduction
kernels dispatch through `backend.kernels` (numba or numpy, chosen by
MSTD_BACKEND).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .backend import kernels as K
from .errors import ConfigError, DimensionError, GraphError

_seq_counter = itertools.count(1)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float32 array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._seq = 0
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph: gradients never flow through the result."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar for the common compositions in loss code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable tensor with a name path and a freeze switch.

    Frozen parameters accumulate no gradient and are skipped by optimizers;
    gradient still flows *through* ops that read them, so a trainable
    module sandwiched between frozen layers trains normally.
    """

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap an op result, recording the node when grad mode is on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._seq = next(_seq_counter)
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every unfrozen tensor reachable from `loss`.

    `loss` must be scalar. The traversal consumes the graph; a second
    backward over any of the same nodes raises GraphError.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; run a new forward")
    if loss._grad_fn is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise GraphError("loss is not attached to a live graph")

    nodes: list[Tensor] = []
    stack = [loss]
    seen = {id(loss)}
    while stack:
        node = stack.pop()
        if node._consumed:
            raise GraphError("graph was already consumed by an earlier backward")
        if node._grad_fn is not None:
            nodes.append(node)
        for p in node._parents:
            if id(p) not in seen and p._grad_fn is not None:
                seen.add(id(p))
                stack.append(p)

    # Exact reverse of forward execution order.
    nodes.sort(key=lambda n: n._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node.grad is None:
            continue
        parent_grads = node._grad_fn(node.grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
    for node in nodes:
        node._grad_fn = None
        node._parents = ()
        node._consumed = True


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return _as_f32(grad)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def grad_fn(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def grad_fn(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    f = np.float32(s)
    out = a.data * f

    def grad_fn(g):
        return (g * f,)

    return _make(out, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D x 2-D, N-D x 2-D (shared weights), or batched N-D x N-D."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = np.matmul(g, b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            if a.requires_grad:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def linear(x: Tensor, w: Parameter, b: Parameter | None = None) -> Tensor:
    """x @ w + b over the last axis of x."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} does not match weight shape {w.shape}"
        )
    y = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(
                f"linear: bias shape {b.shape} does not match weight shape {w.shape}"
            )
        y = add(y, b)
    return y


def relu(x: Tensor) -> Tensor:
    out = K.relu_fwd(x.data)

    def grad_fn(g):
        return (K.relu_bwd(x.data, np.ascontiguousarray(g)),)

    return _make(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = K.sigmoid_fwd(x.data)

    def grad_fn(g):
        return (K.sigmoid_bwd(out, np.ascontiguousarray(g)),)

    return _make(out, (x,), grad_fn)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax over the last axis of logits divided by temperature."""
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    inv_t = 1.0 / float(temperature)
    rows = x.data.reshape(-1, x.shape[-1])
    out = K.softmax_fwd(rows, inv_t).reshape(x.shape)

    def grad_fn(g):
        y2 = out.reshape(-1, x.shape[-1])
        g2 = np.ascontiguousarray(g.reshape(-1, x.shape[-1]))
        return (K.softmax_bwd(y2, g2, inv_t).reshape(x.shape),)

    return _make(out, (x,), grad_fn)


def log_eps(x: Tensor, eps: float = 1e-9) -> Tensor:
    """log(x + eps); the floor keeps losses finite when probabilities hit 0."""
    out = K.log_eps_fwd(x.data, eps)

    def grad_fn(g):
        return (K.log_eps_bwd(x.data, np.ascontiguousarray(g), eps),)

    return _make(out, (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=np.float32).reshape(())

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(np.float32),)

    return _make(out, (x,), grad_fn)


def sum_rows(x: Tensor) -> Tensor:
    """[batch, n] -> [batch, 1] row sums."""
    out = x.data.sum(axis=1, keepdims=True, dtype=np.float32)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(np.float32),)

    return _make(out, (x,), grad_fn)


def mean_rows(x: Tensor) -> Tensor:
    """[batch, n] -> [n] column means (batch-mean of row vectors)."""
    b = x.shape[0]
    out = x.data.mean(axis=0, dtype=np.float32)

    def grad_fn(g):
        return (np.broadcast_to(g / np.float32(b), x.shape).astype(np.float32),)

    return _make(out, (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (np.ascontiguousarray(g).reshape(x.shape),)

    return _make(out, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(out, (x,), grad_fn)


def concat(tensors, axis: int = 1) -> Tensor:
    parts = list(tensors)
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        grads = []
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                grads.append(None)
        return grads

    return _make(out, tuple(parts), grad_fn)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatters into the origin rows."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), grad_fn)


def take_column(x: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor as [batch, 1]."""
    out = np.ascontiguousarray(x.data[:, j : j + 1])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, j : j + 1] = g
        return (gx,)

    return _make(out, (x,), grad_fn)


def multi_head_self_attention(
    x: Tensor,
    heads: int,
    wq: Parameter,
    bq: Parameter,
    wk: Parameter,
    bk: Parameter,
    wv: Parameter,
    bv: Parameter,
    wo: Parameter,
    bo: Parameter,
) -> Tensor:
    """Scaled dot-product self-attention over [batch, tokens, dim].

    Heads are slices of dim; per-head scores use scale 1/sqrt(dim/heads);
    head outputs are concatenated and linearly projected back to dim.
    No positional encoding, so the op is equivariant to token permutation.
    """
    batch, tokens, dim = x.shape
    if dim % heads != 0:
        raise ConfigError(f"attention dim {dim} not divisible by heads {heads}")
    head_dim = dim // heads

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, (batch, tokens, heads, head_dim))
        return transpose(t, (0, 2, 1, 3))  # [batch, heads, tokens, head_dim]

    q = split_heads(linear(x, wq, bq))
    k = split_heads(linear(x, wk, bk))
    v = split_heads(linear(x, wv, bv))

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    attn = softmax(scores)
    ctx = matmul(attn, v)  # [batch, heads, tokens, head_dim]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, tokens, dim))
    return linear(ctx, wo, bo)
