"""Dense float32 tensors with a recorded-tape reverse-mode backward pass.

Just enough autodiff for a small decoder-only transformer: strict 2-D
matmul plus a batched variant, elementwise add/mul/silu/scale, softmax,
rmsnorm, embedding lookup and a few shape movers. Operations are recorded
on an explicit ComputeGraph while one is active; without a graph they run
as plain numpy (inference mode).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Compute-graph misuse: reuse after backward, foreign or non-scalar loss."""


_DEBUG_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf validation of every tensor created afterwards."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _check_finite(arr: np.ndarray) -> None:
    if _DEBUG_FINITE and not np.isfinite(arr).all():
        raise FloatingPointError("tensor contains NaN or Inf")


class Tensor:
    """n-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# One active graph at a time; graph construction is single-threaded per model.
_ACTIVE_GRAPH: "ComputeGraph | None" = None


class ComputeGraph:
    """Ordered tape of executed primitives, consumed by one backward pass."""

    def __init__(self):
        self._ops = []            # (inputs, output, backward_fn), execution order
        self._produced = set()    # id() of every output tensor
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_GRAPH
        if _ACTIVE_GRAPH is not None:
            raise GraphError("a compute graph is already active")
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = None
        return False

    def _record(self, inputs, output, backward_fn):
        self._ops.append((inputs, output, backward_fn))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


@contextmanager
def no_grad():
    """Temporarily disable recording on the active graph, if any."""
    global _ACTIVE_GRAPH
    saved = _ACTIVE_GRAPH
    _ACTIVE_GRAPH = None
    try:
        yield
    finally:
        _ACTIVE_GRAPH = saved


def backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into .grad of every recorded requires_grad tensor.

    The graph is consumed: a second backward on it raises GraphError.
    """
    if graph.consumed:
        raise GraphError("compute graph already consumed by a backward pass")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in graph._produced:
        raise GraphError("loss tensor was not produced by this graph")
    graph.consumed = True

    loss.grad = np.ones_like(loss.data)
    for inputs, out, backward_fn in reversed(graph._ops):
        if out.grad is None:
            continue  # this output never reached the loss
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                # own the buffer: backward fns may hand out views
                t.grad = np.array(g, dtype=np.float32)
            else:
                t.grad += g
    graph._ops.clear()


def _finish(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it when grads are wanted and a graph is live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    _check_finite(data)
    if _ACTIVE_GRAPH is not None and out.requires_grad:
        _ACTIVE_GRAPH._record(tuple(inputs), out, backward_fn)
    return out


def _as_f32(x: np.ndarray) -> np.ndarray:
    return x if x.dtype == np.float32 else x.astype(np.float32)


# ---------------------------------------------------------------------------
# elementwise primitives


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return  # scalar broadcast is the only broadcast we allow
    raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g, dtype=np.float32).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bwd(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _finish(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def bwd(g):
        return (_reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)

    return _finish(a.data * b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = np.float32(c)

    def bwd(g):
        return (g * c,)

    return _finish(x.data * c, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    # x * sigmoid(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    sig = _as_f32(sig)

    def bwd(g):
        return (_as_f32(g * sig * (1.0 + x.data * (1.0 - sig))),)

    return _finish(_as_f32(x.data * sig), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    data = np.sum(x.data, dtype=np.float32).reshape(())

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(np.float32),)

    return _finish(data, (x,), bwd)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def bwd(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _finish(a.data @ b.data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading dims: [...,m,k] @ [...,k,n]."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"bmm rank mismatch: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (ga, gb)

    return _finish(np.matmul(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# shape movers


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _finish(x.data.reshape(shape), (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _finish(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got {x.shape}")
    return permute(x, (1, 0))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table[V,d] indexed by integer ids of any shape."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise DimensionError("embedding: token id out of range")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _finish(table.data[ids], (table,), bwd)


def repeat_heads(x: Tensor, group: int) -> Tensor:
    """Repeat axis 1 (KV heads) `group` times: [B,kv,T,hd] -> [B,kv*group,T,hd]."""
    b, kv, t, hd = x.shape

    def bwd(g):
        return (g.reshape(b, kv, group, t, hd).sum(axis=2, dtype=np.float32),)

    return _finish(np.repeat(x.data, group, axis=1), (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / attention math


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = _as_f32(e / e.sum(axis=-1, keepdims=True))

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (_as_f32(p * (g - dot)),)

    return _finish(p, (x,), bwd)


def causal_softmax(x: Tensor) -> Tensor:
    """Row softmax over [...,T,T] scores with positions j>i masked out."""
    t = x.shape[-1]
    if x.shape[-2] != t:
        raise DimensionError(f"causal_softmax expects square last dims, got {x.shape}")
    allowed = np.tril(np.ones((t, t), dtype=bool))
    z = np.where(allowed, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = _as_f32(e / e.sum(axis=-1, keepdims=True))

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (_as_f32(p * (g - dot)),)  # masked entries have p == 0

    return _finish(p, (x,), bwd)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 0.0) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain along the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rmsnorm gain shape {gain.shape} != ({d},)")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = _as_f32(1.0 / np.sqrt(ms + np.float32(eps)))
    y = x.data * r * gain.data

    def bwd(g):
        gy = g * gain.data
        dot = np.sum(gy * x.data, axis=-1, keepdims=True)
        gx = _as_f32(gy * r - x.data * (r ** 3) * (dot / d))
        ggain = None
        if gain.requires_grad:
            ggain = _as_f32(np.sum((g * x.data * r).reshape(-1, d), axis=0))
        return (gx if x.requires_grad else None, ggain)

    return _finish(_as_f32(y), (x, gain), bwd)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding over [B,h,T,hd]; cos/sin are [T, hd/2] constants."""
    b, h, t, hd = x.shape
    if hd % 2:
        raise DimensionError("rope needs an even head dimension")
    xp = x.data.reshape(b, h, t, hd // 2, 2)
    x1, x2 = xp[..., 0], xp[..., 1]
    c, s = cos[:t], sin[:t]
    y = np.empty_like(x.data).reshape(b, h, t, hd // 2, 2)
    y[..., 0] = x1 * c - x2 * s
    y[..., 1] = x1 * s + x2 * c

    def bwd(g):
        gp = g.reshape(b, h, t, hd // 2, 2)
        g1, g2 = gp[..., 0], gp[..., 1]
        out = np.empty_like(g).reshape(b, h, t, hd // 2, 2)
        out[..., 0] = g1 * c + g2 * s
        out[..., 1] = -g1 * s + g2 * c
        return (out.reshape(b, h, t, hd),)

    return _finish(y.reshape(b, h, t, hd), (x,), bwd)
