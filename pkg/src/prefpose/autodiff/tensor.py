"""Dense float64 tensors with reverse-mode differentiation.

Every op builds its output eagerly and, when grad tracking is on and an input
requires grad, stores a closure that pushes the output gradient back to its
inputs. ``backward`` orders the recorded nodes topologically and visits each
once in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accum(self, g: np.ndarray) -> None:
        # never mutate in place: the same gradient array may be handed to several inputs
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Exact-shape add, or bias add when ``b`` is 1-D and matches a's last dim."""
    bias = b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape
    if not bias:
        _check_same(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    mask = a.data > 0.0

    def backward(g):
        a._accum(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)

    def backward(g):
        a._accum(g * s * (1.0 - s))

    return _make(s, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; equals -log(sigmoid(-x))."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accum(g * _sigmoid_np(x))

    return _make(out, (a,), backward, "softplus")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accum(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), backward, "softmax")


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    D = a.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layernorm: gain/bias {gamma.shape}/{beta.shape} vs last dim {D}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, D).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, D).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            a._accum(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where b is 2-D (shared weight) or has a's leading dims (batched)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k, m = b.shape
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def backward(g):
        a._accum(g.reshape(src))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] != ref[:ax] or t.shape[ax + 1 :] != ref[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), backward, "gather_rows")


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Tile a 1-D tensor into an (n, D) matrix."""
    if a.ndim != 1:
        raise ShapeError(f"broadcast_rows expects 1-D input, got {a.shape}")

    def backward(g):
        a._accum(g.sum(axis=0))

    return _make(np.tile(a.data, (n, 1)), (a,), backward, "broadcast_rows")


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is None:
            a._accum(np.full(a.shape, float(g)))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def sum_of_squares(a: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        a._accum(2.0 * a.data * gg)

    return _make(np.asarray((a.data * a.data).sum(axis=axis)), (a,), backward, "sum_of_squares")


# ---------------------------------------------------------------------------
# constants


def sinusoidal_time_embedding(t, dim: int, max_period: float = 10000.0) -> Tensor:
    """Standard sin/cos embedding of integer timesteps; constant w.r.t. params."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return Tensor(emb)


# ---------------------------------------------------------------------------
# backward


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[tuple[str, Tensor]] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss; returns ``name -> gradient`` for ``params``.

    Parameters that the loss does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    for node in order:
        node.grad = None
    plist = list(params) if params is not None else []
    for _, p in plist:
        p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    out: dict[str, np.ndarray] = {}
    for name, p in plist:
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    # drop references so the graph can be collected
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None
    return out
