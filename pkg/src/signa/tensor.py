"""Dense float64 tensors with a recorded differentiation graph.

Every primitive computes its forward value with numpy and registers a
backward closure on the output tensor.  ``DiffGraph.from_terminal`` walks
those links into an ordered operation record; ``reverse_pass`` replays that
record backwards and accumulates gradients into every tensor that asked
for them.

Primitives accept an optional leading batch axis where the model needs one
(conv2d, global_avg_pool, affine, matmul, softmax_rows).  There is no
general broadcasting.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording graph nodes."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "node", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.node_id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        t._grad = None
        t.requires_grad = requires_grad
        t.node = None
        t.node_id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = np.array(value, dtype=np.float64).reshape(self.data.shape)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def backward(self, seed=None) -> None:
        reverse_pass(DiffGraph.from_terminal(self), seed)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # convenience operators used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded operation: the output tensor owns it."""

    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    fn: Callable
    kwargs: dict = field(default_factory=dict)


def _record(op, fn, inputs, out_data, backward, **kwargs) -> Tensor:
    rg = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, rg)
    if rg:
        out.node = Node(op, tuple(inputs), backward, fn, kwargs)
    return out


class DiffGraph:
    """Topologically ordered record of the operations leading to a terminal."""

    def __init__(self, nodes: list[Tensor], terminal: Tensor | None):
        self.outputs = nodes
        self.terminal = terminal

    @classmethod
    def from_terminal(cls, terminal: Tensor) -> "DiffGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(terminal, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.node_id in seen or t.node is None:
                continue
            seen.add(t.node_id)
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and inp.node_id not in seen:
                    stack.append((inp, False))
        return cls(order, terminal)

    def __len__(self) -> int:
        return len(self.outputs)

    @property
    def ops(self) -> list[str]:
        return [t.node.op for t in self.outputs]

    def is_topological(self) -> bool:
        pos = {t.node_id: i for i, t in enumerate(self.outputs)}
        for i, t in enumerate(self.outputs):
            for inp in t.node.inputs:
                if inp.node_id in pos and pos[inp.node_id] >= i:
                    return False
        return True

    def replay(self) -> dict[int, np.ndarray]:
        """Re-run the forward record from the leaf values; returns node_id -> value."""
        values: dict[int, Tensor] = {}
        with no_grad():
            for t in self.outputs:
                args = [values.get(inp.node_id, inp) for inp in t.node.inputs]
                values[t.node_id] = t.node.fn(*args, **t.node.kwargs)
        return {k: v.data for k, v in values.items()}


def reverse_pass(graph: DiffGraph, seed=None) -> None:
    terminal = graph.terminal
    if terminal is None:
        raise GraphError("graph has no recorded terminal")
    if seed is None:
        seed_arr = np.ones_like(terminal.data)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed_arr.shape != terminal.shape:
            raise ShapeError(f"seed shape {seed_arr.shape} does not match terminal {terminal.shape}")
    if not terminal.requires_grad:
        return
    grads: dict[int, np.ndarray] = {terminal.node_id: seed_arr}
    leaves: dict[int, Tensor] = {}
    for t in reversed(graph.outputs):
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        t.grad = t.grad + g
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                leaves[inp.node_id] = inp
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi
    for nid, leaf in leaves.items():
        leaf.grad = leaf.grad + grads[nid]


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry one leading batch axis, ``b`` may too."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.data.ndim in (2, 3) and b.data.ndim in (2, 3) and not (a.data.ndim == 2 and b.data.ndim == 3)
    if ok and a.data.ndim == 3 and b.data.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if B.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _record("matmul", matmul, (a, b), out, backward)


def matmul_ordered(a: Tensor, b: Tensor) -> Tensor:
    """``matmul`` whose inner-axis sum runs over the products in sorted order.

    Permuting the contracted axis of both operands therefore gives a
    bit-identical result, which BLAS accumulation order does not promise.
    Costs O(m k n log k) memory-bound work, so use it only for small k.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul_ordered shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    prod = np.swapaxes(A[..., :, :, None] * B[:, :], -1, -2)  # (..., m, n, k)
    out = np.sort(prod, axis=-1).sum(axis=-1)

    def backward(g):
        ga = g @ B.T
        gb = np.swapaxes(A, -1, -2) @ g
        if gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _record("matmul_ordered", matmul_ordered, (a, b), out, backward)


def affine(x: Tensor, A: Tensor, b: Tensor) -> Tensor:
    """A @ x + b for x of shape (n,) or batched (B, n)."""
    x, A, b = as_tensor(x), as_tensor(A), as_tensor(b)
    if A.data.ndim != 2 or b.shape != (A.shape[0],) or x.data.ndim not in (1, 2) or x.shape[-1] != A.shape[1]:
        raise ShapeError(f"affine shape mismatch: x {x.shape}, A {A.shape}, b {b.shape}")
    X, W = x.data, A.data
    out = X @ W.T + b.data

    def backward(g):
        gx = g @ W
        if X.ndim == 1:
            gA = np.outer(g, X)
            gb = g
        else:
            gA = g.T @ X
            gb = g.sum(axis=0)
        return gx, gA, gb

    return _record("affine", affine, (x, A, b), out, backward)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    m = as_tensor(m)
    if m.data.ndim < 2 or 0 in m.shape:
        raise ShapeError(f"softmax_rows needs a non-empty matrix, got {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise NumericDomainError("softmax_rows received non-finite entries")
    e = np.exp(m.data - m.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", softmax_rows, (m,), s, backward)


def masked_softmax_rows(m: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to entries where ``mask`` is true; zeros elsewhere.

    Every row must keep at least one entry.
    """
    m = as_tensor(m)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != m.shape:
        raise ShapeError(f"mask {mask.shape} does not match {m.shape}")
    if not mask.any(axis=-1).all():
        raise ShapeError("every softmax row needs at least one unmasked entry")
    if not np.all(np.isfinite(m.data)):
        raise NumericDomainError("masked_softmax_rows received non-finite entries")
    shifted = np.where(mask, m.data, -np.inf)
    e = np.where(mask, np.exp(shifted - shifted.max(axis=-1, keepdims=True)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax_rows", masked_softmax_rows, (m,), s, backward, mask=mask)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", sigmoid, (x,), s, backward)


def leaky_relu(x: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    if slope <= 0:
        raise ValueError(f"leaky_relu slope must be positive, got {slope}")
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        return (np.where(pos, g, slope * g),)

    return _record("leaky_relu", leaky_relu, (x,), out, backward, slope=slope)


def activation(kind: str, x: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return as_tensor(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(f: Tensor) -> Tensor:
    """(D, w, h) -> (D,) or batched (B, D, w, h) -> (B, D)."""
    f = as_tensor(f)
    if f.data.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs a rank-3 map (optionally batched), got {f.shape}")
    w, h = f.shape[-2:]
    out = f.data.mean(axis=(-2, -1))

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (w * h), f.shape).copy(),)

    return _record("global_avg_pool", global_avg_pool, (f,), out, backward)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation with zero padding.

    x: (Cin, H, W) or (B, Cin, H, W); k: (Cout, Cin, kh, kw).  Patches are
    gathered channels-last into one column matrix so the whole layer is a
    single matrix product.
    """
    x, k = as_tensor(x), as_tensor(k)
    unbatched = x.data.ndim == 3
    X = x.data[None] if unbatched else x.data
    if X.ndim != 4 or k.data.ndim != 4 or X.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, kernel {k.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride {stride} / pad {pad}")
    B, cin, H, W = X.shape
    cout, _, kh, kw = k.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
    Xl = Xp.transpose(0, 2, 3, 1)
    K = k.data
    offsets = [(u, v, (slice(None), slice(u, u + stride * (Ho - 1) + 1, stride),
                       slice(v, v + stride * (Wo - 1) + 1, stride)))
               for u in range(kh) for v in range(kw)]
    cols = np.empty((B, Ho, Wo, kh, kw, cin))
    for u, v, sl in offsets:
        cols[:, :, :, u, v, :] = Xl[sl]
    cols = cols.reshape(B * Ho * Wo, kh * kw * cin)
    Km = K.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols @ Km
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    result = np.ascontiguousarray(out[0] if unbatched else out)

    def backward(g):
        G = g[None] if unbatched else g
        G2 = np.ascontiguousarray(G.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gK = (cols.T @ G2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        gcols = (G2 @ Km.T).reshape(B, Ho, Wo, kh, kw, cin)
        gXl = np.zeros((B, H + 2 * pad, W + 2 * pad, cin))
        for u, v, sl in offsets:
            gXl[sl] += gcols[:, :, :, u, v, :]
        gX = gXl.transpose(0, 3, 1, 2)
        if pad:
            gX = gX[:, :, pad : pad + H, pad : pad + W]
        gX = np.ascontiguousarray(gX[0] if unbatched else gX)
        grads = [gX, np.ascontiguousarray(gK)]
        if bias is not None:
            grads.append(G2.sum(axis=0))
        return grads

    inputs = (x, k) if bias is None else (x, k, bias)
    return _record("conv2d", _conv2d_replay, inputs, result, backward, stride=stride, pad=pad)


def _conv2d_replay(x, k, bias=None, stride=1, pad=0):
    return conv2d(x, k, bias, stride=stride, pad=pad)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _record("add", add, (a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _record("mul", mul, (a, b), A * B, backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * c,)

    return _record("scale", scale, (a,), a.data * c, backward, c=c)


def channel_scale(f: Tensor, w: Tensor) -> Tensor:
    """Multiply every channel map of f by its scalar weight: (.., D, w, h) x (.., D)."""
    f, w = as_tensor(f), as_tensor(w)
    if f.data.ndim != w.data.ndim + 2 or f.shape[: w.data.ndim] != w.shape:
        raise ShapeError(f"channel_scale mismatch: map {f.shape}, weights {w.shape}")
    F, Wt = f.data, w.data
    out = F * Wt[..., None, None]

    def backward(g):
        return g * Wt[..., None, None], (g * F).sum(axis=(-2, -1))

    return _record("channel_scale", channel_scale, (f, w), out, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _record("reshape", reshape, (a,), out, backward, shape=shape)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeError(f"concat leading shapes differ: {[p.shape for p in parts]}")
    sizes = [p.shape[-1] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        return np.split(g, cuts, axis=-1)

    return _record("concat", _concat_replay, tuple(parts), out, backward)


def _concat_replay(*parts):
    return concat(parts)


def outer_sum(u: Tensor, v: Tensor) -> Tensor:
    """out[i, j] = u[i] + v[j]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError(f"outer_sum needs vectors, got {u.shape}, {v.shape}")

    def backward(g):
        return g.sum(axis=1), g.sum(axis=0)

    return _record("outer_sum", outer_sum, (u, v), u.data[:, None] + v.data[None, :], backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")

    def backward(g):
        return (g.T,)

    return _record("transpose", transpose, (a,), a.data.T, backward)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        return (np.full(shape, g),)

    return _record("sum", total, (a,), np.array(a.data.sum()), backward)


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) with a constant weight array."""
    a = as_tensor(a)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weights {w.shape} do not match {a.shape}")

    def backward(g):
        return (g * w,)

    return _record("weighted_sum", weighted_sum, (a,), np.array((a.data * w).sum()), backward, w=w)


def bce_with_logits(logits: Tensor, targets: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Clamped binary cross-entropy: summed over labels, averaged over the batch."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape or logits.data.ndim != 2:
        raise ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary")
    p = _stable_sigmoid(logits.data)
    clamped = (p < eps) | (p > 1.0 - eps)
    pc = np.clip(p, eps, 1.0 - eps)
    n = logits.shape[0]
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / n

    def backward(g):
        return (np.where(clamped, 0.0, (p - y) / n) * float(g),)

    return _record("bce_with_logits", bce_with_logits, (logits,), np.array(loss), backward, targets=y, eps=eps)


# ---------------------------------------------------------------- checking


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += h
            fp = _scalar(f(Tensor(xp.reshape(base.shape))))
            xp[i] -= 2 * h
            fm = _scalar(f(Tensor(xp.reshape(base.shape))))
            flat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(t) -> float:
    if not isinstance(t, Tensor) or t.size != 1:
        raise ShapeError(f"function must return a scalar tensor, got {getattr(t, 'shape', type(t))}")
    return t.item()


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    _scalar(out)
    if out.requires_grad:
        out.backward()
    return probe.grad.copy()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central| / max(1, |analytic|, |central|)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = as_tensor(x)
    ana = analytic_gradient(f, x)
    num = numeric_gradient(f, x, h)
    if ana.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
    return float(np.max(np.abs(ana - num) / denom))
