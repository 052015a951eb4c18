"""Dense-tensor reverse-mode differentiation.

A :class:`Tensor` is both a value and a graph node. Operations build the
graph eagerly (define-by-run) and only record parents when at least one
input requires a gradient, so forward passes through frozen models cost no
more than plain numpy.

Only the operations the MIL models and selector losses need are provided.
Broadcasting is limited to a row vector ``(1, n)`` or column vector
``(m, 1)`` against a matrix ``(m, n)``, plus scalars.
"""
from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "stop_gradient",
    "straight_through",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "square",
    "relu",
    "clip",
    "softmax",
    "log_softmax",
    "attention",
    "reweight",
    "sum",
    "mean",
    "concat",
    "gather_rows",
    "reshape",
    "transpose",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A float64 array with an optional gradient and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="", _checked=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, "tensor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={list(self.shape)}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, f"output of {op}")
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op, _checked=True)
    return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn, op=op, _checked=True)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = t.grad + g


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or len(a) == 0 or len(b) == 0:
        return True
    if len(a) == 2 and len(b) == 2:
        for x, y in ((a, b), (b, a)):
            if y == (1, x[1]) or y == (x[0], 1) or y == (1, 1):
                return True
    if len(a) == 1 and len(b) == 2 and a[0] == b[1]:
        return True
    if len(b) == 1 and len(a) == 2 and b[0] == a[1]:
        return True
    if (len(a) == 1 and a == (1,)) or (len(b) == 1 and b == (1,)):
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")

    def bw(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        _accum(a, -out.grad)

    return _result(-a.data, (a,), bw, "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")

    def bw(out):
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {list(a.shape)}")

    def bw(out):
        _accum(a, out.grad.T)

    return _result(a.data.T.copy(), (a,), bw, "transpose")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)

    def bw(out):
        _accum(a, out.grad * s * (1.0 - s))

    return _result(s, (a,), bw, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def bw(out):
        _accum(a, out.grad * (1.0 - t * t))

    return _result(t, (a,), bw, "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)

    def bw(out):
        _accum(a, out.grad * e)

    return _result(e, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")

    def bw(out):
        _accum(a, out.grad / a.data)

    return _result(np.log(a.data), (a,), bw, "log")


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        _accum(a, out.grad * 2.0 * a.data)

    return _result(a.data * a.data, (a,), bw, "square")


def relu(a) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    active = a.data > 0

    def bw(out):
        _accum(a, out.grad * active)

    return _result(np.where(active, a.data, 0.0), (a,), bw, "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(out):
        _accum(a, out.grad * inside)

    return _result(np.clip(a.data, lo, hi), (a,), bw, "clip")


def _check_mask(a: Tensor, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=np.float64)
    if not _broadcast_ok(a.shape, m.shape):
        raise ShapeError(f"softmax: mask shape {list(m.shape)} does not fit {list(a.shape)}")
    if np.isnan(m).any() or np.isposinf(m).any():
        raise NonFiniteError("softmax: mask may only contain finite values or -inf")
    return m


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Positions whose mask entry is ``-inf`` receive exactly zero weight. Every
    row must keep at least one finite position.
    """
    a = as_tensor(a)
    m = _check_mask(a, mask)
    z = a.data if m is None else a.data + m
    zmax = np.max(z, axis=-1, keepdims=True)
    if not np.isfinite(zmax).all():
        raise ShapeError("softmax: a row has every position masked")
    e = np.exp(z - zmax)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (a,), bw, "softmax")


def attention(
    q,
    k,
    v,
    n_heads: int,
    mask=None,
    scale: float = 1.0,
    weights_out: list | None = None,
    key_weights=None,
) -> Tensor:
    """Multi-head scaled dot-product attention on packed ``(n, h)`` inputs.

    Columns of ``q``, ``k`` and ``v`` are split into ``n_heads`` equal groups;
    head ``j`` computes ``softmax(scale * q_j k_j^T + mask) v_j`` and the head
    outputs are concatenated back to ``(n, h)``. ``mask`` is an additive
    ``(1, n)`` row or an ``(n, n)`` matrix shared by all heads. When
    ``weights_out`` is a list, each head's attention matrix is appended.

    ``key_weights`` (length ``n``, non-negative) rescales each key's share of
    attention, ``a_ij w_j / sum_k a_ik w_k``; a zero weight removes the key
    exactly while keeping a finite gradient. Every row must keep some mass.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if len(q.shape) != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q, k, v must share a 2-D shape, got {q.shape}, {k.shape}, {v.shape}")
    n, h = q.shape
    if n_heads < 1 or h % n_heads:
        raise ShapeError(f"attention: width {h} is not divisible by {n_heads} heads")
    dh = h // n_heads

    def split(x):
        return x.reshape(n, n_heads, dh).transpose(1, 0, 2)  # (H, n, dh)

    def merge(x):
        return x.transpose(1, 0, 2).reshape(n, h)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    z = scale * (Q @ K.transpose(0, 2, 1))
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape not in ((1, n), (n, n)):
            raise ShapeError(f"attention: mask shape {list(m.shape)} does not fit {n} positions")
        if np.isnan(m).any() or np.isposinf(m).any():
            raise NonFiniteError("attention: mask may only contain finite values or -inf")
        z = z + m
    zmax = np.max(z, axis=-1, keepdims=True)
    if not np.isfinite(zmax).all():
        raise ShapeError("attention: a row has every position masked")
    e = np.exp(z - zmax)
    A = e / e.sum(axis=-1, keepdims=True)
    kw = None if key_weights is None else as_tensor(key_weights)
    if kw is not None:
        if kw.data.size != n:
            raise ShapeError(f"attention: {kw.data.size} key weights for {n} positions")
        w = kw.data.reshape(1, 1, n)
        if np.all(w == 1.0):
            # unit weights leave the attention untouched, bit for bit
            S, B = np.ones(A.shape[:-1] + (1,)), A
        else:
            S = (A * w).sum(axis=-1, keepdims=True)
            if np.any(S <= 0):
                raise ShapeError("attention: a row has zero weighted mass")
            B = A * w / S
    else:
        B = A
    if weights_out is not None:
        weights_out.extend(B[j].copy() for j in range(n_heads))

    def bw(out):
        G = split(out.grad)
        dB = G @ V.transpose(0, 2, 1)
        if kw is None:
            dA = dB
        else:
            r = (dB - (dB * B).sum(axis=-1, keepdims=True)) / S  # (H, n, 1) broadcast
            dA = r * w
            if kw.requires_grad:
                _accum(kw, (r * A).sum(axis=(0, 1)).reshape(kw.shape))
        dZ = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        _accum(q, merge(scale * (dZ @ K)))
        _accum(k, merge(scale * (dZ.transpose(0, 2, 1) @ Q)))
        _accum(v, merge(B.transpose(0, 2, 1) @ G))

    parents = (q, k, v) if kw is None else (q, k, v, kw)
    return _result(merge(B @ V), parents, bw, "attention")


def reweight(p, w) -> Tensor:
    """Rescale each row of a distribution by weights and renormalize.

    ``out_ij = p_ij w_j / sum_k p_ik w_k``. Unit weights return ``p``'s values
    unchanged (bit for bit) while still propagating gradients to ``w``.
    """
    p, w = as_tensor(p), as_tensor(w)
    if len(p.shape) != 2 or w.data.size != p.shape[1]:
        raise ShapeError(f"reweight: {w.data.size} weights for rows of width {p.shape[-1]}")
    wr = w.data.reshape(1, -1)
    if np.all(wr == 1.0):
        S, out = np.ones((p.shape[0], 1)), p.data.copy()
    else:
        S = (p.data * wr).sum(axis=-1, keepdims=True)
        if np.any(S <= 0):
            raise ShapeError("reweight: a row has zero weighted mass")
        out = p.data * wr / S

    def bw(o):
        r = (o.grad - (o.grad * out).sum(axis=-1, keepdims=True)) / S
        _accum(p, r * wr)
        _accum(w, (r * p.data).sum(axis=0).reshape(w.shape))

    return _result(out, (p, w), bw, "reweight")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    zmax = np.max(a.data, axis=-1, keepdims=True)
    shifted = a.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    ls = shifted - lse
    s = np.exp(ls)

    def bw(out):
        g = out.grad
        _accum(a, g - s * g.sum(axis=-1, keepdims=True))

    return _result(ls, (a,), bw, "log_softmax")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def bw(out):
        _accum(a, np.broadcast_to(out.grad, a.shape).copy())

    data = a.data.sum() if axis is None else a.data.sum(axis=axis, keepdims=True)
    return _result(np.asarray(data, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty input")
    return div(sum(a, axis), float(n))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {list(ref)} and {list(t.shape)}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(idx)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def gather_rows(a, index: Iterable[int]) -> Tensor:
    """Select rows of a matrix (or entries of a vector) by an index list.

    Repeated indices are allowed; their gradients add up.
    """
    a = as_tensor(a)
    idx = np.asarray(list(index), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {list(a.shape)}")

    def bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    return _result(a.data[idx], (a,), bw, "gather_rows")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view shape {list(a.shape)} as {list(shape)}")

    def bw(out):
        _accum(a, out.grad.reshape(a.shape))

    return _result(a.data.reshape(shape).copy(), (a,), bw, "reshape")


def stop_gradient(a) -> Tensor:
    """Same forward value as ``a``; contributes no gradient to ``a``'s graph."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), op="stop_gradient", _checked=True)


def straight_through(hard: np.ndarray, surrogate) -> Tensor:
    """Forward value ``hard`` exactly; gradient flows to ``surrogate`` unchanged.

    This is ``hard + s - stop_gradient(s)`` without the rounding that the
    explicit sum would introduce in the forward value.
    """
    surrogate = as_tensor(surrogate)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != surrogate.shape:
        raise ShapeError(f"straight_through: shapes {list(hard.shape)} and {list(surrogate.shape)}")

    def bw(out):
        _accum(surrogate, out.grad)

    return _result(hard.copy(), (surrogate,), bw, "straight_through")


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {list(root.shape)}")
    if not root.requires_grad:
        return
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    # interior gradients start from zero on every call
    for node in order:
        if node._parents:
            node.grad = np.zeros_like(node.data)
    root.grad = root.grad + np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-5,
    kink_tol: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current leaf values on every call. The
    error for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    A warning is issued when a probe looks like it sits on a kink.
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    backward(out)
    f0 = out.item()
    worst = 0.0
    kinked = False
    for leaf in leaves:
        analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            if abs(fp + fm - 2 * f0) > kink_tol * max(1.0, abs(f0)):
                kinked = True
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    if kinked:
        warnings.warn("grad_check: probe point may sit on a non-differentiable kink; perturb it", RuntimeWarning)
    return worst
