"""Reverse-mode automatic differentiation over dense 2-D matrices.

Every value is a :class:`Tensor` holding a 2-D numpy array. Scalars are 1x1
tensors. Operations record a closure on the output that maps the output
gradient to input gradients; :func:`backward` walks the recorded graph in
reverse topological order and accumulates into leaf ``.grad`` arrays.

Gradients accumulate across calls until :func:`zero_grad` (or the optimizer)
clears them.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from vidtox import kernels


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A 2-D real matrix that optionally participates in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"only 2-D matrices are supported, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    for i in range(2):
        if a.shape[i] != b.shape[i] and a.shape[i] != 1 and b.shape[i] != 1:
            raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


# --- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` (1 x d_out) broadcast over rows."""
    if x.cols != w.rows:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (1, w.cols):
        raise ShapeError(f"linear: bias shape {b.shape}, expected (1, {w.cols})")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is None:
        return _result(y, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    y = y + b.data
    return _result(y, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)))


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    return _result(
        np.array([[x.data.sum()]], dtype=dt), (x,), lambda g: (np.full(shape, g[0, 0], dtype=dt),)
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])
    data = np.concatenate([p.data for p in parts], axis=0)
    return _result(
        data, tuple(parts), lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])
    data = np.concatenate([p.data for p in parts], axis=1)
    return _result(
        data,
        tuple(parts),
        lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


# --- reductions / normalisers ----------------------------------------------


def _mask_array(mask, n: int):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if m.shape[0] != n:
        raise ShapeError(f"mask length {m.shape[0]} does not match {n}")
    if not m.any():
        raise ValueError("mask excludes every position")
    return m


def rowwise_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax along each row; masked columns get probability exactly 0."""
    m = _mask_array(mask, x.cols)
    p = kernels.masked_softmax(x.data, m)
    return _result(p, (x,), lambda g: (kernels.softmax_backward(p, g),))


def mean_rows(x: Tensor, mask=None) -> Tensor:
    """Average the rows kept by ``mask`` (all rows when ``mask`` is None)."""
    if mask is None:
        w = np.full((1, x.rows), 1.0 / x.rows, dtype=x.dtype)
    else:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if m.shape[0] != x.rows:
            raise ShapeError(f"mean_rows: mask length {m.shape[0]} vs {x.rows} rows")
        if not m.any():
            raise ValueError("mean_rows: every row is masked")
        w = (m / m.sum()).astype(x.dtype).reshape(1, -1)
    xd = x.data
    return _result(w @ xd, (x,), lambda g: (w.T @ g,))


def segment_pool_matrix(length: int, target: int, dtype=np.float64) -> np.ndarray:
    """Averaging matrix (target x length) for uniform segment mean-pooling.

    Segment ``i`` covers rows ``floor(i*L/S)`` to ``ceil((i+1)*L/S)``
    (exclusive), so every segment is nonempty even when ``L < S``.
    """
    if target < 1:
        raise ValueError(f"pool target must be >= 1, got {target}")
    if length < 1:
        raise ValueError("cannot pool an empty sequence")
    pm = np.zeros((target, length), dtype=dtype)
    for i in range(target):
        lo = (i * length) // target
        hi = -((-(i + 1) * length) // target)
        pm[i, lo:hi] = 1.0 / (hi - lo)
    return pm


def segment_mean_pool(x: Tensor, target: int) -> Tensor:
    pm = segment_pool_matrix(x.rows, target, x.dtype)
    return _result(pm @ x.data, (x,), lambda g: (pm.T @ g,))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a 1 x K logit row."""
    if logits.rows != 1:
        raise ShapeError(f"cross_entropy expects a 1xK row, got {logits.shape}")
    k = logits.cols
    if not 0 <= int(label) < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    z = logits.data[0]
    mx = z.max()
    lse = mx + np.log(np.exp(z - mx).sum())
    loss = lse - z[label]
    p = np.exp(z - lse)

    def back(g):
        d = p.copy()
        d[label] -= 1.0
        return (g[0, 0] * d.reshape(1, -1),)

    return _result(np.array([[loss]], dtype=logits.dtype), (logits,), back)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        bad = idx[(idx < 0) | (idx >= table.rows)][0]
        raise IndexError(f"embedding id {bad} out of range for table with {table.rows} rows")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), back)


# --- sequence ops ----------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d_seq(x: Tensor, weight: Tensor, bias: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution along the row (sequence) axis with zero padding.

    ``weight`` is stored as a ``(kernel*d_in) x d_out`` matrix whose row
    ``j*d_in + i`` holds tap ``j`` for input channel ``i``; ``bias`` is 1 x d_out.
    """
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"bad conv geometry kernel={kernel} stride={stride} padding={padding}")
    d_in = x.cols
    if weight.rows != kernel * d_in:
        raise ShapeError(
            f"conv1d_seq: weight {weight.shape} does not match kernel {kernel} x d_in {d_in}"
        )
    if bias.shape != (1, weight.cols):
        raise ShapeError(f"conv1d_seq: bias {bias.shape}, expected (1, {weight.cols})")
    n_out = conv_output_length(x.rows, kernel, stride, padding)
    if n_out < 1:
        raise ValueError(
            f"conv1d_seq: sequence length {x.rows} too short for kernel {kernel} with padding {padding}"
        )
    w3 = weight.data.reshape(kernel, d_in, weight.cols)
    xd = x.data
    y = kernels.conv1d_forward(xd, w3, bias.data.reshape(-1), stride, padding)

    def back(g):
        gx, gw, gb = kernels.conv1d_backward(g, xd, w3, stride, padding)
        return gx, gw.reshape(weight.shape), gb.reshape(1, -1)

    return _result(y, (x, weight, bias), back)


def multihead_attention(
    xq: Tensor,
    xkv: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    kv_mask=None,
    return_weights: bool = False,
):
    """Fused multi-head scaled dot-product attention.

    Head ``h`` uses column block ``h`` of the d x d projection matrices, so
    ``wq[:, h*dk:(h+1)*dk]`` is that head's query projection. Masked keys get
    a -inf score. Heads are concatenated and multiplied by ``wo``.
    """
    d = xq.cols
    if xkv.cols != d:
        raise ShapeError(f"attention: query width {d} != key/value width {xkv.cols}")
    if d % heads:
        raise ValueError(f"{heads} heads do not divide model width {d}")
    for w in (wq, wk, wv, wo):
        if w.shape != (d, d):
            raise ShapeError(f"attention: projection {w.shape}, expected ({d}, {d})")
    if xkv.rows < 1:
        raise ValueError("attention needs at least one key")
    mask = _mask_array(kv_mask, xkv.rows)
    xqd, xkd = xq.data, xkv.data
    q = xqd @ wq.data
    k = xkd @ wk.data
    v = xkd @ wv.data
    o, p = kernels.attention_forward(q, k, v, mask, heads)
    wod = wo.data
    y = o @ wod

    def back(g):
        go = g @ wod.T
        gq, gk, gv = kernels.attention_backward(go, q, k, v, p, heads)
        gxq = gq @ wq.data.T
        gxkv = gk @ wk.data.T + gv @ wv.data.T
        return gxq, gxkv, xqd.T @ gq, xkd.T @ gk, xkd.T @ gv, o.T @ g

    out = _result(y, (xq, xkv, wq, wk, wv, wo), back)
    if return_weights:
        return out, p
    return out


# --- driver ----------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward called on a value with no recorded graph")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# --- finite-difference verification ----------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"{'ok ' if e.passed else 'BAD'} {e.name}: {e.max_rel_error:.3e}" for e in self.entries]
        return "\n".join(lines)


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``forward`` recomputes the scalar loss from the current parameter values.
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries that are zero on both routes from reporting noise.
    """
    for p in params:
        p.zero_grad()
    loss = forward()
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    report = GradCheckReport(tolerance=tolerance)
    with no_grad():
        for i, p in enumerate(params):
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = forward().item()
                flat[j] = orig - step
                down = forward().item()
                flat[j] = orig
                nflat[j] = (up - down) / (2.0 * step)
            a = analytic[i]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            err = float((np.abs(a - numeric) / denom).max()) if a.size else 0.0
            name = getattr(p, "name", f"param{i}")
            report.entries.append(GradCheckEntry(name, err, err < tolerance))
    for p in params:
        p.zero_grad()
    return report


def finite(x: Tensor) -> bool:
    return bool(np.isfinite(x.data).all())


__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "TapeError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "matmul",
    "transpose",
    "linear",
    "sum_all",
    "concat_rows",
    "concat_cols",
    "rowwise_softmax",
    "mean_rows",
    "segment_mean_pool",
    "segment_pool_matrix",
    "cross_entropy",
    "embedding_lookup",
    "conv1d_seq",
    "conv_output_length",
    "multihead_attention",
    "backward",
    "zero_grad",
    "grad_check",
]
