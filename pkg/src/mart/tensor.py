"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op appends a node to the active :class:`Tape`; ``backward``
walks that tape in exact reverse order. Broadcasting is deliberately narrow:
same-shape operands, or a trailing ``(d,)`` bias/gain against ``(..., d)``.
Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Switch the global float width (float32 for training, float64 for checks)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tape:
    """Ordered record of executed ops. Consumed by a single ``backward``."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def record(self, t: "Tensor") -> None:
        if self.consumed:
            raise BackwardError("tape already consumed by backward; start a new tape")
        self.nodes.append(t)

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def current_tape() -> Tape:
    return _TAPE


def new_tape() -> Tape:
    """Discard the active tape and start recording on a fresh one."""
    global _TAPE
    _TAPE = Tape()
    return _TAPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._backward = None
    out._parents = ()
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._tape = _TAPE
        _TAPE.record(out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is detached from every tracked parameter")
    tape = loss._tape
    if tape is None:
        # a leaf scalar: d loss / d loss = 1
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if tape.consumed:
        raise BackwardError("backward already ran on this graph; rebuild it with a new forward")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad = parent.grad + pg
    tape.consumed = True
    tape.nodes = []
    if tape is _TAPE:
        new_tape()


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_bias(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b is a trailing-dim bias for a; raise for any other mismatch."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias(a, b, "add")

    def bw(g):
        return g, (_reduce_to_bias(g) if bias else g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias(a, b, "sub")

    def bw(g):
        return g, -(_reduce_to_bias(g) if bias else g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (or a ``(d,)`` gain against ``(..., d)``)."""
    bias = _check_bias(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (_reduce_to_bias(gb) if bias else gb)

    return _make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array that broadcasts onto ``a`` (e.g. a mask bias)."""
    const = np.asarray(const, dtype=a.data.dtype)
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"add_const: constant {const.shape} would reshape {a.shape}")
    return _make(out, (a,), lambda g: (g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), bw)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else ``b``; cond broadcasts onto a's shape."""
    if a.shape != b.shape:
        raise ShapeError(f"where: shapes {a.shape} and {b.shape} differ")
    c = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    return _make(np.where(c, a.data, b.data), (a, b), lambda g: (g * c, g * ~c))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-vector affine map ``x W^T + b`` with ``w`` shaped ``(out, in)``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} for weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is not None:
        y = y + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        return (g @ wd, gw) + ((g2.sum(axis=0),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def index(a: Tensor, idx) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into a zero buffer."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw)


def broadcast_leading(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Explicitly tile ``a`` over new leading dims: ``shape -> (*lead, *shape)``."""
    lead = tuple(lead)
    n = int(np.prod(lead)) if lead else 1
    out = np.broadcast_to(a.data, lead + a.shape).copy()
    return _make(out, (a,), lambda g: (g.reshape((n,) + a.shape).sum(axis=0),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of size {vocab}")

    def bw(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), bw)


def take_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: ``out[..., i, j] = a[..., i, idx[..., i, j]]``.

    ``idx`` is ``(rows, k)`` or carries leading axes that broadcast against ``a``'s
    (e.g. a per-example ``(B, 1, rows, k)`` index for ``(B, h, rows, K)`` scores).
    """
    idx = np.asarray(idx, dtype=np.int64)
    rows = a.shape[-2]
    if idx.ndim < 2 or idx.shape[-2] != rows:
        raise ShapeError(f"take_last: index {idx.shape} does not match rows of {a.shape}")
    try:
        full = np.broadcast_to(idx, a.shape[:-1] + idx.shape[-1:])
    except ValueError:
        raise ShapeError(f"take_last: index {idx.shape} does not broadcast onto {a.shape}") from None
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError("take_last: index outside the table window")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        flat = out.reshape(-1, rows, shape[-1])
        fi = full.reshape(-1, rows, full.shape[-1])
        b = np.arange(flat.shape[0])[:, None, None]
        r = np.arange(rows)[None, :, None]
        np.add.at(flat, (b, r, fi), g.reshape(fi.shape))
        return (out,)

    return _make(np.take_along_axis(a.data, full, axis=-1), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# normalization, softmax, loss


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects a non-empty matrix, got {a.shape}")
    return softmax(a)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} for width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to_bias(g * xhat), _reduce_to_bias(g)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is ``(..., V)``; ``targets`` integer array of the leading shape;
    ``mask`` true where the position counts.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    m = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    safe_t = np.where(m, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (m[..., None] * (float(g) / count)),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))
