"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run: every operation on a :class:`Tensor` that
requires gradients records its inputs and a backward rule on the output.
:class:`Tape` linearises such a graph into topological order and
:func:`backward` walks it in reverse.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("DENSECLPP_DEBUG"))

_GELU_C = math.sqrt(2.0 / math.pi)
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array with an optional gradient and a link to its creator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # so ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- convenience --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite value produced from finite inputs")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (a,), bw)


# -- shape ---------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_fancy(idx) -> bool:
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(src)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array of any shape."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    src = a.shape
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros(src)
        # move gathered axes to front so np.add.at can scatter along `axis`
        moved = np.moveaxis(full, axis, 0)
        gi = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, gi)
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in ax]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp over one axis (the axis is removed)."""
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = np.exp(x - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = shifted / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each trailing-axis vector by max(||v||, eps)."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom
    big = norm > eps

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / denom),)

    return _make(out, (a,), bw)


def cosine_similarity_matrix(a, b, eps: float = 1e-12) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``.

    Rows with zero norm give similarity 0 against everything.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    bn = l2_normalize(b, eps)
    return matmul(l2_normalize(a, eps), transpose(bn, _swap_last(bn.ndim)))


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def bw(g):
        gg = _unbroadcast(g * xhat, gd.shape)
        gb = _unbroadcast(g, beta.shape)
        dxhat = g * gd
        gx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# -- image ops (channels-last) -------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution. x: (B,H,W,Cin), w: (kh,kw,Cin,Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    ph, pw = kh // 2, kw // 2
    xd = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    B, H, W, _ = x.shape
    # (B,H,W,Cin,kh,kw)
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, H, W, cout)
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(B * H * W, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(B, H, W, kh, kw, cin)
        gpad = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i : i + H, j : j + W, :] += gcols[:, :, :, i, j, :]
        gx = gpad[:, ph : ph + H, pw : pw + W, :]
        if b is not None:
            return gx, gw, g.reshape(-1, cout).sum(0)
        return gx, gw

    return _make(out, parents, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel size == stride (non-overlapping).

    x: (B,h,w,Cin), w: (f,f,Cin,Cout) -> (B,h*f,w*f,Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    f, f2, cin, cout = w.shape
    if f != f2 or x.shape[-1] != cin:
        raise ValueError(f"conv_transpose2d mismatch: input {x.shape}, kernel {w.shape}")
    B, h, wd, _ = x.shape
    xd, wdat = x.data, w.data
    # out[b, i, di, j, dj, o] = sum_c x[b,i,j,c] w[di,dj,c,o]
    blocks = np.einsum("bijc,pqco->bipjqo", xd, wdat, optimize=True)
    out = blocks.reshape(B, h * f, wd * f, cout)
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def bw(g):
        gb6 = g.reshape(B, h, f, wd, f, cout)
        gx = np.einsum("bipjqo,pqco->bijc", gb6, wdat, optimize=True)
        gw = np.einsum("bijc,bipjqo->pqco", xd, gb6, optimize=True)
        if b is not None:
            return gx, gw, g.reshape(-1, cout).sum(0)
        return gx, gw

    return _make(out, parents, bw)


def resample2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along H and W: out = rows @ x @ cols.T per channel.

    x: (B,H,W,C), rows: (H',H), cols: (W',W).
    """
    x = as_tensor(x)
    out = np.einsum("oh,bhwc,pw->bopc", rows, x.data, cols, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("oh,bopc,pw->bhwc", rows, g, cols, optimize=True),))


# -- tape & backward -------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root tensor, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every tensor the loss depends on.

    Gradients are overwritten, not accumulated, so repeated calls on the same
    tape are reproducible.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")
    tape = tape if tape is not None else Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


# -- finite differences ------------------------------------------------------------


class GradCheckError(ArithmeticError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    The error per coordinate is |a - n| / max(1, |a| + |n|). ``coords`` limits
    the check to a random subset of coordinates.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    return grad_check_many(lambda: f(x), [x], h=h, coords=coords, rng=rng)


def grad_check_many(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-6,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` but over several tensors captured by ``f``."""
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = np.sort(rng.choice(flat.size, size=coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                pos = tuple(int(v) for v in np.unravel_index(i, p.shape))
                raise GradCheckError(f"non-finite loss when perturbing coordinate {pos}", pos)
            num = (fp - fm) / (2 * h)
            an = a.reshape(-1)[i]
            err = abs(an - num) / max(1.0, abs(an) + abs(num))
            worst = max(worst, err)
    return worst
