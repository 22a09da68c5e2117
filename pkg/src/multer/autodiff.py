"""Dense double-precision tensors with define-by-run reverse-mode differentiation.

Every primitive builds its output eagerly and attaches a :class:`Record` that
knows how to push an output gradient back to its inputs.  ``backward`` traces
the records reachable from a scalar loss into a :class:`Tape` (topologically
ordered) and walks it in reverse exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


L2_EPS = 1e-12


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.record: Record | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = self.record.op if self.record else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(arr: np.ndarray) -> bool:
    # a finite sum settles it in one pass; overflow of the sum alone falls back
    return math.isfinite(arr.sum()) or bool(np.isfinite(arr).all())


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward, **saved) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.record = Record(op, inputs, backward, saved) if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Records reachable from one output, inputs always before the tensor they produce."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.record is not None:
                for parent in t.record.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def records(self) -> list[Record]:
        return [t.record for t in self.nodes if t.record is not None]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.record is None]


def backward(loss: Tensor, tape: Tape | None = None, inputs: Iterable[Tensor] = ()) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Tensors listed in ``inputs`` that the loss does not depend on receive a
    zero gradient.  Returns the tape so callers can inspect the records.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.record is None:
            if not _all_finite(g):
                raise NonFiniteError("backward produced non-finite gradient")
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.record.inputs, t.record.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        "multiply",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def relu(x: Tensor) -> Tensor:
    xd = x.data
    # the input is kept on the record so gradient checks can detect kinks
    return _make("relu", np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), input=xd)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ContractError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat shape mismatch: {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return multiply(sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", np.matmul(ad, bd), (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def outer_product(u: Tensor, v: Tensor) -> Tensor:
    """Flattened outer product over the last axis, ``u`` index outer."""
    if u.shape[:-1] != v.shape[:-1]:
        raise ContractError(f"outer_product batch mismatch: {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    A, B = ud.shape[-1], vd.shape[-1]
    lead = ud.shape[:-1]
    out = (ud[..., :, None] * vd[..., None, :]).reshape(*lead, A * B)

    def back(g):
        g3 = g.reshape(*lead, A, B)
        gu = np.matmul(g3, vd[..., :, None])[..., 0]
        gv = np.matmul(ud[..., None, :], g3)[..., 0, :]
        return gu, gv

    return _make("outer_product", out, (u, v), back)


def _residuals(xd: np.ndarray, cd: np.ndarray) -> np.ndarray:
    """``x[..., n, :] - c[k, :]`` as ``[B, N, K, D]`` with leading axes folded into B."""
    K, D = cd.shape
    N = xd.shape[-2]
    # tiling keeps the subtraction's inner loop K*D long instead of D
    r = np.tile(xd.reshape(-1, N, D), (1, 1, K))
    r -= cd.reshape(-1)
    return r.reshape(-1, N, K, D)


def pairwise_sqdist(x: Tensor, c: Tensor) -> Tensor:
    """Squared distances ``x[..., i, :]`` to ``c[k, :]`` -> ``[..., N, K]``."""
    if c.ndim != 2 or x.ndim < 2 or x.shape[-1] != c.shape[-1]:
        raise ContractError(f"pairwise_sqdist dimension mismatch: {x.shape} vs {c.shape}")
    xd, cd = x.data, c.data
    # expanded as |x|^2 - 2 x.c + |c|^2 to avoid N x K x D work; the clamp
    # removes tiny negative values left by cancellation near a codeword
    out = np.matmul(xd, -2.0 * cd.T)
    out += np.einsum("...d,...d->...", xd, xd)[..., None]
    out += np.einsum("kd,kd->k", cd, cd)
    np.maximum(out, 0.0, out=out)

    def back(g):
        gx = 2.0 * (g.sum(axis=-1, keepdims=True) * xd - g @ cd)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gc = 2.0 * (g2.sum(axis=0)[:, None] * cd - g2.T @ x2)
        return gx, gc

    return _make("pairwise_sqdist", out, (x, c), back)


def residual_aggregate(x: Tensor, a: Tensor, c: Tensor) -> Tensor:
    """``e[..., k, :] = sum_i a[..., i, k] * (x[..., i, :] - c[k, :])``.

    Residuals are formed explicitly so a descriptor equal to a codeword
    contributes an exact zero.
    """
    if c.ndim != 2 or x.shape[-1] != c.shape[-1] or a.shape[:-1] != x.shape[:-1] or a.shape[-1] != c.shape[0]:
        raise ContractError(f"residual_aggregate shape mismatch: x {x.shape}, a {a.shape}, c {c.shape}")
    xd, ad_, cd = x.data, a.data, c.data
    K, D = cd.shape
    resid = _residuals(xd, cd).transpose(0, 2, 1, 3)
    weights = ad_.reshape(-1, 1, *ad_.shape[-2:]).transpose(0, 3, 1, 2)
    out = np.matmul(weights, resid).reshape(xd.shape[:-2] + (K, D))

    def back(g):
        swap = np.swapaxes
        ga = xd @ swap(g, -1, -2) - (g * cd).sum(axis=-1)[..., None, :]
        gx = ad_ @ g
        mass = ad_.sum(axis=-2)
        gc = -(mass[..., None] * g).reshape(-1, *cd.shape).sum(axis=0)
        return gx, ga, gc

    return _make("residual_aggregate", out, (x, a, c), back)


# ---------------------------------------------------------------------------
# normalization and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def l2_normalize(x: Tensor, eps: float = L2_EPS, axis: int = -1) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom
    active = norm > eps

    def back(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return _make("l2_normalize", y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    Accepts a single logit vector with a scalar label or a batch ``[B, n]``.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    B, n = logits.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= n:
        raise ContractError(f"labels {labels.tolist()} incompatible with logits {logits.shape}")
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros((B, n))
    onehot[np.arange(B), labels] = -1.0 / B
    return sum(multiply(logp, onehot))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,Cin,H,W]`` with ``k[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ContractError(f"conv2d shape mismatch: input {x.shape}, kernel {k.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    N, Cin, H, W = x.shape
    Cout, _, kh, kw = k.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ContractError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)

    if padding:
        xp = np.zeros((N, Cin, Hp, Wp))
        xp[:, :, padding : padding + H, padding : padding + W] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    # columns laid out [N, Cin, kh, kw, Ho, Wo] so the product lands directly in NCHW
    sN, sC, sH, sW = xp.strides
    window = np.lib.stride_tricks.as_strided(xp, (N, Cin, kh, kw, Ho, Wo), (sN, sC, sH, sW, sH * stride, sW * stride), writeable=False)
    cols = np.ascontiguousarray(window).reshape(N, Cin * kh * kw, Ho * Wo)
    kmat = k.data.reshape(Cout, -1)
    out = np.matmul(kmat, cols).reshape(N, Cout, Ho, Wo)

    def back(g):
        g3 = g.reshape(N, Cout, Ho * Wo)
        gk = None
        if k.requires_grad:
            if Ho * Wo >= 64:
                gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(0).reshape(k.shape)
            else:
                gk = (g3.transpose(1, 0, 2).reshape(Cout, -1) @ cols.transpose(1, 0, 2).reshape(kmat.shape[1], -1).T).reshape(k.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(kmat.T, g3).reshape(N, Cin, kh, kw, Ho, Wo)
            gxp = np.zeros((N, Cin, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return gx, gk

    return _make("conv2d", out, (x, k), back)


def avgpool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean of ``x[N,D,H,W]`` -> ``[N,D]``."""
    if x.ndim != 4:
        raise ContractError(f"avgpool_global expects N x D x H x W, got {x.shape}")
    N, D, H, W = x.shape
    scale = 1.0 / (H * W)
    return _make(
        "avgpool_global",
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),),
    )
