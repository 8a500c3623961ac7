"""Dense tensors with tape-based reverse-mode differentiation.

Values are plain numpy arrays wrapped in :class:`Tensor`.  Every primitive in
this module computes its result eagerly and, when a :class:`GradTape` is
active and one of the inputs is tracked, records a vector-Jacobian product on
the tape.  ``backward`` replays the tape in reverse order.

Images and feature maps are channels-last, optionally with a leading batch
axis: ``(H, W, C)`` or ``(B, H, W, C)``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "backward",
    "record",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "tsum",
    "mean",
    "square",
    "conv2d",
    "prelu",
    "softmax_rows",
    "feature_normalize",
    "NORM_EPS",
]

NORM_EPS = 1e-5

_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    """An immutable n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        # read-only view: the caller's array keeps its own flags
        arr = arr.view()
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations whose inputs are tracked
    (``requires_grad=True`` or produced from tracked tensors) are recorded
    while the tape is active::

        with GradTape() as tape:
            loss = tsum(square(x))
        grads = backward(tape, loss)
        grads[x]
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads[s] for s in sources]


class Gradients:
    """Mapping from tracked tensors (by identity) to gradient arrays.

    Tensors that did not influence the loss get a zero gradient.
    """

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


def record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``vjp(g)`` must return one gradient (or ``None``) per input, each with
    the input's shape.
    """
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].entries.append((out, tuple(inputs), vjp))
    return out


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(.) to every tensor recorded on ``tape``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    # the tape holds references to every output, so ids stay unique here
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return Gradients(grads)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a: Tensor) -> Tensor:
    return record(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
    )


# structural -------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(a.data @ b.data, (a, b), vjp)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, Iterable):
        v = tuple(int(i) for i in v)
        return (v[0], v[1])
    return (int(v), int(v))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, pad=0, stride=1) -> Tensor:
    """2-D cross-correlation with zero padding, channels-last.

    ``x`` is ``(H, W, Cin)`` or ``(B, H, W, Cin)``; ``kernel`` is
    ``(kh, kw, Cin, Cout)``; ``bias`` is ``(Cout,)``.
    """
    ph, pw = _pair(pad)
    sh, sw = _pair(stride)
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d needs odd kernel extents, got {kh}x{kw}")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    B, H, W, _ = xd.shape
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}"
        )
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else xd
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, cout)
    if not batched:
        out = out[0]

    def vjp(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += gcols[
                        :, :, :, i, j
                    ]
            gx = gxp[:, ph : ph + H, pw : pw + W]
            if not batched:
                gx = gx[0]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record(out, inputs, vjp)


# nonlinearities ------------------------------------------------------------------


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (last axis)."""
    if slope.shape not in ((x.shape[-1],), (1,)):
        raise ValueError(f"prelu slope {slope.shape} does not match channels of {x.shape}")
    neg = x.data < 0
    out = np.where(neg, slope.data * x.data, x.data)

    def vjp(g):
        gx = np.where(neg, g * slope.data, g)
        gs = np.where(neg, g * x.data, 0.0).reshape(-1, x.shape[-1]).sum(axis=0)
        if slope.shape == (1,):
            gs = gs.sum(keepdims=True)
        return gx, gs.astype(slope.dtype)

    return record(out, (x, slope), vjp)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (m,), vjp)


def feature_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardise each channel over its spatial extent (no affine terms).

    For a ``(B, H, W, C)`` input the statistics are taken per sample.
    """
    axes = (-3, -2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxc = (g * xc).mean(axis=axes, keepdims=True)
        return (inv * (g - gm) - xc * inv**3 * gxc,)

    return record(y.astype(x.dtype, copy=False), (x,), vjp)
