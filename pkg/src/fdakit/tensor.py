"""Minimal reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor`.  When a :class:`Tape` is active on the
current thread and at least one input is differentiable, the op appends a node
holding a closure that maps the output gradient to input gradients.  Backward
walks the tape once, newest node first.

Image-like tensors are laid out H x W x C, optionally with a leading batch
axis (N x H x W x C).  Broadcasting is limited to scalar operands, plus the
per-channel bias add used by dense and conv layers.
"""

from __future__ import annotations

import threading
import weakref
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array with an optional gradient and a handle into the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape = None

    @property
    def tape(self) -> Optional["Tape"]:
        # weak: a tape owns closures over its tensors, so a strong link would form a cycle
        return self._tape() if self._tape is not None else None

    @tape.setter
    def tape(self, value):
        self._tape = weakref.ref(value) if value is not None else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager to make it the active tape of the current thread::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.mode = "recording"
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self.mode = "frozen"
        return False

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable):
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(kind, tuple(inputs), backward))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None):
        """Accumulate d(root)/d(leaf) into ``.grad`` of every differentiable leaf."""
        if root.data.size != 1 and seed is None:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        grads: dict[int, np.ndarray] = {}
        grads[root.node_id] = (
            np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.dtype)
        )
        for nid in range(root.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.tape is self and t.node_id is not None:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def current_tape() -> Optional[Tape]:
    tape = getattr(_state, "tape", None)
    if tape is not None and tape.mode == "recording":
        return tape
    return None


def backward(root: Tensor):
    """Run reverse mode from ``root`` on the tape that produced it."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is None:
        raise ValueError("root is not attached to a tape")
    root.tape.backward(root)


def reset_grads(*tensors: Tensor):
    for t in tensors:
        t.grad = None


def tensor(data, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(kind, data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward_fn)
    return out


def _check_same_or_scalar(a: Tensor, b: Tensor, kind: str):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _check_same_or_scalar(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _check_same_or_scalar(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _check_same_or_scalar(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make("relu", np.where(on, a.data, 0).astype(a.dtype), (a,), lambda g: (g * on,))


def log(a: Tensor, stabilize: float = 0.0) -> Tensor:
    """Natural log.  ``stabilize`` is added to the input before the log."""
    x = a.data + stabilize if stabilize else a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value; pass stabilize > 0 to guard dead inputs")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _make("clamp", np.clip(a.data, lo_, hi_).astype(a.dtype), (a,), lambda g: (g * inside,))


def sign(a: Tensor) -> Tensor:
    return _make("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul,
    "neg": neg, "relu": relu, "log": log, "clamp": clamp, "sign": sign,
}


def elementwise(kind: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch by name; binary kinds take ``b``, ``clamp`` takes ``lo``/``hi``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a, **kwargs)


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _make("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, batched: bool = False) -> Tensor:
    shape = (a.shape[0], -1) if batched else (-1,)
    return reshape(a, shape)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C vector along the last axis of ``x``."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on a flat vector (K,) or a batch (N, K)."""
    if x.data.ndim == 1:
        out = matmul(reshape(x, (1, -1)), w)
        return reshape(add_bias(out, b), (-1,))
    return add_bias(matmul(x, w), b)


# ---------------------------------------------------------------- convolution / pooling


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of H x W x Cin (or N x H x W x Cin) with kh x kw x Cin x Cout."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and 4-D kernels, got {x.shape}, {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernels expect {kcin}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} < 1 for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    # windows: N x Ho x Wo x Cin x kh x kw
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    if single:
        out = out[0]

    def back(g):
        g4 = g[None] if single else g
        gmat = g4.reshape(n * ho * wo, cout)
        gk = (cols.T @ gmat).reshape(kernels.shape)
        gcols = (gmat @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        if single:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 1, 2)))
        return grads

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make("conv2d", out, inputs, back)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over window x window patches; gradient goes to the first argmax of each patch."""
    stride = window if stride is None else stride
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    n, h, w, c = xd.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(xd, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def back(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += g4 * hit
        return (gx[0] if single else gx,)

    return _make("maxpool2d", out, (x,), back)


# ---------------------------------------------------------------- losses / norms


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(z))


def softmax_cross_entropy(logits: Tensor, label, reduction: str = "sum") -> Tensor:
    """-log softmax(logits)[label], max-shifted.

    ``logits`` may be (C,) with an int label or (N, C) with N labels; batched
    losses are summed (``reduction="sum"``) or averaged (``"mean"``).
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n, c = z2.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c})")
    logp = log_softmax_np(z2)
    rows = np.arange(n)
    losses = -logp[rows, labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = np.asarray(losses.sum() * scale, dtype=z.dtype)

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= g * scale
        return (d[0] if single else d,)

    return _make("softmax_cross_entropy", value, (logits,), back)


def cross_entropy_per_sample(logits: Tensor, labels) -> np.ndarray:
    logp = log_softmax_np(np.atleast_2d(logits.data))
    labels = np.atleast_1d(labels)
    return -logp[np.arange(len(labels)), labels]


def margin(logits: Tensor, label) -> Tensor:
    """Z[y] - max_{j != y} Z[j], summed over the batch for (N, C) logits."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n, c = z2.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c})")
    rows = np.arange(n)
    others = z2.copy()
    others[rows, labels] = -np.inf
    runner = others.argmax(axis=1)
    value = np.asarray((z2[rows, labels] - z2[rows, runner]).sum(), dtype=z.dtype)

    def back(g):
        d = np.zeros_like(z2)
        d[rows, labels] += g
        d[rows, runner] -= g
        return (d[0] if single else d,)

    return _make("margin", value, (logits,), back)


def masked_l2_norm(t: Tensor, mask, delta: float = 1e-12, per_sample: bool = False) -> Tensor:
    """sqrt(sum of t**2 over ``mask`` + delta).

    With ``per_sample`` the leading axis is a batch axis and one norm per sample
    is returned; samples with an empty mask get sqrt(delta).
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != t.shape:
        raise ShapeError(f"mask shape {m.shape} differs from tensor shape {t.shape}")
    if not per_sample and not m.any():
        raise ValueError("masked_l2_norm: mask selects no coordinates")
    sq = np.where(m, t.data, 0).astype(t.dtype)
    if per_sample:
        axes = tuple(range(1, t.data.ndim))
        norm = np.sqrt((sq * sq).sum(axis=axes) + delta).astype(t.dtype)
        expand = (slice(None),) + (None,) * len(axes)

        def back(g):
            denom = np.where(norm > 0, norm, 1)
            return ((g / denom)[expand] * sq,)
    else:
        norm = np.asarray(np.sqrt((sq * sq).sum() + delta), dtype=t.dtype)

        def back(g):
            return ((g / norm) * sq if norm > 0 else np.zeros_like(sq),)

    return _make("masked_l2_norm", norm, (t,), back)


# ---------------------------------------------------------------- verification


def numerical_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def analytic_grad(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    return np.zeros_like(x.data) if x.grad is None else x.grad


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients (64-bit)."""
    a = analytic_grad(f, point)
    n = numerical_grad(f, point, step)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))
