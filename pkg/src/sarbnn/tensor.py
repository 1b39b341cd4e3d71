"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives a small convolutional classifier needs are provided:
valid 2-D convolution, max pooling, ReLU, fully-connected layers,
log-softmax and the negative log-likelihood loss, plus the elementwise
helpers used by the reparameterization trick.

ReLU has two backward rules.  ``"standard"`` is the usual derivative;
``"guided"`` additionally drops negative upstream gradients, which is what
guided backpropagation needs::

    with GradTape(mode="guided") as tape:
        x = tape.watch(Tensor(image))
        logits = forward(x)
    grads = tape.backward(seed, output=logits)
    saliency = grads[x]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "add",
    "mul",
    "softplus",
    "relu",
    "conv2d",
    "maxpool2d",
    "linear",
    "flatten",
    "log_softmax",
    "softmax",
    "nll_loss",
    "tensor_sum",
]

MODES = ("standard", "guided")


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, expected: str, got: str, note: str = ""):
        self.op = op
        self.expected = expected
        self.got = got
        msg = f"{op}: expected {expected}, got {got}"
        if note:
            msg += f" ({note})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense float array, optionally tracked by a :class:`GradTape`."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError("tensor", "positive dimension sizes", str(arr.shape))
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray, str], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class GradTape:
    """Ordered record of primitive ops executed while the tape is active.

    The tape is confined to the thread that entered it.  ``mode`` selects the
    ReLU backward rule for every backward pass replayed over this tape.
    """

    mode: str = "standard"
    entries: list[_Entry] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown tape mode {self.mode!r}; expected one of {MODES}")

    def __enter__(self) -> GradTape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def watch(self, t: Tensor) -> Tensor:
        t.requires_grad = True
        return t

    def record(self, entry: _Entry) -> None:
        self.entries.append(entry)

    def backward(self, seed=None, output: Tensor | None = None) -> Gradients:
        return backward(self, seed, output=output)


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray], refs: dict[int, Tensor]):
        self._grads = grads
        self._refs = refs

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._refs.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._refs.get(id(t)) is t


def backward(tape: GradTape, seed=None, output: Tensor | None = None) -> Gradients:
    """Replay ``tape`` in reverse starting from ``output`` (default: last op).

    ``seed`` is the gradient of the objective with respect to ``output``;
    ``None`` means ones, which is only sensible for scalar outputs.
    """
    if not tape.entries:
        raise TapeError("backward called on an empty tape (no forward pass recorded)")
    if output is None:
        output = tape.entries[-1].output
    if not any(e.output is output for e in tape.entries):
        raise TapeError("output tensor was not produced by an op on this tape")
    if seed is None:
        seed_arr = np.ones_like(output.data)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
        if seed_arr.shape != output.shape:
            raise ShapeError("backward", f"seed of shape {output.shape}", str(seed_arr.shape))

    grads: dict[int, np.ndarray] = {id(output): seed_arr}
    refs: dict[int, Tensor] = {id(output): output}
    mode = tape.mode
    started = False
    for entry in reversed(tape.entries):
        if not started:
            if entry.output is not output:
                continue
            started = True
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        in_grads = entry.backward(g_out, mode)
        for t, g in zip(entry.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                refs[key] = t
    return Gradients(grads, refs)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    _check_finite(op, out)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    tape = _active_tape()
    if tape is not None and needs:
        tape.record(_Entry(op, inputs, result, bwd))
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", "broadcast-compatible shapes", f"{a.shape} and {b.shape}") from None

    def bwd(g, mode):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", "broadcast-compatible shapes", f"{a.shape} and {b.shape}") from None

    def bwd(g, mode):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), out, bwd)


def softplus(x) -> Tensor:
    """ln(1 + e^x), computed without overflow."""
    x = _as_tensor(x)
    out = np.logaddexp(0, x.data).astype(x.dtype, copy=False)

    def bwd(g, mode):
        return (g * _sigmoid(x.data),)

    return _emit("softplus", (x,), out, bwd)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -v)).astype(v.dtype, copy=False)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(g, mode):
        grad = g * (x.data > 0)
        if mode == "guided":
            grad = grad * (g > 0)
        return (grad,)

    return _emit("relu", (x,), out, bwd)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray([x.data.sum(dtype=np.float64)], dtype=x.dtype)

    def bwd(g, mode):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return _emit("sum", (x,), out, bwd)


def flatten(x) -> Tensor:
    """Collapse everything but the leading batch axis."""
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def bwd(g, mode):
        return (g.reshape(shape),)

    return _emit("flatten", (x,), out, bwd)


# ---------------------------------------------------------------------------
# Layers


def conv2d(x, w, b=None) -> Tensor:
    """Valid cross-correlation, stride 1.

    x: (N, C, H, W); w: (O, C, kh, kw); b: (O,).  Output (N, O, H-kh+1, W-kw+1).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", "4-d input (N,C,H,W) and 4-d kernel (O,C,kh,kw)",
                         f"input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError("conv2d", f"kernel input channels == {c}", str(ck))
    if kh > h or kw > wd:
        raise ShapeError("conv2d", f"kernel no larger than input {h}x{wd}", f"{kh}x{kw}")
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", f"bias of shape ({o},)", str(b.shape))
        inputs = (x, w, b)

    ho, wo = h - kh + 1, wd - kw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def bwd(g, mode):
        gm = g.reshape(n, o, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, ho, wo)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return _emit("conv2d", inputs, out, bwd)


def maxpool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over square windows.

    Trailing rows/columns that do not fill a whole window are dropped.  The
    gradient of each window goes to its first maximal element in row-major
    order.
    """
    x = _as_tensor(x)
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d", "4-d input (N,C,H,W)", str(x.shape))
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise ShapeError("maxpool2d", f"spatial extent >= window {window}", f"{h}x{wd}",
                         "trailing rows/columns that do not fill a window are truncated")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]

    def view(arr, i, j):
        return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

    out = view(x.data, 0, 0).copy()
    for i, j in offsets[1:]:
        np.maximum(out, view(x.data, i, j), out=out)

    def bwd(g, mode):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = view(x.data, i, j) == out
            hit &= ~taken
            taken |= hit
            view(gx, i, j)[...] += g * hit
        return (gx,)

    return _emit("maxpool2d", (x,), out, bwd)


def linear(x, w, b=None) -> Tensor:
    """Fully-connected layer: x (N, F) @ w (F, M) + b (M,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", f"input (N, {w.shape[0] if w.data.ndim == 2 else '?'}) "
                         f"for weight {w.shape}", str(x.shape))
    inputs: tuple[Tensor, ...] = (x, w)
    out = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError("linear", f"bias of shape ({w.shape[1]},)", str(b.shape))
        out = out + b.data
        inputs = (x, w, b)

    def bwd(g, mode):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _emit("linear", inputs, out, bwd)


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax of (N, C) logits via max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("log_softmax", "2-d logits (N, C)", str(x.shape))
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted.astype(np.float64)).sum(axis=1, keepdims=True))
    out = (shifted - lse).astype(x.dtype)

    def bwd(g, mode):
        p = np.exp(out.astype(np.float64))
        return ((g - p * g.sum(axis=1, keepdims=True)).astype(x.dtype),)

    return _emit("log_softmax", (x,), out, bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (untracked) row-wise softmax in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nll_loss(logp, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under log-probs (N, C)."""
    logp = _as_tensor(logp)
    labels = np.asarray(labels, dtype=np.int64)
    if logp.data.ndim != 2 or labels.shape != (logp.shape[0],):
        raise ShapeError("nll_loss", f"labels of shape ({logp.shape[0]},) for log-probs (N, C)",
                         f"labels {labels.shape}, log-probs {logp.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logp.shape[1]):
        raise ValueError(f"nll_loss: labels must lie in [0, {logp.shape[1]})")
    n = logp.shape[0]
    picked = logp.data[np.arange(n), labels].astype(np.float64)
    if reduction == "mean":
        scale = 1.0 / n
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray([-picked.sum() * scale], dtype=logp.dtype)

    def bwd(g, mode):
        grad = np.zeros_like(logp.data)
        grad[np.arange(n), labels] = -scale * g.reshape(())
        return (grad,)

    return _emit("nll_loss", (logp,), out, bwd)
