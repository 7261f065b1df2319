"""Dense float64 tensors with tape-based reverse-mode autodiff.

The op set is deliberately small: what a toy conv detector and the focused
activation objectives need, nothing more. No broadcasting (except the
dedicated channel bias op), no higher-order gradients, single-threaded tapes.

The three focused reductions share one value convention: elements are
accumulated sequentially in ascending (row, col) order, so the masked dense
reduction (fa_parallel) and the gather reduction (fa_indexed) agree bit for
bit. Adding a masked-out 0.0 to a non-negative running sum never changes its
bits, and np.cumsum accumulates left to right.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, TapeUsageError

_next_id = itertools.count()
_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable multidimensional array of 64-bit reals.

    The backing numpy array is C-contiguous (row-major) and marked read-only;
    every operation returns a fresh Tensor.
    """

    __slots__ = ("data", "_tid")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self._tid = next(_next_id)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def tensor(data) -> Tensor:
    """Build a Tensor from any array-like of reals."""
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, float(value)))


@dataclass(frozen=True)
class FocusMask:
    """Positions of feature-map entries strictly above the focus threshold.

    indices has shape (m, 2): (anchor, class) pairs sorted ascending in
    row-major order, no duplicates.
    """

    indices: np.ndarray
    threshold: float

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(a), int(c)) for a, c in self.indices]


class _SparseGrad:
    """Gradient update touching only ``flat_idx`` positions of the buffer."""

    __slots__ = ("flat_idx", "values")

    def __init__(self, flat_idx: np.ndarray, values: np.ndarray):
        self.flat_idx = flat_idx
        self.values = values


class _Node:
    __slots__ = ("out_tid", "parents", "backward")

    def __init__(self, out_tid, parents, backward):
        self.out_tid = out_tid
        self.parents = parents  # list of (tid, shape)
        self.backward = backward  # grad_out -> sequence of dense/_SparseGrad/None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; ops executed inside record themselves. A tape
    is single-use: exactly one backward() per recorded forward pass, and no
    recording after backward(). Confine a tape to one thread.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._out_ids: set[int] = set()
        self._grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeUsageError("tape context exited out of order")
        stack.pop()

    def _record(self, node: _Node) -> None:
        if self._consumed:
            raise TapeUsageError("cannot record on a consumed tape")
        self._nodes.append(node)
        self._out_ids.add(node.out_tid)

    def _accumulate(self, tid: int, shape: tuple[int, ...], grad) -> None:
        buf = self._grads.get(tid)
        if isinstance(grad, _SparseGrad):
            if grad.flat_idx.size == 0:
                return
            if buf is None:
                buf = np.zeros(shape)
                self._grads[tid] = buf
            # mask indices are unique, so a direct fancy add is safe
            buf.reshape(-1)[grad.flat_idx] += grad.values
        else:
            if buf is None:
                self._grads[tid] = np.array(grad, copy=True)
            else:
                buf += grad

    def backward(self, root: Tensor) -> None:
        """Propagate d(root)/d(everything) back through the recorded graph."""
        if self._consumed:
            raise TapeUsageError("backward() already ran on this tape")
        if root._tid not in self._out_ids:
            raise TapeUsageError("root was not produced on this tape")
        if root.size != 1:
            raise TapeUsageError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        self._grads[root._tid] = np.ones(root.shape)
        for node in reversed(self._nodes):
            gout = self._grads.get(node.out_tid)
            if gout is None:
                continue
            for (ptid, pshape), pgrad in zip(node.parents, node.backward(gout)):
                if pgrad is None:
                    continue
                self._accumulate(ptid, pshape, pgrad)

    def grad(self, t: Tensor) -> Tensor:
        """Gradient of the backward root with respect to ``t`` (zeros if unused)."""
        if not self._consumed:
            raise TapeUsageError("grad() before backward()")
        g = self._grads.get(t._tid)
        return Tensor(g) if g is not None else zeros(t.shape)


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def _emit(out: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None:
        tape._record(_Node(result._tid,
                           [(p._tid, p.shape) for p in parents],
                           backward_fn))
    return result


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full(shape, g.reshape(())),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {old} as {shape}")
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over a 2-D tensor; every output row sums to 1."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D input, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (a,), back)


# ---------------------------------------------------------------------------
# convolution


def conv2d(inp: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a Cin x H x W input with a Cout x Cin x k x k kernel.

    Zero padding, no kernel flip. Output is Cout x H' x W' with
    H' = floor((H + 2*padding - k) / stride) + 1.
    """
    if inp.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d: need input (Cin,H,W) and kernel (Cout,Cin,k,k), "
            f"got {inp.shape} and {kernel.shape}")
    cin, h, w = inp.shape
    cout, kcin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd side, got {kernel.shape}")
    if kcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {kcin}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride/padding ({stride}, {padding})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: empty output for input {inp.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}")

    xp = np.pad(inp.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (cin, ho, wo, k, k)
    out = np.tensordot(kernel.data, win, axes=([1, 2, 3], [0, 3, 4]))

    kdata = kernel.data
    in_shape = inp.shape

    def back(g):
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                contrib = np.tensordot(kdata[:, :, di, dj], g, axes=(0, 0))
                gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += contrib
        gx = gxp[:, padding:padding + in_shape[1], padding:padding + in_shape[2]]
        gk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        return (np.ascontiguousarray(gx), gk)

    return _emit(out, (inp, kernel), back)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to a (C, H, W) tensor."""
    if x.ndim != 3 or bias.ndim != 1 or bias.shape[0] != x.shape[0]:
        raise DimensionError(f"bias_add: shapes {x.shape} and {bias.shape} incompatible")
    return _emit(x.data + bias.data[:, None, None], (x, bias),
                 lambda g: (g, g.sum(axis=(1, 2))))


# ---------------------------------------------------------------------------
# focused activation reductions


def _check_fa_args(y_hat: Tensor, t: float) -> float:
    if y_hat.ndim != 2:
        raise DimensionError(f"focused reduction expects a 2-D map, got {y_hat.shape}")
    t = float(t)
    if not (0.0 <= t < 1.0):
        raise ConfigError(f"focus threshold must lie in [0, 1), got {t}")
    return t


def _seq_sum(values: np.ndarray) -> float:
    # sequential left-to-right accumulation; see module docstring
    return float(np.cumsum(values)[-1]) if values.size else 0.0


def fa_hinge(y_hat: Tensor, t: float) -> Tensor:
    """Hinge form of the focused activation: sum of max(0, y - t).

    Subgradient at y == t is taken as 0, so the gradient is 1 exactly where
    y > t and 0 elsewhere.
    """
    t = _check_fa_args(y_hat, t)
    mask = y_hat.data > t
    value = _seq_sum(np.where(mask, y_hat.data - t, 0.0).reshape(-1))
    maskf = mask.astype(np.float64)
    return _emit(np.asarray(value), (y_hat,),
                 lambda g: (g.reshape(()) * maskf,))


def fa_parallel(y_hat: Tensor, t: float) -> Tensor:
    """Masked dense reduction: sum of y * indicator(y > t) over the whole map.

    The indicator is a constant during differentiation; the backward pass is
    a dense multiply by the 0/1 mask.
    """
    t = _check_fa_args(y_hat, t)
    mask = y_hat.data > t
    value = _seq_sum((y_hat.data * mask).reshape(-1))
    maskf = mask.astype(np.float64)
    return _emit(np.asarray(value), (y_hat,),
                 lambda g: (g.reshape(()) * maskf,))


def fa_indexed(y_hat: Tensor, t: float) -> tuple[Tensor, FocusMask]:
    """Gather reduction: collect entries above t, sum only those.

    Value is bitwise identical to fa_parallel (same ascending summation
    order). The backward pass seeds gradients only at the gathered indices;
    positions outside the mask are never written.
    """
    t = _check_fa_args(y_hat, t)
    flat = y_hat.data.reshape(-1)
    sel = np.flatnonzero(flat > t)
    value = _seq_sum(flat[sel])
    ncols = y_hat.shape[1]
    idx = np.stack([sel // ncols, sel % ncols], axis=1) if sel.size else \
        np.empty((0, 2), dtype=np.int64)
    mask = FocusMask(indices=idx, threshold=t)

    def back(g):
        gs = float(g.reshape(()))
        return (_SparseGrad(sel, np.full(sel.shape, gs)),)

    return _emit(np.asarray(value), (y_hat,), back), mask


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5, exclude: np.ndarray | None = None) -> float:
    """Max relative error between the tape gradient of f at x and central
    differences with step h.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|);
    coordinates where ``exclude`` is True are skipped (e.g. near a kink).
    """
    if h <= 0:
        raise ConfigError(f"finite_diff_check: h must be positive, got {h}")
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
        analytic = tape.grad(x).data.reshape(-1)

    base = np.array(x.data, copy=True).reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        fp = f(Tensor(base.reshape(x.shape))).item()
        base[i] = orig - h
        fm = f(Tensor(base.reshape(x.shape))).item()
        base[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if exclude is not None:
        err = err[~np.asarray(exclude).reshape(-1)]
    return float(err.max()) if err.size else 0.0
