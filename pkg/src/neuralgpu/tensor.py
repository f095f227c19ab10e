"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the Neural GPU needs are provided. Every op checks its
result for NaN/Inf and raises :class:`NumericError` instead of propagating.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, so
eval-mode forwards cost no bookkeeping.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, NumericError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _counter_stack() -> list:
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording inside the block."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@contextmanager
def count_ops():
    """Count forward op invocations by name within the block."""
    counts: Counter = Counter()
    stack = _counter_stack()
    stack.append(counts)
    try:
        yield counts
    finally:
        stack.remove(counts)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_inputs", "_backward", "_tape", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ContractViolation(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._inputs: tuple = ()
        self._backward = None
        self._tape = None
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return rsub_scalar(other, self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def _not_scalar():
    raise ContractViolation("item() requires a single-element tensor")


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once. Recorded nodes are released afterwards.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.visited = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def _record(self, t: Tensor) -> None:
        t._tape = self
        self.nodes.append(t)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise ContractViolation("tape already consumed by an earlier backward")
        if not self.nodes:
            raise ContractViolation("backward before forward: nothing recorded on this tape")
        if loss._tape is not self:
            raise ContractViolation("loss is detached or was not recorded on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads = {id(loss): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            self.visited += 1
            for inp, gi in zip(node._inputs, node._backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if not np.isfinite(gi).all():
                    raise NumericError(f"backward of {node._op}")
                if inp._tape is self:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    inp.grad = np.array(gi, copy=True) if inp.grad is None else inp.grad + gi
        self._consumed = True
        for node in self.nodes:
            node._inputs = ()
            node._backward = None
        self.nodes.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    tape.backward(loss)


def _result(op: str, data: np.ndarray, inputs: tuple, bw: Callable, force: bool = False) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(op)
    for counts in _counter_stack():
        counts[op] += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._inputs = ()
    out._backward = None
    out._tape = None
    out._op = op
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and (force or any(t.requires_grad for t in inputs)):
        out.requires_grad = True
        out._inputs = inputs
        out._backward = bw
        tape._record(out)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result("add_scalar", a.data + c, (a,), lambda g: (g,))


def rsub_scalar(c: float, a: Tensor) -> Tensor:
    """``c - a``."""
    return _result("rsub_scalar", c - a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def saturating_sigmoid(x: Tensor) -> Tensor:
    """``clip(1.2 * sigmoid(x) - 0.1, 0, 1)``; zero gradient where clipped."""
    s = _sigmoid(x.data)
    raw = 1.2 * s - 0.1
    out = np.clip(raw, 0.0, 1.0)

    def bw(g):
        inside = (raw > 0.0) & (raw < 1.0)
        return (np.where(inside, g * (1.2 * s * (1.0 - s)), 0.0).astype(g.dtype, copy=False),)

    return _result("saturating_sigmoid", out, (x,), bw)


def saturating_tanh(x: Tensor) -> Tensor:
    """``clip(1.2 * tanh(x), -1, 1)``; zero gradient where clipped."""
    t = np.tanh(x.data)
    raw = 1.2 * t
    out = np.clip(raw, -1.0, 1.0)

    def bw(g):
        inside = (raw > -1.0) & (raw < 1.0)
        return (np.where(inside, g * (1.2 * (1.0 - t * t)), 0.0).astype(g.dtype, copy=False),)

    return _result("saturating_tanh", out, (x,), bw)


# -- dropout ----------------------------------------------------------------

def dropout_mask(shape: Sequence[int], rate: float, mask_seed, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier drawn from ``mask_seed`` alone."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(mask_seed)
    keep = rng.random(tuple(shape)) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    if mask.shape != x.shape:
        raise ContractViolation(f"mask shape {mask.shape} does not match {x.shape}")
    return _result("mask", x.data * mask, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, mask_seed, training: bool = True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    return apply_mask(x, dropout_mask(x.shape, rate, mask_seed, x.dtype))


# -- convolution ------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, n, w, m = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [b, n, w, m, kh, kw]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * n * w, kh * kw * m)


def patches(x: Tensor, kh: int, kw: int) -> np.ndarray:
    """Same-padded ``kh x kw`` patches of ``x`` as rows, for sharing between
    several :func:`conv2d` calls on the same input."""
    xd = x.data if x.ndim == 4 else x.data[None]
    return _im2col(xd, kh, kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, cols: np.ndarray | None = None) -> Tensor:
    """Same-padded stride-1 2-D convolution over the (length, width) grid.

    ``x`` is ``[n, w, m]`` or batched ``[b, n, w, m]``; ``kernel`` is
    ``[kh, kw, m, m_out]`` with odd ``kh``, ``kw``; ``bias`` is ``[m_out]``.
    Cells beyond the grid read as zero. ``cols`` may pass in
    ``patches(x, kh, kw)`` computed earlier.
    """
    if kernel.ndim != 4 or bias.ndim != 1 or x.ndim not in (3, 4):
        raise ContractViolation(f"conv2d: bad ranks x{x.shape} kernel{kernel.shape} bias{bias.shape}")
    kh, kw, m, mo = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if x.shape[-1] != m or bias.shape[0] != mo:
        raise ContractViolation(f"conv2d: channel mismatch x{x.shape} kernel{kernel.shape} bias{bias.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    b, n, w, _ = xd.shape
    if cols is None:
        cols = _im2col(xd, kh, kw)
    elif cols.shape != (b * n * w, kh * kw * m):
        raise ContractViolation(f"conv2d: patches {cols.shape} do not match input {x.shape}")
    kd = kernel.data
    out = cols @ kd.reshape(kh * kw * m, mo)
    out += bias.data
    out = out.reshape(b, n, w, mo)

    def bw(g):
        g2 = g.reshape(b * n * w, mo)
        gk = (cols.T @ g2).reshape(kh, kw, m, mo)
        gb = g2.sum(axis=0)
        # input gradient is a same-padded convolution with the flipped kernel
        flipped = kd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * mo, m)
        gx = (_im2col(g.reshape(b, n, w, mo), kh, kw) @ flipped).reshape(b, n, w, m)
        return (gx if batched else gx[0], gk, gb)

    return _result("conv2d", out if batched else out[0], (x, kernel, bias), bw)


# -- shaping / lookup -------------------------------------------------------

def take_row(s: Tensor, row: int) -> Tensor:
    """Select index ``row`` of the second-to-last axis (the image width)."""
    sd = s.data
    out = np.ascontiguousarray(sd[..., row, :])

    def bw(g):
        gs = np.zeros_like(sd)
        gs[..., row, :] = g
        return (gs,)

    return _result("take_row", out, (s,), bw)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ContractViolation(f"linear: shape mismatch {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd

    def bw(g):
        x2 = xd.reshape(-1, wd.shape[0])
        g2 = g.reshape(-1, wd.shape[1])
        return (g @ wd.T, x2.T @ g2)

    return _result("linear", out, (x, weight), bw)


def embed_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at ``index``; entries < 0 yield zero vectors."""
    index = np.asarray(index)
    a, m = table.shape
    valid = index >= 0
    if np.any(index >= a):
        raise ContractViolation(f"embed_rows: index out of range for table of {a} rows")
    td = table.data
    out = np.zeros(index.shape + (m,), dtype=td.dtype)
    out[valid] = td[index[valid]]

    def bw(g):
        gt = np.zeros_like(td)
        np.add.at(gt, index[valid], g[valid])
        return (gt,)

    return _result("embed", out, (table,), bw)


# -- losses -----------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over every position in ``targets``."""
    targets = np.asarray(targets)
    ld = logits.data
    if ld.shape[:-1] != targets.shape:
        raise ContractViolation(f"cross_entropy: logits {ld.shape} vs targets {targets.shape}")
    flat = ld.reshape(-1, ld.shape[-1])
    t = targets.reshape(-1)
    shift = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logz
    rows = np.arange(t.size)
    value = -logp[rows, t].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((p * (g / t.size)).reshape(ld.shape),)

    return _result("cross_entropy", np.asarray(value, dtype=ld.dtype), (logits,), bw)


def pull_to_mean(tensors: Sequence[Tensor]) -> Tensor:
    """``sum_i ||t_i - mean_j t_j||^2`` over same-shape tensors."""
    if not tensors:
        raise ContractViolation("pull_to_mean needs at least one tensor")
    stacked = np.stack([t.data for t in tensors])
    dev = stacked - stacked.mean(axis=0)
    value = np.asarray((dev * dev).sum(), dtype=stacked.dtype)
    return _result("pull_to_mean", value, tuple(tensors), lambda g: tuple(2.0 * g * d for d in dev))


# -- recomputation ----------------------------------------------------------

def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn`` without keeping its interior activations.

    Only ``inputs`` are retained; during backward ``fn`` is replayed on a
    private tape and differentiated there. Parameters captured by ``fn``
    receive their gradients from that replay.
    """
    if current_tape() is None:
        return fn(*inputs)
    with no_grad():
        out = fn(*inputs)

    def bw(g):
        leaves = [Tensor(t.data, requires_grad=True) for t in inputs]
        sub = Tape()
        with sub:
            replay = fn(*leaves)
        sub.backward(replay, grad=g)
        return tuple(leaf.grad for leaf in leaves)

    return _result("checkpoint", out.data, tuple(inputs), bw, force=True)
