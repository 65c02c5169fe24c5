"""Dense-tensor numerical core with tape-based reverse-mode differentiation.

Values are float32 by default (training/checkpoint dtype). Ops accept float64
tensors too, which the test oracles use for finite-difference checks; nothing
in the training path creates them.

Forward results are bitwise deterministic for identical inputs: reductions go
through numpy's fixed pairwise order and matmuls through the single BLAS
configuration of the process.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class UsageError(RuntimeError):
    """API misuse: non-scalar backward, double merge, modality mismatch, ..."""


class DimensionError(ValueError):
    """Shape mismatch between operands."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-d array plus optional gradient buffer.

    Leaves are created directly; op results carry requires_grad when any
    input does and an active tape recorded the op.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "info")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        keep = getattr(data, "dtype", None) in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not keep:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.info: dict = {}

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; scalars stay plain floats (no tape entry for them)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other) if isinstance(other, Tensor) else add(self, -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of ops for one reverse sweep; one tape per thread."""

    def __init__(self):
        self.entries: list[tuple[str, tuple, Tensor, Callable]] = []
        self._output_ids: set[int] = set()

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn: Callable):
        self.entries.append((op, inputs, output, backward_fn))
        self._output_ids.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    def __len__(self):
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate .grad of every requires_grad leaf reachable from loss.

    Grads accumulate across calls; callers reset via zero_grad between steps.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not tape.produced(loss):
        raise UsageError("loss was not produced on the given tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op, inputs, output, backward_fn in reversed(tape.entries):
        g_out = grads.get(id(output))
        if g_out is None:
            continue
        in_grads = backward_fn(g_out)
        for t, g in zip(inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if tape.produced(t):
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
            else:
                t.accumulate_grad(g)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + np.asarray(b, dtype=a.data.dtype)
        return _record("add_s", (a,), out, lambda g: (_sum_to(g, a.shape),))
    out = a.data + b.data

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _record("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _sum_to(g * bd, a.shape), _sum_to(g * ad, b.shape)

    return _record("mul", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * np.asarray(s, dtype=a.data.dtype)
    return _record("scale", (a,), out, lambda g: (g * np.asarray(s, dtype=g.dtype),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (..,m,k)@(k,n) weight form and leading-batch
    matched (..,m,k)@(..,k,n); inner dims must agree."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ranks >=2, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner-dimension mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading-batch mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(ax))
    out = np.transpose(a.data, ax)
    return _record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    shape, dt = a.shape, a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dt)
        full[key] = g
        return (full,)

    return _record("getitem", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [t for t in tensors]
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _record("concat", tuple(parts), out, bwd)


def pad_stack(tensors: Sequence[Tensor], pad_to: Optional[int] = None) -> Tensor:
    """Stack [L_i, d] rows into [B, Lmax, d], zero-padding short rows."""
    parts = list(tensors)
    lmax = pad_to if pad_to is not None else max(t.shape[0] for t in parts)
    d = parts[0].shape[1]
    out = np.zeros((len(parts), lmax, d), dtype=parts[0].data.dtype)
    for i, t in enumerate(parts):
        out[i, : t.shape[0]] = t.data

    def bwd(g):
        return tuple(g[i, : t.shape[0]] for i, t in enumerate(parts))

    return _record("pad_stack", tuple(parts), out, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).astype(g.dtype),)

    return _record("sum", (a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows sum to 1 within 1e-6."""
    if x.shape[axis if axis >= 0 else x.ndim + axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (x,), out, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU, the module's single nonlinearity."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        dt = (1.0 - t**2) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _record("gelu", (x,), out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must be shape ({d},), got {tuple(gain.shape)}/{tuple(bias.shape)}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record("layer_norm", (x, gain, bias), out, bwd)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax probability over non-ignored positions.

    targets: int array [b] with class ids in [0, v) or ignore_index. When every
    position is ignored the loss is zero and out.info["all_ignored"] is set.
    """
    tg = np.asarray(targets)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [b, v] logits, got {tuple(logits.shape)}")
    b, v = logits.shape
    if tg.shape != (b,):
        raise DimensionError(f"targets shape {tg.shape} does not match batch {b}")
    valid = tg != ignore_index
    bad = valid & ((tg < 0) | (tg >= v))
    if bad.any():
        raise ValueError(f"target id {int(tg[bad][0])} outside [0, {v})")
    n_valid = int(valid.sum())

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(valid, tg, 0)
    picked = logp[np.arange(b), safe_t]
    if n_valid == 0:
        out_val = np.asarray(0.0, dtype=logits.data.dtype)
    else:
        out_val = np.asarray(-(picked * valid).sum() / n_valid, dtype=logits.data.dtype)

    def bwd(g):
        if n_valid == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        p[np.arange(b), safe_t] -= 1.0
        p *= (valid / n_valid)[:, None]
        return (p * g,)

    out = _record("cross_entropy", (logits,), out_val, bwd)
    out.info["valid_positions"] = n_valid
    out.info["all_ignored"] = n_valid == 0
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather table[ids]; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]
    shape, dt = table.shape, table.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _record("embedding", (table,), out, bwd)


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inference-path log-softmax on raw arrays (no tape)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
