"""Reverse-mode autodiff on float64 numpy buffers.

A Tape records every operation in insertion order; backward walks the
nodes in strict reverse insertion order exactly once.  Tensors are
immutable values: ops never write into an existing buffer, and every
buffer is write-locked on construction.  There is no implicit
broadcasting; shape changes go through explicit ops (broadcast_to,
reshape, transpose) so silent shape bugs cannot survive.
"""

from __future__ import annotations

import json
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (CheckpointError, ConfigError, ContractError, InputError,
                     ShapeError)

_local = threading.local()

_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable finiteness validation of every op result (slow, test-only)."""
    global _debug_checks
    _debug_checks = bool(flag)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_f64(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if not np.all(np.isfinite(arr)):
        raise InputError("tensor data contains NaN or Inf")
    return arr


class Tensor:
    """Immutable float64 value, optionally attached to a tape node."""

    __slots__ = ("_data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_f64(data)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        # Internal constructor: skips the copy; finiteness only in debug mode.
        out = cls.__new__(cls)
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(data, dtype=np.float64, order="C")
        if _debug_checks and not np.all(np.isfinite(arr)):
            raise InputError("op produced NaN or Inf")
        arr.flags.writeable = False
        out._data = arr
        out.requires_grad = False
        out.name = None
        out._node = None
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def tape_id(self):
        return None if self._node is None else (id(self._node.tape), self._node.idx)

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; all semantics live in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("idx", "op", "tape", "parents", "back")

    def __init__(self, idx, op, tape, parents, back):
        self.idx = idx
        self.op = op
        self.tape = tape
        self.parents = parents
        self.back = back


class Gradients:
    """Map from leaf tensors to gradient arrays; unused leaves read as zero."""

    def __init__(self, by_id: dict):
        self._by_id = by_id

    def wrt(self, t: Tensor) -> np.ndarray:
        got = self._by_id.get(id(t))
        if got is None:
            return np.zeros(t.shape, dtype=np.float64)
        return got


class Tape:
    """Append-only op record; also a context manager activating itself."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_idx: dict[int, int] = {}
        self._leaf_refs: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def _leaf(self, t: Tensor) -> int:
        idx = self._leaf_idx.get(id(t))
        if idx is None:
            node = _Node(len(self.nodes), "leaf", self, (), None)
            self.nodes.append(node)
            idx = node.idx
            self._leaf_idx[id(t)] = idx
            self._leaf_refs[id(t)] = t
        return idx

    def _input_idx(self, t: Tensor) -> int:
        # -1 marks a constant: no gradient flows to it.
        if t._node is not None and t._node.tape is self:
            return t._node.idx
        if t.requires_grad:
            return self._leaf(t)
        return -1

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf on this tape."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss._node.idx] = np.ones(loss.shape, dtype=np.float64)
        for node in reversed(self.nodes):
            g = grads[node.idx]
            if g is None or node.back is None:
                continue
            for pidx, pg in zip(node.parents, node.back(g)):
                if pidx < 0 or pg is None:
                    continue
                if grads[pidx] is None:
                    grads[pidx] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    grads[pidx] += pg
            grads[node.idx] = None  # free as we go
        by_id = {}
        for tid, idx in self._leaf_idx.items():
            g = grads[idx]
            leaf = self._leaf_refs[tid]
            by_id[tid] = np.zeros(leaf.shape) if g is None else g
        return Gradients(by_id)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Module-level alias for Tape.backward."""
    return tape.backward(loss)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            back: Callable) -> Tensor:
    out = Tensor._from_op(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    parents = tuple(tape._input_idx(t) for t in inputs)
    if all(p < 0 for p in parents):
        return out
    node = _Node(len(tape.nodes), op, tape, parents, back)
    tape.nodes.append(node)
    out._node = node
    return out


def _need(t, opname) -> Tensor:
    if not isinstance(t, Tensor):
        raise ShapeError(f"{opname} expects Tensor operands, got {type(t).__name__}")
    return t


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------- elementwise


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ "
                         "(use broadcast_to explicitly)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "add"), _need(b, "add")
    _same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "sub"), _need(b, "sub")
    _same_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "mul"), _need(b, "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "div"), _need(b, "div")
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    _need(a, "scale")
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    _need(a, "add_scalar")
    c = float(c)
    return _record("add_scalar", a.data + c, (a,), lambda g: (g,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero where the floor engages."""
    _need(a, "clip_min")
    floor = float(floor)
    mask = a.data > floor
    return _record("clip_min", np.maximum(a.data, floor), (a,),
                   lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    _need(a, "exp")
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _need(a, "log")
    if np.any(a.data <= 0.0):
        raise InputError("log of a non-positive value (clamp first)")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    _need(a, "sqrt")
    if np.any(a.data < 0.0):
        raise InputError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    _need(a, "gelu")
    x = a.data
    # plain multiplies; np.power on float arrays is an order slower
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (a,), back)


# ------------------------------------------------------------- shape changes


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; gradient sums over the expanded axes."""
    _need(a, "broadcast_to")
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}: {e}") from None
    src = a.shape

    def back(g):
        extra = g.ndim - len(src)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _record("broadcast_to", np.array(out), (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _need(a, "reshape")
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}") from None
    src = a.shape
    return _record("reshape", np.ascontiguousarray(out), (a,),
                   lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    _need(a, "transpose")
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)),
                   (a,), lambda g: (g.transpose(inv),))


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(a, axes)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_need(p, "concat") for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record("concat", out, tuple(parts), back)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back into zeros."""
    _need(a, "slice_axis")
    axis = int(axis)
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"slice_axis: axis {axis} out of range for ndim {a.ndim}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] invalid for length {n}")
    sel = [slice(None)] * a.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)
    src = a.shape

    def back(g):
        full = np.zeros(src, dtype=np.float64)
        full[sel] = g
        return (full,)

    return _record("slice_axis", np.ascontiguousarray(a.data[sel]), (a,), back)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not (0 <= axis < ndim):
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _need(a, "sum")
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.asarray(out), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _need(a, "mean")
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    src = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, src).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _record("mean", np.asarray(out), (a,), back)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties send the gradient to the lowest index."""
    _need(a, "max")
    axis = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=axis, keepdims=keepdims)
    arg = np.argmax(a.data, axis=axis)
    src = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(src, dtype=np.float64)
        np.put_along_axis(full, np.expand_dims(arg, axis), g, axis=axis)
        return (full,)

    return _record("max", np.asarray(out), (a,), back)


# ------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D @ 2D, stacked @ 2D, or stacked @ stacked with equal batch dims."""
    _need(a, "matmul"), _need(b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        if bd.ndim == 2:
            da = g @ bd.T
            k = ad.shape[-1]
            db = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            da = g @ np.swapaxes(bd, -1, -2)
            db = np.swapaxes(ad, -1, -2) @ g
        return (da, db)

    return _record("matmul", out, (a, b), back)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Stabilized softmax over the last axis; rows sum to one."""
    _need(a, "softmax")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), back)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    _need(a, "log_softmax")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a trailing-dim affine."""
    _need(x, "layer_norm"), _need(gain, "layer_norm"), _need(bias, "layer_norm")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} "
                         f"do not match trailing dim {d}")
    if eps <= 0.0:
        raise ConfigError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return (dx, dgain, dbias)

    return _record("layer_norm", out, (x, gain, bias), back)


def grl(x: Tensor, lam: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, -lam times the gradient backward."""
    _need(x, "grl")
    lam = float(lam)
    if lam <= 0.0:
        raise ConfigError(f"grl lambda must be positive, got {lam}")
    return _record("grl", x.data, (x,), lambda g: (-lam * g,))


def stop_gradient(x: Tensor) -> Tensor:
    """Detach: same values, no gradient path."""
    _need(x, "stop_gradient")
    return Tensor._from_op(x.data)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; gradient scatter-adds into the table."""
    _need(weight, "embedding")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("embedding ids must be integers")
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise InputError(f"embedding ids out of range [0, {v})")
    wd = weight.data
    out = wd[ids]

    def back(g):
        dw = np.zeros(wd.shape, dtype=np.float64)
        np.add.at(dw, ids, g)
        return (dw,)

    return _record("embedding", out, (weight,), back)


# ------------------------------------------------------- derivative checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5,
                      coords: Iterable[tuple] | None = None) -> float:
    """Compare tape gradients of scalar f against central differences.

    Perturbs one coordinate of x at a time, (f(x+h*e) - f(x-h*e)) / 2h,
    and returns the max over coordinates of |delta| / max(1, |grad|).
    coords limits the check to a subset of x's indices; default is all.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ConfigError(f"finite_diff_check step h={h} outside [1e-7, 1e-3]")
    base = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(base)
    if y.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued f")
    analytic = tape.backward(y).wrt(base)

    if coords is None:
        coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
    worst = 0.0
    flat = x.data
    for c in coords:
        plus = np.array(flat, copy=True)
        minus = np.array(flat, copy=True)
        plus[c] += h
        minus[c] -= h
        fp = f(Tensor(plus)).item()
        fm = f(Tensor(minus)).item()
        numeric = (fp - fm) / (2.0 * h)
        g = analytic[c] if x.ndim else float(analytic)
        err = abs(numeric - g) / max(1.0, abs(g))
        if err > worst:
            worst = err
    return worst


# ------------------------------------------------------------- serialization

_TNS_MAGIC_KEYS = ("shape", "name")


def write_tns(fh, name: str, arr: np.ndarray) -> None:
    """Append one named tensor record: a JSON header line, then raw <f8 bytes."""
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
    arr = np.asarray(arr, dtype=np.float64, order="C")
    header = json.dumps({"shape": list(arr.shape), "name": name},
                        separators=(",", ":"))
    fh.write(header.encode("utf-8") + b"\n")
    fh.write(arr.astype("<f8").tobytes(order="C"))


def read_tns(fh):
    """Read one record written by write_tns; returns (name, array) or None at EOF."""
    line = fh.readline()
    if not line:
        return None
    try:
        header = json.loads(line.decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        name = header["name"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed tensor header: {e}") from None
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise CheckpointError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def save_tensor(path, arr: np.ndarray, name: str = "tensor") -> None:
    with open(path, "wb") as fh:
        write_tns(fh, name, arr)


def load_tensor(path):
    with open(path, "rb") as fh:
        got = read_tns(fh)
    if got is None:
        raise CheckpointError(f"empty tensor file: {path}")
    return got
