"""Dense tensors with a dynamic reverse-mode autodiff tape.

Every operation records its parents and a backward rule on the output tensor.
Calling :func:`backward` on a scalar collects the reachable records into a
:class:`Tape` (reverse topological order) and runs each rule exactly once.

Only the operations the rescaling network and its losses need are provided.
Broadcasting is restricted to Python scalars and size-1 tensors on purpose.
"""
from __future__ import annotations

import contextlib
import logging
import os
import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_state = threading.local()
_DEFAULT_DTYPE = [np.dtype(np.float32)]
DEBUG = os.environ.get("IRN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when an operation's shape contract is violated."""


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

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


class Parameter(Tensor):
    """A trainable leaf tensor whose gradient buffer always exists."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or get_default_dtype())
        self.grad = np.zeros_like(self.data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_CONSTANT = Tensor(np.zeros(()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        # freeze the requires_grad decision now; a parent re-enabled later gets nothing
        out._parents = tuple(p if p.requires_grad else _CONSTANT for p in parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Record an operation defined outside this module.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    return _result(data, parents, backward_fn, op)


class Tape:
    """Records reachable from a loss, ordered so that a reverse walk is valid."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor, seed: np.ndarray, retain_graph: bool = False) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    tape.run(loss, np.ones_like(loss.data), retain_graph=retain_graph)


# ----------------------------------------------------------------------------
# elementwise


def _scalar_value(x) -> float | None:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    if grad.shape == like.shape:
        return grad
    return np.asarray(grad.sum(), dtype=like.dtype).reshape(like.shape)


def add(a, b) -> Tensor:
    s = _scalar_value(b)
    if s is not None:
        a = as_tensor(a)
        return _result(a.data + a.dtype.type(s), (a,), lambda g: (g,), "add")
    s = _scalar_value(a)
    if s is not None:
        return add(b, s)
    _binary_shapes(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    s = _scalar_value(b)
    if s is not None:
        return add(a, -s)
    _binary_shapes(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    s = _scalar_value(b)
    if s is None and _scalar_value(a) is not None:
        a, b, s = b, a, _scalar_value(a)
    if s is not None:
        a = as_tensor(a)
        c = a.dtype.type(s)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul")
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _reduce_to(g * bd, a) if a.requires_grad else None
        gb = _reduce_to(g * ad, b) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), _bw, "mul")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    v = x.data
    out = np.minimum(v, 0) - np.log1p(np.exp(-np.abs(v)))
    return _result(out.astype(v.dtype, copy=False), (x,),
                   lambda g: (g * _sigmoid(-v),), "log_sigmoid")


def _note_kinks(mask: np.ndarray) -> None:
    """Fingerprint which side of a kink each input sits on (only while grad_check listens)."""
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(zlib.crc32(np.packbits(mask).tobytes()))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    v = x.data
    pos = v > 0
    _note_kinks(pos)
    slope = v.dtype.type(slope)
    out = np.where(pos, v, v * slope)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


# ----------------------------------------------------------------------------
# shape plumbing


def channel_split(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    if x.ndim != 4:
        raise ShapeError(f"channel_split expects NCHW, got shape {x.shape}")
    c = x.shape[1]
    if not 0 < at < c:
        raise ShapeError(f"channel_split index {at} outside (0, {c})")
    return channel_slice(x, 0, at), channel_slice(x, at, c)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape
    data = np.ascontiguousarray(x.data[:, start:stop])

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(data, (x,), _bw, "channel_slice")


def channel_concat(*parts: Tensor) -> Tensor:
    if len(parts) == 1 and isinstance(parts[0], (list, tuple)):
        parts = tuple(parts[0])
    if not parts:
        raise ShapeError("channel_concat needs at least one tensor")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"channel_concat: N,H,W mismatch between {ref} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=1)

    def _bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if parts[i].requires_grad else None
                     for i in range(len(parts)))

    return _result(data, parts, _bw, "channel_concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ----------------------------------------------------------------------------
# reductions


def _check_nonempty(x: Tensor, op: str) -> None:
    if x.size == 0:
        raise ShapeError(f"{op} of an empty tensor")


def reduce(x: Tensor, op: str) -> Tensor:
    return {"mean": mean, "sum": sum_, "mean_abs": mean_abs, "mean_square": mean_square}[op](x)


def sum_(x: Tensor) -> Tensor:
    _check_nonempty(x, "sum")
    shape = x.shape
    return _result(np.asarray(x.data.sum(dtype=x.dtype)), (x,),
                   lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    _check_nonempty(x, "mean")
    n = x.size
    shape = x.shape
    # shifting by the first element keeps the mean of a constant tensor exact
    pivot = x.data.flat[0]
    value = (x.data - pivot).mean(dtype=x.dtype) + pivot
    return _result(np.asarray(value, dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def mean_abs(x: Tensor) -> Tensor:
    _check_nonempty(x, "mean_abs")
    v = x.data
    n = v.size
    _note_kinks(v > 0)
    return _result(np.asarray(np.abs(v).mean(dtype=v.dtype)), (x,),
                   lambda g: (np.sign(v) * (g / n),), "mean_abs")


def mean_square(x: Tensor) -> Tensor:
    _check_nonempty(x, "mean_square")
    v = x.data
    n = v.size
    return _result(np.asarray(np.square(v).mean(dtype=v.dtype)), (x,),
                   lambda g: (v * (2 * g / n),), "mean_square")


# ----------------------------------------------------------------------------
# linear algebra


def _shift_stack(m: np.ndarray, offsets: list[int], span: int, sign: int) -> np.ndarray:
    """Stack copies of ``m`` (rows x grid) shifted left (sign=+1) or right (sign=-1)."""
    rows, total = m.shape
    out = np.zeros((len(offsets), rows, total), dtype=m.dtype)
    for t, off in enumerate(offsets):
        if sign > 0:
            out[t, :, :span] = m[:, off:off + span]
        else:
            out[t, :, off:off + span] = m[:, :span]
    return out.reshape(len(offsets) * rows, total)


def _shift_accumulate(taps: np.ndarray, offsets: list[int], span: int, sign: int) -> np.ndarray:
    """Inverse of :func:`_shift_stack`: sum the shifted tap planes."""
    _, rows, total = taps.shape
    acc = np.zeros((rows, total), dtype=taps.dtype)
    for t, off in enumerate(offsets):
        if sign > 0:
            acc[:, :span] += taps[t, :, off:off + span]
        else:
            acc[:, off:off + span] += taps[t, :, :span]
    return acc


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIkk kernel bank.

    The input is laid out channel-major on a zero-padded grid, where each
    kernel tap is a fixed column offset. Every product then becomes one GEMM
    plus k*k shifted copies or sums on whichever side has fewer channels.
    Strided outputs are read off the dense stride-1 grid.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    hf, wf = hp - k + 1, wp - k + 1
    if hf < 1 or wf < 1 or stride < 1:
        raise ShapeError(f"conv2d: no valid output for input {h}x{w}, kernel {k}, padding {padding}")

    dtype = x.dtype
    xp = np.zeros((c, n, hp, wp), dtype=dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3)
    cols = xp.reshape(c, -1)
    total = cols.shape[1]
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    span = total - offsets[-1]
    kk = k * k
    # (o, kk*c) with tap-major columns, and (kk*o, c) with tap-major rows
    w_taps_in = weight.data.transpose(0, 2, 3, 1).reshape(o, kk * c)
    w_taps_out = weight.data.transpose(2, 3, 0, 1).reshape(kk * o, c)
    out_side = o <= c

    if out_side:
        acc = _shift_accumulate((w_taps_out @ cols).reshape(kk, o, total), offsets, span, +1)
    else:
        acc = w_taps_in @ _shift_stack(cols, offsets, span, +1)
    grid = acc.reshape(o, n, hp, wp)
    out = grid[:, :, 0:hf:stride, 0:wf:stride].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def _bw(g):
        gg = np.zeros((o, n, hp, wp), dtype=dtype)
        gg[:, :, 0:hf:stride, 0:wf:stride] = g.transpose(1, 0, 2, 3)
        gflat = gg.reshape(o, total)
        gx = gw = gb = None
        if out_side:
            gstack = _shift_stack(gflat, offsets, span, -1)
            if weight.requires_grad:
                gw = (gstack @ cols.T).reshape(k, k, o, c).transpose(2, 3, 0, 1)
            if x.requires_grad:
                w_cat = weight.data.transpose(1, 2, 3, 0).reshape(c, kk * o)
                gcols = w_cat @ gstack
        else:
            if weight.requires_grad:
                xstack = _shift_stack(cols, offsets, span, +1)
                gw = (gflat @ xstack.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
            if x.requires_grad:
                w_t = weight.data.transpose(2, 3, 1, 0).reshape(kk * c, o)
                gcols = _shift_accumulate((w_t @ gflat).reshape(kk, c, total), offsets, span, -1)
        if gw is not None:
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            gx = gcols.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _bw, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for a batch of row vectors."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _bw, "linear")


# ----------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int


@contextlib.contextmanager
def _listen_for_kinks():
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = None


def grad_check_report(f: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-5,
                      samples_per_param: int = 6,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on random coordinates.

    ``f`` is re-evaluated with parameters perturbed in place, so it must read
    them on every call. A coordinate whose +/- epsilon step moves any
    leaky-ReLU or absolute-value input across zero is not a valid
    finite-difference sample (the function has a kink inside the step); it
    is counted as skipped and another coordinate is drawn instead.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(f())
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        want = min(samples_per_param, flat.size)
        done = 0
        for idx in rng.permutation(flat.size)[:20 * want]:
            if done == want:
                break
            original = flat[idx]
            with no_grad(), _listen_for_kinks() as kinks_up:
                flat[idx] = original + epsilon
                up = f().item()
            with no_grad(), _listen_for_kinks() as kinks_down:
                flat[idx] = original - epsilon
                down = f().item()
            flat[idx] = original
            if kinks_up != kinks_down:
                skipped += 1
                continue
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            done += 1
        checked += done
    return GradCheckReport(worst, checked, skipped)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-5,
               samples_per_param: int = 6, rng: np.random.Generator | None = None) -> float:
    """Max relative error max(|a - n| / max(|a|, |n|, 1e-8)); run in float64."""
    return grad_check_report(f, params, epsilon, samples_per_param, rng).max_error
