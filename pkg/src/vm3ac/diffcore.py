"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded define-by-run onto the active :class:`Tape`. Calling
:func:`backward` on a scalar walks the recorded operations in exact reverse
order and writes ``grad`` on every leaf tensor that requires it.

Broadcasting is deliberately narrow: two tensor operands must either share a
shape or differ only by a leading batch axis (``[B, d]`` against ``[d]``).
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "vm3ac-checkpoint/1"
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mean(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered list of recorded operations.

    Use as a context manager to scope recording to one minibatch; outside any
    explicit tape, a per-thread default tape is used.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


class no_grad:
    """Context manager that disables recording."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
        _local.default = Tape()
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    if stack:
        return stack[-1]
    return _local.default


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._record = None
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = _Record(op, inputs, out, backward, tape)
        out._record = rec
        tape.records.append(rec)
    else:
        out.requires_grad = False
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap data as a tensor that never receives gradient."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def stop_gradient(t: Tensor) -> Tensor:
    """Identity forward, zero backward."""
    return _make("stop_gradient", t.data, (), None)


def _broadcast_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.shape[1:] == b.shape or b.shape[1:] == a.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make("add_scalar", a.data + c, (a,), lambda g: (g,))
    a = as_tensor(a)
    _broadcast_shapes("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _broadcast_shapes("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    a = as_tensor(a)
    _broadcast_shapes("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * x * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x > lo) & (x < hi)
    return _make("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data
    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _make("matmul", ad @ bd, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (default) or the leading axis (``axis=0``)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    if axis not in (0, -1):
        raise ShapeError("concat supports axis 0 or -1 only")
    rest = (lambda t: t.shape[1:]) if axis == 0 else (lambda t: t.shape[:-1])
    ref = rest(tensors[0])
    for t in tensors:
        if t.ndim == 0 or rest(t) != ref:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    widths = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        if axis == 0:
            return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(widths)))
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(widths)))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    if not 0 <= start <= stop <= a.shape[-1]:
        raise ShapeError(f"take_last: slice {start}:{stop} out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make("slice", a.data[..., start:stop], (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make("sum", a.data.sum(axis=ax), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    shape = a.shape
    return _make("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),))


def gaussian_log_prob(x: Tensor, mu: Tensor, log_std: Tensor) -> Tensor:
    """Diagonal Gaussian log-density, summed over the last axis.

    Returns a scalar for 1-d inputs and a ``[B]`` vector for batches.
    """
    x, mu, log_std = as_tensor(x), as_tensor(mu), as_tensor(log_std)
    if not (x.shape == mu.shape == log_std.shape):
        raise ShapeError(f"gaussian_log_prob: shapes {x.shape}, {mu.shape}, {log_std.shape}")
    z = (x - mu) * exp(neg(log_std))
    per_dim = neg(log_std) + scale(square(z), -0.5) + (-0.5 * LOG_2PI)
    return tensor_sum(per_dim, axis=-1)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and consume the tape.

    Leaves that were recorded on the tape (or passed in ``params``) but do not
    influence ``loss`` receive a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    rec = loss._record
    if rec is None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
        return
    tape = rec.tape
    if not tape.records or tape.records[-1] is not rec and rec not in tape.records:
        raise RuntimeError("loss was not produced on a live tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for r in reversed(tape.records):
        for inp in r.inputs:
            if inp.requires_grad and inp._record is None:
                leaves[id(inp)] = inp
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        for inp, gi in zip(r.inputs, r.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._record is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for leaf in list(leaves.values()) + params:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    tape.clear()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; clears grads."""
    if len(params) != len(state.m) or len(params) != len(state.v):
        raise ValueError("AdamState does not match parameter list")
    for k, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or k} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    body = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": {
            name: {"shape": list(np.shape(_data(p))), "data": np.ravel(_data(p)).tolist()}
            for name, p in params.items()
        },
    }
    Path(path).write_text(json.dumps(body))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    body = json.loads(Path(path).read_text())
    if body.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {body.get('format')!r}")
    params = {}
    for name, entry in body["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != math.prod(shape):
            raise ShapeError(f"checkpoint entry {name}: {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    return params, body.get("meta", {})


def _data(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
