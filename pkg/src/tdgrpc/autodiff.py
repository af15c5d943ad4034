"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``GradTape`` is an append-only log of primitive operations. Each entry
stores the output node, its input nodes, and a closure mapping the output
gradient to input gradients. ``backward`` replays the log once, in reverse
execution order, accumulating gradients by node identity. Forward passes
executed with no active tape skip recording entirely; that is the
gradient-free fast path used by the planner and by action sampling.
"""

from __future__ import annotations

import numpy as np

_TAPE_STACK: list["GradTape | None"] = []


class Tensor:
    """A float64 array participating in taped computation."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class GradTape:
    """Ordered record of the primitive operations of one forward pass.

    Use as a context manager; ops executed inside are recorded. Tapes are
    not shareable across concurrent passes.
    """

    def __init__(self):
        # (output id, input ids, backward closure)
        self._records: list[tuple[int, tuple[int, ...], object]] = []
        # keep nodes alive so ids stay unique for the tape's lifetime
        self._nodes: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._records.append((id(out), tuple(id(t) for t in inputs), backward_fn))
        self._nodes[id(out)] = out
        for t in inputs:
            self._nodes[id(t)] = t


class stop_recording:
    """Context manager suspending recording on the active tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False


def _active() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _rec(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
    tape = _active()
    if tape is not None:
        tape._record(out, inputs, backward_fn)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(a: Tensor) -> Tensor:
    """A constant copy of ``a``; gradients do not flow past it."""
    return Tensor(a.data.copy())


def backward(tape: GradTape, output: Tensor, params) -> dict:
    """Gradients of a scalar ``output`` with respect to ``params``.

    ``params`` is a mapping name -> Tensor (a plain iterable of Tensors is
    also accepted, in which case a list of gradients is returned).
    Parameters not reachable from the output receive zero gradients.
    """
    if output.size != 1:
        raise ValueError(
            f"backward requires a scalar output, got shape {output.shape}"
        )
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for out_id, input_ids, backward_fn in reversed(tape._records):
        g = grads.get(out_id)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for tid, ig in zip(input_ids, input_grads):
            if ig is None:
                continue
            acc = grads.get(tid)
            grads[tid] = ig if acc is None else acc + ig

    if isinstance(params, dict):
        return {
            name: grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape)
            for name, p in params.items()
        }
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient produced under numpy broadcasting back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    ash, bsh = a.shape, b.shape
    _rec(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    ash, bsh = a.shape, b.shape
    _rec(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    _rec(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    _rec(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    _rec(out, (a,), lambda g: (-g,))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    _rec(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` shaped (out_dim, in_dim)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2:
        raise ValueError(f"linear expects a 2-d input, got shape {x.shape}")
    out = Tensor(x.data @ w.data.T + b.data)
    xd, wd = x.data, w.data
    _rec(out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    od = out.data
    _rec(out, (a,), lambda g: (g * (1.0 - od * od),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    _rec(out, (a,), lambda g: (g * mask,))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    _rec(out, (a,), lambda g: (g * od,))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    _rec(out, (a,), lambda g: (g / ad,))
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    ad = a.data
    _rec(out, (a,), lambda g: (2.0 * g * ad,))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp entries to [lo, hi]; gradient passes only on the interior."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data > lo) & (a.data < hi)
    _rec(out, (a,), lambda g: (g * mask,))
    return out


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; gradient flows where ``a > c``."""
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, c))
    mask = a.data > c
    _rec(out, (a,), lambda g: (g * mask,))
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    ash = a.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, ash).copy(),)

    _rec(out, (a,), bwd)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    _rec(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def take_columns(a, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    a = as_tensor(a)
    out = Tensor(a.data[..., start:stop])
    ash = a.shape

    def bwd(g):
        full = np.zeros(ash)
        full[..., start:stop] = g
        return (full,)

    _rec(out, (a,), bwd)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    ash = a.shape
    _rec(out, (a,), lambda g: (g.reshape(ash),))
    return out


def check_finite(t: Tensor, name: str) -> Tensor:
    """Raise if ``t`` contains NaN or Inf, naming the offending quantity."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {name}")
    return t
