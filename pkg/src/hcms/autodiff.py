"""Small reverse-mode autodiff over dense numpy arrays.

Tensors are either vectors ``[d]`` or row batches ``[B, d]``. The only
broadcasting allowed is a bias vector added to every row of a batch; every
other op wants explicit, matching shapes.

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        y = apply("sigmoid", x)
        loss = apply("sum", y)
    (gx,) = tape.backward(loss, [x])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "OPS",
    "apply",
    "backward",
    "grad_check",
    "active_tape",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by op '{op}' ({where})")
        self.op = op


class Tensor:
    """A value node. ``grad`` is only filled on leaves by :meth:`Tape.backward`."""

    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops. Inputs of a node always precede it."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``loss`` for each tensor in ``wrt``.

        Leaves that the loss does not depend on get a zero array. Each leaf's
        ``.grad`` is overwritten with the returned value.
        """
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if self.check_finite and not np.all(np.isfinite(gi)):
                    raise NonFiniteError(node.op, "backward")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for t in wrt:
            g = grads.get(id(t))
            g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g
            out.append(g)
        return out


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.backward(loss, wrt)


# ---------------------------------------------------------------------------
# op catalogue


def _emit(op: str, inputs: tuple, value: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = active_tape()
    if tape is not None:
        if tape.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        if needs:
            tape.record(op, inputs, out, backward_fn)
    return out


def _mismatch(op: str, *tensors: Tensor) -> ShapeError:
    shapes = ", ".join(str(t.shape) for t in tensors)
    return ShapeError(f"{op}: incompatible shapes {shapes}")


def _same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise _mismatch(op, a, b)


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """``w @ x`` for a vector, or row-wise for a batch ``[B, in]``."""
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise _mismatch("matvec", w, x)
    W, X = w.data, x.data
    value = X @ W.T

    def bw(g):
        if X.ndim == 1:
            return np.outer(g, X), g @ W
        return g.T @ X, g @ W

    return _emit("matvec", (w, x), value, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to each row of ``a``."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))
    raise _mismatch("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def concat(*ts: Tensor) -> Tensor:
    if not ts:
        raise ShapeError("concat: no inputs")
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead or t.data.ndim == 0 for t in ts):
        raise _mismatch("concat", *ts)
    value = np.concatenate([t.data for t in ts], axis=-1)
    cuts = np.cumsum([t.shape[-1] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _emit("concat", tuple(ts), value, bw)


def slice_(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` along the last axis."""
    n = a.shape[-1] if a.data.ndim else 0
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", (a,), a.data[..., start:stop], bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _emit("exp", (a,), e, lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: input has non-positive entries")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.data.ndim == 0:
        raise _mismatch("softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), p, bw)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def sqdiff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``(a - b)**2``."""
    _same("sqdiff", a, b)
    d = a.data - b.data
    return _emit("sqdiff", (a, b), d * d, lambda g: (2.0 * g * d, -2.0 * g * d))


def pick(a: Tensor, index) -> Tensor:
    """Entry ``index`` of the last axis; for a batch, one index per row."""
    A = a.data
    if A.ndim == 1:
        i = int(index)
        if not 0 <= i < A.shape[0]:
            raise ShapeError(f"pick: index {i} out of range for shape {a.shape}")

        def bw1(g):
            full = np.zeros_like(A)
            full[i] = g
            return (full,)

        return _emit("pick", (a,), A[i].copy(), bw1)
    if A.ndim != 2:
        raise _mismatch("pick", a)
    idx = np.broadcast_to(np.asarray(index, dtype=np.int64), (A.shape[0],))
    if np.any(idx < 0) or np.any(idx >= A.shape[1]):
        raise ShapeError(f"pick: index out of range for shape {a.shape}")
    rows = np.arange(A.shape[0])

    def bw2(g):
        full = np.zeros_like(A)
        full[rows, idx] = g
        return (full,)

    return _emit("pick", (a,), A[rows, idx], bw2)


def mix(g: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``g*a + (1-g)*b`` with one mixing weight per row (a scalar for vectors)."""
    _same("mix", a, b)
    if g.shape != a.shape[:-1]:
        raise _mismatch("mix", g, a, b)
    G = g.data[..., None]
    A, B = a.data, b.data
    value = G * A + (1.0 - G) * B

    def bw(up):
        return (up * (A - B)).sum(axis=-1), up * G, up * (1.0 - G)

    return _emit("mix", (g, a, b), value, bw)


def straight_through(a: Tensor) -> Tensor:
    """One-hot of the last-axis argmax; the gradient passes through unchanged."""
    if a.data.ndim == 0:
        raise _mismatch("straight_through", a)
    idx = np.argmax(a.data, axis=-1)
    hard = np.zeros_like(a.data)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return _emit("straight_through", (a,), hard, lambda g: (g,))


OPS: dict[str, Callable[..., Tensor]] = {
    "matvec": matvec,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "sum": sum_,
    "sqdiff": sqdiff,
    "pick": pick,
    "mix": mix,
    "straight_through": straight_through,
}


def apply(op: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op '{op}'") from None
    return fn(*inputs, **attrs)


def grad_check(fn: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes one tensor per array in ``point`` and returns a scalar. The
    point is evaluated in float64. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("grad_check: point has non-finite entries")
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape(check_finite=True) as tape:
        out = fn(*leaves)
    analytic = tape.backward(out, leaves)

    def value(arrs):
        with Tape(check_finite=True):
            return float(fn(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = value(arrays)
            flat[j] = orig - step
            lo = value(arrays)
            flat[j] = orig
            num = (hi - lo) / (2.0 * step)
            an = analytic[k].reshape(-1)[j]
            worst = max(worst, abs(an - num) / max(1.0, abs(an)))
    return worst
