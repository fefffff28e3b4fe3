"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the CS-MIL network needs are provided. An op records
itself on the active :class:`Tape` when at least one input requires a
gradient; outside a tape (or with no grad-requiring inputs) ops are plain
numpy evaluations.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(w)
    ...     grads = tape.backward(loss)
    >>> grads[w].tolist()
    [[1.0, 1.0]]
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "softmax",
    "sum_all",
    "mean",
    "concat",
    "reshape",
    "transpose",
    "pick",
    "weighted_sum",
    "finite_diff_check",
]


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # sugar used by the model code
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; nested tapes shadow outer ones. Each tape is
    confined to the thread that entered it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._produced: dict[int, int] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._produced.clear()
        self._used = False

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self._produced[id(output)] = len(self.nodes)
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every grad-requiring tensor on the tape.

        Gradients are accumulated into ``.grad`` of leaf tensors (so several
        backward passes on fresh tapes sum up) and assigned on intermediate
        tensors. Returns a map from each reached grad-requiring leaf to its
        gradient for this pass.
        """
        if self._used:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape (detached)")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            node.output.grad = g_out
            g_in = node.backward(g_out)
            for t, g in zip(node.inputs, g_in):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in self._produced:
                    leaves[key] = t

        result: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
            result[t] = g
        return result


def _record(inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.record(inputs, result, backward)
    return result


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _record((a, b), A @ B, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector matching a's last axis."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        def backward(g):
            return g, g
    elif B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        def backward(g):
            return g, g.reshape(-1, B.shape[0]).sum(axis=0)
    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _record((a, b), A + B, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _record((a, b), A * B, backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _record((a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, unlike a masked select
    return _record((x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record((x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record((x,), y, lambda g: (g * y * (1.0 - y),))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped and receive zero gradient.

    NaN inputs are not clamped, so a diverged forward pass stays visible.
    """
    X = x.data
    if floor > 0:
        keep = ~(X < floor)
        Xc = np.where(keep, X, floor)
    else:
        keep = None
        Xc = X

    def backward(g):
        gx = g / Xc
        return (gx if keep is None else gx * keep,)

    return _record((x,), np.log(Xc), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    if x.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record((x,), y, backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record((x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        return _record((x,), np.array(x.data.mean()),
                       lambda g: (np.full(x.shape, float(g) / n),))
    n = x.shape[axis]

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _record((x,), x.data.mean(axis=axis), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(xs, np.concatenate([t.data for t in xs], axis=axis), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose needs a matrix, got shape {x.shape}")
    return _record((x,), x.data.T, lambda g: (g.T,))


def pick(x: Tensor, index: int) -> Tensor:
    """Scalar element ``x[index]`` of a 1-D tensor."""
    n = x.shape[0]

    def backward(g):
        out = np.zeros(n)
        out[index] = np.asarray(g).item()
        return (out,)

    return _record((x,), np.array(x.data[index]), backward)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Per-row weighted sum: ``weights`` (n, S) and ``values`` (n, S, L) -> (n, L)."""
    w, v = weights.data, values.data
    if v.ndim != 3 or w.shape != v.shape[:2]:
        raise ValueError(f"weighted_sum shape mismatch: {weights.shape} vs {values.shape}")

    def backward(g):
        gw = np.einsum("nl,nsl->ns", g, v)
        gv = w[:, :, None] * g[:, None, :]
        return gw, gv

    return _record((weights, values), np.einsum("ns,nsl->nl", w, v), backward)


# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
    zero_tol: float = 1e-10,
) -> float:
    """Largest relative error between tape gradients and numeric derivatives.

    ``f`` rebuilds the scalar objective from the current values of ``params``;
    it is called once on a tape for the analytic gradient and four times per
    parameter entry for the five-point central difference
    (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h. Its truncation error is
    O(h^4), so a step of 1e-4 keeps both truncation and rounding error well
    below what small gradient entries need for a relative comparison.
    Entries where both derivatives are below ``zero_tol`` in magnitude count
    as agreeing: a difference quotient cannot resolve anything finer.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def at(flat, i, value):
        flat[i] = value
        return f().data.item()

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            fm2, fm1 = at(flat, i, orig - 2 * eps), at(flat, i, orig - eps)
            fp1, fp2 = at(flat, i, orig + eps), at(flat, i, orig + 2 * eps)
            flat[i] = orig
            num = (fm2 - 8 * fm1 + 8 * fp1 - fp2) / (12 * eps)
            ana = ga_flat[i]
            denom = max(abs(ana), abs(num))
            if denom >= zero_tol:
                worst = max(worst, abs(ana - num) / denom)
    for p in params:
        p.grad = None
    return worst
