"""Dense reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every operation whose inputs are being watched.
``backward(tape, loss)`` replays the records in reverse and returns the
gradient of ``loss`` for every watched leaf, keyed by ``node_id``.

Tensors created outside an active tape are plain immutable values; the
score networks run in that mode at sampling time so no graph is built.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(ValueError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    pass


class NotScalar(AutodiffError):
    pass


class DetachedTensor(AutodiffError):
    pass


_state = threading.local()
_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks after every op."""
    global _DEBUG
    _DEBUG = bool(enabled)


@contextmanager
def debug_mode():
    prev = _DEBUG
    set_debug(True)
    try:
        yield
    finally:
        set_debug(prev)


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite values produced by {what}")


class Tensor:
    """A float64 array plus an optional handle into the active tape."""

    __slots__ = ("data", "node_id")
    __array_priority__ = 100.0

    def __init__(self, data, node_id: int | None = None, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check:
            _check_finite(arr, "tensor creation")
        self.data = arr
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return mul(self, power(as_tensor(other), -1.0))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; single-threaded by design."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._next_id = 0
        self._leaves: dict[int, tuple[int, ...]] = {}

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, x) -> Tensor:
        """Register ``x`` as a differentiable leaf and return it."""
        x = as_tensor(x)
        if x.node_id is None:
            x.node_id = self._new_id()
        self._leaves[x.node_id] = x.shape
        return x

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        self._outer = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._outer

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads[t.node_id] for t in wrt]


def _record(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    if _DEBUG:
        _check_finite(out, name)
    tape = _active_tape()
    ids = tuple(t.node_id for t in inputs)
    if tape is None or all(i is None for i in ids):
        return Tensor(out, _check=False)
    nid = tape._new_id()
    tape._records.append((nid, ids, vjp))
    return Tensor(out, node_id=nid, _check=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one GEMM instead of numpy's per-batch loop
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record(out, (a, b), vjp, "matmul")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), vjp, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatch("transpose needs at least 2 dims")
        return _record(np.swapaxes(a.data, -1, -2), (a,),
                       lambda g: (np.swapaxes(g, -1, -2),), "transpose")
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"transpose: bad axes {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {old} -> {tuple(shape)}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat_last_dim(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(f"concat: leading shapes differ {t.shape} vs {ts[0].shape}")
    sizes = [t.shape[-1] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=-1), ts,
                   lambda g: tuple(np.split(g, splits, axis=-1)), "concat")


def row_softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), vjp, "row_softmax")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def elu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    neg = np.expm1(np.minimum(a.data, 0.0))
    y = np.where(pos, a.data, neg)
    return _record(y, (a,), lambda g: (g * np.where(pos, 1.0, neg + 1.0),), "elu")


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh, "relu": relu, "elu": elu, "identity": identity,
}


def activation(a, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


def sum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp, "sum")


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    y = a.data ** p
    return _record(y, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def clip_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _record(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clip_min")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the constant ``value``."""
    a = as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _record(np.where(m, value, a.data), (a,), lambda g: (np.where(m, 0.0, g),),
                   "masked_fill")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data, _check=False)


# ------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` for every watched leaf on ``tape``.

    Leaves that do not influence the loss get zero gradients. Intermediate
    buffers are dropped as soon as they have been propagated.
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    if loss.node_id is None:
        raise DetachedTensor("loss is not recorded on the tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid, ids, vjp in reversed(tape._records):
        g = grads.get(nid)
        if g is None:
            continue
        if nid not in tape._leaves:
            del grads[nid]
        for iid, ig in zip(ids, vjp(g)):
            if iid is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig
    return {leaf: grads[leaf] if leaf in grads else np.zeros(shape) for leaf, shape in tape._leaves.items()}


def grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Value and gradients of a scalar function of plain arrays."""
    with Tape() as tape:
        xs = [tape.watch(Tensor(x)) for x in inputs]
        out = fn(*xs)
    g = backward(tape, out)
    return out.item(), [g.get(x.node_id, np.zeros_like(x.data)) for x in xs]


def numerical_grad(fn: Callable[..., float], inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of arrays."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    result = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs)
            flat[i] = orig - h
            fm = fn(*inputs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        result.append(g)
    return result


def jacobian_frobenius_sq(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray],
                          probes: int, rng: np.random.Generator) -> float:
    """Hutchinson estimate of the squared Frobenius norm of ``fn``'s Jacobian.

    Each probe draws ``v ~ N(0, I)`` in output space and differentiates
    ``<fn(x), v>``; the squared norm of that vector-Jacobian product has
    expectation ``||J||_F^2``. The Jacobian is taken jointly over all inputs.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    total = 0.0
    for _ in range(probes):
        with Tape() as tape:
            xs = [tape.watch(Tensor(x)) for x in inputs]
            out = fn(*xs)
            v = rng.standard_normal(out.shape)
            probe = sum(mul(out, v))
        g = backward(tape, probe)
        total += float(np.sum([np.sum(g[x.node_id] ** 2) for x in xs if x.node_id in g]))
    return total / probes
