"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies storage and per-coordinate arithmetic; everything about
differentiation (graph recording, reverse traversal, gradient rules,
the finite-difference oracle) lives here. Tensors are immutable once
they participate in a graph: every op returns a fresh tensor.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar backward, double backward, ...)."""


class DegenerateMaskError(ValueError):
    """A masked reduction found a slice with no valid positions."""


# Precision is a per-run switch, not a per-tensor one: 64-bit for gradient
# checking, 32-bit for training.
_state = {"dtype": np.float64, "grad_enabled": True}


def set_precision(mode: str) -> None:
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    _state["dtype"] = np.float32 if mode == "float32" else np.float64


def get_precision() -> str:
    return "float32" if _state["dtype"] == np.float32 else "float64"


@contextlib.contextmanager
def precision(mode: str):
    prev = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation / latency measurement)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Node:
    """Backpointer from a tensor to the op that produced it."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node
        self._backward_done = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_state["dtype"]))


# ---------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------

def _check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_state["dtype"]), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=_state["dtype"]), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=_state["dtype"]), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=_state["dtype"]), requires_grad)


def uniform(shape, lo: float, hi: float, seed=None, requires_grad: bool = False) -> Tensor:
    """Uniform fill; `seed` may be an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    data = rng.uniform(lo, hi, size=_check_shape(shape)).astype(_state["dtype"])
    return Tensor(data, requires_grad)


def from_data(shape, data, requires_grad: bool = False) -> Tensor:
    shape = _check_shape(shape)
    flat = np.asarray(data, dtype=_state["dtype"]).ravel()
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"data of length {flat.size} does not fill shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad)


# ---------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------

def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    # `data` is always a freshly computed float ndarray here, so the
    # coercion in Tensor.__init__ is skipped on this hot path.
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t._backward_done = False
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.node = Node(op, tuple(parents), backward_fn)
    else:
        t.requires_grad = False
        t.node = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    for a, b in zip(reversed(sa), reversed(sb)):
        if a != b and a != 1 and b != 1:
            return False
    return True


# ---------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------

def _binary(a: Tensor, b: Tensor, op: str, fwd, da, db) -> Tensor:
    if a.data.shape != b.data.shape and not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    out = fwd(a.data, b.data)
    def backward_fn(g):
        return (_unbroadcast(da(g, a.data, b.data), a.shape),
                _unbroadcast(db(g, a.data, b.data), b.shape))
    return _make(out, op, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "mul", np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    return _make(out, "scale", (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    z = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    return _make(out, "log", (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    return _make(out, "abs", (x,), lambda g: (g * np.sign(x.data),))


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name; the named-kind surface used by config-driven code."""
    table = {"add": add, "sub": sub, "mul": mul, "tanh": tanh,
             "sigmoid": sigmoid, "scale": scale}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


# ---------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), backward_fn)


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------

def _mask_array(mask, extent: int) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(bool).ravel()
    if m.size != extent:
        raise ShapeError(f"mask of length {m.size} does not cover axis extent {extent}")
    if not m.any():
        raise DegenerateMaskError("all positions masked out along reduced axis")
    return m


def reduce(kind: str, x: Tensor, axis: int, mask=None, keepdims: bool = True) -> Tensor:
    """Masked reduction along one axis.

    The mask is a boolean vector over the reduced axis; masked coordinates
    are never read (they are replaced, so perturbing them changes nothing).
    Max routes its gradient to the first attaining index.
    """
    if axis < 0:
        axis += x.ndim
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    d = x.data
    mshape = [1] * x.ndim
    if mask is not None:
        m = _mask_array(mask, d.shape[axis])
        mshape[axis] = d.shape[axis]
        mb = m.reshape(mshape)

    if kind == "sum" or kind == "mean":
        if mask is None:
            out = d.sum(axis=axis, keepdims=True)
            count = d.shape[axis]
        else:
            out = np.where(mb, d, 0.0).sum(axis=axis, keepdims=True)
            count = int(m.sum())
        if kind == "mean":
            out = out / count

        def backward_fn(g):
            gx = np.broadcast_to(g, d.shape).copy()
            if mask is not None:
                gx = np.where(mb, gx, 0.0)
            if kind == "mean":
                gx = gx / count
            return (gx,)

    elif kind == "max":
        work = d if mask is None else np.where(mb, d, -np.inf)
        out = work.max(axis=axis, keepdims=True)
        idx = np.expand_dims(work.argmax(axis=axis), axis)  # first max wins ties

        def backward_fn(g):
            gx = np.zeros_like(d)
            np.put_along_axis(gx, idx, g, axis=axis)
            return (gx,)

    else:
        raise ValueError(f"unknown reduction kind {kind!r}")

    res = _make(out, f"reduce_{kind}", (x,), backward_fn)
    if not keepdims:
        res = reshape(res, tuple(s for i, s in enumerate(out.shape) if i != axis))
    return res


def softmax(x: Tensor, axis: int) -> Tensor:
    if axis < 0:
        axis += x.ndim
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, "softmax", (x,), backward_fn)


# ---------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    if axis < 0:
        axis += tensors[0].ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tensors, backward_fn)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of zero tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack shape mismatch: {ref} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=0)

    def backward_fn(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(out, "stack", tensors, backward_fn)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along an axis (rank drops by one)."""
    if axis < 0:
        axis += x.ndim
    out = np.take(x.data, index, axis=axis)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _make(out, "take", (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace coordinates where `keep` is False by `value` (constant mask)."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, value)
    return _make(out, "masked_fill", (x,), lambda g: (np.where(keep, g, 0.0),))


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (row_dim,)."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, "gather_rows", (table,), backward_fn)


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------

class GradTape:
    """Reverse-topological record of the ops reachable from one root.

    `order` holds produced tensors in forward order; `grads` maps tensor
    identity to the accumulated gradient (consumers sum their contributions).
    """

    def __init__(self, order: list, leaves: list):
        self.order = order
        self.leaves = leaves
        self.grads: dict = {}

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        order, leaves, seen = [], [], set()
        stack_ = [(root, False)]
        while stack_:
            t, expanded = stack_.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            stack_.append((t, True))
            for p in t.node.parents:
                if p.requires_grad:
                    stack_.append((p, False))
        return cls(order, leaves)

    def run(self, root: Tensor, seed: np.ndarray) -> dict:
        grads = {id(root): seed}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            for p, pg in zip(t.node.parents, t.node.backward_fn(g)):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.grads = grads
        return grads


def backward(loss: Tensor) -> dict:
    """Accumulate total derivatives of a scalar loss into every leaf's .grad.

    Returns a map from leaf tensor to its gradient array. Re-running
    backward without clearing leaf gradients is an error, not a silent
    accumulation.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward already ran for this loss; rebuild the graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any requires_grad tensor")
    tape = GradTape.record(loss)
    for leaf in tape.leaves:
        if leaf.grad is not None:
            raise GraphError("a leaf still carries a gradient; call zero_grad first")
    grads = tape.run(loss, np.ones_like(loss.data))
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.reshape(leaf.shape)
        out[leaf] = leaf.grad
    loss._backward_done = True
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------

def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function of x."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy())).data.reshape(()))
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy())).data.reshape(()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max relative disagreement, floored to avoid division blowups near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
