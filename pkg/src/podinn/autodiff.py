"""A small reverse-mode differentiation tape over float64 numpy arrays.

Every op accepts plain arrays as well as :class:`Var` nodes.  With no ``Var``
among the arguments the op returns a plain ``ndarray`` and nothing is
recorded, so the same model code serves the fast evaluation path (rollouts)
and the differentiable training path.

Only first-order derivatives are supported.  Gradients of expressions that
themselves contain input-gradients (the energy gradient of a neural
potential) are obtained by recording that input-gradient as an explicit
forward expression, see :mod:`podinn.nn`.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

SPOW_CLAMP = 1e-9


class TapeError(RuntimeError):
    """Structural misuse of a tape: non-scalar root, foreign nodes, bad order."""


class Var:
    """A node on a :class:`Tape` holding a float64 value and its adjoint."""

    __slots__ = ("value", "grad", "parents", "tape", "index", "name")
    __array_priority__ = 1000  # make ndarray (op) Var defer to Var

    def __init__(self, tape, value, parents=(), name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.grad = None
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, k):
        if k == 2:
            return square(self)
        if isinstance(k, int) and k >= 1:
            out = self
            for _ in range(k - 1):
                out = mul(out, self)
            return out
        raise TypeError("only positive integer powers are supported on Var")


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, var: Var) -> Var:
        var.index = len(self.nodes)
        self.nodes.append(var)
        return var

    def leaf(self, value, name=None) -> Var:
        return self._push(Var(self, np.array(value, dtype=np.float64), (), name))

    def leaves(self, values: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.leaf(v, name=k) for k, v in values.items()}

    def record(self, value, parents) -> Var:
        return self._push(Var(self, value, tuple(parents)))

    def validate(self) -> None:
        for i, node in enumerate(self.nodes):
            if node.index != i or node.tape is not self:
                raise TapeError(f"node {i} is not owned by this tape at its position")
            for parent, _ in node.parents:
                if parent.tape is not self:
                    raise TapeError(f"node {i} has a parent from another tape")
                if parent.index >= i:
                    raise TapeError(
                        f"node {i} depends on node {parent.index}; tape is cyclic or out of order"
                    )

    def backward(self, root: Var) -> None:
        """Fill ``.grad`` of every node with d(root)/d(node)."""
        if not isinstance(root, Var) or root.tape is not self:
            raise TapeError("root must be a node of this tape")
        if root.size != 1:
            raise TapeError(f"root must be scalar, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            node = self.nodes[i]
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                if parent.index >= i:
                    raise TapeError(
                        f"node {i} depends on node {parent.index}; tape is cyclic or out of order"
                    )
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def backward(tape: Tape, root: Var, leaves: Sequence[Var] | Mapping[str, Var] | None = None):
    """Run a backward pass and return the adjoints of ``leaves``.

    ``leaves`` may be a sequence (a list of adjoints is returned) or a mapping
    (a dict with the same keys).  Unreached leaves get zero adjoints.  With
    ``leaves=None`` all leaf nodes of the tape are returned as a list.
    """
    tape.backward(root)

    def adj(v):
        return np.zeros_like(v.value) if v.grad is None else v.grad

    if leaves is None:
        leaves = [n for n in tape.nodes if not n.parents]
    if isinstance(leaves, Mapping):
        return {k: adj(v) for k, v in leaves.items()}
    return [adj(v) for v in leaves]


# ---------------------------------------------------------------------------
# helpers


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("operands live on different tapes")
    return tape


def _const(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    av, bv = _const(a), _const(b)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(g, bv.shape)))
    return tape.record(av + bv, parents)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b)
    av, bv = _const(a), _const(b)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: -_unbroadcast(g, bv.shape)))
    return tape.record(av - bv, parents)


def neg(a):
    if not isinstance(a, Var):
        return np.negative(a)
    return a.tape.record(-a.value, [(a, lambda g: -g)])


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    av, bv = _const(a), _const(b)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return tape.record(av * bv, parents)


def reciprocal(a):
    if not isinstance(a, Var):
        return 1.0 / np.asarray(a, dtype=np.float64)
    y = 1.0 / a.value
    return a.tape.record(y, [(a, lambda g: -g * y * y)])


def div(a, b):
    if not isinstance(b, Var):
        return mul(a, 1.0 / np.asarray(b, dtype=np.float64))
    return mul(a, reciprocal(b))


def matmul(a, b):
    """``a @ b`` for 2-D or stacked (leading batch axis) operands."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    av, bv = _const(a), _const(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul on the tape needs operands with ndim >= 2")
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(np.matmul(g, _swap(bv)), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.matmul(_swap(av), g), bv.shape)))
    return tape.record(np.matmul(av, bv), parents)


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    y = np.tanh(a.value)
    return a.tape.record(y, [(a, lambda g: g * (1.0 - y * y))])


def dense_tanh(x, W, b):
    """Fused layer ``tanh(x @ W + b)``; one tape node instead of three."""
    tape = _tape_of(x, W, b)
    xv, Wv, bv = _const(x), _const(W), _const(b)
    y = np.tanh(np.matmul(xv, Wv) + bv)
    if tape is None:
        return y
    cache = {}

    def dz(g):
        if "z" not in cache:
            cache["z"] = g * (1.0 - y * y)
        return cache["z"]

    parents = []
    if isinstance(x, Var):
        parents.append((x, lambda g: _unbroadcast(np.matmul(dz(g), _swap(Wv)), xv.shape)))
    if isinstance(W, Var):
        parents.append((W, lambda g: _unbroadcast(np.matmul(_swap(xv), dz(g)), Wv.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(dz(g), bv.shape)))
    return tape.record(y, parents)


def tanh_backprop(h, g, W):
    """Fused ``((1 - h**2) * g) @ W^T``, one step of a hand-written input gradient.

    ``h`` is a tanh activation, ``g`` the adjoint arriving from the layer above
    (broadcastable to ``h``) and ``W`` the weight of the layer that produced
    ``h``, laid out ``(..., fan_in, fan_out)``.
    """
    tape = _tape_of(h, g, W)
    hv, gv, Wv = _const(h), _const(g), _const(W)
    s = 1.0 - hv * hv
    a = s * gv
    out = np.matmul(a, _swap(Wv))
    if tape is None:
        return out
    cache = {}

    def da(G):
        if "a" not in cache:
            cache["a"] = np.matmul(G, Wv)
        return cache["a"]

    parents = []
    if isinstance(h, Var):
        parents.append((h, lambda G: _unbroadcast(-2.0 * da(G) * gv * hv, hv.shape)))
    if isinstance(g, Var):
        parents.append((g, lambda G: _unbroadcast(da(G) * s, gv.shape)))
    if isinstance(W, Var):
        parents.append((W, lambda G: _unbroadcast(np.matmul(_swap(G), a), Wv.shape)))
    return tape.record(out, parents)


def absolute(a):
    if not isinstance(a, Var):
        return np.abs(a)
    s = np.sign(a.value)
    return a.tape.record(np.abs(a.value), [(a, lambda g: g * s)])


def spow(a, p=1.0 / 3.0):
    """Signed fractional power ``sgn(a) |a|**p``.

    The derivative ``p |a|**(p-1)`` uses ``max(|a|, 1e-9)`` so it stays finite
    at the origin; the forward value is not clamped.
    """
    x = value(a)
    y = np.sign(x) * np.abs(x) ** p
    if not isinstance(a, Var):
        return y
    ax = np.maximum(np.abs(x), SPOW_CLAMP)
    d = p * ax ** (p - 1.0)
    return a.tape.record(y, [(a, lambda g: g * d)])


def sin(a):
    if not isinstance(a, Var):
        return np.sin(a)
    c = np.cos(a.value)
    return a.tape.record(np.sin(a.value), [(a, lambda g: g * c)])


def cos(a):
    if not isinstance(a, Var):
        return np.cos(a)
    s = np.sin(a.value)
    return a.tape.record(np.cos(a.value), [(a, lambda g: -g * s)])


def square(a):
    if not isinstance(a, Var):
        return np.square(a)
    x = a.value
    return a.tape.record(x * x, [(a, lambda g: 2.0 * g * x)])


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    y = np.exp(a.value)
    return a.tape.record(y, [(a, lambda g: g * y)])


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    n = value(a).size if axis is None else np.prod([value(a).shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def getitem(a, idx):
    if not isinstance(a, Var):
        return a[idx]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return a.tape.record(a.value[idx], [(a, vjp)])


def take(a, indices, axis=-1):
    """Gather along one axis (repeated indices accumulate in backward)."""
    indices = np.asarray(indices, dtype=np.intp)
    if not isinstance(a, Var):
        return np.take(a, indices, axis=axis)
    ax = axis % a.ndim
    idx = (slice(None),) * ax + (indices,)
    return getitem(a, idx)


def concat(items, axis=-1):
    tape = _tape_of(*items)
    if tape is None:
        return np.concatenate(items, axis=axis)
    vals = [_const(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    parents = []
    for k, x in enumerate(items):
        if isinstance(x, Var):
            sl = (slice(None),) * ax + (slice(bounds[k], bounds[k + 1]),)
            parents.append((x, lambda g, sl=sl: g[sl]))
    return tape.record(out, parents)


def stack(items, axis=0):
    tape = _tape_of(*items)
    if tape is None:
        return np.stack(items, axis=axis)
    vals = [_const(x) for x in items]
    out = np.stack(vals, axis=axis)
    ax = axis % out.ndim
    parents = []
    for k, x in enumerate(items):
        if isinstance(x, Var):
            parents.append((x, lambda g, k=k: np.take(g, k, axis=ax)))
    return tape.record(out, parents)


def transpose(a, axes=None):
    if not isinstance(a, Var):
        return np.transpose(a, axes)
    inv = None if axes is None else np.argsort(axes)
    return a.tape.record(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inv))])


def swap_last(a):
    if not isinstance(a, Var):
        return _swap(a)
    return a.tape.record(_swap(a.value), [(a, _swap)])


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.shape
    return a.tape.record(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def scatter(vals, flat_index, shape):
    """Zeros of ``shape`` with ``vals`` added at the flat positions."""
    flat_index = np.asarray(flat_index, dtype=np.intp)
    size = int(np.prod(shape))
    out = np.zeros(size)
    np.add.at(out, flat_index, value(vals))
    out = out.reshape(shape)
    if not isinstance(vals, Var):
        return out
    return vals.tape.record(out, [(vals, lambda g: g.reshape(-1)[flat_index])])


# ---------------------------------------------------------------------------
# parameter vectors


class ParamSet:
    """Named float64 arrays with a flat-vector view.

    The layout maps each name to ``(offset, shape)`` inside the flat vector;
    ``unflatten(flatten())`` is the identity.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self[k] = v

    def __setitem__(self, name, arr):
        self._arrays[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self):
        return list(self._arrays)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    @property
    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, off = {}, 0
        for k, v in self._arrays.items():
            out[k] = (off, v.shape)
            off += v.size
        return out

    @property
    def size(self) -> int:
        return int(np.sum([v.size for v in self._arrays.values()], dtype=np.int64))

    def flatten(self, arrays: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        src = self._arrays if arrays is None else arrays
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([np.asarray(src[k], dtype=np.float64).reshape(-1) for k in self._arrays])

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        return {k: flat[off:off + int(np.prod(shape, dtype=np.int64))].reshape(shape).copy()
                for k, (off, shape) in self.layout.items()}

    def load_flat(self, flat: np.ndarray) -> None:
        for k, v in self.unflatten(flat).items():
            self._arrays[k] = v

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})
