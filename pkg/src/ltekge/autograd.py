"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the encoders, decoders and losses need are provided.
Layer-backed ops (:func:`apply_layer`) delegate to the explicit kernels in
:mod:`ltekge.layers`, which write parameter gradients straight into the
owning :class:`~ltekge.params.ParameterStore`.  Leaves created with
:meth:`ParameterStore.variable` share their gradient buffer with the store,
so every parameter gradient ends up in one place.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .exceptions import ShapeError


class Variable:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, grad=None, parents=(), backward_fn=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.data.shape}, dtype={self.data.dtype})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                _accumulate_leaf(node, g)
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Variable):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def _accumulate_leaf(node, g):
    g = _unbroadcast(g, node.data.shape)
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype)
    else:
        node.grad += g


def _topological(root):
    order, seen = [], set()
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
        for p in reversed(node.parents):
            if isinstance(p, Variable) and id(p) not in seen:
                stack.append((p, False))
    return order


def as_variable(x, dtype=None):
    if isinstance(x, Variable):
        return x
    return Variable(np.asarray(x, dtype=dtype))


def constant(x):
    """A leaf whose gradient is never needed."""
    return Variable(np.asarray(x), name="const")


def _data(x):
    return x.data if isinstance(x, Variable) else np.asarray(x)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data, parents, backward_fn):
    return Variable(data, parents=tuple(parents), backward_fn=backward_fn)


def add(a, b):
    da, db = _data(a), _data(b)
    sa, sb = da.shape, db.shape
    return _node(da + db, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    da, db = _data(a), _data(b)
    sa, sb = da.shape, db.shape
    return _node(da - db, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    da, db = _data(a), _data(b)
    out = da * db
    if out.dtype != da.dtype and np.isscalar(b):
        out = out.astype(da.dtype)
    return _node(out, (a, b), lambda g: (_unbroadcast(g * db, da.shape),
                                         _unbroadcast(g * da, db.shape)))


def div(a, b):
    da, db = _data(a), _data(b)
    return _node(da / db, (a, b), lambda g: (_unbroadcast(g / db, da.shape),
                                             _unbroadcast(-g * da / (db * db), db.shape)))


def matmul(a, b):
    da, db = _data(a), _data(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeError(f"matmul: shapes {da.shape} and {db.shape} do not align")
    return _node(da @ db, (a, b), lambda g: (g @ db.T, da.T @ g))


def transpose(a):
    return _node(_data(a).T, (a,), lambda g: (g.T,))


def sum_(a, axis=None, keepdims=False):
    da = _data(a)
    shape = da.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(da.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None):
    da = _data(a)
    count = da.size if axis is None else np.prod([da.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), da.dtype.type(1.0 / count))


def reshape(a, shape):
    da = _data(a)
    return _node(da.reshape(shape), (a,), lambda g: (g.reshape(da.shape),))


def concat(parts, axis=0):
    datas = [_data(p) for p in parts]
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _node(np.concatenate(datas, axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take(table, idx):
    """Row gather ``table[idx]``; the backward scatters with ``np.add.at``."""
    dt = _data(table)
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(dt)
        np.add.at(out, idx, g)
        return (out,)

    return _node(dt[idx], (table,), back)


def segment_sum(values, segment_ids, num_segments):
    """``out[s] = sum(values[i] for i with segment_ids[i] == s)`` in index order."""
    dv = _data(values)
    ids = np.asarray(segment_ids)
    out = np.zeros((num_segments,) + dv.shape[1:], dtype=dv.dtype)
    np.add.at(out, ids, dv)
    return _node(out, (values,), lambda g: (g[ids],))


def einsum(subscripts, a, b):
    """Two-operand einsum where every index of an operand appears in the other
    operand or in the output (no operand-private reductions)."""
    inputs, output = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(c not in other and c not in output for c in own) or len(set(own)) != len(own):
            raise ShapeError(f"einsum {subscripts!r} is not supported by this engine")
    da, db = _data(a), _data(b)
    return _node(np.einsum(subscripts, da, db), (a, b),
                 lambda g: (np.einsum(f"{output},{sb}->{sa}", g, db),
                            np.einsum(f"{output},{sa}->{sb}", g, da)))


def sigmoid(a):
    y, _ = L.layer_forward(L.LayerSpec("sigmoid"), _data(a))
    return _node(y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a):
    y = np.tanh(_data(a))
    return _node(y, (a,), lambda g: (g * (1 - y * y),))


def relu(a):
    da = _data(a)
    mask = da > 0
    zero = np.zeros((), da.dtype)
    return _node(np.where(mask, da, zero), (a,), lambda g: (np.where(mask, g, zero),))


def identity(a):
    return a


def log(a):
    da = _data(a)
    return _node(np.log(da), (a,), lambda g: (g / da,))


def sign_one_at_zero(x):
    """Sign with the value 1 at 0 (a subgradient of |x|)."""
    return np.where(x < 0, -1.0, 1.0).astype(x.dtype)


def abs_(a):
    da = _data(a)
    return _node(np.abs(da), (a,), lambda g: (g * sign_one_at_zero(da),))


def sqrt(a):
    y = np.sqrt(_data(a))
    return _node(y, (a,), lambda g: (g / (2 * y),))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    da = _data(a)
    inside = (da >= lo) & (da <= hi)
    zero = np.zeros((), da.dtype)
    return _node(np.clip(da, lo, hi), (a,), lambda g: (np.where(inside, g, zero),))


def _corr_index(d):
    return (np.arange(d)[None, :] + np.arange(d)[:, None]) % d


def circular_correlation(a, b):
    """``out[..., k] = sum_i a[..., i] * b[..., (i + k) mod d]`` (direct, no FFT)."""
    da, db = _data(a), _data(b)
    d = da.shape[-1]
    if db.shape[-1] != d:
        raise ShapeError(f"circular correlation: last dims differ, {da.shape} vs {db.shape}")
    da_b, db_b = np.broadcast_arrays(da, db)
    idx = _corr_index(d)  # idx[k, i] = (i + k) % d
    shifted = db_b[..., idx]  # [..., k, i]
    out = np.einsum("...i,...ki->...k", da_b, shifted)

    def back(g):
        ga = np.einsum("...k,...ki->...i", g, shifted)
        # b[j] pairs with a[(j - k) mod d] at output k
        a_shift = da_b[..., (np.arange(d)[None, :] - np.arange(d)[:, None]) % d]  # [..., k, j]
        gb = np.einsum("...k,...kj->...j", g, a_shift)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _node(out, (a, b), back)


def apply_layer(spec, x, params, mode="eval", rng_seed=0):
    """Run a :mod:`ltekge.layers` kernel as an autograd node.

    Parameter gradients go directly into ``params``' gradient buffers.
    """
    if spec.kind == "concat":
        out, cache = L.layer_forward(spec, [_data(p) for p in x], params, mode, rng_seed)
        parents = tuple(x)
    else:
        out, cache = L.layer_forward(spec, _data(x), params, mode, rng_seed)
        parents = (x,)

    def back(g):
        grad = L.layer_backward(spec, cache, g)
        return tuple(grad) if spec.kind == "concat" else (grad,)

    return _node(out, parents, back)


ACTIVATIONS = {"identity": identity, "tanh": tanh, "relu": relu, "sigmoid": sigmoid}
