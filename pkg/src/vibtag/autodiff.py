"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray and remembers how it was produced; calling
``backward()`` on a scalar Tensor accumulates gradients into every upstream
Tensor created with ``requires_grad=True``.  The op set is deliberately small:
just what the encoder/decoder/objective computations need, plus a generic
einsum for the biaffine scorers.

Most module-level functions (``log``, ``exp``, ``tanh``, ...) dispatch on the
argument type, so numeric code written against them runs both on Tensors
(differentiably) and on plain ndarrays/floats.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "add",
    "mul",
    "matmul",
    "einsum",
    "exp",
    "log",
    "tanh",
    "sqrt",
    "square",
    "tsum",
    "tmax",
    "logsumexp",
    "softmax",
    "log_softmax",
    "concat",
    "value",
    "Adam",
]


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        # sequence of (parent Tensor, vjp function taking upstream grad)
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    def _needs_tape(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        # topological order by DFS
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in node._parents:
                pg = vjp(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self):
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return mul(self ** -1.0, other)

    def __pow__(self, p: float):
        x = self.data
        out = Tensor(x ** p, _parents=self._tape((self, lambda g: g * p * x ** (p - 1.0)),))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]
        if not self._needs_tape():
            return Tensor(data)

        shape = self.data.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Tensor(data, _parents=((self, vjp),))

    def _tape(self, *parents):
        return parents if self._needs_tape() else ()

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(
            self.data.reshape(*shape),
            _parents=self._tape((self, lambda g: g.reshape(old))),
        )

    def swapaxes(self, a: int, b: int):
        return Tensor(
            self.data.swapaxes(a, b),
            _parents=self._tape((self, lambda g: g.swapaxes(a, b))),
        )


def parameter(data, rng: np.random.Generator | None = None, shape=None) -> Tensor:
    """A trainable Tensor; with `rng` given, standard-normal initialized."""
    if rng is not None:
        data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _coerce(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if ta and tb:
        return a, b, True
    if ta:
        return a, Tensor(b), True
    if tb:
        return Tensor(a), b, True
    return a, b, False


# -- primitive ops -----------------------------------------------------------


def add(a, b):
    a, b, any_tensor = _coerce(a, b)
    if not any_tensor:
        return a + b
    parents = []
    if a._needs_tape():
        parents.append((a, lambda g: _unbroadcast(g, a.data.shape)))
    if b._needs_tape():
        parents.append((b, lambda g: _unbroadcast(g, b.data.shape)))
    return Tensor(a.data + b.data, _parents=tuple(parents))


def mul(a, b):
    a, b, any_tensor = _coerce(a, b)
    if not any_tensor:
        return a * b
    parents = []
    if a._needs_tape():
        parents.append((a, lambda g: _unbroadcast(g * b.data, a.data.shape)))
    if b._needs_tape():
        parents.append((b, lambda g: _unbroadcast(g * a.data, b.data.shape)))
    return Tensor(a.data * b.data, _parents=tuple(parents))


def matmul(a, b):
    a, b, any_tensor = _coerce(a, b)
    if not any_tensor:
        return a @ b
    parents = []
    if a._needs_tape():
        parents.append(
            (a, lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        )
    if b._needs_tape():
        parents.append(
            (b, lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        )
    return Tensor(a.data @ b.data, _parents=tuple(parents))


def einsum(subscripts: str, *operands):
    """Differentiable einsum.

    Restriction: explicit subscripts without ellipsis, and every contracted
    index must appear in at least two operands (true for bilinear forms).
    """
    tensors = [constant(op) for op in operands]
    arrays = [t.data for t in tensors]
    out = np.einsum(subscripts, *arrays)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    parents = []
    for i, t in enumerate(tensors):
        if not t._needs_tape():
            continue
        others_subs = [s for j, s in enumerate(in_subs) if j != i]
        others = [arrays[j] for j in range(len(arrays)) if j != i]
        target = in_subs[i]
        # operands without "..." still need it in the pullback output so that
        # broadcast batch dims survive; they are then summed back out
        out_target = target if "..." in target else "..." + target
        spec = ",".join([out_sub] + others_subs) + "->" + out_target

        def vjp(g, spec=spec, others=tuple(others), shape=arrays[i].shape):
            return _unbroadcast(np.einsum(spec, g, *others), shape)

        parents.append((t, vjp))
    return Tensor(out, _parents=tuple(parents))


def _unary(x, fn, dfn):
    if not isinstance(x, Tensor):
        return fn(_as_array(x))
    y = fn(x.data)
    return Tensor(y, _parents=x._tape((x, lambda g: g * dfn(x.data, y))))


def exp(x):
    return _unary(x, np.exp, lambda x_, y: y)


def log(x):
    return _unary(x, np.log, lambda x_, y: 1.0 / x_)


def tanh(x):
    return _unary(x, np.tanh, lambda x_, y: 1.0 - y * y)


def sqrt(x):
    return _unary(x, np.sqrt, lambda x_, y: 0.5 / y)


def square(x):
    return _unary(x, np.square, lambda x_, y: 2.0 * x_)


def tsum(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        g_ = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_, shape).copy()

    return Tensor(y, _parents=x._tape((x, vjp)))


def tmax(x, axis=None):
    """Max reduction (subgradient: all mass on the first argmax)."""
    if not isinstance(x, Tensor):
        return np.max(x, axis=axis)
    raise NotImplementedError("tmax is only used on plain arrays")


def logsumexp(x, axis=-1):
    if not isinstance(x, Tensor):
        m = np.max(x, axis=axis, keepdims=True)
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(s), axis)
    p = e / s  # softmax, reused in the pullback

    def vjp(g):
        return np.expand_dims(g, axis) * p

    return Tensor(y, _parents=x._tape((x, vjp)))


def _softmax_np(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    if not isinstance(x, Tensor):
        return _softmax_np(x, axis)
    y = _softmax_np(x.data, axis)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return y * (g - dot)

    return Tensor(y, _parents=x._tape((x, vjp)))


def log_softmax(x, axis=-1):
    if not isinstance(x, Tensor):
        return x - np.expand_dims(logsumexp(x, axis=axis), axis)
    y = x.data - np.expand_dims(logsumexp(x.data, axis=axis), axis)
    p = np.exp(y)

    def vjp(g):
        return g - p * np.sum(g, axis=axis, keepdims=True)

    return Tensor(y, _parents=x._tape((x, vjp)))


def concat(parts, axis=0):
    tensors = [constant(p) for p in parts]
    if not any(t._needs_tape() for t in tensors):
        return Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, t in enumerate(tensors):
        if not t._needs_tape():
            continue
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        parents.append((t, lambda g, sl=tuple(sl): g[sl]))
    return Tensor(data, _parents=tuple(parents))


def value(x) -> np.ndarray:
    """The underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adaptive moment estimation over a fixed list of parameter Tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, only=None):
        """Apply one update.  `only` restricts the update to a subset of the
        registered parameters (identity comparison); moments of skipped
        parameters are left untouched."""
        active = None if only is None else {id(p) for p in only}
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if active is not None and id(p) not in active:
                continue
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + 2.0 * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
