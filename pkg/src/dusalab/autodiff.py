"""Reverse-mode automatic differentiation over float64 numpy arrays.

This is a deliberately small tape: it covers exactly the computation
structures used in this package (dense layers, embeddings, softmax-style
reductions, squared-error objectives) and returns exact gradients for
them.  It is not a general autodiff system; unsupported compositions
should be built from the primitives below.

All values are float64.  Most helper functions (``exp``, ``sqrt``,
``softmax``, ...) dispatch on type: given a plain numpy array they
evaluate eagerly, given a :class:`Tensor` they extend the graph, so the
same formula can serve both eager and differentiable call sites.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "constant",
    "stop_gradient",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "clip_min",
    "softmax",
    "logsumexp",
    "concat",
    "transpose",
    "gather_rows",
    "take_per_row",
    "backward",
    "grad",
    "value_and_grad",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a loss evaluation produces NaN or Inf."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "grad", "parents", "_bwd", "op")

    def __init__(self, value, parents=(), bwd=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._bwd = bwd
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        o = _wrap(other)
        out = Tensor(self.value + o.value, (self, o), op="add")

        def bwd(g):
            self._accum(_unbroadcast(g, self.value.shape))
            o._accum(_unbroadcast(g, o.value.shape))

        out._bwd = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, (self,), op="neg")
        out._bwd = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        o = _wrap(other)
        out = Tensor(self.value * o.value, (self, o), op="mul")

        def bwd(g):
            self._accum(_unbroadcast(g * o.value, self.value.shape))
            o._accum(_unbroadcast(g * self.value, o.value.shape))

        out._bwd = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _wrap(other)
        out = Tensor(self.value / o.value, (self, o), op="div")

        def bwd(g):
            self._accum(_unbroadcast(g / o.value, self.value.shape))
            o._accum(_unbroadcast(-g * self.value / (o.value * o.value), o.value.shape))

        out._bwd = bwd
        return out

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.value ** exponent, (self,), op="pow")
        out._bwd = lambda g: self._accum(g * exponent * self.value ** (exponent - 1))
        return out

    def __matmul__(self, other):
        o = _wrap(other)
        out = Tensor(self.value @ o.value, (self, o), op="matmul")

        def bwd(g):
            a, b = self.value, o.value
            if a.ndim == 1 and b.ndim == 2:      # (k,) @ (k,n) -> (n,)
                self._accum(g @ b.T)
                o._accum(np.outer(a, g))
            elif a.ndim == 2 and b.ndim == 1:    # (m,k) @ (k,) -> (m,)
                self._accum(np.outer(g, b))
                o._accum(a.T @ g)
            else:                                # (m,k) @ (k,n) -> (m,n)
                self._accum(g @ b.T)
                o._accum(a.T @ g)

        out._bwd = bwd
        return out

    # -- reductions / shaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,), op="sum")

        def bwd(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.value.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(ge, self.value.shape).copy())

        out._bwd = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.value.reshape(shape), (self,), op="reshape")
        out._bwd = lambda g: self._accum(g.reshape(self.value.shape))
        return out

    def __getitem__(self, key):
        out = Tensor(self.value[key], (self,), op="getitem")

        def bwd(g):
            gx = np.zeros_like(self.value)
            np.add.at(gx, key, g)
            self._accum(gx)

        out._bwd = bwd
        return out

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value) -> Tensor:
    """Wrap an array as a graph constant (no gradient is accumulated)."""
    return Tensor(value, op="const")


def stop_gradient(t):
    """Block gradient flow: value passes through, gradient does not."""
    if not isinstance(t, Tensor):
        return np.asarray(t, dtype=np.float64)
    return Tensor(t.value.copy(), (), None, op="stop_gradient")


# -- elementwise functions (dispatch on Tensor vs ndarray) ---------------

def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = Tensor(np.exp(x.value), (x,), op="exp")
    out._bwd = lambda g: x._accum(g * out.value)
    return out


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = Tensor(np.log(x.value), (x,), op="log")
    out._bwd = lambda g: x._accum(g / x.value)
    return out


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    out = Tensor(np.sqrt(x.value), (x,), op="sqrt")
    out._bwd = lambda g: x._accum(g * 0.5 / out.value)
    return out


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    out = Tensor(np.tanh(x.value), (x,), op="tanh")
    out._bwd = lambda g: x._accum(g * (1.0 - out.value * out.value))
    return out


def clip_min(x, lo: float):
    """max(x, lo) elementwise; gradient passes only where x > lo."""
    if not isinstance(x, Tensor):
        return np.maximum(x, lo)
    out = Tensor(np.maximum(x.value, lo), (x,), op="clip_min")
    out._bwd = lambda g: x._accum(g * (x.value > lo))
    return out


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    if not isinstance(x, Tensor):
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (x,), op="softmax")

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - dot))

    out._bwd = bwd
    return out


def logsumexp(x, axis=-1):
    """Numerically stable log-sum-exp along ``axis`` (axis is dropped)."""
    if not isinstance(x, Tensor):
        m = np.max(x, axis=axis, keepdims=True)
        return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    m = np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(axis), (x,), op="logsumexp")

    def bwd(g):
        x._accum(np.expand_dims(g, axis) * (e / s))

    out._bwd = bwd
    return out


def concat(parts, axis=-1):
    """Concatenate Tensors/arrays along ``axis``."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    ts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([t.value for t in ts], axis=axis), tuple(ts), op="concat")
    sizes = [t.value.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(a, b)
            t._accum(g[tuple(idx)])

    out._bwd = bwd
    return out


def transpose(x, axes):
    if not isinstance(x, Tensor):
        return np.transpose(x, axes)
    out = Tensor(np.transpose(x.value, axes), (x,), op="transpose")
    inv = np.argsort(axes)
    out._bwd = lambda g: x._accum(np.transpose(g, inv))
    return out


def gather_rows(table, idx):
    """Row lookup ``table[idx]`` with scatter-add gradient (embedding query)."""
    idx = np.asarray(idx, dtype=np.intp)
    if not isinstance(table, Tensor):
        return table[idx]
    out = Tensor(table.value[idx], (table,), op="gather_rows")

    def bwd(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        table._accum(gt)

    out._bwd = bwd
    return out


def take_per_row(x, idx):
    """Pick entries per row: x (B,K), idx (B,) -> (B,) or idx (B,b) -> (B,b)."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(len(idx))
    rsel = rows[:, None] if idx.ndim == 2 else rows
    if not isinstance(x, Tensor):
        return x[rsel, idx]
    out = Tensor(x.value[rsel, idx], (x,), op="take_per_row")

    def bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (rsel, idx), g)
        x._accum(gx)

    out._bwd = bwd
    return out


# -- graph execution ------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate gradients of ``root`` (a scalar) into the graph's leaves."""
    order = _topo_order(root)
    for t in order:
        t.grad = None
    root.grad = np.ones_like(root.value)
    for t in reversed(order):
        if t._bwd is not None and t.grad is not None:
            t._bwd(t.grad)


def _first_nonfinite(root: Tensor):
    for t in _topo_order(root):
        if not np.all(np.isfinite(t.value)):
            return t
    return root


def value_and_grad(loss_fn, params: dict) -> tuple[float, dict]:
    """Evaluate ``loss_fn`` once and return (loss value, exact gradients).

    ``loss_fn`` maps a dict of leaf :class:`Tensor` objects (same keys as
    ``params``) to a scalar Tensor.  Parameters that do not influence the
    loss receive zero gradients.  Raises :class:`NonFiniteError` naming
    the first non-finite intermediate if the loss fails to evaluate
    finitely.
    """
    leaves = {name: Tensor(np.asarray(v, dtype=np.float64), op=f"param:{name}")
              for name, v in sorted(params.items())}
    loss = loss_fn(leaves)
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("loss must be scalar")
    if not np.all(np.isfinite(loss.value)):
        bad = _first_nonfinite(loss)
        raise NonFiniteError(f"non-finite loss: first non-finite intermediate at op '{bad.op}'")
    backward(loss)
    grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
             for name, leaf in leaves.items()}
    return float(loss.value), grads


def grad(loss_fn, params: dict) -> dict:
    """Exact gradients of ``loss_fn`` with respect to named parameters."""
    return value_and_grad(loss_fn, params)[1]


def grad_check(loss_fn, params: dict, step: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Per-coordinate relative error is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-3); the floor keeps finite-difference roundoff on
    near-zero coordinates from dominating the verdict (coordinates whose
    gradient magnitude is below the floor are effectively checked in
    absolute terms).  Returns the maximum over all coordinates of all
    parameters.
    """
    analytic = grad(loss_fn, params)

    def eval_loss(p):
        leaves = {k: Tensor(v, op=f"param:{k}") for k, v in p.items()}
        return float(loss_fn(leaves).value)

    worst = 0.0
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name in sorted(base):
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_loss(base)
            flat[i] = orig - step
            lo = eval_loss(base)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, err)
    return worst
