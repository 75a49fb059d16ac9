"""Reverse-mode autodiff over dense float64 numpy arrays.

Each operation records its inputs and a backward closure on the output node;
`backward()` walks the tape in reverse topological order. Tapes are built
fresh per optimization step and never reused. Gradients of every op are
covered by finite-difference tests.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "constant",
    "parameter",
    "backward",
    "concat",
    "stack",
    "matmul",
    "einsum2",
    "where",
    "softmax",
    "logsumexp",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum away leading dims that were added by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over dims that were size-1 in the original
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus an optional position in a compute graph.

    Leaves created with requires_grad=True accumulate gradients during
    backward(); interior nodes are produced by ops and carry a closure
    that routes the incoming adjoint to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn):
        out = Tensor(data)
        parents = tuple(p for p in parents if p.requires_grad)
        if parents:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bwd(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                acc(b, _unbroadcast(g, b.data.shape))

        return Tensor._result(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g, acc):
            acc(a, -g)

        return Tensor._result(-a.data, (a,), bwd)

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bwd(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                acc(b, _unbroadcast(-g, b.data.shape))

        return Tensor._result(a.data - b.data, (a, b), bwd)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        ad, bd = a.data, b.data

        def bwd(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g * bd, ad.shape))
            if b.requires_grad:
                acc(b, _unbroadcast(g * ad, bd.shape))

        return Tensor._result(ad * bd, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        ad, bd = a.data, b.data

        def bwd(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g / bd, ad.shape))
            if b.requires_grad:
                acc(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

        return Tensor._result(ad / bd, (a, b), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self
        e = float(exponent)

        def bwd(g, acc):
            acc(a, g * e * a.data ** (e - 1.0))

        return Tensor._result(a.data**e, (a,), bwd)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    # -- elementwise functions -----------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)

        def bwd(g, acc):
            acc(a, g * out)

        return Tensor._result(out, (a,), bwd)

    def log(self):
        a = self

        def bwd(g, acc):
            acc(a, g / a.data)

        return Tensor._result(np.log(a.data), (a,), bwd)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def bwd(g, acc):
            acc(a, g * 0.5 / out)

        return Tensor._result(out, (a,), bwd)

    def abs(self):
        a = self
        sign = np.sign(a.data)  # subgradient 0 at the kink

        def bwd(g, acc):
            acc(a, g * sign)

        return Tensor._result(np.abs(a.data), (a,), bwd)

    def sin(self):
        a = self

        def bwd(g, acc):
            acc(a, g * np.cos(a.data))

        return Tensor._result(np.sin(a.data), (a,), bwd)

    def cos(self):
        a = self

        def bwd(g, acc):
            acc(a, -g * np.sin(a.data))

        return Tensor._result(np.cos(a.data), (a,), bwd)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def bwd(g, acc):
            acc(a, g * (1.0 - out * out))

        return Tensor._result(out, (a,), bwd)

    def sigmoid(self):
        a = self
        out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))

        def bwd(g, acc):
            acc(a, g * out * (1.0 - out))

        return Tensor._result(out, (a,), bwd)

    def softplus(self):
        a = self
        ex = np.exp(-np.abs(a.data))
        out = np.maximum(a.data, 0.0) + np.log1p(ex)

        def bwd(g, acc):
            sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
            acc(a, g * sig)

        return Tensor._result(out, (a,), bwd)

    def clamp(self, lo=None, hi=None):
        """Clip values; gradient is zero through the clipped branch."""
        a = self
        out = np.clip(a.data, lo, hi)
        inside = np.ones_like(a.data)
        if lo is not None:
            inside = inside * (a.data >= lo)
        if hi is not None:
            inside = inside * (a.data <= hi)

        def bwd(g, acc):
            acc(a, g * inside)

        return Tensor._result(out, (a,), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        shape = a.data.shape

        def bwd(g, acc):
            if axis is None:
                acc(a, np.broadcast_to(g, shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                acc(a, np.broadcast_to(gg, shape).copy())

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def cumsum(self, axis=-1):
        a = self

        def bwd(g, acc):
            acc(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

        return Tensor._result(np.cumsum(a.data, axis=axis), (a,), bwd)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.data.shape

        def bwd(g, acc):
            acc(a, g.reshape(orig))

        return Tensor._result(a.data.reshape(shape), (a,), bwd)

    def transpose(self, axes=None):
        a = self
        if axes is None:
            axes = tuple(reversed(range(a.data.ndim)))
        inv = tuple(np.argsort(axes))

        def bwd(g, acc):
            acc(a, np.transpose(g, inv))

        return Tensor._result(np.transpose(a.data, axes), (a,), bwd)

    def swap_last(self):
        """Transpose the trailing two axes (matmul helper)."""
        n = self.data.ndim
        axes = tuple(range(n - 2)) + (n - 1, n - 2)
        return self.transpose(axes)

    def __getitem__(self, key):
        a = self
        shape = a.data.shape
        advanced = isinstance(key, np.ndarray) or (
            isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key)
        )

        def bwd(g, acc):
            full = np.zeros(shape)
            if advanced:
                np.add.at(full, key, g)
            else:
                full[key] = g
            acc(a, full)

        return Tensor._result(a.data[key], (a,), bwd)

    def broadcast_to(self, shape):
        a = self
        orig = a.data.shape

        def bwd(g, acc):
            acc(a, _unbroadcast(g, orig))

        return Tensor._result(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


# -- free functions ------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x, name=None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting matmul with gradients (batched over leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g, acc):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            acc(a, _unbroadcast(ga, ad.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            acc(b, _unbroadcast(gb, bd.shape))

    return Tensor._result(np.matmul(ad, bd), (a, b), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                acc(t, g[tuple(idx)])

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd
    )


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bwd(g, acc):
        parts = np.moveaxis(g, axis, 0)
        for t, gi in zip(tensors, parts):
            if t.requires_grad:
                acc(t, gi)

    return Tensor._result(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd
    )


def where(cond, a, b) -> Tensor:
    """Select by a constant boolean mask; gradients route to the taken branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), bwd)


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Max-subtracted softmax, fused into a single tape node."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, acc):
        dot = (g * out).sum(axis=axis, keepdims=True)
        acc(x, out * (g - dot))

    return Tensor._result(out, (x,), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor, activation: str | None = None) -> Tensor:
    """Fused affine layer y = act(x @ w + b) as a single tape node.

    x: [.., in]; w: [in, out]; b: [out]. Cuts tape-node count and intermediate
    allocations on the MLP hot path.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    pre = np.matmul(x.data, w.data)
    pre += b.data
    if activation is None:
        out, dact = pre, None
    elif activation == "tanh":
        out = np.tanh(pre)
        dact = 1.0 - out * out
    elif activation == "softplus":
        out = np.maximum(pre, 0.0) + np.log1p(np.exp(-np.abs(pre)))
        dact = 1.0 / (1.0 + np.exp(-np.clip(pre, -500.0, 500.0)))
    elif activation == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-np.clip(pre, -500.0, 500.0)))
        dact = out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation {activation!r}")

    def bwd(g, acc):
        gp = g if dact is None else g * dact
        if x.requires_grad:
            acc(x, np.matmul(gp, w.data.T))
        if w.requires_grad:
            gp2 = gp.reshape(-1, gp.shape[-1])
            acc(w, np.matmul(x.data.reshape(-1, x.data.shape[-1]).T, gp2))
        if b.requires_grad:
            acc(b, gp.reshape(-1, gp.shape[-1]).sum(axis=0))

    return Tensor._result(out, (x, w, b), bwd)


def _einsum_grad_spec(spec: str):
    lhs, out = spec.split("->")
    a_spec, b_spec = lhs.split(",")
    return a_spec, b_spec, out


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum contraction with gradients.

    Every index of each operand must appear in the output or the other
    operand (plain contractions; no internal traces), which makes the
    adjoints einsums with permuted specs.
    """
    a, b = as_tensor(a), as_tensor(b)
    a_spec, b_spec, out_spec = _einsum_grad_spec(spec)
    ad, bd = a.data, b.data

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bd, optimize=True))
        if b.requires_grad:
            acc(b, np.einsum(f"{a_spec},{out_spec}->{b_spec}", ad, g, optimize=True))

    return Tensor._result(np.einsum(spec, ad, bd, optimize=True), (a, b), bwd)


def logsumexp(x: Tensor, axis=-1, keepdims=False) -> Tensor:
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    out = (x - m).exp().sum(axis=axis, keepdims=True).log() + m
    if not keepdims:
        out = out.reshape(np.sum(out.data, axis=axis).shape)
    return out


class GraphError(ValueError):
    pass


def _topo_order(root: Tensor):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params=None):
    """Reverse-mode sweep from a scalar root.

    Returns a dict {name: gradient array} over every *named* leaf reached by
    the sweep. When `params` (an iterable of named leaf tensors, or a mapping
    name -> tensor) is given, parameters the sweep never reached are filled
    with zeros so the result always covers the full parameter set.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        grads = {}
    else:
        adjoint = {id(root): np.ones_like(root.data)}

        def acc(node, g):
            # first contribution is stored by reference (bwd closures never
            # mutate their outputs); later ones allocate a fresh sum
            key = id(node)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g

        order = _topo_order(root)
        grads = {}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, acc)
            elif node.name is not None:
                grads[node.name] = grads.get(node.name, 0.0) + g
    if params is not None:
        if hasattr(params, "values"):
            params = params.values()
        for p in params:
            if p.name is not None and p.name not in grads:
                grads[p.name] = np.zeros_like(p.data)
    return grads
