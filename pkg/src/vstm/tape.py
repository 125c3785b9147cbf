"""Reverse-mode differentiation tape over numpy arrays.

Small and vectorized: a Var wraps one float64 array; ops close over their
operands' values and record vector-Jacobian products. Only the ops the
objective needs exist here. Gradients accumulate additively on reuse, and
constants (plain arrays or scalars) pass through untracked.
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np
from scipy.linalg import solve_triangular

LOG2 = float(np.log(2.0))


class Var:
    __slots__ = ("value", "parents", "vjp", "grad")

    # keep numpy from absorbing us into object arrays; mixed expressions
    # like `ndarray - Var` must dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjp = vjp  # callable(out_grad) -> tuple aligned with parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; right-hand constants stay plain arrays
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return pow_const(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _unbroadcast(grad, shape):
    # reduce grad to an operand's shape after numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _binary(a, b, out, vjp_a, vjp_b):
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(vjp_a)
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(vjp_b)
    if not parents:
        return Var(out)
    return Var(out, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def add(a, b):
    av, bv = val(a), val(b)
    return _binary(
        a, b, av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def neg(a):
    if not isinstance(a, Var):
        return -val(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = val(a), val(b)
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def div(a, b):
    av, bv = val(a), val(b)
    return _binary(
        a, b, av / bv,
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape),
    )


def pow_const(a, k):
    avv = val(a)
    out = avv ** k
    if not isinstance(a, Var):
        return Var(out)
    return Var(out, (a,), lambda g: (g * k * avv ** (k - 1),))


def matmul(a, b):
    av, bv = val(a), val(b)
    return _binary(
        a, b, av @ bv,
        lambda g: g @ bv.T,
        lambda g: av.T @ g,
    )


def transpose(a):
    if not isinstance(a, Var):
        return val(a).T
    return Var(a.value.T, (a,), lambda g: (g.T,))


def texp(a):
    out = np.exp(val(a))
    if not isinstance(a, Var):
        return Var(out)
    return Var(out, (a,), lambda g: (g * out,))


def tlog(a):
    avv = val(a)
    if not isinstance(a, Var):
        return Var(np.log(avv))
    return Var(np.log(avv), (a,), lambda g: (g / avv,))


def ttanh(a):
    out = np.tanh(val(a))
    if not isinstance(a, Var):
        return Var(out)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    avv = val(a)
    out = np.logaddexp(0.0, avv)
    if not isinstance(a, Var):
        return Var(out)
    sig = 1.0 / (1.0 + np.exp(-avv))
    return Var(out, (a,), lambda g: (g * sig,))


def relu(a):
    avv = val(a)
    out = np.maximum(avv, 0.0)
    if not isinstance(a, Var):
        return Var(out)
    mask = (avv > 0).astype(float)
    return Var(out, (a,), lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False):
    avv = val(a)
    out = avv.sum(axis=axis, keepdims=keepdims)
    if not isinstance(a, Var):
        return Var(out)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, avv.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, avv.shape).copy(),)

    return Var(out, (a,), vjp)


def cumsum(a, axis):
    avv = val(a)
    out = np.cumsum(avv, axis=axis)
    if not isinstance(a, Var):
        return Var(out)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return Var(out, (a,), vjp)


def concat_cols(parts):
    vals = [val(p) for p in parts]
    out = np.hstack(vals)
    tracked = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not tracked:
        return Var(out)
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i, _ in tracked)

    return Var(out, tuple(p for _, p in tracked), vjp)


def getitem(a, key):
    avv = val(a)
    out = avv[key]
    if not isinstance(a, Var):
        return Var(out)

    def vjp(g):
        full = np.zeros_like(avv)
        np.add.at(full, key, g)  # duplicate indices accumulate
        return (full,)

    return Var(out, (a,), vjp)


def take_rows(a, idx):
    return getitem(a, np.asarray(idx))


def gather(a, idx):
    return getitem(a, np.asarray(idx))


def scatter(x, shape, key):
    """Place x into a zero array of the given shape at key positions."""
    xv = val(x)
    out = np.zeros(shape)
    out[key] = xv
    if not isinstance(x, Var):
        return Var(out)
    return Var(out, (x,), lambda g: (g[key],))


def tril_from(flat):
    """Build a lower-triangular matrix (diagonal included) from its packed
    entries in row-major order."""
    fv = val(flat)
    m = round_m(fv.size)
    key = np.tril_indices(m)
    return scatter(flat, (m, m), key)


def round_m(size):
    m = int(round((np.sqrt(8 * size + 1) - 1) / 2))
    if m * (m + 1) // 2 != size:
        raise ValueError("length is not a triangular number")
    return m


def tri_solve_lower(L, U):
    """Solve L V = U for V with L lower triangular. Non-finite inputs pass
    through as non-finite outputs instead of raising, so divergence is
    detected at the objective value."""
    Lv, Uv = val(L), val(U)
    V = solve_triangular(Lv, Uv, lower=True, check_finite=False)

    def vjp_L(g):
        gu = solve_triangular(Lv.T, g, lower=False, check_finite=False)
        return np.tril(-gu @ V.T)

    def vjp_U(g):
        return solve_triangular(Lv.T, g, lower=False, check_finite=False)

    return _binary(L, U, V, vjp_L, vjp_U)


def softmax_rows_with_ref(z):
    """Row softmax of [z, 0]: appends the reference column then normalizes.
    The row max is subtracted as a constant, which leaves gradients exact."""
    n = val(z).shape[0]
    x = concat_cols([z, np.zeros((n, 1))])
    shift = x.value.max(axis=1, keepdims=True)
    e = texp(x - shift)
    s = tsum(e, axis=1, keepdims=True)
    return div(e, s)


CpcChain = namedtuple("CpcChain", "L log_diag log_jac")


def cpc_chain(y, m):
    """Differentiable canonical-partial-correlation construction of a
    Cholesky correlation factor; mirrors kernel.cpc_to_cholesky."""
    rows, cols = np.tril_indices(m, -1)
    z = ttanh(y)
    # log(1 - tanh(y)^2), stable for large |y|
    a = (LOG2 - y - softplus(-2.0 * y)) * 2.0
    Z = scatter(z, (m, m), (rows, cols))
    A = scatter(a, (m, m), (rows, cols))
    excl = cumsum(A, axis=1) - A
    L_low = Z * texp(0.5 * excl)
    log_diag = 0.5 * tsum(A, axis=1)
    L = L_low + scatter(texp(log_diag), (m, m), np.diag_indices(m))
    log_jac = tsum(a) + 0.5 * tsum(getitem(excl, (rows, cols)))
    return CpcChain(L, log_diag, log_jac)


def backward(root: Var) -> None:
    """Accumulate gradients of the scalar root into every reachable Var."""
    if root.value.shape != ():
        raise ValueError("backward expects a scalar root")
    topo: list[Var] = []
    state: dict[int, int] = {}
    stack: list[Var] = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid, 0) == 0:
            state[nid] = 1
            for p in node.parents:
                if state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if state[nid] == 1:
                state[nid] = 2
                topo.append(node)
    root.grad = np.ones(())
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g
