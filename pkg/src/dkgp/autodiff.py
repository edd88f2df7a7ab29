"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` values; a
single backward sweep in reverse recording order accumulates adjoints.
Primitives are matrix-level (matmul, Cholesky, triangular solve, ...), so a
GP marginal likelihood is a few dozen tape entries rather than one per
scalar.

Every primitive here is also callable on plain numpy arrays, in which case
it just computes the value. Model code is written once against these
functions and runs both taped (for gradients) and untaped (for prediction
and finite-difference checks).
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping
from typing import Any

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri

from .linalg import DEFAULT_JITTER, cholesky_with_jitter


class UnregisteredPrimitiveError(TypeError):
    """A numpy function without a registered adjoint was applied to a Var."""


class NonScalarOutputError(ValueError):
    pass


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []

    def __len__(self):
        return len(self.values)

    def leaf(self, value) -> "Var":
        return self._push(np.array(value, dtype=np.float64), (), None)

    def _push(self, value, parents, vjp) -> "Var":
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(value, self, len(self.values) - 1)

    def backward(self, output: "Var") -> list[np.ndarray | None]:
        """Adjoints of ``output`` with respect to every recorded node."""
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if np.ndim(output.value) != 0:
            raise NonScalarOutputError(f"output must be scalar, got shape {np.shape(output.value)}")
        grads: list[np.ndarray | None] = [None] * len(self.values)
        grads[output.index] = np.ones(())
        for i in range(output.index, -1, -1):
            g = grads[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            contribs = vjp(g)
            for p, c in zip(self.parents[i], contribs):
                if p < 0 or c is None:
                    continue
                grads[p] = c if grads[p] is None else grads[p] + c
        return grads


_FORWARDED_UFUNCS = {
    np.add: lambda a, b: add(a, b),
    np.subtract: lambda a, b: sub(a, b),
    np.multiply: lambda a, b: mul(a, b),
    np.true_divide: lambda a, b: div(a, b),
    np.matmul: lambda a, b: matmul(a, b),
    np.negative: lambda a: neg(a),
    np.exp: lambda a: exp(a),
    np.log: lambda a: log(a),
    np.sqrt: lambda a: sqrt(a),
    np.square: lambda a: square(a),
}


class Var:
    """A node value on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _FORWARDED_UFUNCS.get(ufunc)
        if method != "__call__" or fn is None or kwargs:
            raise UnregisteredPrimitiveError(f"no adjoint registered for numpy.{ufunc.__name__}")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnregisteredPrimitiveError(f"no adjoint registered for numpy.{func.__name__}")

    def __float__(self):
        return float(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise UnregisteredPrimitiveError("only constant exponents are supported")
        if p == 2:
            return square(self)
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value(x) -> Any:
    """Plain numeric value of a Var or array."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("cannot combine Vars from different tapes")
    return tape


def _idx(x) -> int:
    return x.index if isinstance(x, Var) else -1


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av + bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._push(out, (_idx(a), _idx(b)), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av - bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._push(out, (_idx(a), _idx(b)), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av * bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._push(
        out, (_idx(a), _idx(b)), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
    )


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._push(
        out,
        (_idx(a), _idx(b)),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)),
    )


def neg(a):
    if not isinstance(a, Var):
        return -a
    return a.tape._push(-a.value, (a.index,), lambda g: (-g,))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return a.tape._push(out, (a.index,), lambda g: (g * out,))


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    av = a.value
    return a.tape._push(np.log(av), (a.index,), lambda g: (g / av,))


def sqrt(a):
    if not isinstance(a, Var):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return a.tape._push(out, (a.index,), lambda g: (0.5 * g / out,))


def square(a):
    if not isinstance(a, Var):
        return np.square(a)
    av = a.value
    return a.tape._push(av * av, (a.index,), lambda g: (2.0 * g * av,))


def power(a, p: float):
    if not isinstance(a, Var):
        return np.power(a, p)
    av = a.value
    return a.tape._push(av**p, (a.index,), lambda g: (g * p * av ** (p - 1),))


def relu(a):
    """max(a, 0); the derivative at exactly 0 is taken to be 0."""
    if not isinstance(a, Var):
        return np.maximum(a, 0.0)
    av = a.value
    mask = av > 0
    return a.tape._push(np.where(mask, av, 0.0), (a.index,), lambda g: (g * mask,))


def clamp_min(a, floor: float):
    if not isinstance(a, Var):
        return np.maximum(a, floor)
    av = a.value
    mask = av > floor
    return a.tape._push(np.where(mask, av, floor), (a.index,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape and reductions


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av @ bv
    if tape is None:
        return out
    if np.ndim(av) != 2 or np.ndim(bv) not in (1, 2):
        raise ValueError("taped matmul supports (n,k)@(k,m) and (n,k)@(k,)")

    def vjp(g):
        if np.ndim(bv) == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return tape._push(out, (_idx(a), _idx(b)), vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.value
    out = np.sum(av, axis=axis, keepdims=keepdims)
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push(out, (a.index,), vjp)


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return sum(a, axis=axis) / n


def transpose(a):
    if not isinstance(a, Var):
        return np.transpose(a)
    return a.tape._push(a.value.T, (a.index,), lambda g: (g.T,))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return a.tape._push(a.value.reshape(shape), (a.index,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    if not isinstance(a, Var):
        return a[idx]
    av = a.value

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape._push(av[idx], (a.index,), vjp)


def diag(v):
    """Diagonal matrix from a vector."""
    if not isinstance(v, Var):
        return np.diag(v)
    return v.tape._push(np.diag(v.value), (v.index,), lambda g: (np.diag(g).copy(),))


def diag_part(m):
    if not isinstance(m, Var):
        return np.diag(m).copy()
    mv = m.value
    return m.tape._push(np.diag(mv).copy(), (m.index,), lambda g: (np.diag(g),))


def tril(m, k: int = 0):
    if not isinstance(m, Var):
        return np.tril(m, k)
    return m.tape._push(np.tril(m.value, k), (m.index,), lambda g: (np.tril(g, k),))


def stack_columns(cols: list) -> Any:
    """Stack equal-length vectors as the columns of a matrix."""
    tape = _tape_of(*cols)
    vals = [value(c) for c in cols]
    out = np.stack(vals, axis=1)
    if tape is None:
        return out
    return tape._push(out, tuple(_idx(c) for c in cols), lambda g: tuple(g[:, j] for j in range(len(cols))))


def log_softmax(a, axis: int = -1):
    av = value(a)
    m = np.max(av, axis=axis, keepdims=True)
    shifted = av - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    if not isinstance(a, Var):
        return out
    soft = np.exp(out)
    return a.tape._push(out, (a.index,), lambda g: (g - soft * np.sum(g, axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# Cholesky-based primitives


def cholesky(A, base_jitter: float = DEFAULT_JITTER):
    """Lower Cholesky factor with adaptive jitter.

    The adjoint is the blocked form ``sym(L^-T Phi(L^T Lbar) L^-1)``, where
    Phi keeps the lower triangle and halves the diagonal. Added jitter is
    treated as a constant.
    """
    Av = value(A)
    L = cholesky_with_jitter(Av, base_jitter).lower
    if not isinstance(A, Var):
        return L

    def vjp(g):
        P = np.tril(L.T @ g)
        P[np.diag_indices_from(P)] *= 0.5
        S = _solve_tri(L, _solve_tri(L, P.T, lower=True, trans="T").T, lower=True, trans="T")
        return (0.5 * (S + S.T),)

    return A.tape._push(L, (A.index,), vjp)


def solve_triangular(L, B, trans: bool = False):
    """``L^{-1} B`` (or ``L^{-T} B`` with ``trans``) for lower-triangular L."""
    tape = _tape_of(L, B)
    Lv, Bv = value(L), value(B)
    mode = "T" if trans else "N"
    X = _solve_tri(Lv, Bv, lower=True, trans=mode)
    if tape is None:
        return X

    def vjp(g):
        Bbar = _solve_tri(Lv, g, lower=True, trans="N" if trans else "T")
        if Bbar.ndim == 1:
            outer = np.outer(X, Bbar) if trans else np.outer(Bbar, X)
        else:
            outer = X @ Bbar.T if trans else Bbar @ X.T
        return -np.tril(outer), Bbar

    return tape._push(X, (_idx(L), _idx(B)), vjp)


def cho_solve(L, B):
    """``(L L^T)^{-1} B``."""
    return solve_triangular(L, solve_triangular(L, B), trans=True)


def logdet_from_chol(L):
    return 2.0 * sum(log(diag_part(L)))


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamVector:
    """Flat float64 array with named, shaped blocks."""

    def __init__(self, blocks: Mapping[str, Any] | Iterable[tuple[str, Any]]):
        items = list(blocks.items()) if isinstance(blocks, Mapping) else list(blocks)
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        chunks = []
        offset = 0
        for name, arr in items:
            if name in self._layout:
                raise ValueError(f"duplicate block name {name!r}")
            a = np.asarray(arr, dtype=np.float64)
            self._layout[name] = (offset, a.shape)
            chunks.append(a.ravel())
            offset += a.size
        self.data = np.concatenate(chunks) if chunks else np.zeros(0)
        self.data.flags.writeable = False

    @classmethod
    def from_flat(cls, like: "ParamVector", flat) -> "ParamVector":
        flat = np.array(flat, dtype=np.float64)
        if flat.shape != like.data.shape:
            raise ValueError(f"flat vector has shape {flat.shape}, expected {like.data.shape}")
        pv = cls.__new__(cls)
        pv._layout = like._layout
        pv.data = flat
        pv.data.flags.writeable = False
        return pv

    def with_data(self, flat) -> "ParamVector":
        return ParamVector.from_flat(self, flat)

    @property
    def names(self) -> list[str]:
        return list(self._layout)

    @property
    def size(self) -> int:
        return self.data.size

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._layout[name][1]

    def slice_of(self, name: str) -> slice:
        off, shape = self._layout[name]
        return slice(off, off + int(np.prod(shape, dtype=int)))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[self.slice_of(name)].reshape(self.shape_of(name))

    def __contains__(self, name):
        return name in self._layout

    def __len__(self):
        return self.data.size

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self._layout}

    def mask(self, names: Iterable[str]) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for n in names:
            m[self.slice_of(n)] = True
        return m

    def same_layout(self, other: "ParamVector") -> bool:
        return self._layout == other._layout

    def __repr__(self):
        inner = ", ".join(f"{n}{list(s)}" for n, (_, s) in self._layout.items())
        return f"ParamVector({inner})"


def gradient(f: Callable[[dict], Any], theta: ParamVector) -> tuple[float, ParamVector]:
    """Value and gradient of a scalar function of named parameter blocks.

    ``f`` receives a dict mapping block name to a taped :class:`Var` and must
    return a scalar Var built from the primitives in this module.
    """
    tape = Tape()
    view = {n: tape.leaf(theta[n]) for n in theta.names}
    out = f(view)
    if not isinstance(out, Var):
        # f ignored its inputs entirely
        if np.ndim(out) != 0:
            raise NonScalarOutputError("objective must be scalar")
        return float(out), theta.with_data(np.zeros(theta.size))
    grads = tape.backward(out)
    flat = np.zeros(theta.size)
    for n, leaf in view.items():
        g = grads[leaf.index]
        if g is not None:
            flat[theta.slice_of(n)] = np.asarray(g).ravel()
    return float(out.value), theta.with_data(flat)


def evaluate(f: Callable[[dict], Any], theta: ParamVector) -> float:
    """Untaped evaluation of ``f`` on plain arrays."""
    return float(value(f(theta.as_dict())))


def numerical_gradient(f, theta: ParamVector, h: float = 1e-5) -> np.ndarray:
    flat = theta.data
    out = np.empty(flat.size)
    for i in range(flat.size):
        up = flat.copy()
        dn = flat.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (evaluate(f, theta.with_data(up)) - evaluate(f, theta.with_data(dn))) / (2 * h)
    return out


def check_gradient(f, theta: ParamVector, h: float = 1e-5) -> float:
    """Maximum componentwise relative error between reverse-mode and central differences."""
    if h <= 0:
        raise ValueError("h must be positive")
    _, g = gradient(f, theta)
    num = numerical_gradient(f, theta, h)
    ana = g.data
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
    if ana.size == 0:
        return 0.0
    return float(np.max(np.abs(ana - num) / denom))
