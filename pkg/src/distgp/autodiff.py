"""Reverse-mode automatic differentiation over numpy arrays.

A small tensor tape: each op records its parents and a closure that pushes
the upstream cotangent into them. Graphs are rebuilt per loss evaluation;
`Param` leaves persist across evaluations so optimizers can update
`.value` in place.

Every op is dual-mode: called on plain ndarrays it just computes numpy
forward values, so the same model code serves training (Tensors) and
oracle/eval paths (arrays).

The contract for the whole module is agreement with central finite
differences; `check_against_fd` is the harness the test suite drives.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri
from scipy.special import expit as _sigmoid

from .errors import DimensionMismatch, NonFiniteLoss

Array = np.ndarray


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a cotangent down to the shape of the operand it belongs to."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_bw")

    def __init__(self, value, parents: tuple = (), bw: Callable | None = None,
                 requires_grad: bool = False):
        self.value = _asarray(value)
        self.grad: Array | None = None
        # parents tuple is only kept when a gradient path exists
        self._parents = parents if (bw is not None or requires_grad) else ()
        self._bw = bw

    @property
    def requires_grad(self) -> bool:
        return self._bw is not None or isinstance(self, Param)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def _accum(self, g: Array) -> None:
        g = _unbroadcast(np.asarray(g), self.value.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self) -> None:
        if self.value.shape != ():
            raise DimensionMismatch("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones(())
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other): return add(self, other)
    __radd__ = __add__
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    __rmul__ = __mul__
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={'set' if self.grad is not None else 'none'})"


class Param(Tensor):
    """Persistent leaf; optimizers mutate .value in place between graphs."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, (), None, requires_grad=True)
        self.name = name


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> Array:
    return x.value if isinstance(x, Tensor) else _asarray(x)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_val: Array, pairs: Iterable[tuple[Tensor, Callable[[Array], Array]]]):
    """Build an output node from (parent, local_vjp) pairs, pruning dead paths."""
    live = [(p, fn) for p, fn in pairs if p.requires_grad]
    if not live:
        return Tensor(out_val)

    def bw(g: Array) -> None:
        for p, fn in live:
            p._accum(fn(g))

    return Tensor(out_val, tuple(p for p, _ in live), bw)


# ---------------------------------------------------------------- basic ops

def add(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return _asarray(a) + _asarray(b)
    a, b = _lift(a), _lift(b)
    return _make(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return _asarray(a) - _asarray(b)
    a, b = _lift(a), _lift(b)
    return _make(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return _asarray(a) * _asarray(b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _make(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def div(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return _asarray(a) / _asarray(b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _make(av / bv, [(a, lambda g: g / bv),
                           (b, lambda g: -g * av / (bv * bv))])


def power(x, p: float):
    if not is_tensor(x):
        return _asarray(x) ** p
    xv = x.value
    return _make(xv ** p, [(x, lambda g: g * p * xv ** (p - 1.0))])


def exp(x):
    if not is_tensor(x):
        return np.exp(_asarray(x))
    out = np.exp(x.value)
    return _make(out, [(x, lambda g: g * out)])


def log(x):
    if not is_tensor(x):
        return np.log(_asarray(x))
    xv = x.value
    return _make(np.log(xv), [(x, lambda g: g / xv)])


def sqrt(x):
    if not is_tensor(x):
        return np.sqrt(_asarray(x))
    out = np.sqrt(x.value)
    return _make(out, [(x, lambda g: g * 0.5 / out)])


def square(x):
    if not is_tensor(x):
        xv = _asarray(x)
        return xv * xv
    xv = x.value
    return _make(xv * xv, [(x, lambda g: g * 2.0 * xv)])


def softplus(x):
    """log(1 + exp(x)), overflow-safe; used as the positivity bijection."""
    if not is_tensor(x):
        return np.logaddexp(0.0, _asarray(x))
    xv = x.value
    return _make(np.logaddexp(0.0, xv), [(x, lambda g: g * _sigmoid(xv))])


def softplus_inverse(y):
    """Inverse of softplus; y must be positive. y + log(-expm1(-y)), stably."""
    y = value_of(y)
    with np.errstate(over="ignore"):
        small = np.log(np.expm1(np.minimum(y, 30.0)))
    return np.where(y > 30.0, y, small)


def maximum(x, c: float):
    """Clamp from below by a constant; cotangent passes where x >= c."""
    if not is_tensor(x):
        return np.maximum(_asarray(x), c)
    xv = x.value
    mask = xv >= c
    return _make(np.maximum(xv, c), [(x, lambda g: g * mask)])


def tsum(x, axis=None, keepdims: bool = False):
    if not is_tensor(x):
        return _asarray(x).sum(axis=axis, keepdims=keepdims)
    xv = x.value
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, xv.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape)

    return _make(out, [(x, vjp)])


def mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    n = xv.size if axis is None else (
        np.prod([xv.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x, shape):
    if not is_tensor(x):
        return _asarray(x).reshape(shape)
    xv = x.value
    return _make(xv.reshape(shape), [(x, lambda g: g.reshape(xv.shape))])


def transpose(x, axes=None):
    if not is_tensor(x):
        return _asarray(x).transpose(axes)
    xv = x.value
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(xv.transpose(axes),
                 [(x, lambda g: g.transpose(inv) if inv is not None else g.transpose())])


def matmul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return _asarray(a) @ _asarray(b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionMismatch("matmul operands must be at least 2-D")
    out = av @ bv

    def vjp_a(g: Array) -> Array:
        return g @ bv.swapaxes(-1, -2)

    def vjp_b(g: Array) -> Array:
        return av.swapaxes(-1, -2) @ g

    return _make(out, [(a, vjp_a), (b, vjp_b)])


def concatenate(parts: list, axis: int = 0):
    if not any(is_tensor(p) for p in parts):
        return np.concatenate([_asarray(p) for p in parts], axis=axis)
    parts = [_lift(p) for p in parts]
    vals = [p.value for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp_for(i):
        def vjp(g: Array) -> Array:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]
        return vjp

    return _make(out, [(p, vjp_for(i)) for i, p in enumerate(parts)])


def getitem(x, key):
    if not is_tensor(x):
        return _asarray(x)[key]
    xv = x.value
    out = xv[key]
    fancy = any(isinstance(k, np.ndarray) and k.dtype.kind in "iu"
                for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g: Array) -> Array:
        buf = np.zeros_like(xv)
        if fancy:
            np.add.at(buf, key, g)  # duplicate indices must accumulate
        else:
            buf[key] += g
        return buf

    return _make(out, [(x, vjp)])


def gather0(x, idx: Array):
    """Index axis 0 with an integer array; scatter-add on the way back."""
    idx = np.asarray(idx)
    if not is_tensor(x):
        return _asarray(x)[idx]
    xv = x.value
    out = xv[idx]

    def vjp(g: Array) -> Array:
        buf = np.zeros_like(xv)
        np.add.at(buf, idx, g)
        return buf

    return _make(out, [(x, vjp)])


# ------------------------------------------------------ linear-algebra ops

def _phi(m: Array) -> Array:
    """Lower triangle with the diagonal halved (Cholesky pullback helper)."""
    out = np.tril(m)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(x):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Like LAPACK potrf, only the lower triangle of the input is read, and
    the pullback lands on the lower triangle alone (strictly-lower part
    doubled). This stays finite-difference-exact both for explicitly
    symmetrized inputs and for matrices symmetric by construction.
    """
    if not is_tensor(x):
        return np.linalg.cholesky(_asarray(x))
    L = np.linalg.cholesky(x.value)

    def vjp(g: Array) -> Array:
        P = _phi(L.T @ g)
        tmp = _solve_tri(L, P, lower=True, trans=1)          # L^{-T} P
        w = _solve_tri(L, tmp.T, lower=True, trans=1).T      # L^{-T} P L^{-1}
        sym = 0.5 * (w + w.T)
        out = np.tril(2.0 * sym)
        out[np.diag_indices_from(out)] -= np.diagonal(sym)
        return out

    return _make(L, [(x, vjp)])


def triangular_solve(L, B, trans: bool = False):
    """Solve L X = B (or L^T X = B when trans) with L lower-triangular."""
    if not (is_tensor(L) or is_tensor(B)):
        return _solve_tri(_asarray(L), _asarray(B), lower=True, trans=1 if trans else 0)
    L, B = _lift(L), _lift(B)
    Lv, Bv = L.value, B.value
    X = _solve_tri(Lv, Bv, lower=True, trans=1 if trans else 0)

    if trans:
        # X = L^{-T} B:  dB = L^{-1} G,  dL = -X (L^{-1} G)^T, lower part
        def vjp_L(g: Array) -> Array:
            C = _solve_tri(Lv, g, lower=True, trans=0)
            return np.tril(-X @ C.T)

        def vjp_B(g: Array) -> Array:
            return _solve_tri(Lv, g, lower=True, trans=0)
    else:
        # X = L^{-1} B:  dB = L^{-T} G,  dL = -(L^{-T} G) X^T, lower part
        def vjp_L(g: Array) -> Array:
            C = _solve_tri(Lv, g, lower=True, trans=1)
            return np.tril(-C @ X.T)

        def vjp_B(g: Array) -> Array:
            return _solve_tri(Lv, g, lower=True, trans=1)

    return _make(X, [(L, vjp_L), (B, vjp_B)])


def tril(x, k: int = 0):
    xv = value_of(x)
    mask = np.tril(np.ones(xv.shape[-2:]), k=k)
    return mul(x, mask)


def diag_part(x):
    """Diagonal of the trailing two axes, as a composite mask-and-sum."""
    xv = value_of(x)
    eye = np.eye(xv.shape[-1])
    return tsum(mul(x, eye), axis=-1)


def diag_embed(v):
    """Vector (…, M) to diagonal matrix (…, M, M)."""
    vv = value_of(v)
    eye = np.eye(vv.shape[-1])
    return mul(reshape(v, vv.shape + (1,)), eye)


# ----------------------------------------------------------- param storage

class ParameterStore:
    """Ordered, named collection of persistent leaves.

    Positivity-constrained quantities are stored unconstrained; model code
    applies `softplus` where the constrained value is needed.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def params(self) -> list[Param]:
        return list(self._params.values())

    def n_values(self) -> int:
        return int(sum(p.value.size for p in self._params.values()))

    def flatten(self) -> Array:
        return np.concatenate([p.value.ravel() for p in self._params.values()]) \
            if self._params else np.zeros(0)

    def set_flat(self, vec: Array) -> None:
        vec = _asarray(vec)
        if vec.size != self.n_values():
            raise DimensionMismatch("flat vector length does not match store")
        off = 0
        for p in self._params.values():
            n = p.value.size
            p.value = vec[off:off + n].reshape(p.value.shape).copy()
            off += n

    def snapshot(self) -> dict[str, Array]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def restore(self, state: Mapping[str, Array]) -> None:
        for k, p in self._params.items():
            p.value = np.array(state[k], dtype=np.float64).reshape(p.value.shape)


def gradient(loss_fn: Callable[[], Tensor], store: ParameterStore) -> tuple[float, dict[str, Array]]:
    """Evaluate loss_fn and return (value, per-parameter gradients).

    Raises NonFiniteLoss when the objective is NaN/Inf; disconnected
    parameters get zero gradients.
    """
    out = loss_fn()
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if not np.isfinite(out.value):
        raise NonFiniteLoss(f"objective is not finite: {out.value!r}")
    out.backward()
    grads = {}
    for name, p in store.items():
        grads[name] = np.zeros_like(p.value) if p.grad is None else p.grad
    return float(out.value), grads


def check_against_fd(loss_fn: Callable[[], Tensor], store: ParameterStore,
                     step: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7):
    """Compare reverse-mode gradients with central finite differences.

    Returns (max_rel_err, report) where report lists any coordinate whose
    |ad - fd| exceeds both atol and rtol * max(|ad|, |fd|).
    """
    _, grads = gradient(loss_fn, store)
    flat_ad = np.concatenate([grads[n].ravel() for n in store.names()]) \
        if len(store) else np.zeros(0)
    base = store.flatten()
    flat_fd = np.zeros_like(base)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            vec = base.copy()
            vec[i] += sign * step
            store.set_flat(vec)
            val = loss_fn()
            flat_fd[i] += sign * float(val.value if isinstance(val, Tensor) else val)
        flat_fd[i] /= 2.0 * step
    store.set_flat(base)

    denom = np.maximum(np.maximum(np.abs(flat_ad), np.abs(flat_fd)), 1e-300)
    abs_err = np.abs(flat_ad - flat_fd)
    rel = abs_err / denom
    bad = (abs_err > atol) & (rel > rtol)
    report = []
    if np.any(bad):
        names = []
        for n in store.names():
            names += [n] * store[n].value.size
        for i in np.nonzero(bad)[0]:
            report.append((names[i], float(flat_ad[i]), float(flat_fd[i]), float(rel[i])))
    max_rel = float(np.max(rel[abs_err > atol])) if np.any(abs_err > atol) else 0.0
    return max_rel, report
