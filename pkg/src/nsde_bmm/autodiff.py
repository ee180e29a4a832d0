"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive is exposed as a module-level function that accepts plain
``numpy`` arrays or :class:`Var` nodes.  When no argument is a ``Var`` the
function evaluates the numpy expression directly and returns an array, so
numerical code written against these functions runs unchanged with or
without recording.  When at least one argument is a ``Var`` the result is a
new ``Var`` appended to the owning :class:`Tape`.

The tape is append-only and topologically ordered by construction, which
makes both the reverse sweep (:func:`gradient`) and forward replay with new
leaf values (:meth:`Tape.replay`) simple loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping

import numpy as np

from . import special

__all__ = [
    "Var",
    "Tape",
    "record",
    "gradient",
    "finite_difference_check",
    "value_of",
    "is_var",
    "primitive",
    "unbroadcast",
]


@dataclass(frozen=True)
class Primitive:
    name: str
    fwd: Callable[..., np.ndarray]
    # vjps[i](g, out, *vals, **kw) -> cotangent for input i
    vjps: tuple


class Var:
    """A recorded value on a tape."""

    __slots__ = ("value", "prim", "inputs", "kwargs", "tape", "index")
    __array_ufunc__ = None  # make ndarray binary ops defer to Var

    def __init__(self, value, prim=None, inputs=(), kwargs=None, tape=None):
        self.value = np.asarray(value, dtype=float)
        self.prim = prim
        self.inputs = inputs
        self.kwargs = kwargs or {}
        self.tape = tape
        self.index = -1
        if tape is not None:
            tape._append(self)

    # numpy-like surface
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return swap_last(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        op = self.prim.name if self.prim else "leaf"
        return f"Var({op}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}
        self.output: Var | None = None

    def _append(self, node: Var) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def variable(self, value, name: str | None = None) -> Var:
        v = Var(np.array(value, dtype=float), tape=self)
        if name is not None:
            self.leaves[name] = v
        return v

    def replay(self, values: Mapping[str, Any] | None = None) -> np.ndarray:
        """Re-evaluate every node in order, optionally with new leaf values."""
        for name, val in (values or {}).items():
            leaf = self.leaves[name]
            leaf.value = np.array(val, dtype=float).reshape(leaf.value.shape)
        for node in self.nodes:
            if node.prim is None:
                continue
            vals = [value_of(x) for x in node.inputs]
            node.value = np.asarray(node.prim.fwd(*vals, **node.kwargs), dtype=float)
        if self.output is None:
            raise ValueError("tape has no recorded output")
        return self.output.value


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _apply(prim: Primitive, *args, **kwargs):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot mix variables from different tapes")
    vals = [value_of(a) for a in args]
    out = prim.fwd(*vals, **kwargs)
    if tape is None:
        return out
    return Var(out, prim, args, kwargs, tape)


def _prim(name, fwd, *vjps):
    return Primitive(name, fwd, tuple(vjps))


def primitive(name: str, fwd: Callable[..., np.ndarray], *vjps: Callable) -> Callable:
    """Define a new differentiable operation.

    ``vjps[i](g, out, *inputs, **kwargs)`` returns the cotangent of input
    ``i`` given the output cotangent ``g``.  The returned function accepts
    arrays or variables like the built-in primitives.
    """
    prim = _prim(name, fwd, *vjps)

    def apply(*args, **kwargs):
        return _apply(prim, *args, **kwargs)

    apply.__name__ = name
    return apply


# ---------------------------------------------------------------------------
# arithmetic

def _shape(x):
    return np.shape(x)


_ADD = _prim(
    "add",
    lambda a, b: np.add(a, b),
    lambda g, o, a, b: unbroadcast(g, _shape(a)),
    lambda g, o, a, b: unbroadcast(g, _shape(b)),
)
_SUB = _prim(
    "sub",
    lambda a, b: np.subtract(a, b),
    lambda g, o, a, b: unbroadcast(g, _shape(a)),
    lambda g, o, a, b: unbroadcast(-g, _shape(b)),
)
_MUL = _prim(
    "mul",
    lambda a, b: np.multiply(a, b),
    lambda g, o, a, b: unbroadcast(g * b, _shape(a)),
    lambda g, o, a, b: unbroadcast(g * a, _shape(b)),
)
_DIV = _prim(
    "div",
    lambda a, b: np.divide(a, b),
    lambda g, o, a, b: unbroadcast(g / b, _shape(a)),
    lambda g, o, a, b: unbroadcast(-g * o / b, _shape(b)),
)
_NEG = _prim("neg", lambda a: np.negative(a), lambda g, o, a: -g)
_POW = _prim(
    "power",
    lambda a, p: np.power(a, p),
    lambda g, o, a, p: g * p * np.power(a, p - 1),
)


def _mm_vjp_a(g, o, a, b):
    a, b = np.asarray(a), np.asarray(b)
    if b.ndim == 1:
        ga = g[..., :, None] * b if a.ndim > 1 else g * b
    else:
        ga = g @ np.swapaxes(b, -1, -2) if a.ndim > 1 else (g[..., None, :] @ np.swapaxes(b, -1, -2))[..., 0, :]
    return unbroadcast(ga, a.shape)


def _mm_vjp_b(g, o, a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim == 1:
        gb = a[:, None] * g[..., None, :] if b.ndim > 1 else g * a
    elif b.ndim == 1:
        gb = (np.swapaxes(a, -1, -2) @ g[..., :, None])[..., 0]
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return unbroadcast(gb, b.shape)


_MATMUL = _prim("matmul", lambda a, b: np.matmul(a, b), _mm_vjp_a, _mm_vjp_b)


def add(a, b):
    return _apply(_ADD, a, b)


def sub(a, b):
    return _apply(_SUB, a, b)


def mul(a, b):
    return _apply(_MUL, a, b)


def div(a, b):
    return _apply(_DIV, a, b)


def neg(a):
    return _apply(_NEG, a)


def power(a, p: float):
    return _apply(_POW, a, p=float(p))


def matmul(a, b):
    return _apply(_MATMUL, a, b)


# ---------------------------------------------------------------------------
# elementwise unary

_EXP = _prim("exp", np.exp, lambda g, o, a: g * o)
_LOG = _prim("log", np.log, lambda g, o, a: g / a)
_SQRT = _prim("sqrt", np.sqrt, lambda g, o, a: g * 0.5 / o)
_ARCSIN = _prim("arcsin", np.arcsin, lambda g, o, a: g / np.sqrt(1.0 - a * a))
_TANH = _prim("tanh", np.tanh, lambda g, o, a: g * (1.0 - o * o))
_NCDF = _prim("ncdf", special.std_normal_cdf, lambda g, o, a: g * special.std_normal_pdf(a))
_NPDF = _prim("npdf", special.std_normal_pdf, lambda g, o, a: -g * a * o)
_SOFTPLUS = _prim(
    "softplus",
    lambda a: np.logaddexp(0.0, a),
    lambda g, o, a: g * 0.5 * (1.0 + np.tanh(0.5 * np.asarray(a))),
)


def exp(a):
    return _apply(_EXP, a)


def log(a):
    return _apply(_LOG, a)


def sqrt(a):
    return _apply(_SQRT, a)


def arcsin(a):
    return _apply(_ARCSIN, a)


def tanh(a):
    return _apply(_TANH, a)


def ncdf(a):
    """Standard normal CDF; derivative is the standard normal PDF."""
    return _apply(_NCDF, a)


def npdf(a):
    return _apply(_NPDF, a)


def softplus(a):
    return _apply(_SOFTPLUS, a)


# ---------------------------------------------------------------------------
# clamps and selection (subgradient 0 inside the clamped region)

_MAXIMUM = _prim(
    "maximum",
    lambda a, lo: np.maximum(a, lo),
    lambda g, o, a, lo: g * (np.asarray(a) > lo),
)
_CLIP = _prim(
    "clip",
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda g, o, a, lo, hi: g * ((np.asarray(a) > lo) & (np.asarray(a) < hi)),
)
_WHERE = _prim(
    "where",
    lambda a, b, cond: np.where(cond, a, b),
    lambda g, o, a, b, cond: unbroadcast(np.where(cond, g, 0.0), _shape(a)),
    lambda g, o, a, b, cond: unbroadcast(np.where(cond, 0.0, g), _shape(b)),
)


def maximum(a, lo: float):
    """``max(a, lo)`` against a constant floor."""
    return _apply(_MAXIMUM, a, lo=float(lo))


def relu(a):
    return maximum(a, 0.0)


def clip(a, lo: float, hi: float):
    return _apply(_CLIP, a, lo=float(lo), hi=float(hi))


def where(cond, a, b):
    return _apply(_WHERE, a, b, cond=np.asarray(cond, dtype=bool))


# ---------------------------------------------------------------------------
# shape manipulation and reductions

def _sum_vjp(g, o, a, axis=None, keepdims=False):
    a = np.asarray(a)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape).copy()


_SUM = _prim("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)
_RESHAPE = _prim(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, o, a, shape: np.reshape(g, np.shape(a)),
)
_SWAP = _prim(
    "swap_last",
    lambda a: np.swapaxes(a, -1, -2),
    lambda g, o, a: np.swapaxes(g, -1, -2),
)
_BROADCAST = _prim(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape),
    lambda g, o, a, shape: unbroadcast(g, np.shape(a)),
)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _getitem_vjp(g, o, a, idx):
    out = np.zeros(np.shape(a))
    if _is_advanced(idx):
        np.add.at(out, idx, g)
    else:
        out[idx] += g
    return out


_GETITEM = _prim("getitem", lambda a, idx: np.asarray(a)[idx], _getitem_vjp)
_DIAGONAL = _prim(
    "diagonal",
    lambda a: np.diagonal(a, axis1=-2, axis2=-1).copy(),
    lambda g, o, a: _diag_embed_np(g),
)


def _diag_embed_np(v):
    v = np.asarray(v)
    n = v.shape[-1]
    out = np.zeros(v.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = v
    return out


_DIAG_EMBED = _prim(
    "diag_embed",
    _diag_embed_np,
    lambda g, o, a: np.diagonal(g, axis1=-2, axis2=-1).copy(),
)


def sum_(a, axis=None, keepdims: bool = False):
    return _apply(_SUM, a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return _apply(_RESHAPE, a, shape=tuple(shape))


def unsqueeze(a, axis: int):
    """Insert a length-one axis."""
    shape = list(np.shape(a))
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(axis, 1)
    return reshape(a, shape)


def swap_last(a):
    """Transpose of the last two axes."""
    return _apply(_SWAP, a)


def broadcast_to(a, shape):
    return _apply(_BROADCAST, a, shape=tuple(shape))


def getitem(a, idx):
    return _apply(_GETITEM, a, idx=idx)


def diagonal(a):
    """Diagonal of the last two axes."""
    return _apply(_DIAGONAL, a)


def diag_embed(v):
    """Inverse of :func:`diagonal`: vectors to diagonal matrices."""
    return _apply(_DIAG_EMBED, v)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(i):
    def vjp(g, o, *xs, axis):
        sizes = [np.shape(x)[axis] for x in xs]
        start = sum(sizes[:i])
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(start, start + sizes[i])
        return g[tuple(sl)]

    return vjp


def concatenate(xs, axis: int = -1):
    xs = list(xs)
    prim = _prim("concatenate", _concat_fwd, *[_concat_vjp(i) for i in range(len(xs))])
    return _apply(prim, *xs, axis=axis)


def _stack_vjp(i):
    def vjp(g, o, *xs, axis):
        return np.take(g, i, axis=axis)

    return vjp


def stack(xs, axis: int = 0):
    xs = list(xs)
    prim = _prim("stack", lambda *v, axis: np.stack(v, axis=axis), *[_stack_vjp(i) for i in range(len(xs))])
    return _apply(prim, *xs, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra

def _phi_lower(x):
    out = np.tril(x)
    idx = np.arange(x.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def _cholesky_vjp(g, L, a):
    # Ā = L^{-T} Φ(Lᵀ L̄) L^{-1}, symmetrized
    P = _phi_lower(np.swapaxes(L, -1, -2) @ g)
    Linv = np.linalg.inv(L)
    S = np.swapaxes(Linv, -1, -2) @ P @ Linv
    return 0.5 * (S + np.swapaxes(S, -1, -2))


_CHOLESKY = _prim("cholesky", np.linalg.cholesky, _cholesky_vjp)


def cholesky(a):
    """Lower Cholesky factor of the last two axes."""
    return _apply(_CHOLESKY, a)


# ---------------------------------------------------------------------------
# recording and differentiation

def record(f: Callable[[dict], Any], params: Mapping[str, Any]):
    """Evaluate ``f`` on tape-backed copies of ``params``.

    Returns ``(value, tape)`` where ``value`` is a float and ``tape.leaves``
    maps each parameter name to its leaf node.
    """
    tape = Tape()
    leaves = {k: tape.variable(v, name=k) for k, v in params.items()}
    out = f(leaves)
    if not isinstance(out, Var):
        out = tape.variable(out)
    if out.value.size != 1:
        raise ValueError(f"record expects a scalar output, got shape {out.value.shape}")
    tape.output = out
    return float(out.value.reshape(())), tape


def gradient(tape: Tape, wrt: Mapping[str, Any] | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from ``tape.output``; returns gradients keyed like the leaves."""
    if tape.output is None:
        raise ValueError("tape has no recorded output")
    n = len(tape.nodes)
    grads: list[np.ndarray | None] = [None] * n
    grads[tape.output.index] = np.ones_like(tape.output.value)
    for i in range(n - 1, -1, -1):
        node = tape.nodes[i]
        g = grads[i]
        if g is None or node.prim is None:
            continue
        grads[i] = None  # interior cotangents are no longer needed
        # one reduction screens the common case; the full check names the node
        if not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at node {i} ({node.prim.name})")
        vals = [value_of(x) for x in node.inputs]
        for j, x in enumerate(node.inputs):
            if not isinstance(x, Var):
                continue
            gj = np.asarray(node.prim.vjps[j](g, node.value, *vals, **node.kwargs), dtype=float)
            prev = grads[x.index]
            grads[x.index] = gj if prev is None else prev + gj
    names = list(wrt.keys()) if wrt is not None else list(tape.leaves)
    out = {}
    for name in names:
        leaf = tape.leaves[name]
        g = grads[leaf.index]
        out[name] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
    return out


def finite_difference_check(
    f: Callable[[dict], Any],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    mode: str = "array",
    floor: float = 1e-6,
) -> float:
    """Largest relative deviation between reverse-mode and central differences.

    ``f`` must accept both plain arrays and recorded variables.

    With ``mode="array"`` the deviation of a parameter array is
    ``max_i |g_i - d_i| / max_i |d_i|`` and the result is the worst array.
    With ``mode="coordinate"`` coordinate ``i`` contributes
    ``|g_i - d_i| / max(|g_i|, |d_i|, s)`` with ``s = floor * max_j |d_j|``
    over all arrays, so that derivatives below the difference quotient's
    round-off level do not dominate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if mode not in ("array", "coordinate"):
        raise ValueError(f"unknown mode {mode!r}")
    _, tape = record(f, params)
    grad = gradient(tape)
    fd = {}
    for name, val in params.items():
        base = np.array(val, dtype=float)
        d = np.zeros_like(base)
        flat = base.reshape(-1)
        dflat = d.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(np.asarray(f({**params, name: base})).reshape(()))
            flat[i] = orig - step
            fm = float(np.asarray(f({**params, name: base})).reshape(()))
            flat[i] = orig
            dflat[i] = (fp - fm) / (2.0 * step)
        fd[name] = d
    worst = 0.0
    if mode == "array":
        for name in params:
            g, d = grad[name].reshape(-1), fd[name].reshape(-1)
            if not g.size:
                continue
            err = float(np.max(np.abs(g - d)))
            ref = float(np.max(np.abs(d)))
            worst = max(worst, err / ref if ref > 0 else err)
        return worst
    scale = max(float(np.max(np.abs(d))) if d.size else 0.0 for d in fd.values())
    for name in params:
        g, d = grad[name].reshape(-1), fd[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(d)), floor * scale)
        denom = np.where(denom > 0, denom, 1.0)
        if g.size:
            worst = max(worst, float(np.max(np.abs(g - d) / denom)))
    return worst
