"""Dense numeric kernels and a small reverse-mode tape.

Every exported op accepts plain ``numpy`` arrays or :class:`Var` handles.
With arrays only, the op is a pure kernel and returns an array. If any
argument is a ``Var``, the op is recorded on that variable's tape and a
``Var`` comes back, so the same model code serves inference and training.

Arrays may carry leading batch axes; "rows" and "cols" always refer to the
last two axes.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Var:
    """Handle to one node on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        return self.tape.grad(self)

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple, backward: Callable | None):
        self.parents = parents  # tape indices, or None for constant inputs
        self.backward = backward  # g -> tuple of parent grads


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops run, so list order is already a topological
    order; :meth:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.adjoints: list[np.ndarray | None] = []

    def var(self, value) -> Var:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        return self._push(value, (), None)

    def _push(self, value, parents, backward) -> Var:
        self.nodes.append(_Node(parents, backward))
        self.adjoints.append(None)
        return Var(value, self, len(self.nodes) - 1)

    def backward(self, out: Var, seed=None) -> None:
        if out.tape is not self:
            raise ValueError("output variable belongs to another tape")
        if seed is None:
            if out.value.size != 1:
                raise ShapeError(f"backward from non-scalar of shape {out.value.shape} needs a seed")
            seed = np.ones_like(out.value)
        self.adjoints = [None] * len(self.nodes)
        self.adjoints[out.index] = np.asarray(seed, dtype=out.value.dtype)
        for i in range(out.index, -1, -1):
            g = self.adjoints[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if p is None or gp is None:
                    continue
                cur = self.adjoints[p]
                self.adjoints[p] = gp if cur is None else cur + gp

    def grad(self, v: Var) -> np.ndarray:
        g = self.adjoints[v.index]
        return np.zeros_like(v.value) if g is None else g


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot mix variables from different tapes")
    return tape


def _apply(forward, backward, *args):
    """Run ``forward`` on raw values; record on a tape when any arg is a Var."""
    vals = tuple(value_of(a) for a in args)
    out = forward(*vals)
    tape = _tape_of(args)
    if tape is None:
        return out
    parents = tuple(a.index if isinstance(a, Var) else None for a in args)
    return tape._push(out, parents, lambda g: backward(g, out, *vals))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x) -> tuple:
    return np.shape(value_of(x))


# --- elementwise -----------------------------------------------------------

def add(a, b):
    return _apply(
        np.add,
        lambda g, out, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))),
        a, b,
    )


def neg(a):
    return _apply(np.negative, lambda g, out, a: (-g,), a)


def mul(a, b):
    return _apply(
        np.multiply,
        lambda g, out, a, b: (_unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))),
        a, b,
    )


def scale(a, c: float):
    return _apply(lambda a: a * c, lambda g, out, a: (g * c,), a)


def gelu(a):
    """GELU, tanh approximation."""

    def fwd(x):
        return 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + 0.044715 * x**3)))

    def bwd(g, out, x):
        u = SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        t = np.tanh(u)
        du = SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _apply(fwd, bwd, a)


def silu(a):
    def fwd(x):
        return x / (1.0 + np.exp(-x))

    def bwd(g, out, x):
        s = 1.0 / (1.0 + np.exp(-x))
        return (g * (s + x * s * (1.0 - s)),)

    return _apply(fwd, bwd, a)


ACTIVATIONS: dict[str, Callable] = {"gelu": gelu, "silu": silu}


# --- linear algebra / layout ----------------------------------------------

def matmul(a, b):
    sa, sb = _shape(a), _shape(b)
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul dimension mismatch: {sa} x {sb}")

    def bwd(g, out, a, b):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply(np.matmul, bwd, a, b)


def transpose(a):
    return _apply(
        lambda x: np.swapaxes(x, -1, -2),
        lambda g, out, x: (np.swapaxes(g, -1, -2),),
        a,
    )


def split_heads(a, n_heads: int):
    """(..., T, d) -> (..., h, T, d/h)."""
    d = _shape(a)[-1]
    if d % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide width {d}")

    def fwd(x):
        x = x.reshape(x.shape[:-1] + (n_heads, d // n_heads))
        return np.swapaxes(x, -3, -2)

    def bwd(g, out, x):
        return (np.swapaxes(g, -3, -2).reshape(x.shape),)

    return _apply(fwd, bwd, a)


def merge_heads(a):
    """(..., h, T, dh) -> (..., T, h*dh)."""

    def fwd(x):
        x = np.swapaxes(x, -3, -2)
        return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))

    def bwd(g, out, x):
        h, dh = x.shape[-3], x.shape[-1]
        g = g.reshape(g.shape[:-1] + (h, dh))
        return (np.swapaxes(g, -3, -2),)

    return _apply(fwd, bwd, a)


def concat_rows(parts: Sequence):
    """Stack blocks along the row axis (axis -2)."""
    parts = list(parts)
    sizes = [_shape(p)[-2] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def fwd(*xs):
        lead = np.broadcast_shapes(*(x.shape[:-2] for x in xs))
        xs = [np.broadcast_to(x, lead + x.shape[-2:]) for x in xs]
        return np.concatenate(xs, axis=-2)

    def bwd(g, out, *xs):
        return tuple(
            _unbroadcast(g[..., bounds[i]:bounds[i + 1], :], x.shape) for i, x in enumerate(xs)
        )

    return _apply(fwd, bwd, *parts)


def take_rows(a, start: int, stop: int | None = None):
    """Rows ``start:stop`` along axis -2."""

    def fwd(x):
        return x[..., start:stop, :]

    def bwd(g, out, x):
        full = np.zeros_like(x)
        full[..., start:stop, :] = g
        return (full,)

    return _apply(fwd, bwd, a)


def embedding(table, ids):
    ids = np.asarray(ids)

    def fwd(t):
        return t[ids]

    def bwd(g, out, t):
        full = np.zeros_like(t)
        np.add.at(full, ids, g)
        return (full,)

    return _apply(fwd, bwd, table)


# --- reductions / normalisation -------------------------------------------

def softmax_rows(s):
    """Row softmax over the last axis with per-row max subtraction."""

    def fwd(x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def bwd(g, y, x):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply(fwd, bwd, s)


def rms_norm(x, gain, eps: float = 1e-6):
    def fwd(x, w):
        r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
        return x * r * w

    def bwd(g, out, x, w):
        r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
        xhat = x * r
        gw = g * w
        gx = r * (gw - xhat * (gw * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, w.shape)

    return _apply(fwd, bwd, x, gain)


def mean(a):
    return _apply(
        lambda x: np.asarray(x.mean()),
        lambda g, out, x: (np.full_like(x, g / x.size),),
        a,
    )


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    labels = np.asarray(labels)

    def fwd(z):
        zmax = z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
        picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
        return np.asarray((lse - picked).mean())

    def bwd(g, out, z):
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return (g * p / labels.size,)

    return _apply(fwd, bwd, logits)


# --- composites -------------------------------------------------------------

def ffn_forward(a, w1, w2, activation: str = "gelu"):
    """``W2(Act(W1 a))`` applied row-wise, bias-free."""
    d = _shape(a)[-1]
    if _shape(w1)[0] != d or _shape(w2)[-1] != d or _shape(w1)[-1] != _shape(w2)[0]:
        raise ShapeError(
            f"ffn dimension mismatch: input {_shape(a)}, w1 {_shape(w1)}, w2 {_shape(w2)}"
        )
    return matmul(ACTIVATIONS[activation](matmul(a, w1)), w2)


# --- gradient verification --------------------------------------------------

def grad_check(
    f: Callable[[Mapping], object],
    theta: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    n_samples: int | None = 16,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> tuple[float, dict[str, float]]:
    """Compare tape gradients against central differences.

    ``f`` maps a parameter mapping to a scalar; it is called once with tape
    variables and then repeatedly with perturbed float64 arrays. Returns the
    overall max relative error and the per-parameter maxima. ``n_samples``
    coordinates are drawn per parameter (``None`` checks every coordinate).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    tape = Tape()
    vars_ = {k: tape.var(v) for k, v in theta.items()}
    loss = f(vars_)
    if not np.isfinite(value_of(loss)).all():
        raise NonFiniteError(f"non-finite loss {value_of(loss)} at the unperturbed point")
    tape.backward(loss)

    def at(name, idx, delta):
        p = dict(theta)
        moved = theta[name].copy()
        moved[idx] += delta
        p[name] = moved
        val = float(value_of(f(p)))
        if not math.isfinite(val):
            raise NonFiniteError(f"non-finite loss perturbing {name}{idx}")
        return val

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name in names if names is not None else theta:
        analytic = vars_[name].grad
        size = theta[name].size
        if n_samples is None or n_samples >= size:
            flat = np.arange(size)
        else:
            flat = rng.choice(size, n_samples, replace=False)
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(k, theta[name].shape)
            numeric = (at(name, idx, eps) - at(name, idx, -eps)) / (2 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
        per_param[name] = worst
    return max(per_param.values(), default=0.0), per_param
