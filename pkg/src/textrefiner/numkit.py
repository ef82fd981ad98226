"""Dense float64 matrix ops with reverse-mode gradients.

Every op takes ``DiffValue`` or plain arrays (wrapped as constants) and
returns a ``DiffValue``. Calling ``backward()`` on a 1x1 result fills
``.grad`` on every reachable value that requires a gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array (scalars become 1x1, vectors 1xn)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


class DiffValue:
    """A matrix node in the gradient graph."""

    __slots__ = ("value", "grad", "requires_grad", "op", "flags", "_parents", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = True,
        *,
        parents: Sequence["DiffValue"] = (),
        op: str = "leaf",
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = as_matrix(value)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.op = op
        self.flags: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 value, got {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def backward(self) -> None:
        if self.value.shape != (1, 1):
            raise DimensionError(f"backward() starts from a 1x1 scalar, got {self.shape}")
        if not self.requires_grad:
            return
        order: list[DiffValue] = []
        seen: set[int] = set()
        stack: list[tuple[DiffValue, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"DiffValue(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return mat_mul(self, other)


def const(x) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    return DiffValue(x, requires_grad=False)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, DiffValue) else as_matrix(x)


def _node(value, parents: Iterable[DiffValue], op: str, backward) -> DiffValue:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return DiffValue(value, needs, parents=parents, op=op, backward=backward if needs else None)


def _acc(p: DiffValue, g: np.ndarray) -> None:
    if p.requires_grad:
        p.grad += g


# -- linear algebra -----------------------------------------------------------


def mat_mul(a, b) -> DiffValue:
    a, b = const(a), const(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"mat_mul: inner dimensions differ, {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _node(a.value @ b.value, (a, b), "mat_mul", bw)


def transpose(x) -> DiffValue:
    x = const(x)

    def bw(g):
        _acc(x, g.T)

    return _node(x.value.T.copy(), (x,), "transpose", bw)


def add(a, b) -> DiffValue:
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> DiffValue:
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes differ, {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.value - b.value, (a, b), "sub", bw)


def add_row(x, row) -> DiffValue:
    """Add a 1xn row to every row of an mxn matrix."""
    x, row = const(x), const(row)
    if row.shape != (1, x.shape[1]):
        raise DimensionError(f"add_row: row {row.shape} does not fit matrix {x.shape}")

    def bw(g):
        _acc(x, g)
        if row.requires_grad:
            row.grad += g.sum(axis=0, keepdims=True)

    return _node(x.value + row.value, (x, row), "add_row", bw)


def scale(x, c: float) -> DiffValue:
    x = const(x)
    c = float(c)

    def bw(g):
        _acc(x, c * g)

    return _node(c * x.value, (x,), "scale", bw)


def mul_const(x, m) -> DiffValue:
    """Elementwise product with a constant matrix of the same shape."""
    x = const(x)
    m = as_matrix(m)
    if m.shape != x.shape:
        raise DimensionError(f"mul_const: shapes differ, {x.shape} vs {m.shape}")

    def bw(g):
        _acc(x, g * m)

    return _node(x.value * m, (x,), "mul_const", bw)


def concat_cols(a, b) -> DiffValue:
    a, b = const(a), const(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    p = a.shape[1]

    def bw(g):
        _acc(a, g[:, :p])
        _acc(b, g[:, p:])

    return _node(np.concatenate([a.value, b.value], axis=1), (a, b), "concat_cols", bw)


# -- reductions ---------------------------------------------------------------


def sum_all(x) -> DiffValue:
    x = const(x)

    def bw(g):
        _acc(x, np.full_like(x.value, g[0, 0]))

    return _node(np.array([[x.value.sum()]]), (x,), "sum_all", bw)


def mean_all(x) -> DiffValue:
    x = const(x)
    n = x.value.size

    def bw(g):
        _acc(x, np.full_like(x.value, g[0, 0] / n))

    return _node(np.array([[x.value.sum() / n]]), (x,), "mean_all", bw)


def abs_(x) -> DiffValue:
    x = const(x)

    def bw(g):
        # sign(0) == 0 gives the zero subgradient at ties
        _acc(x, g * np.sign(x.value))

    return _node(np.abs(x.value), (x,), "abs", bw)


def pick(x, index: Sequence[int]) -> DiffValue:
    """Gather one column per row: out[i, 0] = x[i, index[i]]."""
    x = const(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: need {x.shape[0]} indices, got shape {idx.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        if x.requires_grad:
            np.add.at(x.grad, (rows, idx), g[:, 0])

    return _node(x.value[rows, idx].reshape(-1, 1), (x,), "pick", bw)


# -- row-wise nonlinear ops ---------------------------------------------------


def degenerate_rows(x) -> np.ndarray:
    """Boolean mask of rows whose Euclidean norm is below NORM_EPS."""
    return np.linalg.norm(value_of(x), axis=1) < NORM_EPS


def row_l2_normalize(x) -> DiffValue:
    """Unit-normalize each row. Degenerate rows pass through and are flagged."""
    x = const(x)
    norms = np.linalg.norm(x.value, axis=1, keepdims=True)
    bad = norms[:, 0] < NORM_EPS
    safe = np.where(bad[:, None], 1.0, norms)
    y = x.value / safe
    y[bad] = x.value[bad]

    def bw(g):
        if x.requires_grad:
            dot = np.sum(g * y, axis=1, keepdims=True)
            gx = (g - y * dot) / safe
            gx[bad] = g[bad]
            x.grad += gx

    out = _node(y, (x,), "row_l2_normalize", bw)
    out.flags = bad
    return out


def cosine_sim(a, b) -> DiffValue:
    """Pairwise cosine similarity; rows with zero norm give 0 and are flagged."""
    a, b = const(a), const(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim: feature dims differ, {a.shape} vs {b.shape}")
    na, nb = row_l2_normalize(a), row_l2_normalize(b)
    if na.flags.any():
        na = mul_const(na, np.repeat((~na.flags)[:, None], a.shape[1], axis=1).astype(np.float64))
    if nb.flags.any():
        nb = mul_const(nb, np.repeat((~nb.flags)[:, None], b.shape[1], axis=1).astype(np.float64))
    out = mat_mul(na, transpose(nb))
    out.op = "cosine_sim"
    out.flags = np.logical_or.outer(degenerate_rows(a), degenerate_rows(b))
    return out


def row_softmax(x) -> DiffValue:
    x = const(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            x.grad += y * (g - np.sum(g * y, axis=1, keepdims=True))

    return _node(y, (x,), "row_softmax", bw)


def row_log_softmax(x) -> DiffValue:
    x = const(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse

    def bw(g):
        if x.requires_grad:
            x.grad += g - np.exp(y) * g.sum(axis=1, keepdims=True)

    return _node(y, (x,), "row_log_softmax", bw)


def layer_norm_row(x, gain, bias) -> DiffValue:
    x, gain, bias = const(x), const(gain), const(bias)
    h = x.shape[1]
    if gain.shape != (1, h) or bias.shape != (1, h):
        raise DimensionError(f"layer_norm_row: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    y = xhat * gain.value + bias.value

    def bw(g):
        if gain.requires_grad:
            gain.grad += np.sum(g * xhat, axis=0, keepdims=True)
        if bias.requires_grad:
            bias.grad += g.sum(axis=0, keepdims=True)
        if x.requires_grad:
            gh = g * gain.value
            x.grad += inv * (
                gh - gh.mean(axis=1, keepdims=True) - xhat * np.mean(gh * xhat, axis=1, keepdims=True)
            )

    return _node(y, (x, gain, bias), "layer_norm_row", bw)


def gelu(x) -> DiffValue:
    """GELU, tanh approximation."""
    x = const(x)
    v = x.value
    u = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(u)
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
            x.grad += g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)

    return _node(y, (x,), "gelu", bw)


def relu(x) -> DiffValue:
    x = const(x)
    mask = x.value > 0

    def bw(g):
        _acc(x, g * mask)

    return _node(np.where(mask, x.value, 0.0), (x,), "relu", bw)


ACTIVATIONS: dict[str, Callable[[DiffValue], DiffValue]] = {"gelu": gelu, "relu": relu}


# -- gradient checking --------------------------------------------------------


def grad_check(f: Callable[[DiffValue], DiffValue], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a DiffValue to a 1x1 DiffValue. The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = as_matrix(value_of(x)).copy()
    leaf = DiffValue(base.copy())
    out = f(leaf)
    if not np.isfinite(out.value).all():
        raise GradCheckError("f is not finite at x", None)
    out.backward()
    analytic = leaf.grad.copy()

    worst = 0.0
    for idx in np.ndindex(*base.shape):
        probe = base.copy()
        probe[idx] = base[idx] + h
        fp = f(DiffValue(probe, requires_grad=False)).item()
        probe[idx] = base[idx] - h
        fm = f(DiffValue(probe, requires_grad=False)).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"f is not finite when perturbing entry {idx}", idx)
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
