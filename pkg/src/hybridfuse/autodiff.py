"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Tensors hold up to three axes (batch x T x D). The only broadcasting is
over leading axes: an operand whose shape is a suffix of the other's
(a bias row, an unbatched weight) is repeated over the missing leading
axes, and its gradient is summed back over them.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul_elementwise(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    @property
    def T(self):
        return transpose_last_two(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, name="") -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, name=name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo leading-axis broadcasting by summing over the extra axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")

    def bw(g):
        return g, _sum_to(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")

    def bw(g):
        return g, -_sum_to(g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul_elementwise: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), bw)


def mul_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale each row of ``x`` (..., T, D) by the matching entry of ``w`` (..., T)."""
    if w.shape != x.shape[:-1]:
        raise ValueError(f"mul_rows: weights {w.shape} do not match rows of {x.shape}")

    def bw(g):
        return g * w.data[..., None], np.sum(g * x.data, axis=-1)

    return _result(x.data * w.data[..., None], (x, w), bw)


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: (g * 0.5 / y,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a missing batch axis is shared."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul: batch mismatch {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold the leading axes into one large product
        return _matmul_shared(a, b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _sum_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def _matmul_shared(a: Tensor, b: Tensor) -> Tensor:
    a2 = a.data.reshape(-1, a.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],)), (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


def transpose_last_two(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_last_axis: leading shapes differ {a.shape} vs {b.shape}")
    d = a.shape[-1]

    def bw(g):
        return g[..., :d], g[..., d:]

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), bw)


def take_last(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of the last axis, shape x.shape[:-1]."""

    def bw(g):
        out = np.zeros_like(x.data)
        out[..., j] = g
        return (out,)

    return _result(x.data[..., j], (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _result(np.sum(x.data), (x,), lambda g: (np.full_like(x.data, g),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the row (T) axis, keeping it: (..., T, D) -> (..., 1, D)."""
    n = x.shape[-2]

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(np.mean(x.data, axis=-2, keepdims=True), (x,), bw)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """(..., 1, D) -> (..., n, D)."""
    if x.shape[-2] != 1:
        raise ValueError(f"repeat_rows expects a single row, got {x.shape}")
    shape = x.shape[:-2] + (n, x.shape[-1])

    def bw(g):
        return (np.sum(g, axis=-2, keepdims=True),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def pool_rows(x: Tensor, r: int) -> Tensor:
    """Mean of each run of ``r`` consecutive rows: (..., T, D) -> (..., T // r, D)."""
    t, d = x.shape[-2:]
    if r < 1 or t % r:
        raise ValueError(f"pool_rows: {t} rows are not a multiple of {r}")
    lead = x.shape[:-2]
    y = x.data.reshape(lead + (t // r, r, d)).mean(axis=-2)

    def bw(g):
        return (np.repeat(g / r, r, axis=-2),)

    return _result(y, (x,), bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor, temperature_scale: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``temperature_scale * x``."""
    if temperature_scale <= 0:
        raise ValueError("temperature_scale must be positive")
    z = x.data * temperature_scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (temperature_scale * y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x.data - m), axis=-1, keepdims=True))
    y = x.data - lse

    def bw(g):
        return (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),)

    return _result(y, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
