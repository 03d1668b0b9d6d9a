"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a flat row-major float64 array wrapped in a Tensor node.
Operations build a dynamic computation graph; backward() walks it once in
reverse topological order and accumulates gradients into every
requires_grad leaf. Kernels are numpy; the graph is plain Python.

Broadcasting is deliberately narrow: a Python scalar against any tensor,
and the leading-batch expansion of a (C_out, C_in) matrix against a
(B, C_out, C_in) tensor. Everything else must match shapes exactly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


def _check_finite(arr: Array, op: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """A node in the computation graph holding a float64 array.

    grad is allocated lazily on the first backward pass and accumulates
    across repeated backward calls until zero_grad() is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None

    @classmethod
    def _from_op(
        cls,
        data: Array,
        parents: tuple["Tensor", ...],
        grad_fn: Callable[[Array], Sequence[Optional[Array]]],
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        """A defensive copy of the value array."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (shares the underlying array)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._grad_fn = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _accumulate(node: Tensor, g: Array) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar; accumulates into .grad fields."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# shape helpers


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _batch_broadcast(a: Tensor, b: Tensor) -> Optional[int]:
    """Return which operand (0 or 1) needs leading-batch expansion, or None.

    The only tensor-tensor broadcast allowed besides exact match: a
    (C_out, C_in) matrix against a (B, C_out, C_in) batch.
    """
    if a.shape == b.shape:
        return None
    if a.ndim == 3 and b.ndim == 2 and a.shape[1:] == b.shape:
        return 1
    if b.ndim == 3 and a.ndim == 2 and b.shape[1:] == a.shape:
        return 0
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _binary(a: Tensor, b, fwd, grad_a, grad_b, op: str) -> Tensor:
    if isinstance(b, (int, float)):
        return _scalar_binary(a, float(b), fwd, grad_a, op)
    _require(isinstance(b, Tensor), f"{op} expects a Tensor or scalar operand")
    which = _batch_broadcast(a, b)

    out_data = fwd(a.data, b.data)

    def grad_fn(g: Array):
        ga = grad_a(g, a.data, b.data)
        gb = grad_b(g, a.data, b.data)
        if which == 0 and ga is not None:
            ga = ga.sum(axis=0)
        if which == 1 and gb is not None:
            gb = gb.sum(axis=0)
        return ga, gb

    return Tensor._from_op(out_data, (a, b), grad_fn, op)


def _scalar_binary(a: Tensor, s: float, fwd, grad_a, op: str) -> Tensor:
    out_data = fwd(a.data, s)

    def grad_fn(g: Array):
        return (grad_a(g, a.data, s),)

    return Tensor._from_op(out_data, (a,), grad_fn, op)


# ---------------------------------------------------------------------------
# elementwise family


def add(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x + y,
        lambda g, x, y: g,
        lambda g, x, y: g if isinstance(y, np.ndarray) else None,
        "add",
    )


def sub(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x - y,
        lambda g, x, y: g,
        lambda g, x, y: -g if isinstance(y, np.ndarray) else None,
        "sub",
    )


def mul(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x * y,
        lambda g, x, y: g * y,
        lambda g, x, y: g * x if isinstance(y, np.ndarray) else None,
        "mul",
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _scalar_binary(a, float(s), lambda x, c: x * c, lambda g, x, c: g * c, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # relu'(0) := 0
    return Tensor._from_op(
        np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu"
    )


def sigmoid(a: Tensor) -> Tensor:
    # Numerically symmetric form; saturates cleanly at both tails.
    with np.errstate(over="ignore"):
        y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                     np.exp(a.data) / (1.0 + np.exp(a.data)))
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log needs strictly positive inputs")
    x = a.data
    return Tensor._from_op(np.log(x), (a,), lambda g: (g / x,), "log")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == 2 and b.ndim == 2,
             f"matmul needs two matrices, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0],
             f"matmul inner extents differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g: Array):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    _require(a.ndim == 2, f"transpose needs a matrix, got {a.shape}")
    return Tensor._from_op(
        np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose"
    )


def bmm(h: Tensor, w_hat: Tensor) -> Tensor:
    """Per-batch h[b] @ w_hat[b].T: (B,N,C_in) x (B,C_out,C_in) -> (B,N,C_out)."""
    _require(h.ndim == 3 and w_hat.ndim == 3,
             f"bmm needs rank-3 operands, got {h.shape} and {w_hat.shape}")
    _require(h.shape[0] == w_hat.shape[0],
             f"bmm batch extents differ: {h.shape} vs {w_hat.shape}")
    _require(h.shape[2] == w_hat.shape[2],
             f"bmm channel extents differ: {h.shape} vs {w_hat.shape}")
    hd, wd = h.data, w_hat.data
    out = np.einsum("bnc,boc->bno", hd, wd)

    def grad_fn(g: Array):
        gh = np.einsum("bno,boc->bnc", g, wd)
        gw = np.einsum("bno,bnc->boc", g, hd)
        return gh, gw

    return Tensor._from_op(out, (h, w_hat), grad_fn, "bmm")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in shape)
    _require(int(np.prod(new_shape)) == a.size,
             f"cannot reshape {a.shape} to {new_shape}")
    old_shape = a.shape
    return Tensor._from_op(
        a.data.reshape(new_shape), (a,),
        lambda g: (g.reshape(old_shape),), "reshape",
    )


def gap(z: Tensor) -> Tensor:
    """Global average pooling: (B,C,H,W) -> (B,C); rank-2 passes through."""
    if z.ndim == 2:
        return z
    if z.ndim != 4:
        raise ShapeError(f"gap needs rank 2 or rank 4 input, got {z.shape}")
    b, c, h, w = z.shape
    out = z.data.mean(axis=(2, 3))

    def grad_fn(g: Array):
        gz = np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w))
        return (np.ascontiguousarray(gz),)

    return Tensor._from_op(out, (z,), grad_fn, "gap")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector along the last axis of x."""
    _require(b.ndim == 1 and x.shape[-1] == b.shape[0],
             f"bias of shape {b.shape} does not fit input {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g: Array):
        return g, g.sum(axis=lead) if lead else g

    return Tensor._from_op(x.data + b.data, (x, b), grad_fn, "add_bias")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.sum()), (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),), "sum",
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    _require(a.shape == b.shape, f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.size

    def grad_fn(g: Array):
        base = (2.0 / n) * diff * g
        return base, -base

    return Tensor._from_op(np.asarray((diff * diff).mean()), (a, b), grad_fn, "mse")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup into a (num_rows, dim) table; gradient scatter-adds."""
    _require(table.ndim == 2, f"embedding table must be a matrix, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be a flat sequence, got shape {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.shape[0]}): {idx.tolist()}"
        )
    rows, dim = table.shape

    def grad_fn(g: Array):
        gt = np.zeros((rows, dim))
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._from_op(table.data[idx], (table,), grad_fn, "embedding")


def straight_through_threshold(soft: Tensor, delta: float) -> Tensor:
    """Forward: 1.0 where soft >= delta else 0.0; backward: identity.

    The straight-through estimator: the hard value is used forward while
    the gradient flows as if the output were the soft value itself.
    """
    hard = np.where(soft.data >= delta, 1.0, 0.0)
    return Tensor._from_op(hard, (soft,), lambda g: (g,), "straight_through")
