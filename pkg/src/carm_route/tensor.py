"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every differentiable op computes its forward value with numpy and, when a
:class:`Tape` is active and at least one input requires a gradient, appends a
node holding a closure that maps the output gradient to input gradients.
Nodes are appended in creation order, so the tape is topologically sorted by
construction and :meth:`Tape.backward` is a single reverse sweep.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NoFeasibleActionError(RuntimeError):
    """Every entry of a softmax row is masked."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name", "__weakref__")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    Tapes are thread-confined; nesting pushes a new tape and the innermost one
    records.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        out.node_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf reachable from ``loss``.

        Gradients from multiple uses of the same tensor are summed.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].out is not loss:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.is_leaf:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {leaves[k]: grads[k] for k in leaves}


def no_grad_active() -> bool:
    return _active_tape() is None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take(a, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def gather_rows(x, index: np.ndarray) -> Tensor:
    """``x[b, index[b, p]]`` for x of shape (B, N, d) and index (B, P) -> (B, P, d)."""
    x = as_tensor(x)
    b = np.arange(x.shape[0])[:, None]
    return take(x, (b, index))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        a2 = ad if ad.ndim > 1 else ad[None, :]
        b2 = bd if bd.ndim > 1 else bd[:, None]
        # restore the axes numpy drops for 1-d operands
        g2 = np.reshape(g, np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1]))
        ga = gb = None
        if b.requires_grad:
            if b2.ndim == 2 and a2.ndim > 2:
                # weight shared over leading dims: one GEMM
                gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape)
            gb = gb.reshape(bd.shape)
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# fused neural-net primitives


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``logits + mask`` along ``axis``.

    ``mask`` holds 0 (keep) or -inf (drop), or is a boolean keep-array. The
    row max is taken over kept entries only, and dropped entries come out as
    exact zeros.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask)
        keep = mask if mask.dtype == bool else mask == 0
        keep = np.broadcast_to(keep, x.shape)
        if not keep.any(axis=axis).all():
            raise NoFeasibleActionError("every entry of a softmax row is masked")
        shifted = np.where(keep, x, -np.inf)
    else:
        shifted = x
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), backward)


def instance_norm(x, weight=None, bias=None, eps: float = NORM_EPS) -> Tensor:
    """Normalize (B, N, d) input over the N axis per instance and feature.

    Uses population variance; ``eps`` is added to the variance so constant
    columns map to zero instead of dividing by zero.
    """
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-2, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-2, keepdims=True)
        gx = (g * xhat).mean(axis=-2, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, (x,), backward)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# parameter checkpoints


def params_to_records(params: Mapping[str, Tensor]) -> list[dict]:
    return [
        {"name": name, "shape": list(params[name].shape), "values": params[name].data.reshape(-1).tolist()}
        for name in sorted(params)
    ]


def params_from_records(records: Iterable[Mapping]) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, rec in enumerate(records):
        try:
            name, shape, values = rec["name"], tuple(rec["shape"]), rec["values"]
        except KeyError as exc:
            raise ValueError(f"parameter record {i} lacks field {exc}") from None
        data = np.asarray(values, dtype=DTYPE)
        if int(np.prod(shape)) != data.size:
            raise ValueError(f"parameter {name!r}: shape {shape} does not match {data.size} values")
        params[name] = parameter(data.reshape(shape), name=name)
    return params


def save_params(params: Mapping[str, Tensor], path: str | Path, extra: Mapping | None = None) -> None:
    doc = dict(extra or {})
    doc["params"] = params_to_records(params)
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    params = params_from_records(doc.pop("params"))
    return params, doc
