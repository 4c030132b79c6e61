"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the :class:`Tape` of its
inputs. A node stores the ids of its parents and a closure holding exactly the
activations its backward rule needs. Node ids grow monotonically, so a reverse
sweep over the node list is a valid reverse topological order.

Two precisions are supported per tape: ``"wide"`` (float64, used by the
finite-difference suites) and ``"narrow"`` (float32, used for training).

Broadcasting is restricted to leading batch dimensions: the shape of the
smaller operand must be a suffix of the larger one.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

PRECISIONS = {"wide": np.float64, "narrow": np.float32}

# NaN/Inf screening after every forward op; enabled by SELFFUSION_DEBUG=1.
DEBUG = os.environ.get("SELFFUSION_DEBUG", "") not in ("", "0")

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Parameter:
    """A named learnable array. ``data`` is the float64 master copy."""

    name: str
    data: np.ndarray
    init: str = "zeros"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    backward: BackwardFn | None
    shape: tuple[int, ...]


class Tensor:
    """Immutable array value, optionally attached to a node of a tape."""

    __slots__ = ("data", "tape", "node", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of differentiable operations.

    ``record=False`` turns the tape into an inference context: parameters are
    still materialized at the tape precision but no nodes are appended.
    """

    def __init__(self, precision: str = "narrow", record: bool = True):
        if precision not in PRECISIONS:
            raise ContractError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.record = record
        self.nodes: list[Node] = []
        self.flops = 0
        # when a list, piecewise ops append a checksum of their active branch
        self.branch_log: list[int] | None = None
        self._variables: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, kind: str, parents: tuple[int, ...], backward: BackwardFn | None,
                shape: tuple[int, ...]) -> int:
        node_id = len(self.nodes)
        assert all(p < node_id for p in parents)
        self.nodes.append(Node(kind, parents, backward, shape))
        return node_id

    def constant(self, array) -> Tensor:
        """Wrap ``array`` as a non-differentiable input at the tape precision."""
        return Tensor(np.asarray(array, dtype=self.dtype), tape=self)

    def input(self, array, requires_grad: bool = True) -> Tensor:
        """Create a leaf tensor; gradients are reported by node id."""
        data = np.array(array, dtype=self.dtype)
        if not (requires_grad and self.record):
            return Tensor(data, tape=self)
        node = self._append("leaf", (), None, data.shape)
        return Tensor(data, tape=self, node=node, requires_grad=True)

    def variable(self, param: Parameter) -> Tensor:
        """Leaf tensor for ``param``; repeated calls return the same leaf."""
        var = self._variables.get(param.name)
        if var is None:
            var = self.input(param.data, requires_grad=True)
            self._variables[param.name] = var
        return var

    @property
    def variables(self) -> Mapping[str, Tensor]:
        return self._variables

    def gradients(self, loss: Tensor) -> list[np.ndarray | None]:
        """Reverse sweep from ``loss``; returns one slot per node id."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise ContractError("loss is not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones(loss.shape, dtype=self.dtype)
        for node_id in range(loss.node, -1, -1):
            g = grads[node_id]
            node = self.nodes[node_id]
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        return grads

    def backward(self, loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` keyed by parameter name.

        Parameters that were materialized on this tape but did not influence the
        loss get zero gradients; so does every entry of ``params`` that never
        reached the tape.
        """
        grads = self.gradients(loss)
        out: dict[str, np.ndarray] = {}
        for name, var in self._variables.items():
            g = grads[var.node] if var.node is not None else None
            out[name] = g if g is not None else np.zeros(var.shape, dtype=self.dtype)
        if params is not None:
            for p in params:
                if p.name not in out:
                    out[p.name] = np.zeros(p.shape, dtype=self.dtype)
        return out


# ---------------------------------------------------------------------------
# recording helpers


def _tape_of(*xs) -> "Tape | None":
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _as_tensor(x, tape: "Tape | None") -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = tape.dtype if tape is not None else None
    return Tensor(np.asarray(x, dtype=dtype), tape=tape)


def record_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap ``out`` as the result of a primitive and record it when needed.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input, in order. Only inputs with ``requires_grad`` get their gradient
    propagated.
    """
    tape = _tape_of(*inputs)
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{kind} produced non-finite values")
    live = [i for i, x in enumerate(inputs) if x.requires_grad and x.node is not None]
    if tape is None or not tape.record or not live:
        return Tensor(out, tape=tape)

    if any(inputs[i].tape is not tape for i in live):
        raise ContractError(f"{kind}: inputs are recorded on different tapes")
    parents = tuple(inputs[i].node for i in live)

    def node_backward(g: np.ndarray):
        all_grads = backward(g)
        return [all_grads[i] for i in live]

    node = tape._append(kind, parents, node_backward, out.shape)
    return Tensor(out, tape=tape, node=node, requires_grad=True)


def _count(x: Tensor | None, flops: int) -> None:
    tape = x.tape if x is not None else None
    if tape is not None:
        tape.flops += int(flops)


def log_branch(x: "Tensor | None", selection: np.ndarray) -> None:
    """Record which piece of a piecewise-smooth op was taken (for gradient checks)."""
    tape = x.tape if x is not None else None
    if tape is not None and tape.branch_log is not None:
        tape.branch_log.append(zlib.crc32(np.ascontiguousarray(selection).tobytes()))


def _is_suffix(short: tuple[int, ...], long: tuple[int, ...]) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short):]) == tuple(short)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out leading axes so that ``g`` has ``shape``."""
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    if not (_is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape)):
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ beyond leading batch dimensions")


def _axis(axis: int, ndim: int, kind: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{kind}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise family


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op("add", (a, b), a.data + b.data,
                     lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op("sub", (a, b), a.data - b.data,
                     lambda g: (_sum_to(g, sa), -_sum_to(g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd,
                     lambda g: (_sum_to(g * bd, ad.shape), _sum_to(g * ad, bd.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)
    return record_op("scale", (x,), x.data * factor, lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_branch(x, mask)
    return record_op("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with leading-batch broadcasting."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if not (_is_suffix(ba, bb) or _is_suffix(bb, ba)):
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} are not broadcastable")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    _count(a if a.tape is not None else b, 2 * int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            ga = _sum_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _sum_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record_op("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# normalization


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row maximum."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    _count(x, 5 * s.size)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record_op("softmax", (x,), s, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice with its population variance plus ``eps``."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} do not match width of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    _count(x, 5 * out.size)

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, c)
        dgamma = (flat_g * xhat.reshape(-1, c)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return record_op("layer_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return record_op("reshape", (x,), out, lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of the axes of {x.shape}")
    inverse = tuple(np.argsort(axes))
    return record_op("permute", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def broadcast_leading(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading axes ``lead``."""
    lead = tuple(lead)
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    shape = x.shape
    return record_op("broadcast", (x,), out, lambda g: (_sum_to(g, shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    if not xs:
        raise DimensionError("concat: need at least one tensor")
    ndim = xs[0].ndim
    ax = _axis(axis, ndim, "concat")
    for x in xs[1:]:
        if x.ndim != ndim or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shape {x.shape} does not conform to {xs[0].shape} off axis {ax}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=ax)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))]

    return record_op("concat", xs, out, backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = _axis(axis, x.ndim, "slice_axis")
    if not 0 <= start <= stop <= x.shape[ax]:
        raise DimensionError(f"slice_axis: [{start}, {stop}) out of range for extent {x.shape[ax]}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record_op("slice", (x,), x.data[index].copy(), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = _axis(axis, x.ndim, "split")
    if sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    out, start = [], 0
    for size in sizes:
        out.append(slice_axis(x, start, start + size, ax))
        start += size
    return out


# ---------------------------------------------------------------------------
# reductions and gathers


def reduce_max(x: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first (lowest-index) argmax."""
    ax = _axis(axis, x.ndim, "reduce_max")
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    log_branch(x, idx)
    out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return record_op("reduce_max", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record_op("mean", (x,), np.asarray(x.data.mean()),
                     lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def gather_rows(x: Tensor, index) -> Tensor:
    """Batched row gather.

    ``x`` is ``(R, C)`` or ``(B, R, C)``; ``index`` holds row ids of shape
    ``(...)`` or ``(B, ...)`` respectively. The result has shape
    ``index.shape + (C,)``. The gradient scatters back additively.
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise DimensionError("gather_rows: index must be integral")
    if x.ndim == 2:
        rows, batch = x.shape[0], None
    elif x.ndim == 3:
        rows, batch = x.shape[1], x.shape[0]
        if index.ndim < 1 or index.shape[0] != batch:
            raise DimensionError(f"gather_rows: index {index.shape} does not match batch of {x.shape}")
    else:
        raise DimensionError(f"gather_rows: expected 2-d or 3-d features, got {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ContractError(f"gather_rows: index out of range for {rows} rows")
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    if batch is None:
        flat_idx = index
    else:
        offsets = (np.arange(batch) * rows).reshape((batch,) + (1,) * (index.ndim - 1))
        flat_idx = index + offsets
    out = flat[flat_idx]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros((flat.shape[0], c), dtype=dtype)
        np.add.at(full, flat_idx.ravel(), g.reshape(-1, c))
        return (full.reshape(shape),)

    return record_op("gather", (x,), out, backward)


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Functional alias of :meth:`Tape.backward`."""
    return tape.backward(loss, params)
