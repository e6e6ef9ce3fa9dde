"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the model needs are provided. Each op records its
inputs and a closure that accumulates gradients into them; ``backward``
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from carformer import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite input where finite values are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``owned`` arrays are adopted without a copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.flags.writeable:
            t.grad = g.reshape(t.data.shape)
        else:
            t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _make(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


# -- broadcasting helpers (bias-style only) -----------------------------

def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible "
                         "(only trailing-suffix broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        # the upstream gradient array is released after this call, so one operand may adopt it
        _accumulate(a, _unbroadcast(g, a.shape), owned=True)
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape), owned=True)
        _accumulate(b, -_unbroadcast(g, b.shape), owned=True)

    return _make(out, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        k = float(b)

        def backward_scalar(g):
            _accumulate(a, g * k, owned=True)

        return _make(a.data * k, "scale", (a,), backward_scalar)
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out, "mul", (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)

    def backward(g):
        _accumulate(x, g * pos, owned=True)

    return _make(out, "relu", (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no rng is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * keep, owned=True)

    return _make(x.data * keep, "dropout", (x,), backward)


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D while ``a`` carries leading batch axes (a weight shared
    across the batch); otherwise leading axes must match exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2), owned=True)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, gb, owned=True)

    return _make(out, "matmul", (a, b), backward)


def blocked_matmul(a, b, block: int = 16) -> Tensor:
    """``a @ b`` with the contraction summed block by block in a fixed order.

    The shared axis is zero-padded to a multiple of ``block`` and the
    partial products are added sequentially, so appending zero columns to
    ``a`` (with any rows to ``b``) leaves the result bitwise unchanged. A
    single BLAS call does not promise that, because its summation order
    depends on the length of the shared axis. Leading axes must match.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"blocked_matmul: cannot multiply shapes {a.shape} and {b.shape}")
    k = a.shape[-1]
    kp = -(-k // block) * block
    ad, bd = a.data, b.data
    if kp != k:
        ad = np.concatenate([ad, np.zeros(ad.shape[:-1] + (kp - k,))], axis=-1)
        bd = np.concatenate([bd, np.zeros(bd.shape[:-2] + (kp - k, bd.shape[-1]))], axis=-2)
    out = ad[..., :block] @ bd[..., :block, :]
    for s in range(block, kp, block):
        out += ad[..., s:s + block] @ bd[..., s:s + block, :]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2), owned=True)
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g, owned=True)

    return _make(out, "blocked_matmul", (a, b), backward)


# -- shape ops -----------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape), owned=True)

    return _make(out, "reshape", (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        _accumulate(x, np.ascontiguousarray(g.transpose(inverse)), owned=True)

    return _make(out, "transpose", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} on axis {axis}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)], owned=True)

    return _make(out, "concat", tuple(tensors), backward)


def take(x: Tensor, key) -> Tensor:
    """Numpy-style indexing; gradients scatter-add back to the source."""
    x = as_tensor(x)
    out = np.array(x.data[key], dtype=np.float64)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, key, g)
            _accumulate(x, full, owned=True)

    return _make(out, "take", (x,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` [V, d] selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
        raise IndexError(f"embedding id {int(bad)} out of range for table of {vocab} rows")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, full, owned=True)

    return _make(out, "embedding", (table,), backward)


# -- reductions ----------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(out, "sum", (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


# -- normalizers ---------------------------------------------------------

def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; entries equal to -inf get weight 0."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    moved = np.moveaxis(x.data, axis, -1)
    y = kernels.softmax_forward(_rows(moved)).reshape(moved.shape)
    out = np.moveaxis(y, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        gx = kernels.softmax_backward(_rows(y), _rows(gm)).reshape(moved.shape)
        _accumulate(x, np.moveaxis(gx, -1, axis), owned=True)

    return _make(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True), owned=True)

    return _make(out, "log_softmax", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    y, xhat, rstd = kernels.layer_norm_forward(
        _rows(x.data), np.ascontiguousarray(gain.data), np.ascontiguousarray(bias.data), eps)

    def backward(g):
        gx, gg, gb = kernels.layer_norm_backward(
            _rows(g), xhat, rstd, np.ascontiguousarray(gain.data))
        _accumulate(x, gx.reshape(x.shape), owned=True)
        _accumulate(gain, gg, owned=True)
        _accumulate(bias, gb, owned=True)

    return _make(y.reshape(x.shape), "layer_norm", (x, gain, bias), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with a constant (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)

    def backward(g):
        _accumulate(x, np.where(mask, 0.0, g), owned=True)

    return _make(out, "masked_fill", (x,), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    1-D logits with an int target give a scalar; [N, C] logits with N
    targets give a length-N vector of per-row losses.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    lg = logits.data[None, :] if single else logits.data
    tgt = np.atleast_1d(np.asarray(target))
    n, c = lg.shape
    if tgt.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but targets of shape {tgt.shape}")
    if tgt.dtype.kind not in "iu" or (tgt.size and (tgt.min() < 0 or tgt.max() >= c)):
        raise IndexError(f"cross_entropy: target out of range for {c} classes: {tgt.tolist()}")
    shifted = lg - lg.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, tgt]
    out = losses[0] if single else losses

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, tgt] -= 1.0
        grad = p * np.reshape(g, (-1, 1))
        _accumulate(logits, grad[0] if single else grad, owned=True)

    return _make(np.asarray(out), "cross_entropy", (logits,), backward)


# -- graph ----------------------------------------------------------------

@dataclass
class Node:
    id: int
    op: str
    inputs: list[int]
    tensor: Tensor


@dataclass
class Graph:
    """Recorded operations reachable from an output, in topological order."""
    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order = _topo_order(out)
        ids = {id(t): i for i, t in enumerate(order)}
        return cls([Node(i, t.op, [ids[id(p)] for p in t._parents], t)
                    for i, t in enumerate(order)])

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def is_topological(self) -> bool:
        return all(j < n.id for n in self.nodes for j in n.inputs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in reversed(t._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor that ``loss`` depends on.

    Gradients accumulate (+=) into existing ``.grad`` arrays; call
    ``zero_grad`` on parameters between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not attached to any recorded graph")
    if loss.op != "leaf" and loss._backward is None:
        raise RuntimeError("backward: this graph was already consumed by an earlier backward pass")
    order = _topo_order(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
            # intermediate grads are only needed during the sweep
            t.grad = None
            t._backward = None
            t._parents = ()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking ----------------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               floor: float = 1e-8, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each coordinate of each input perturbed in
    place by +/- ``step``. The error at one coordinate is
    |a - n| / max(|a|, |n|, floor). With ``max_coords`` only that many
    coordinates per input are probed, chosen by ``rng``.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ValueError("grad_check needs contiguous input arrays")
            af = a.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                hi = f().item()
                flat[i] = orig - step
                lo = f().item()
                flat[i] = orig
                num = (hi - lo) / (2.0 * step)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
