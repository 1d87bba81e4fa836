"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`GradTape` is active.  Outside a
tape every op is a plain numpy computation, which is what evaluation and
attacks-free inference use.

    with GradTape() as tape:
        loss = mean(relu(matmul(x, w)))
    grads = tape.backward(loss)   # {node_id: ndarray}; leaves also get .grad
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "ContractError",
    "EvaluationError",
    "Tensor",
    "GradTape",
    "backward",
    "default_dtype",
    "verification_mode",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "matmul",
    "conv2d",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "bias_add",
    "reshape",
    "log_softmax_temp",
    "softmax_temp",
    "sum",
    "mean",
    "one_hot",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Incompatible shapes."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an op."""


class ContractError(ValueError):
    """Precondition of an operation violated."""


class EvaluationError(ArithmeticError):
    """A forward evaluation produced a non-finite value."""


_DTYPE = np.float32


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def verification_mode() -> Iterator[None]:
    """Run everything created inside the block in float64."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f" else _DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: GradTape | None = None
        self.name = name

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad)


@dataclass
class _Node:
    inputs: tuple[int | None, ...]
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of primitive applications.

    Node ids are positions in ``nodes``; leaves get a node with no inputs the
    first time an op consumes them.  Creation order is a topological order, so
    the backward pass is a single reverse sweep.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def clear(self) -> None:
        for leaf in self.leaves.values():
            leaf.node_id = None
            leaf._tape = None
        self.nodes.clear()
        self.leaves.clear()

    def _register_leaf(self, t: Tensor) -> int:
        if t._tape is not self:
            t.node_id = len(self.nodes)
            t._tape = self
            self.nodes.append(_Node((), _no_adjoint))
            self.leaves[t.node_id] = t
        return t.node_id  # type: ignore[return-value]

    def _record(self, out: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
        ids = []
        for t in inputs:
            if not t.requires_grad:
                ids.append(None)
            elif t._tape is self:
                ids.append(t.node_id)
            else:
                ids.append(self._register_leaf(t))
        res = Tensor(out, requires_grad=True)
        res.node_id = len(self.nodes)
        res._tape = self
        self.nodes.append(_Node(tuple(ids), adjoint))
        return res

    def backward(self, loss: Tensor, retain: bool = False) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns the gradient of every leaf that participated, keyed by node id,
        and accumulates the same arrays into ``leaf.grad``.  The tape is cleared
        afterwards unless ``retain`` is set.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        out: dict[int, np.ndarray] = {}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if not node.inputs:
                out[nid] = g
                continue
            for iid, ig in zip(node.inputs, node.adjoint(g)):
                if iid is None or ig is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = ig
        for nid, g in out.items():
            leaf = self.leaves[nid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if not retain:
            self.clear()
        return out


def _no_adjoint(g):
    return ()


_TAPES: list[GradTape] = []


def _active(*ts: Tensor) -> GradTape | None:
    if not _TAPES:
        return None
    if any(t.requires_grad for t in ts):
        return _TAPES[-1]
    return None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def backward(loss: Tensor, retain: bool = False) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not attached to an active tape")
    return loss._tape.backward(loss, retain=retain)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data
    tape = _active(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data
    tape = _active(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad * bd
    tape = _active(a, b)
    if tape is None:
        return Tensor(out)
    return tape._record(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    tape = _active(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    tape = _active(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask
    tape = _active(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    tape = _active(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (g.reshape(src),))


# -- reductions ----------------------------------------------------------------


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis))
    tape = _active(a)
    if tape is None:
        return Tensor(out)
    shape = a.shape

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return tape._record(out, (a,), adjoint)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis), 1.0 / count)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    tape = _active(a, b)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: ``b`` has one entry per entry of axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    out = x.data + b.data.reshape(view)
    tape = _active(x, b)
    if tape is None:
        return Tensor(out)
    red = (0,) + tuple(range(2, x.ndim))
    return tape._record(out, (x, b), lambda g: (g, g.sum(axis=red)))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel (im2col + one matmul)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, k, k2 = kernel.shape
    if ck != c or k != k2:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape} (padding {padding})")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    # channel-major padded copy: (c, n, hp, wp)
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
    cols2 = cols.reshape(c * k * k, n * ho * wo)
    kd = kernel.data
    kmat = kd.reshape(o, c * k * k)
    out = np.ascontiguousarray((kmat @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    tape = _active(x, kernel)
    if tape is None:
        return Tensor(out)

    def adjoint(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dk = (gm @ cols2.T).reshape(kd.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (kmat.T @ gm).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        return dx, dk

    return tape._record(out, (x, kernel), adjoint)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties route the gradient to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even spatial dims, got {x.shape}")
    d = x.data
    quads = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    tape = _active(x)
    if tape is None:
        return Tensor(out)

    def adjoint(g):
        gx = np.zeros_like(d, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (r, s) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, r::2, s::2] = g * hit
        return (gx,)

    return tape._record(out, (x,), adjoint)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor, giving (n, c)."""
    return mean(x, axis=(2, 3))


# -- softmax family --------------------------------------------------------------


def log_softmax_temp(f: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise ``log softmax(f / T)`` for a 2-D logit tensor."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    if f.ndim != 2:
        raise DimensionError(f"log_softmax_temp expects (n, C) logits, got {f.shape}")
    z = f.data / f.data.dtype.type(T)
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    tape = _active(f)
    if tape is None:
        return Tensor(out)
    p = np.exp(out)

    def adjoint(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / T,)

    return tape._record(out, (f,), adjoint)


def softmax_temp(f: Tensor, T: float = 1.0) -> Tensor:
    return exp(log_softmax_temp(f, T))


def one_hot(labels: Sequence[int] | np.ndarray, num_classes: int, dtype=None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype or _DTYPE)
    out[np.arange(labels.size), labels] = 1
    return Tensor(out)


# -- verification ----------------------------------------------------------------


def finite_diff_check(
    builder: Callable[[Tensor], Tensor], point: np.ndarray | Tensor, step: float = 1e-3
) -> float:
    """Max relative error between tape gradients and central differences.

    ``builder`` maps a leaf tensor to a scalar tensor.  The relative error of
    each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not step > 0:
        raise DomainError(f"step must be positive, got {step}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        y = builder(x)
        if y.dtype != np.float64:
            raise ContractError("finite_diff_check needs float64 evaluation")
        if not np.all(np.isfinite(y.data)):
            raise EvaluationError("builder returned a non-finite value")
        if y.requires_grad:
            tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    def value(arr):
        v = builder(Tensor(arr, dtype=np.float64)).data
        if not np.all(np.isfinite(v)):
            raise EvaluationError("builder returned a non-finite value")
        return float(v)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = value(base)
        flat[i] = orig - step
        fm = value(base)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
