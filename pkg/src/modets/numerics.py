"""Dense tensors with a dynamically recorded reverse-mode gradient tape.

Every operation produces a new immutable :class:`Tensor`.  When gradient
recording is enabled and at least one operand is tracked, the result keeps a
reference to its operands plus a closure that maps the output gradient to
operand gradients.  :func:`backward` walks that graph in reverse topological
order; only leaves (parameters) keep accumulated ``.grad`` arrays.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Parameter",
    "Mlp",
    "as_tensor",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "grad_enabled",
    "matmul",
    "silu",
    "sigmoid",
    "softplus",
    "exp",
    "tanh",
    "expm1_over",
    "clamp",
    "concat",
    "stack",
    "unbind",
    "take_rows",
    "merge_rows",
    "mlp_forward",
    "backward",
    "zero_grads",
    "finite_diff_grad",
    "spectral_norm_estimate",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    # numpy should defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float64, np.float32):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def mT(self):
        """Swap the last two axes."""
        return swap_last(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def square(self):
        return mul(self, self)


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient of the same shape."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _check(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _result(data, parents: tuple, backward, op: str) -> Tensor:
    if data.dtype != _DEFAULT_DTYPE and data.dtype not in (np.float32, np.float64):
        data = data.astype(_DEFAULT_DTYPE)
    _check(data, op)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics (stacked leading axes allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul operands must be at least 1-D")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g, acc):
        a2 = a.data[None, :] if a.ndim == 1 else a.data
        b2 = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            acc(a, _unbroadcast(ga, a2.shape).reshape(a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            acc(b, _unbroadcast(gb, b2.shape).reshape(b.shape))

    return _result(out, (a, b), bw, "matmul")


# -- elementwise unary ------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def bw(g, acc):
        acc(x, g * s * (1.0 - s))

    return _result(s, (x,), bw, "sigmoid")


def silu(x) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def bw(g, acc):
        acc(x, g * (s + x.data * s * (1.0 - s)))

    return _result(x.data * s, (x,), bw, "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)

    def bw(g, acc):
        acc(x, g * _stable_sigmoid(x.data))

    return _result(_stable_softplus(x.data), (x,), bw, "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g, acc):
        acc(x, g * out)

    return _result(out, (x,), bw, "exp")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g, acc):
        acc(x, g * (1.0 - out * out))

    return _result(out, (x,), bw, "tanh")


_SERIES_CUTOFF = 1e-5


def expm1_over(x) -> Tensor:
    """(e^x - 1) / x with the removable singularity at 0 filled by its series."""
    x = as_tensor(x)
    z = x.data
    small = np.abs(z) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    em1 = np.expm1(safe)
    out = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, em1 / safe)

    def bw(g, acc):
        # d/dz [(e^z - 1)/z] = (z e^z - e^z + 1) / z^2
        d_big = ((safe - 1.0) * em1 + safe) / (safe * safe)
        d = np.where(small, 0.5 + z / 3.0, d_big)
        acc(x, g * d)

    return _result(out, (x,), bw, "expm1_over")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)

    def bw(g, acc):
        acc(x, g * ((x.data >= lo) & (x.data <= hi)))

    return _result(out, (x,), bw, "clamp")


# -- reductions and shape ---------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(x, np.broadcast_to(g, x.shape))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))

    def bw(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(x, np.broadcast_to(g / n, x.shape))

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g, acc):
        acc(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g, acc):
        acc(x, np.transpose(g, inv))

    return _result(np.transpose(x.data, axes), (x,), bw, "transpose")


def swap_last(x) -> Tensor:
    x = as_tensor(x)

    def bw(g, acc):
        acc(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2), (x,), bw, "swap_last")


def getitem(x, index) -> Tensor:
    """Indexing; gradients scatter-add into the selected slots."""
    x = as_tensor(x)

    def bw(g, acc):
        acc(x, g, index)

    return _result(x.data[index], (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, acc):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                acc(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def bw(g, acc):
        for i, t in enumerate(ts):
            if t.requires_grad:
                acc(t, np.take(g, i, axis=axis))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def unbind(x, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into views; each piece scatters back on backward."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = []
    for i in range(x.shape[axis]):
        index = (slice(None),) * axis + (i,)
        out.append(getitem(x, index))
    return out


def take_rows(x, rows: np.ndarray) -> Tensor:
    """Gather along the leading axis with an integer index array (no repeats)."""
    x = as_tensor(x)

    def bw(g, acc):
        acc(x, g, rows)

    return _result(x.data[rows], (x,), bw, "take_rows")


def merge_rows(base, rows: np.ndarray, update) -> Tensor:
    """Copy of ``base`` whose leading-axis ``rows`` are replaced by ``update``."""
    base, update = as_tensor(base), as_tensor(update)
    out = base.data.copy()
    out[rows] = update.data

    def bw(g, acc):
        if base.requires_grad:
            gb = g.copy()
            gb[rows] = 0.0
            acc(base, gb)
        if update.requires_grad:
            acc(update, g[rows])

    return _result(out, (base, update), bw, "merge_rows")


# -- gradient tape ----------------------------------------------------------

def _is_fancy(index) -> bool:
    # integer arrays may repeat positions, which plain += would drop
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``.grad``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tracked parameter")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = {id(loss)}

    def acc(node: Tensor, value: np.ndarray, index=None) -> None:
        if not node.requires_grad:
            return
        key = id(node)
        cur = grads.get(key)
        if index is None:
            if cur is None:
                grads[key] = value
            elif key in owned:
                cur += value
            else:
                grads[key] = cur + value
                owned.add(key)
        else:
            if cur is None:
                cur = np.zeros(node.shape, dtype=node.data.dtype)
                grads[key] = cur
                owned.add(key)
            elif key not in owned:
                cur = np.array(cur, copy=True)
                grads[key] = cur
                owned.add(key)
            if _is_fancy(index):
                np.add.at(cur, index, value)
            else:
                cur[index] += value

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.broadcast_to(g, node.shape)
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            continue
        node._backward(g, acc)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


# -- layers -----------------------------------------------------------------

class Mlp:
    """Affine layers with SiLU between them and an identity output."""

    def __init__(self, weights: Sequence[Parameter], biases: Sequence[Parameter]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight and at least one layer")
        for w, b in zip(weights, biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"bad layer shapes {w.shape}, {b.shape}")
        for w0, w1 in zip(weights[:-1], weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("layer dimensions do not chain")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp",
             out_scale: float = 1.0) -> "Mlp":
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(n_in)
            if i == len(sizes) - 2:
                bound *= out_scale
            weights.append(Parameter(rng.uniform(-bound, bound, (n_in, n_out)), name=f"{name}.w{i}"))
            biases.append(Parameter(np.zeros(n_out), name=f"{name}.b{i}"))
        return cls(weights, biases)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(net: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != net.in_features:
        raise ValueError(f"input width {x.shape[-1]} != {net.in_features}")
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w + b
        if i < last:
            x = silu(x)
    return x


# -- verification helpers ---------------------------------------------------

def finite_diff_grad(f: Callable[[], float], param: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the zero-argument scalar function ``f``.

    ``param.data`` is perturbed in place one coordinate at a time and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(param.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)


def spectral_norm_estimate(m, iters: int = 50) -> float | np.ndarray:
    """Largest singular value by power iteration on m^T m.

    The estimate after ``k`` iterations is ``||m w_k||`` where ``w_k`` is the
    normalised k-th power iterate, which is non-decreasing in ``k``.  Stacks
    of matrices (``(..., d, d)``) are handled in one vectorised pass.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"expected square matrix, got {m.shape}")
    d = m.shape[-1]
    start = np.random.default_rng(0x5EED).uniform(0.5, 1.5, d)
    v = np.broadcast_to(start / np.linalg.norm(start), m.shape[:-2] + (d,)).copy()
    mt = np.swapaxes(m, -1, -2)
    est = np.zeros(m.shape[:-2])
    for _ in range(iters):
        mv = np.einsum("...ij,...j->...i", m, v)
        est = np.linalg.norm(mv, axis=-1)
        w = np.einsum("...ij,...j->...i", mt, mv)
        nw = np.linalg.norm(w, axis=-1, keepdims=True)
        if np.all(nw == 0):
            break
        v = np.where(nw > 0, w / np.where(nw > 0, nw, 1.0), v)
    return float(est) if est.ndim == 0 else est
