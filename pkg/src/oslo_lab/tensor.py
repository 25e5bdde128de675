"""Small reverse-mode autodiff engine over float64 numpy arrays.

Images use NHWC layout throughout. Every differentiable op is a ``Function``
subclass; calling ``Function.apply`` records a node whose parents are the
input tensors, so the graph reachable from a scalar loss is the tape that
``backward`` walks in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _per_example() -> bool:
    return getattr(_state, "per_example", False)


@contextmanager
def per_example_grads():
    """Keep a leading batch axis on parameter gradients during backward.

    Inside this context, leaf tensors consumed by ``matmul`` (second operand),
    ``conv2d`` (weights) and broadcasting ``add`` receive gradients of shape
    ``(B, *param.shape)``, one slice per example, instead of the batch sum.
    The loss must be a sum over examples for the slices to be per-example
    gradients.
    """
    prev = _per_example()
    _state.per_example = True
    try:
        yield
    finally:
        _state.per_example = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _fn: Optional["Function"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._fn = _fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded graph node.

    ``forward`` receives raw arrays and may stash whatever it needs for
    ``backward``. ``backward`` returns one gradient array (or None) per input;
    ``self.needs`` tells which inputs actually require a gradient.
    """

    def __init__(self, inputs: Sequence[Tensor]):
        self.inputs = tuple(inputs)
        self.needs = tuple(t.requires_grad for t in self.inputs)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(t) for t in inputs]
        fn = cls(tensors, **kwargs)
        out = fn.forward(*(t.data for t in tensors))
        requires = _grad_enabled() and any(fn.needs)
        return Tensor(out, requires_grad=requires, _fn=fn if requires else None)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_param(t: "Tensor", grad: np.ndarray) -> bool:
    return t._fn is None and t.requires_grad and grad.ndim >= 1


def _unbroadcast_per_example(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Like ``_unbroadcast`` but keeps axis 0 (the batch) separate."""
    B = grad.shape[0]
    g = grad
    while g.ndim > len(shape) + 1:
        g = g.sum(axis=1)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis + 1] != 1:
            g = g.sum(axis=axis + 1, keepdims=True)
    return g.reshape((B,) + tuple(shape))


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return tuple(_unbroadcast_per_example(grad, sh) if _per_example() and _is_param(t, grad) else
                     _unbroadcast(grad, sh) for t, sh in zip(self.inputs, self.shapes))


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ self.b.T if self.needs[0] else None
        gb = None
        if self.needs[1]:
            if _per_example() and _is_param(self.inputs[1], grad):
                gb = np.einsum("bi,bj->bij", self.a, grad)
            else:
                gb = self.a.T @ grad
        return ga, gb


class Conv2d(Function):
    """Stride-1 cross-correlation, NHWC input, (kh, kw, cin, cout) weights."""

    def __init__(self, inputs, padding: int = 0):
        super().__init__(inputs)
        self.padding = padding

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        kh, kw, cin, cout = w.shape
        p = self.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        B, Hp, Wp, _ = xp.shape
        Ho, Wo = Hp - kh + 1, Wp - kw + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {xp.shape[1:3]}")
        cols = np.empty((B, Ho, Wo, kh, kw, cin))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + Ho, j:j + Wo, :]
        cols = cols.reshape(B * Ho * Wo, kh * kw * cin)
        self.cols, self.w, self.xp_shape = cols, w, xp.shape
        return (cols @ w.reshape(-1, cout)).reshape(B, Ho, Wo, cout)

    def backward(self, grad):
        kh, kw, cin, cout = self.w.shape
        g2 = grad.reshape(-1, cout)
        gw = None
        if self.needs[1]:
            if _per_example() and _is_param(self.inputs[1], grad):
                B = grad.shape[0]
                cols = self.cols.reshape(B, -1, self.cols.shape[1])
                gw = np.matmul(cols.transpose(0, 2, 1), g2.reshape(B, -1, cout)).reshape((B,) + self.w.shape)
            else:
                gw = (self.cols.T @ g2).reshape(self.w.shape)
        gx = None
        if self.needs[0]:
            B, Hp, Wp, _ = self.xp_shape
            Ho, Wo = grad.shape[1], grad.shape[2]
            dcols = (g2 @ self.w.reshape(-1, cout).T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros(self.xp_shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + Ho, j:j + Wo, :] += dcols[:, :, :, i, j, :]
            p = self.padding
            gx = gxp[:, p:Hp - p, p:Wp - p, :] if p else gxp
        return gx, gw


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        # grad at exactly 0 is 0
        return (grad * self.mask,)


class MaxPool2(Function):
    def forward(self, x):
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"maxpool2: need NHWC input with even spatial dims, got {x.shape}")
        quads = [x[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        # route the gradient to the first maximal element of each window
        taken = np.zeros(out.shape, dtype=bool)
        self.masks = []
        for q in quads:
            m = (q == out) & ~taken
            taken |= m
            self.masks.append(m)
        self.shape = x.shape
        return out

    def backward(self, grad):
        g = np.empty(self.shape)
        for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), self.masks):
            g[:, i::2, j::2, :] = grad * m
        return (g,)


class Sum(Function):
    def __init__(self, inputs, axis=None):
        super().__init__(inputs)
        self.axis = axis

    def forward(self, x):
        self.shape = x.shape
        return np.sum(x, axis=self.axis)

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Sum):
    def forward(self, x):
        out = super().forward(x)
        self.count = x.size // max(out.size, 1) if self.axis is not None else x.size
        return out / self.count

    def backward(self, grad):
        (g,) = super().backward(grad)
        return (g / self.count,)


class Reshape(Function):
    def __init__(self, inputs, shape=()):
        super().__init__(inputs)
        self.new_shape = tuple(shape)

    def forward(self, x):
        self.shape = x.shape
        try:
            return x.reshape(self.new_shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {self.new_shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Function):
    def forward(self, z):
        self.p = _softmax(z)
        return self.p

    def backward(self, grad):
        p = self.p
        return (p * (grad - (grad * p).sum(axis=-1, keepdims=True)),)


class CrossEntropy(Function):
    """Softmax cross-entropy on logits (B, C) against integer labels."""

    def __init__(self, inputs, labels=None, reduction: str = "mean"):
        super().__init__(inputs)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.reduction = reduction

    def forward(self, z):
        if z.ndim != 2 or z.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"cross_entropy: logits {z.shape} vs {self.labels.shape[0]} labels")
        if np.any(self.labels < 0) or np.any(self.labels >= z.shape[1]):
            raise ShapeError("cross_entropy: label out of range")
        m = z.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
        losses = lse - z[np.arange(z.shape[0]), self.labels]
        self.p = _softmax(z)
        if self.reduction == "none":
            return losses
        if self.reduction == "sum":
            return losses.sum()
        return losses.mean()

    def backward(self, grad):
        g = self.p.copy()
        g[np.arange(g.shape[0]), self.labels] -= 1.0
        if self.reduction == "none":
            return (g * np.asarray(grad)[:, None],)
        if self.reduction == "mean":
            g /= g.shape[0]
        return (g * grad,)


class Clamp(Function):
    def __init__(self, inputs, lo=-np.inf, hi=np.inf):
        super().__init__(inputs)
        self.lo, self.hi = lo, hi

    def forward(self, x):
        self.mask = (x >= self.lo) & (x <= self.hi)
        return np.clip(x, self.lo, self.hi)

    def backward(self, grad):
        return (grad * self.mask,)


class Sign(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.sign(x)

    def backward(self, grad):
        return (np.zeros(self.shape),)


class L1Norm(Function):
    def forward(self, x):
        self.s = np.sign(x)
        return np.abs(x).sum()

    def backward(self, grad):
        return (self.s * grad,)


class Dropout(Function):
    def __init__(self, inputs, mask=None):
        super().__init__(inputs)
        self.mask = mask

    def forward(self, x):
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Gather(Function):
    """out.flat[k] = x.flat[index.flat[k]], or 0 where index < 0."""

    def __init__(self, inputs, index=None, out_shape=None):
        super().__init__(inputs)
        self.index = np.asarray(index).reshape(-1)
        self.out_shape = tuple(out_shape)

    def forward(self, x):
        self.in_shape = x.shape
        self.valid = self.index >= 0
        flat = x.reshape(-1)
        out = np.where(self.valid, flat[np.where(self.valid, self.index, 0)], 0.0)
        return out.reshape(self.out_shape)

    def backward(self, grad):
        g = np.zeros(int(np.prod(self.in_shape)))
        np.add.at(g, self.index[self.valid], grad.reshape(-1)[self.valid])
        return (g.reshape(self.in_shape),)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x, w, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, padding=padding)


def relu(x) -> Tensor:
    return ReLU.apply(x)


def maxpool2(x) -> Tensor:
    return MaxPool2.apply(x)


def tsum(x, axis=None) -> Tensor:
    return Sum.apply(x, axis=axis)


def mean(x, axis=None) -> Tensor:
    return Mean.apply(x, axis=axis)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=shape)


def softmax(z) -> Tensor:
    return Softmax.apply(z)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    return CrossEntropy.apply(logits, labels=labels, reduction=reduction)


def clamp(x, lo=-np.inf, hi=np.inf) -> Tensor:
    return Clamp.apply(x, lo=lo, hi=hi)


def sign(x) -> Tensor:
    return Sign.apply(x)


def l1_norm(x) -> Tensor:
    return L1Norm.apply(x)


def dropout(x, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(x)
    keep = rng.random(as_tensor(x).shape) >= rate
    return Dropout.apply(x, mask=keep / (1.0 - rate))


def gather(x, index, out_shape) -> Tensor:
    return Gather.apply(x, index=index, out_shape=out_shape)


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name; mostly useful for table-driven tests."""
    table: Dict[str, Callable[..., Tensor]] = {
        "add": add,
        "mul": mul,
        "matmul": matmul,
        "conv2d": conv2d,
        "relu": relu,
        "maxpool2": maxpool2,
        "mean": mean,
        "sum": tsum,
        "softmax": softmax,
        "cross_entropy": cross_entropy,
        "clamp": clamp,
        "sign": sign,
        "l1_norm": l1_norm,
    }
    if kind not in table:
        raise KeyError(f"unknown op kind {kind!r}")
    return table[kind](*inputs, **kwargs)


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._fn is not None:
            for parent in node._fn.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss.

    Accumulates into ``.grad`` of every reachable leaf that requires grad and
    returns ``{leaf: grad}``. Each node is visited once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._fn is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = g
            continue
        fn = node._fn
        for parent, need, pg in zip(fn.inputs, fn.needs, fn.backward(g)):
            if not need or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` w.r.t. each tensor in ``wrt``; zeros if unused."""
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    found = backward(loss)
    return [found.get(t, np.zeros(t.shape)) for t in wrt]


def finite_diff_grad(fn: Callable[[np.ndarray], float], x, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(as_tensor(x).data, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = float(fn(x))
        flat[k] = orig - step
        lo = float(fn(x))
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * step)
    return g
