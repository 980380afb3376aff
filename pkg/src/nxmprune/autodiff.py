"""Dense float64 tensors with reverse-mode automatic differentiation.

A small dynamic-tape engine: every operation records its parents and a
backward closure, and ``Tensor.backward()`` replays the tape in reverse
topological order.  Scope is deliberately narrow: float64, CPU, and just
the primitives the toy models need (matmul, broadcast add/mul, GELU,
ReLU, softmax, layer norm, MSE / cross-entropy losses, and a squared
Frobenius distance used for quadratic weight penalties).  No fusion, no
mixed precision; clarity and exact reproducibility over speed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or Inf."""


class Tensor:
    """A float64 array plus an optional gradient and tape bookkeeping.

    Leaf tensors created with ``requires_grad=True`` act as trainable
    parameters.  Tensors returned by ops carry the closures needed to
    push gradients back to their parents.  Data is mutable between
    steps (optimizers update ``.data`` in place); within one
    forward/backward pass tensors are treated as immutable.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            self._not_scalar()
        return float(self.data.reshape(()))

    def _not_scalar(self):
        raise ValueError(f"expected a scalar tensor, got shape {self.shape}")

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        """Surface the NaN/Inf error state this engine otherwise propagates silently."""
        if not self.is_finite():
            raise NonFiniteError(f"non-finite values in {context}")
        return self

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every tape node, in reverse topological order."""
        if self.data.size != 1:
            self._not_scalar()
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; scalars and arrays are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _in_graph(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not _in_graph(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(_in_graph(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(original))

    return _node(a.data.reshape(shape), (a,), backward)


def mean_over(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]

    def backward(g):
        _accumulate(a, np.expand_dims(g, axis) * np.full(a.data.shape, 1.0 / n))

    return _node(a.data.mean(axis=axis), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full(a.data.shape, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0

    def backward(g):
        _accumulate(a, g * gate)

    return _node(np.where(gate, a.data, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _node(x * cdf, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + offset.data
    width = x.data.shape[-1]

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)
        _accumulate(gain, (g * xhat).reshape(-1, width).sum(axis=0))
        _accumulate(offset, g.reshape(-1, width).sum(axis=0))

    return _node(data, (x, gain, offset), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored as (out, in)."""
    return add(matmul(x, transpose(weight, (1, 0))), bias)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.data.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        _accumulate(pred, (2.0 * float(g) / n) * diff)

    return _node(np.asarray((diff * diff).mean()), (pred,), backward)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ValueError(f"expected (B, C) logits and (B,) labels, got {logits.data.shape} and {labels.shape}")
    batch = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    log_norm = np.log(e.sum(axis=-1)) - shifted[np.arange(batch), labels]

    def backward(g):
        gl = probs.copy()
        gl[np.arange(batch), labels] -= 1.0
        _accumulate(logits, gl * (float(g) / batch))

    return _node(np.asarray(log_norm.mean()), (logits,), backward)


def squared_distance(w: Tensor, target: np.ndarray) -> Tensor:
    """Scalar ``sum((w - target)**2)`` against a constant target array.

    The gradient contribution is computed as ``(2 * upstream) * (w - target)``
    so that an upstream factor of rho/2 yields exactly ``rho * (w - target)``
    in float64 (halving and doubling are exact).
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != w.data.shape:
        raise ValueError(f"target shape {target.shape} != tensor shape {w.data.shape}")
    diff = w.data - target

    def backward(g):
        _accumulate(w, (2.0 * float(g)) * diff)

    return _node(np.asarray((diff * diff).sum()), (w,), backward)


class Adam:
    """Adam with bias correction, operating on a named parameter dict.

    Holds first/second moment arrays per parameter plus the shared step
    count and hyperparameters; ``step()`` applies the standard update in
    place and increments the count.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def reset_moments(self) -> None:
        """Drop accumulated moment estimates (step count restarts bias correction)."""
        self.t = 0
        for name in self.m:
            self.m[name].fill(0.0)
            self.v[name].fill(0.0)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; run backward first")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def parameters_state(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Detached copies of parameter values, e.g. for checkpoints and snapshots."""
    return {name: p.data.copy() for name, p in params.items()}
