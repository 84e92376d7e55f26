"""Dense float64 tensors with reverse-mode automatic differentiation.

A small CPU engine sized for desk-scale experiments: enough primitives
for convolutional encoder/decoders, batch-norm classifiers, and their
training loops.  Each primitive application records its inputs and a
backward closure on the output tensor; ``backward`` walks the recorded
subgraph in reverse creation order, which visits every node exactly once
because inputs are always created before outputs.

Conventions fixed here and relied on throughout the package:

* everything is float64; inputs are coerced on construction,
* image batches are NCHW and conv kernels are (out, in, kh, kw),
* relu's subgradient at exactly 0 is 0, leaky_relu's negative slope
  defaults to 0.2, clamp passes gradient on the closed interval,
* forward results are deterministic: repeated runs over identical
  inputs are bit-identical (no threading, no BLAS batch-shape effects
  in the matmul primitive).

Gradients accumulate into ``Tensor.grad`` across ``backward`` calls and
are validated against central finite differences by ``grad_check``.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for a primitive; names the op."""


class UnknownPrimitive(ValueError):
    """apply_primitive received a name outside the registry."""


class MissingGradient(RuntimeError):
    """sgd_step found a parameter whose grad was never populated."""


class NonScalarLoss(ValueError):
    """backward requires a single-element loss tensor."""


_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional record of how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_seq", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._seq = next(_seq)
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; the named primitive functions below do the work.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def relu(self):
        return relu(self)

    def leaky_relu(self, negative_slope: float = 0.2):
        return leaky_relu(self, negative_slope)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def clamp(self, min_value=None, max_value=None):
        return clamp(self, min_value, max_value)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _sum_to(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into .grad over the recorded subgraph.

    The loss must hold exactly one element.  Reverse creation order is a
    valid topological order (an op's output always has a larger sequence
    number than its inputs), so each node's backward closure runs once,
    after all of its downstream contributions have arrived.  Calling
    backward again on a fresh graph adds into existing .grad buffers.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for t in nodes:
        if t._backward is None or t.grad is None:
            continue
        for parent, g in zip(t._parents, t._backward(t.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def graph_edges(root: Tensor):
    """(index, op, parent indices) rows for the subgraph below root, in
    creation order.  Leaves get op 'leaf' and no parents."""
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    index = {id(t): i for i, t in enumerate(nodes)}
    return [(i, t._op, tuple(index[id(p)] for p in t._parents)) for i, t in enumerate(nodes)]


def graph_dump(root: Tensor) -> str:
    """Human-readable edge list for debugging gradient flow."""
    lines = [f"{i}\t{op}\t{list(parents)}" for i, op, parents in graph_edges(root)]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Elementwise and broadcasting primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _record("add", data, (a, b),
                   lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _record("sub", data, (a, b),
                   lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _record("mul", data, (a, b),
                   lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands.

    Computed with einsum(optimize=False) instead of BLAS: BLAS kernel
    selection depends on the row count, which can change summation order
    and so break bitwise batch-composition invariance of frozen model
    outputs.  Operands here are small (classifier/VAE heads), so the
    straight loops cost little.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeMismatch(f"matmul: ranks must be 1 or 2, got {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim >= 1 else None
    if inner_a != inner_b:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def ein(spec, *ops):
        return np.einsum(spec, *ops, optimize=False)

    if a.ndim == 2 and b.ndim == 2:
        data = ein("ij,jk->ik", a.data, b.data)
        bwd = lambda g: (ein("ik,jk->ij", g, b.data), ein("ij,ik->jk", a.data, g))
    elif a.ndim == 2 and b.ndim == 1:
        data = ein("ij,j->i", a.data, b.data)
        bwd = lambda g: (ein("i,j->ij", g, b.data), ein("ij,i->j", a.data, g))
    elif a.ndim == 1 and b.ndim == 2:
        data = ein("j,jk->k", a.data, b.data)
        bwd = lambda g: (ein("jk,k->j", b.data, g), ein("j,k->jk", a.data, g))
    else:
        data = ein("j,j->", a.data, b.data)
        bwd = lambda g: (g * b.data, g * a.data)
    return _record("matmul", data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # subgradient 0 at exactly 0
    return _record("relu", data, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    x = _lift(x)
    slope = float(negative_slope)
    pos = x.data > 0.0
    data = np.where(pos, x.data, slope * x.data)
    return _record("leaky_relu", data, (x,),
                   lambda g: (g * np.where(pos, 1.0, slope),))


def tanh(x: Tensor) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0.0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _record("sum", data, (x,),
                   lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    data = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a % x.ndim]
    scale = 1.0 / count
    return _record("mean", data, (x,),
                   lambda g: (_expand_reduced(g * scale, x.shape, axis, keepdims),))


def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    try:
        data = np.reshape(x.data, shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record("reshape", data, (x,), lambda g: (np.reshape(g, x.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", data, tuple(tensors),
                   lambda g: tuple(np.split(g, offsets, axis=axis)))


def clamp(x: Tensor, min_value=None, max_value=None) -> Tensor:
    x = _lift(x)
    data = np.clip(x.data, min_value, max_value)
    mask = np.ones(x.shape, dtype=bool)
    if min_value is not None:
        mask &= x.data >= min_value  # gradient passes on the closed interval
    if max_value is not None:
        mask &= x.data <= max_value
    return _record("clamp", data, (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record("softmax", y, (x,), bwd)


def gaussian_noise_like(x: Tensor, noise_source) -> Tensor:
    """Constant standard-normal tensor shaped like x.

    The draw comes from the caller's Box-Muller source; the result is a
    leaf (no gradient flows into the noise).
    """
    x = _lift(x)
    return Tensor(noise_source.normal(x.shape))


# ---------------------------------------------------------------------------
# Convolution primitives (NCHW, kernels (out, in, kh, kw))


def _conv_out(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (out,in,kh,kw) kernel."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: need 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    k_out, c_k, kh, kw = w.shape
    if c != c_k:
        raise ShapeMismatch(f"conv2d: input channels {c} != kernel channels {c_k}")
    s, p = int(stride), int(padding)
    h_out, w_out = _conv_out(h, kh, s, p), _conv_out(wd, kw, s, p)
    if h_out < 1 or w_out < 1:
        raise ShapeMismatch(f"conv2d: kernel {w.shape} too large for input {x.shape} at padding {p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * h_out:s, j:j + s * w_out:s]
    cols2 = cols.reshape(n, c * kh * kw, h_out * w_out)
    w2 = w.data.reshape(k_out, c * kh * kw)
    data = np.matmul(w2, cols2).reshape(n, k_out, h_out, w_out)

    def bwd(g):
        g2 = g.reshape(n, k_out, h_out * w_out)
        dw = np.einsum("nkl,ncl->kc", g2, cols2, optimize=True).reshape(w.shape)
        dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, h_out, w_out)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return dx, dw

    return _record("conv2d", data, (x, w), bwd)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution; kernel is (in, out, kh, kw).

    Output extent is (H-1)*stride - 2*padding + kh + output_padding, the
    arithmetic inverse of conv2d's extent formula, so a stride-2 pad-1
    k3 transpose with output_padding 1 exactly doubles spatial size.
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d_transpose: need 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c_in, h, wd = x.shape
    c_k, c_out, kh, kw = w.shape
    if c_in != c_k:
        raise ShapeMismatch(f"conv2d_transpose: input channels {c_in} != kernel channels {c_k}")
    s, p, op = int(stride), int(padding), int(output_padding)
    if op >= s:
        raise ShapeMismatch(f"conv2d_transpose: output_padding {op} must be < stride {s}")
    h_buf, w_buf = (h - 1) * s + kh + op, (wd - 1) * s + kw + op
    h_out, w_out = h_buf - 2 * p, w_buf - 2 * p
    if h_out < 1 or w_out < 1:
        raise ShapeMismatch(f"conv2d_transpose: padding {p} swallows output for input {x.shape}")

    x2 = x.data.reshape(n, c_in, h * wd)
    w2 = w.data.reshape(c_in, c_out * kh * kw)
    spread = np.matmul(w2.T, x2).reshape(n, c_out, kh, kw, h, wd)
    full = np.zeros((n, c_out, h_buf, w_buf), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + s * h:s, j:j + s * wd:s] += spread[:, :, i, j]
    data = full[:, :, p:h_buf - p, p:w_buf - p]

    def bwd(g):
        gbuf = np.zeros((n, c_out, h_buf, w_buf), dtype=np.float64)
        gbuf[:, :, p:h_buf - p, p:w_buf - p] = g
        gcols = np.empty((n, c_out, kh, kw, h, wd), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = gbuf[:, :, i:i + s * h:s, j:j + s * wd:s]
        gcols2 = gcols.reshape(n, c_out * kh * kw, h * wd)
        dx = np.matmul(w2, gcols2).reshape(x.shape)
        dw = np.einsum("ncl,nml->cm", x2, gcols2, optimize=True).reshape(w.shape)
        return dx, dw

    return _record("conv2d_transpose", data, (x, w), bwd)


# ---------------------------------------------------------------------------
# Primitive registry

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "reshape": reshape,
    "concat": concat,
    "clamp": clamp,
    "softmax": softmax,
    "gaussian_noise_like": gaussian_noise_like,
}


def apply_primitive(name: str, inputs, attrs: dict | None = None) -> Tensor:
    """Apply a registered primitive by name.

    ``inputs`` is a sequence of tensors (concat receives it whole, other
    ops are splatted); ``attrs`` holds the op's keyword attributes.
    """
    if name not in PRIMITIVES:
        raise UnknownPrimitive(f"unknown primitive {name!r}; known: {sorted(PRIMITIVES)}")
    fn = PRIMITIVES[name]
    attrs = attrs or {}
    if name == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# SGD with classical momentum


class OptimizerState:
    """Velocity buffers plus hyperparameters for sgd_step.

    Update rule per parameter: v <- momentum*v + grad; p <- p - lr*v.
    Velocities start at zero and persist across steps.
    """

    def __init__(self, params, learning_rate: float, momentum: float = 0.0):
        if learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocities = [np.zeros_like(p.data) for p in self.params]


def sgd_step(params, state: OptimizerState) -> None:
    """One momentum-SGD update; zeroes gradients afterwards."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ValueError("sgd_step: params do not match the optimizer state registration")
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradient(f"parameter {i} (shape {p.shape}) has no gradient")
        v = state.momentum * state.velocities[i] + p.grad
        state.velocities[i] = v
        p.data = p.data - state.learning_rate * v
        p.grad = None


class AdamState:
    """First/second-moment buffers plus hyperparameters for adam_step."""

    def __init__(self, params, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes gradients afterwards."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ValueError("adam_step: params do not match the optimizer state registration")
    state.step_count += 1
    t = state.step_count
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradient(f"parameter {i} (shape {p.shape}) has no gradient")
        g = p.grad
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / (1.0 - state.beta1 ** t)
        v_hat = state.v[i] / (1.0 - state.beta2 ** t)
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing autodiff against central finite differences."""
    max_rel_error: float
    checked: int
    excluded: int
    tol: float
    step: float
    errors: np.ndarray = field(repr=False, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_error(a: float, n: float) -> float:
    # Hybrid absolute/relative error: absolute once both gradients are
    # below 1, relative above; keeps finite-difference noise from
    # dominating near-zero entries.
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-4,
               exclude=None, sample: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check df/dx of a scalar-valued tensor function at x.

    f must build a fresh graph from its argument on every call.  The
    autodiff gradient is compared per element against
    (f(x+h*e) - f(x-h*e)) / (2h).  ``exclude`` masks elements sitting on
    documented kinks (relu at 0, clamp bounds); ``sample`` limits the
    finite-difference sweep to a seeded random subset of elements so
    large tensors stay affordable.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if loss.data.size != 1:
        raise NonScalarLoss("grad_check requires f to return a scalar")
    backward(loss)
    auto = leaf.grad.reshape(-1).copy() if leaf.grad is not None else np.zeros(x.size)

    base = x.data.reshape(-1).copy()
    excluded_mask = np.zeros(x.size, dtype=bool)
    if exclude is not None:
        excluded_mask = np.asarray(exclude, dtype=bool).reshape(-1).copy()
    indices = np.flatnonzero(~excluded_mask)
    if sample is not None and sample < indices.size:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(indices, size=sample, replace=False))

    errors = np.full(x.size, np.nan)
    with no_grad():
        for idx in indices:
            bumped = base.copy()
            bumped[idx] = base[idx] + step
            f_plus = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[idx] = base[idx] - step
            f_minus = f(Tensor(bumped.reshape(x.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * step)
            errors[idx] = _rel_error(auto[idx], numeric)

    checked = indices.size
    max_err = float(np.nanmax(errors[indices])) if checked else 0.0
    return GradCheckReport(max_rel_error=max_err, checked=checked,
                           excluded=int(x.size - checked), tol=tol, step=step,
                           errors=errors.reshape(x.shape))


def grad_check_params(loss_fn, params, step: float = 1e-5, tol: float = 1e-4,
                      sample_per_param: int | None = None, seed: int = 0):
    """Check a multi-parameter scalar closure against finite differences.

    loss_fn() reads the given parameter tensors and returns a scalar
    Tensor; its randomness must be frozen by the caller.  Returns a dict
    mapping parameter index to GradCheckReport.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    autos = []
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradient(f"parameter {i} (shape {p.shape}) has no gradient")
        autos.append(p.grad.reshape(-1).copy())
        p.grad = None

    reports = {}
    with no_grad():
        for i, p in enumerate(params):
            flat = p.data.reshape(-1)
            indices = np.arange(flat.size)
            if sample_per_param is not None and sample_per_param < flat.size:
                rng = np.random.default_rng(seed + i)
                indices = np.sort(rng.choice(flat.size, size=sample_per_param, replace=False))
            errors = np.full(flat.size, np.nan)
            for idx in indices:
                original = flat[idx]
                flat[idx] = original + step
                f_plus = loss_fn().item()
                flat[idx] = original - step
                f_minus = loss_fn().item()
                flat[idx] = original
                numeric = (f_plus - f_minus) / (2.0 * step)
                errors[idx] = _rel_error(autos[i][idx], numeric)
            max_err = float(np.nanmax(errors[indices])) if indices.size else 0.0
            reports[i] = GradCheckReport(max_rel_error=max_err, checked=int(indices.size),
                                         excluded=int(flat.size - indices.size), tol=tol,
                                         step=step, errors=errors.reshape(p.shape))
    return reports
