"""Dense rank-4 tensor numerics with reverse-mode gradients.

Everything downstream (the recurrent cell, the detector, the loss) is built
from the handful of operations in this module.  Conventions:

* A :class:`Tensor4` always has shape ``(n, c, h, w)`` and dtype float64.
* Convolutions are cross-correlations with same-padding; kernel sizes are odd
  so spatial dims are preserved.
* Gradients are accumulated by reverse-mode traversal of the recorded op
  graph.  Feature maps carry their gradient in ``Tensor4.grad``; kernel
  weights and biases accumulate into ``ConvKernel.gweight`` / ``gbias``.
* :func:`numeric_gradient` is the central-difference oracle that every
  analytic gradient in the package is checked against.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor4",
    "ConvKernel",
    "no_grad",
    "conv2d",
    "avg_pool2",
    "sigmoid",
    "tanh",
    "softplus",
    "leaky_relu",
    "add",
    "multiply",
    "add_array",
    "mul_array",
    "scale",
    "reduce_sum",
    "dropout",
    "numeric_gradient",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable op-graph recording within the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_f64(data) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=np.float64)


class Tensor4:
    """A (n, c, h, w) float64 array, optionally part of a gradient graph.

    All public operations reject or never produce non-finite values, so a
    NaN/Inf surfacing anywhere is caught at the op that created it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f64(data)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 requires 4 dims (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"Tensor4 dims must all be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor4 holds a non-finite value (NaN or Inf)")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor4, ...] = ()
        self._bwd: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor4":
        """A copy cut off from the graph; used at truncation boundaries."""
        return Tensor4(self.data.copy())

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar node."""
        if self.data.size != 1:
            raise ValueError("backward() must start from a scalar (1,1,1,1) node")
        topo: list[Tensor4] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor4, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd()

    def __add__(self, other: "Tensor4") -> "Tensor4":
        return add(self, other)

    def __mul__(self, other: "Tensor4") -> "Tensor4":
        return multiply(self, other)

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor4], bwd) -> Tensor4:
    """Wrap an op result, recording the graph edge only when needed."""
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor4(data, requires_grad=record)
    if record:
        out._parents = tuple(parents)
        out._bwd = bwd(out)
    return out


class ConvKernel:
    """Convolution weights ``(c_out, c_in, k, k)`` with an optional per-channel bias.

    Kernel size must be odd so the same-padding convention keeps spatial dims.
    ``frozen`` kernels still propagate gradients to their inputs but are
    skipped by optimizers.
    """

    __slots__ = ("weight", "bias", "gweight", "gbias", "frozen")

    def __init__(self, weight, bias=None, frozen: bool = False):
        w = _as_f64(weight)
        if w.ndim != 4:
            raise ValueError(f"kernel weight must be (c_out, c_in, k, k), got {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ValueError(f"kernel must be square, got {w.shape[2]}x{w.shape[3]}")
        if w.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got k={w.shape[2]}")
        self.weight = w
        if bias is not None:
            b = _as_f64(bias).reshape(-1)
            if b.shape[0] != w.shape[0]:
                raise ValueError(f"bias length {b.shape[0]} != c_out {w.shape[0]}")
            self.bias = b
        else:
            self.bias = None
        self.gweight: np.ndarray | None = None
        self.gbias: np.ndarray | None = None
        self.frozen = bool(frozen)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def size(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    @classmethod
    def random(cls, c_out: int, c_in: int, k: int, rng: np.random.Generator,
               with_bias: bool = True, bias_fill: float = 0.0) -> "ConvKernel":
        """Uniform init in +-1/sqrt(fan_in); bias constant-filled."""
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        b = np.full(c_out, bias_fill) if with_bias else None
        return cls(w, b)

    @classmethod
    def zeros(cls, c_out: int, c_in: int, k: int, with_bias: bool = True) -> "ConvKernel":
        b = np.zeros(c_out) if with_bias else None
        return cls(np.zeros((c_out, c_in, k, k)), b)

    def zero_grad(self) -> None:
        self.gweight = None
        self.gbias = None

    def _accum_w(self, g: np.ndarray) -> None:
        if self.gweight is None:
            self.gweight = g.copy()
        else:
            self.gweight += g

    def _accum_b(self, g: np.ndarray) -> None:
        if self.gbias is None:
            self.gbias = g.copy()
        else:
            self.gbias += g


def _windows(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """All k x k patches of x zero-padded by `pad`, shape (n, c, h', w', k, k)."""
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))


def conv2d(x: Tensor4, kernel: ConvKernel, padding: int) -> Tensor4:
    """Same-padding cross-correlation of x with `kernel`, bias added per channel.

    `padding` must be (k-1)/2; other paddings are outside this package's
    contract and rejected.
    """
    k = kernel.k
    if kernel.c_in != x.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {kernel.c_in}"
        )
    if padding != (k - 1) // 2:
        raise ValueError(f"conv2d requires same-padding (k-1)/2={(k - 1) // 2}, got {padding}")

    win = _windows(x.data, k, padding)
    out = np.einsum("nchwuv,ocuv->nohw", win, kernel.weight, optimize=True)
    if kernel.bias is not None:
        out += kernel.bias[None, :, None, None]

    kernel_grad = _GRAD_ENABLED and not kernel.frozen

    def bwd(node: Tensor4):
        def run():
            g = node.grad
            if kernel_grad:
                kernel._accum_w(np.einsum("nchwuv,nohw->ocuv", win, g, optimize=True))
                if kernel.bias is not None:
                    kernel._accum_b(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gwin = _windows(g, k, padding)
                wflip = kernel.weight[:, :, ::-1, ::-1]
                x._accum(np.einsum("nohwuv,ocuv->nchw", gwin, wflip, optimize=True))
        return run

    record = _GRAD_ENABLED and (x.requires_grad or kernel_grad)
    result = Tensor4(out, requires_grad=record)
    if record:
        result._parents = (x,)
        result._bwd = bwd(result)
    return result


def avg_pool2(x: Tensor4) -> Tensor4:
    """2x2 average pooling with stride 2, ceil mode; border cells average
    only the pixels actually inside the input."""
    n, c, h, w = x.shape
    ph, pw = (h + 1) // 2, (w + 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 2 * ph - h), (0, 2 * pw - w)))
    s = xp[:, :, ::2, ::2] + xp[:, :, 1::2, ::2] + xp[:, :, ::2, 1::2] + xp[:, :, 1::2, 1::2]
    rows = np.full(ph, 2.0)
    cols = np.full(pw, 2.0)
    if h % 2:
        rows[-1] = 1.0
    if w % 2:
        cols[-1] = 1.0
    counts = rows[:, None] * cols[None, :]
    out = s / counts

    def bwd(node: Tensor4):
        def run():
            g = node.grad / counts
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            x._accum(up[:, :, :h, :w])
        return run

    return _node(out, (x,), bwd)


def _unary(x: Tensor4, fwd, dfn) -> Tensor4:
    out = fwd(x.data)

    def bwd(node: Tensor4):
        def run():
            x._accum(node.grad * dfn(x.data, out))
        return run

    return _node(out, (x,), bwd)


def sigmoid(x: Tensor4) -> Tensor4:
    def fwd(a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd, lambda a, o: o * (1.0 - o))


def tanh(x: Tensor4) -> Tensor4:
    return _unary(x, np.tanh, lambda a, o: 1.0 - o * o)


def softplus(x: Tensor4) -> Tensor4:
    """log(1 + exp(x)), computed stably; building block of the BCE losses."""
    return _unary(
        x,
        lambda a: np.logaddexp(0.0, a),
        lambda a, o: _sig_arr(a),
    )


def _sig_arr(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def leaky_relu(x: Tensor4, slope: float = 0.1) -> Tensor4:
    return _unary(
        x,
        lambda a: np.where(a > 0, a, slope * a),
        lambda a, o: np.where(a > 0, 1.0, slope),
    )


def _check_same_dims(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op} dim mismatch: {a.shape} vs {b.shape}")


def add(x: Tensor4, y: Tensor4) -> Tensor4:
    _check_same_dims(x, y, "add")

    def bwd(node: Tensor4):
        def run():
            if x.requires_grad:
                x._accum(node.grad)
            if y.requires_grad:
                y._accum(node.grad)
        return run

    return _node(x.data + y.data, (x, y), bwd)


def multiply(x: Tensor4, y: Tensor4) -> Tensor4:
    """Hadamard (elementwise) product."""
    _check_same_dims(x, y, "multiply")

    def bwd(node: Tensor4):
        def run():
            if x.requires_grad:
                x._accum(node.grad * y.data)
            if y.requires_grad:
                y._accum(node.grad * x.data)
        return run

    return _node(x.data * y.data, (x, y), bwd)


def add_array(x: Tensor4, arr) -> Tensor4:
    """Add a constant array (no gradient flows to the constant)."""
    a = np.asarray(arr, dtype=np.float64)

    def bwd(node: Tensor4):
        def run():
            x._accum(node.grad)
        return run

    return _node(x.data + a, (x,), bwd)


def mul_array(x: Tensor4, arr) -> Tensor4:
    """Multiply by a constant array or scalar (masks, loss weights)."""
    a = np.asarray(arr, dtype=np.float64)

    def bwd(node: Tensor4):
        def run():
            x._accum(node.grad * a)
        return run

    return _node(x.data * a, (x,), bwd)


def scale(x: Tensor4, s: float) -> Tensor4:
    return mul_array(x, float(s))


def reduce_sum(x: Tensor4) -> Tensor4:
    """Sum all elements into a (1, 1, 1, 1) scalar node."""
    out = np.array(x.data.sum(), dtype=np.float64).reshape(1, 1, 1, 1)

    def bwd(node: Tensor4):
        def run():
            x._accum(np.broadcast_to(node.grad.reshape(()), x.shape))
        return run

    return _node(out, (x,), bwd)


def dropout(x: Tensor4, rate: float, rng: np.random.Generator) -> Tensor4:
    """Inverted dropout; only meaningful during training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul_array(x, mask)


def numeric_gradient(f: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at `params`.

    The oracle against which all analytic gradients are validated; it never
    shares code with any backward pass.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    p = np.asarray(params, dtype=np.float64).reshape(-1).copy()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        hi = f(p)
        p[i] = orig - step
        lo = f(p)
        p[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"numeric_gradient: non-finite evaluation at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad
