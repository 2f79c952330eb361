"""Minimal float64 tensor library with reverse-mode automatic differentiation.

Everything downstream (the denoiser, the projectors, the losses) runs on
these Tensors. Arrays are row-major numpy float64; gradients are recorded
on a per-op tape of parent references and vector-Jacobian closures.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

# When enabled (the default), every op validates that its output is finite
# and fails fast instead of letting NaN/Inf propagate through the tape. Hot
# loops may suspend it and check at coarser granularity instead.
GUARD_FINITE = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TensorError(ValueError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    if GUARD_FINITE and not np.all(np.isfinite(data)):
        raise TensorError(f"non-finite values produced by op '{op}'")


@contextmanager
def finite_guard(enabled: bool):
    """Temporarily enable/disable the per-op NaN/Inf guard."""
    global GUARD_FINITE
    prev = GUARD_FINITE
    GUARD_FINITE = enabled
    try:
        yield
    finally:
        GUARD_FINITE = prev


class Tensor:
    """An n-dimensional float64 array, optionally participating in the tape.

    A Tensor produced by an op keeps references to its parents and a
    closure computing the vector-Jacobian product; `backward()` walks the
    tape once in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    # -- backward --------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into `.grad`."""
        if self.data.size != 1:
            raise TensorError(f"backward requires a scalar, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise TensorError("backward on non-finite loss")

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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and linear ops ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise TensorError("matmul requires at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise TensorError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape) \
            if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape) \
            if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def transpose_last2(a: Tensor) -> Tensor:
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._from_op(out, (a,), vjp, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(out, (a,), vjp, "reshape")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(out, (a,), vjp, "permute")


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate along axis 0; the gradient splits back row-wise."""
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(out, tuple(parts), vjp, "concat_rows")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by index (embedding-table lookup); scatter-add on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]
    unique = idx.size < 2 or bool(np.all(np.diff(idx) > 0))

    def vjp(g):
        ga = np.zeros_like(a.data)
        if unique:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._from_op(out, (a,), vjp, "take_rows")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), vjp, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), vjp, "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise TensorError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    return tmean(square(sub(a, b)))


# -- nonlinearities --------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * dens),)

    return Tensor._from_op(out, (a,), vjp, "gelu")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    if a.data.shape[-1] < 1:
        raise TensorError("softmax over an empty last dimension")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (a,), vjp, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gg = _unbroadcast(g * xhat, gain.data.shape)
        gb = _unbroadcast(g, bias.data.shape)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (a, gain, bias), vjp, "layer_norm")


# -- convolution -----------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[1] - kh) // stride + 1
    ow = (x.shape[2] - kw) // stride + 1
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = xshape
    gx = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    g6 = gcols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, i, j]
    if pad:
        gx = gx[:, pad:-pad, pad:-pad]
    return gx


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """True 2-D convolution of a single image [C,H,W] with kernels [O,C,kh,kw].

    The kernel is flipped (convolution, not cross-correlation), so a delta
    input reproduces the kernel at the delta location.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise TensorError("conv2d expects x=[C,H,W], kernels=[O,C,kh,kw]")
    if x.data.shape[0] != kernels.data.shape[1]:
        raise TensorError("conv2d channel mismatch")
    co, ci, kh, kw = kernels.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w2d = kernels.data[:, :, ::-1, ::-1].reshape(co, -1)
    out = (w2d @ cols).reshape(co, oh, ow)

    def vjp(g):
        g2d = g.reshape(co, -1)
        gw = (g2d @ cols.T).reshape(kernels.data.shape)[:, :, ::-1, ::-1].copy()
        gcols = w2d.T @ g2d
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, pad)
        return gx, gw

    return Tensor._from_op(out, (x, kernels), vjp, "conv2d")


# -- optimizer state --------------------------------------------------------------


class AdamW:
    """AdamW with decoupled (multiplicative) weight decay over a named param dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TensorError(f"non-finite gradient for parameter '{name}'")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.step_count = step
        for name in self.params:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()


class Ema:
    """Exponential moving average of a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], decay: float = 0.9999):
        if not 0.0 < decay < 1.0:
            raise TensorError(f"EMA decay must lie in (0,1), got {decay}")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        d = self.decay
        for name, p in params.items():
            if self.shadow[name].shape != p.data.shape:
                raise TensorError(f"EMA shape mismatch for '{name}'")
            self.shadow[name] = d * self.shadow[name] + (1.0 - d) * p.data

    def copy_to(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            p.data = self.shadow[name].copy()
