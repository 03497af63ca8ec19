"""Dense tensors with reverse-mode differentiation.

Every primitive the segmentation network needs lives here: matrix products,
row softmax, convolution, batch normalization, pooling, bilinear resampling
and the elementwise family. Each primitive computes its forward value with
numpy, records a backward closure on the output, and checks the result for
non-finite values.

Storage is 32-bit by default. Wrap code in ``precision(np.float64)`` to build
64-bit tensors, which is what the finite-difference checks use.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "ShapeError",
    "ConfigError",
    "StateError",
    "precision",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "transpose",
    "reshape",
    "softmax_rows",
    "conv2d",
    "conv_output_size",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scalar_mul",
    "sum_all",
    "mean_all",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "bilinear_resize",
    "crop2d",
    "cross_entropy",
]


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not fit together."""


class ConfigError(ValueError):
    """Primitive hyperparameters describe an impossible computation."""


class StateError(RuntimeError):
    """A stateful primitive was used before its state was initialized."""


_state = threading.local()
_seq = itertools.count()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Build new tensors with ``dtype`` inside the block."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """An n-d array that can take part in gradient computation.

    Network activations are 4-d (batch, channel, height, width); the
    attention products also pass 3-d (batch, rows, cols) tensors through
    :func:`matmul` and :func:`softmax_rows`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        target = np.dtype(dtype) if dtype is not None else default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=target)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; all of it routes through the primitives below.
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(other, self)

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Nodes are visited in exact reverse execution order. Leaf gradients
        accumulate into ``.grad`` across calls until zeroed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(_finite(data, op), dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Products and reshapes
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over any leading ones."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(src),), "reshape")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    a = _as_tensor(a)
    _finite(a.data, "softmax_rows input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), backward, "softmax_rows")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-d cross-correlation (no kernel flip) over NCHW input."""
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d expects {Ci} input channels, got {C} (input {x.shape})")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho <= 0 or Wo <= 0:
        raise ConfigError(
            f"conv2d output extent {Ho}x{Wo} is not positive for input {H}x{W}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}, dilation {dilation}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def window(i: int, j: int) -> tuple[slice, slice]:
        r, c = i * dilation, j * dilation
        return slice(r, r + stride * (Ho - 1) + 1, stride), slice(c, c + stride * (Wo - 1) + 1, stride)

    # cols: (B, Ho, Wo, C, kh*kw) flattened to rows of length C*kh*kw
    cols = np.empty((B, Ho, Wo, C, kh * kw), dtype=x.dtype)
    for t, (i, j) in enumerate(taps):
        rs, cs = window(i, j)
        cols[..., t] = xp[:, :, rs, cs].transpose(0, 2, 3, 1)
    cols = cols.reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh * kw)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                rs, cs = window(i, j)
                gxp[:, :, rs, cs] += gcols[..., t].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention).
    Evaluation mode requires initialized running buffers.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d parameters {gamma.shape}/{beta.shape} do not match {C} channels")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running_mean is not None and running_var is not None:
            m = xd.size // C
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise StateError("batchnorm2d in eval mode needs running statistics")
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                ) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# Elementwise family
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may broadcast along unit axes of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}") from exc
    if out.shape != a.shape:
        raise ShapeError(f"mul may only broadcast the second operand: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _unbroadcast(g * ad, bd.shape)

    return _make(out, (a, b), backward, "mul")


def scalar_mul(s, x: Tensor) -> Tensor:
    """Scale ``x`` by a python float or a single-element tensor."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ShapeError(f"scalar_mul needs a single-element scale, got {s.shape}")
        sv = s.data.reshape(())
        xd = x.data

        def backward(g):
            return (g * xd).sum().reshape(s.shape), g * sv

        return _make(xd * sv, (s, x), backward, "scalar_mul")
    c = x.dtype.type(s)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = stride or k
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ConfigError(f"avg_pool2d window {k} exceeds input {H}x{W}")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += x.data[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
    out /= k * k

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += gk
        return (gx,)

    return _make(out, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; ties go to the first tap in row-major window order."""
    B, C, H, W = x.shape
    Ho = conv_output_size(H, k, stride, padding, 1)
    Wo = conv_output_size(W, k, stride, padding, 1)
    if Ho <= 0 or Wo <= 0:
        raise ConfigError(f"max_pool2d window {k} does not fit input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    best = np.full((B, C, Ho, Wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((B, C, Ho, Wo), dtype=np.int32)
    for t in range(k * k):
        i, j = divmod(t, k)
        win = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
        better = win > best
        best = np.where(better, win, best)
        arg = np.where(better, t, arg)

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += np.where(
                arg == t, g, 0
            )
        return (gxp[:, :, padding : padding + H, padding : padding + W],)

    return _make(best, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),), "global_avg_pool")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the weights that produce output sample i (half-pixel centers)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation with half-pixel centers (``align_corners=False``)."""
    if out_h <= 0 or out_w <= 0:
        raise ConfigError(f"bilinear_resize target {out_h}x{out_w} must be positive")
    H, W = x.shape[2:]
    if (H, W) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    rh = _interp_matrix(H, out_h, x.dtype)
    rw = _interp_matrix(W, out_w, x.dtype)
    out = rh @ x.data @ rw.T
    return _make(out, (x,), lambda g: (rh.T @ g @ rw,), "bilinear_resize")


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    H, W = x.shape[2:]
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ShapeError(f"crop {h}x{w} at ({top},{left}) falls outside {H}x{W}")
    region = (slice(None), slice(None), slice(top, top + h), slice(left, left + w))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[region] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[region]), (x,), backward, "crop2d")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood of integer ``labels``.

    ``logits`` is (B, K, H, W); ``labels`` is an integer (B, H, W) raster.
    """
    B, K, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    bad = (labels < 0) | (labels >= K)
    if bad.any():
        b, r, c = (int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"label {labels[b, r, c]} out of range [0, {K}) at batch {b}, pixel ({r}, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    n = B * H * W
    loss = -(logp * onehot).sum() / n

    def backward(g):
        return ((np.exp(logp) - onehot) * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
