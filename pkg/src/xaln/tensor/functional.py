"""Differentiable ops on :class:`Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return make_result(a.data + b.data, "add", (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return make_result(a.data - b.data, "sub", (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result(a.data * b.data, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_result(out, "div", (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(out, "matmul", (a, b), back)


# -- pointwise nonlinearities -------------------------------------------------

class ReluPatterns:
    """Record ReLU on/off masks on one pass, then replay them on later passes.

    Replaying keeps a finite-difference stencil on the smooth piece of a
    piecewise-linear network, the same way a fixed dropout mask does.
    """

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.replay = False
        self._i = 0

    def next(self, d: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.masks.append(d > 0)
            return self.masks[-1]
        mask = self.masks[self._i]
        if mask.shape != d.shape:
            raise ShapeError(f"replayed ReLU mask {mask.shape} does not fit input {d.shape}")
        self._i += 1
        return mask

    def rewind(self) -> None:
        self.replay = True
        self._i = 0


_RELU_PATTERNS: ReluPatterns | None = None


def set_relu_patterns(p: ReluPatterns | None) -> None:
    global _RELU_PATTERNS
    _RELU_PATTERNS = p


def relu(x: Tensor) -> Tensor:
    if _RELU_PATTERNS is None:
        out = np.maximum(x.data, 0)
        return make_result(out, "relu", (x,), lambda g: (g * (out > 0),))
    mask = _RELU_PATTERNS.next(x.data)
    return make_result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_result(out, "log", (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return make_result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


# -- reductions and reshaping ------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), "sum", (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_result(out, "transpose", (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- normalised exponentials ------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight exactly 0."""
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, d.shape)
        d = np.where(mask, d, -np.inf)
    shifted = d - np.max(d, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(d - m).sum(axis=axis, keepdims=True))
    out = d - lse
    sm = np.exp(out)
    return make_result(out, "log_softmax", (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return mul(sum(mul(log_softmax(logits, axis=1), onehot)), -1.0 / len(labels))


# -- regularisation ------------------------------------------------------------

def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) in training, identity otherwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return make_result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def _channel_sum(a: np.ndarray) -> np.ndarray:
    return np.einsum("ncl->c", a.reshape(a.shape[0], a.shape[1], -1))


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return np.einsum("ncl,ncl->c", a.reshape(n, c, -1), b.reshape(n, c, -1))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of an ``(N, C, ...)`` tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    m = x.data.size // x.shape[1]
    if training:
        mu = _channel_sum(x.data) / m
        xc = x.data - mu.reshape(bshape)
        var = _channel_dot(xc, xc) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        xc = x.data - running_mean.reshape(bshape).astype(x.dtype)
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def back(g):
        gbeta = _channel_sum(g)
        ggamma = _channel_dot(g, xhat)
        scale = (gamma.data * inv).reshape(bshape)
        if training:
            gx = scale * (g - (gbeta / m).reshape(bshape) - xhat * (ggamma / m).reshape(bshape))
        else:
            gx = g * scale
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), "batch_norm", (x, gamma, beta), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(x.ndim - 1))
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out.astype(x.dtype), "layer_norm", (x, gamma, beta), back)


# -- convolutions -----------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N*Ho*Wo, k*k*C)`` patch matrix (channels innermost)."""
    n, _, _, c = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into an ``(N, H, W, C)`` image."""
    n, h, w, c = shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, i, j]
    if padding:
        out = out[:, padding:-padding, padding:-padding]
    return out


def _nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _check_conv(x: Tensor, weight: Tensor, stride: int, padding: int, cin_axis: int) -> int:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv expects 4-d input and weight, got {x.shape} and {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ShapeError(f"conv kernel must be square, got {weight.shape}")
    if x.shape[1] != weight.shape[cin_axis]:
        raise ShapeError(f"conv channel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1 or k < 1 or padding < 0:
        raise ShapeError(f"invalid conv geometry k={k} stride={stride} padding={padding}")
    return k


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation; ``weight`` is ``(C_out, C_in, K, K)``."""
    k = _check_conv(x, weight, stride, padding, cin_axis=1)
    n, cin, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"input {x.shape} smaller than kernel {k} with padding {padding}")
    cout = weight.shape[0]
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    cols = _im2col(_nhwc(x.data), k, stride, padding)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = _nchw(out.reshape(n, ho, wo, cout))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = _nhwc(g).reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gx = _nchw(_col2im(g2 @ wmat, (n, h, w, cin), k, stride, padding))
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, "conv2d", inputs, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed 2-d convolution; ``weight`` is ``(C_in, C_out, K, K)``.

    The forward pass is exactly the input-gradient of :func:`conv2d` with the
    same kernel, so the two are adjoint.
    """
    k = _check_conv(x, weight, stride, padding, cin_axis=0)
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output would be empty for input {x.shape}")
    rows = _nhwc(x.data).reshape(-1, cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cin, -1)
    out = _col2im(rows @ wmat, (n, ho, wo, cout), k, stride, padding)
    if bias is not None:
        out += bias.data
    out = _nchw(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gcols = _im2col(_nhwc(g), k, stride, padding)
        gx = gw = None
        if x.requires_grad:
            gx = _nchw((gcols @ wmat.T).reshape(n, h, w, cin))
        if weight.requires_grad:
            gw = np.ascontiguousarray((rows.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, "conv_transpose2d", inputs, back)
