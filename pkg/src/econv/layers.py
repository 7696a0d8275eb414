"""Forward and backward kernels for conv, max pool, ReLU and global average pool.

Convolution and max pooling take an equivalent stride ``est``: kernel taps
are spaced ``est`` input elements apart, so output ``(i, j)`` reads input
rows ``i * stride + a * est - pad`` for tap row ``a = 0 .. kernel_h - 1``
(columns likewise).  ``est = 1`` is the classic layer.  Indices are 0-based;
a 1-based tap ``i'`` in the usual textbook form corresponds to ``a = i' - 1``.

The canonical conv kernel accumulates every output element in the fixed order
tap row, tap column, input channel, then adds the bias.  It only uses
elementwise numpy arithmetic, so each output element sees the same rounding
sequence whatever the tensor shape, stride or est.  That property is what
makes an eConv/ePool network bit-identical to the strided original on the
shared grid.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConsistencyError, ShapeError


def _check_positive(name, value, minimum=1):
    if int(value) != value or value < minimum:
        raise ShapeError(f"{name} must be an integer >= {minimum}, got {value}")


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad: int = 0
    est: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride", "est"):
            _check_positive(name, getattr(self, name))
        _check_positive("pad", self.pad, 0)

    @property
    def weight_dims(self):
        # out_channels kernels of shape (kh, kw, D) side by side: channel c * D + d
        return (self.kernel_h, self.kernel_w, self.in_channels * self.out_channels)

    @property
    def bias_dims(self):
        return (1, 1, self.out_channels)


@dataclass(frozen=True)
class PoolSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    est: int = 1

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride", "est"):
            _check_positive(name, getattr(self, name))
        _check_positive("pad", self.pad, 0)


@dataclass
class PoolArgmax:
    """Winning input coordinate for every pool output element.

    ``rows`` and ``cols`` have the pool output shape and hold coordinates in
    the unpadded input.
    """

    rows: np.ndarray
    cols: np.ndarray
    input_dims: tuple


def output_size(n, kernel, stride, pad, est):
    span = (kernel - 1) * est + 1
    room = n + 2 * pad - span
    if room < 0:
        raise ShapeError(
            f"input extent {n} (pad {pad}) is smaller than the kernel span {span}"
        )
    return room // stride + 1


def conv_output_dims(input_dims, spec):
    h, w, c = input_dims
    if c != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {c}")
    return (
        output_size(h, spec.kernel_h, spec.stride, spec.pad, spec.est),
        output_size(w, spec.kernel_w, spec.stride, spec.pad, spec.est),
        spec.out_channels,
    )


def pool_output_dims(input_dims, spec):
    h, w, c = input_dims
    return (
        output_size(h, spec.kernel_h, spec.stride, spec.pad, spec.est),
        output_size(w, spec.kernel_w, spec.stride, spec.pad, spec.est),
        c,
    )


def _tap_slices(a, b, est, stride, out_h, out_w):
    r0 = a * est
    c0 = b * est
    return (
        slice(r0, r0 + stride * (out_h - 1) + 1, stride),
        slice(c0, c0 + stride * (out_w - 1) + 1, stride),
    )


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)), constant_values=value)


def _check_weights(weights, bias, spec):
    if weights.shape != spec.weight_dims:
        raise ShapeError(f"weights have shape {weights.shape}, expected {spec.weight_dims}")
    if spec.has_bias:
        if bias is None:
            raise ShapeError("conv spec demands a bias but none was given")
        if bias.shape != spec.bias_dims:
            raise ShapeError(f"bias has shape {bias.shape}, expected {spec.bias_dims}")
    return _taps(weights, spec)


def _taps(weights, spec):
    """View the stored weights as (kh, kw, D, C)."""
    w = weights.reshape(spec.kernel_h, spec.kernel_w, spec.out_channels, spec.in_channels)
    return w.transpose(0, 1, 3, 2)


def conv_forward(x, weights, bias, spec, fast=False):
    """Equivalent convolution; ``fast`` selects the im2col + matmul path.

    The fast path reassociates the sum and so agrees with the canonical
    kernel only to rounding (about 1e-12 on unit-scale data).
    """
    out_h, out_w, out_c = conv_output_dims(x.shape, spec)
    w4 = _check_weights(weights, bias, spec)
    xp = _pad(x, spec.pad)
    if fast:
        out = _conv_im2col(xp, w4, spec, out_h, out_w)
    else:
        out = np.zeros((out_h, out_w, out_c))
        tmp = np.empty_like(out)
        for a in range(spec.kernel_h):
            for b in range(spec.kernel_w):
                rows, cols = _tap_slices(a, b, spec.est, spec.stride, out_h, out_w)
                patch = xp[rows, cols, :]
                for d in range(spec.in_channels):
                    np.multiply(patch[:, :, d, None], w4[a, b, d], out=tmp)
                    out += tmp
    if spec.has_bias:
        out += bias.reshape(out_c)
    return out


def im2col(xp, spec, out_h, out_w):
    """Gather dilated, strided windows of a padded input into rows.

    Returns an array of shape ``(out_h * out_w, kernel_h * kernel_w * D)``
    whose column order matches the flattened ``(kh, kw, D)`` weight layout.
    """
    span_h = (spec.kernel_h - 1) * spec.est + 1
    span_w = (spec.kernel_w - 1) * spec.est + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(0, 1))
    win = win[: spec.stride * (out_h - 1) + 1 : spec.stride,
              : spec.stride * (out_w - 1) + 1 : spec.stride,
              :, :: spec.est, :: spec.est]
    # win: (out_h, out_w, D, kh, kw) -> (out_h, out_w, kh, kw, D)
    win = win.transpose(0, 1, 3, 4, 2)
    return win.reshape(out_h * out_w, -1)


def col2im(cols, padded_dims, spec, out_h, out_w):
    """Scatter-add window rows back onto a padded input grid."""
    grad = np.zeros(padded_dims)
    c5 = cols.reshape(out_h, out_w, spec.kernel_h, spec.kernel_w, -1)
    for a in range(spec.kernel_h):
        for b in range(spec.kernel_w):
            rows, cs = _tap_slices(a, b, spec.est, spec.stride, out_h, out_w)
            grad[rows, cs, :] += c5[:, :, a, b, :]
    return grad


def _conv_im2col(xp, w4, spec, out_h, out_w):
    cols = im2col(xp, spec, out_h, out_w)
    out = cols @ w4.reshape(-1, spec.out_channels)
    return out.reshape(out_h, out_w, spec.out_channels)


def conv_backward(x, weights, spec, grad_out):
    """Gradients of :func:`conv_forward` with respect to input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_bias`` is None
    when the spec has no bias.
    """
    out_dims = conv_output_dims(x.shape, spec)
    if grad_out.shape != out_dims:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {out_dims}")
    if weights.shape != spec.weight_dims:
        raise ShapeError(f"weights have shape {weights.shape}, expected {spec.weight_dims}")
    out_h, out_w, _ = out_dims
    w4 = _taps(weights, spec)
    xp = _pad(x, spec.pad)
    grad_xp = np.zeros_like(xp)
    grad_w4 = np.zeros(w4.shape)
    for a in range(spec.kernel_h):
        for b in range(spec.kernel_w):
            rows, cols = _tap_slices(a, b, spec.est, spec.stride, out_h, out_w)
            patch = xp[rows, cols, :]
            grad_w4[a, b] = np.tensordot(patch, grad_out, axes=([0, 1], [0, 1]))
            grad_xp[rows, cols, :] += np.tensordot(grad_out, w4[a, b], axes=([2], [1]))
    p = spec.pad
    grad_x = grad_xp[p : p + x.shape[0], p : p + x.shape[1], :].copy()
    grad_b = grad_out.sum(axis=(0, 1)).reshape(spec.bias_dims) if spec.has_bias else None
    return grad_x, grad_w4.transpose(0, 1, 3, 2).reshape(spec.weight_dims), grad_b


def pool_forward(x, spec):
    """Equivalent max pooling.  Returns ``(output, PoolArgmax)``.

    Padding takes part as -inf.  Ties go to the first tap in row-major
    window order because only a strictly larger value replaces the running
    maximum.
    """
    out_h, out_w, ch = pool_output_dims(x.shape, spec)
    p = spec.pad
    xp = _pad(x, p, value=-np.inf)
    best = np.full((out_h, out_w, ch), -np.inf)
    arg_r = np.zeros((out_h, out_w, ch), dtype=np.int64)
    arg_c = np.zeros((out_h, out_w, ch), dtype=np.int64)
    base_r = (np.arange(out_h) * spec.stride - p)[:, None, None]
    base_c = (np.arange(out_w) * spec.stride - p)[None, :, None]
    for a in range(spec.kernel_h):
        for b in range(spec.kernel_w):
            rows, cols = _tap_slices(a, b, spec.est, spec.stride, out_h, out_w)
            patch = xp[rows, cols, :]
            better = patch > best
            best = np.where(better, patch, best)
            arg_r = np.where(better, base_r + a * spec.est, arg_r)
            arg_c = np.where(better, base_c + b * spec.est, arg_c)
    if np.isneginf(best).any():
        raise ShapeError("a pooling window lies entirely in the padding")
    return best, PoolArgmax(arg_r, arg_c, tuple(x.shape))


def pool_backward(argmax, input_dims, grad_out):
    if grad_out.shape != argmax.rows.shape:
        raise ShapeError(
            f"grad_out has shape {grad_out.shape}, expected {argmax.rows.shape}"
        )
    h, w, ch = input_dims
    rows, cols = argmax.rows, argmax.cols
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise ConsistencyError("recorded argmax lies outside the input")
    chan = np.broadcast_to(np.arange(ch), rows.shape)
    grad = np.zeros((h, w, ch))
    # windows overlap whenever stride < span, so accumulate
    np.add.at(grad, (rows, cols, chan), grad_out)
    return grad


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    if x.shape != grad_out.shape:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def gap_forward(x):
    h, w, c = x.shape
    return x.sum(axis=(0, 1)).reshape(1, 1, c) / (h * w)


def gap_backward(input_dims, grad_out):
    h, w, c = input_dims
    if grad_out.shape != (1, 1, c):
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {(1, 1, c)}")
    return np.broadcast_to(grad_out / (h * w), (h, w, c)).copy()
