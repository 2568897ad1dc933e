"""Forward and backward implementations of the layer primitives.

All arrays are float64 and row-major. Video/feature blocks are laid out
``(time, height, width, channels)``; convolution weights are
``(kt, kh, kw, in_channels, out_channels)``. Parameters are frozen, so
every backward op only returns the gradient with respect to its input.

Each backward computes the exact vector-Jacobian product of its forward;
the test suite holds them to central finite differences at 1e-6 relative
error.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

DIVNORM_EPS = 1e-6


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer.

    ``kt`` is the temporal kernel extent: 1 for per-frame convolutions,
    2 for the frame-pair convolution of the dynamics stream. Spatial
    padding is "same" (zero padded, extents preserved at stride 1) or
    "valid"; the temporal axis is never padded, so kt=2 collapses a frame
    pair into a single output map.
    """

    kt: int
    kh: int
    kw: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kt not in (1, 2):
            raise ShapeMismatchError(
                "temporal kernel extent must be 1 or 2", dimension="kt",
                expected="1 or 2", actual=self.kt)
        for name in ("kh", "kw"):
            if getattr(self, name) < 1:
                raise ShapeMismatchError(
                    "kernel extents must be >= 1", dimension=name,
                    expected=">= 1", actual=getattr(self, name))
        if self.stride < 1:
            raise ShapeMismatchError(
                "stride must be >= 1", dimension="stride",
                expected=">= 1", actual=self.stride)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatchError(
                "channel extents must be >= 1", dimension="channels",
                expected=">= 1",
                actual=(self.in_channels, self.out_channels))
        if self.padding not in ("same", "valid"):
            raise ShapeMismatchError(
                f"unknown padding mode {self.padding!r}", dimension="padding")

    @property
    def weight_shape(self):
        return (self.kt, self.kh, self.kw, self.in_channels, self.out_channels)


def _out_extent(extent, kernel, stride, padding):
    if padding == "same":
        return -(-extent // stride)  # ceil division
    if extent < kernel:
        raise ShapeMismatchError(
            "input smaller than kernel under valid padding",
            dimension="spatial", expected=f">= {kernel}", actual=extent)
    return (extent - kernel) // stride + 1


def _same_padding(extent, kernel, stride):
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def conv_output_shape(input_shape, spec):
    """Output shape of conv_forward for the given 4-d input shape."""
    t, h, w, c = input_shape
    if c != spec.in_channels:
        raise ShapeMismatchError(
            "input channel extent does not match spec",
            dimension="in_channels", expected=spec.in_channels, actual=c)
    if t < spec.kt:
        raise ShapeMismatchError(
            "temporal extent smaller than temporal kernel",
            dimension="time", expected=f">= {spec.kt}", actual=t)
    ho = _out_extent(h, spec.kh, spec.stride, spec.padding)
    wo = _out_extent(w, spec.kw, spec.stride, spec.padding)
    return (t - spec.kt + 1, ho, wo, spec.out_channels)


def _check_conv_args(x, weights, bias, spec):
    if x.ndim != 4:
        raise ShapeMismatchError(
            "conv input must be (time, height, width, channels)",
            dimension="ndim", expected=4, actual=x.ndim)
    if weights.shape != spec.weight_shape:
        raise ShapeMismatchError(
            "weight shape does not match spec", dimension="weights",
            expected=spec.weight_shape, actual=weights.shape)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeMismatchError(
            "bias shape does not match spec", dimension="bias",
            expected=(spec.out_channels,), actual=bias.shape)


def _pad_spatial(x, spec):
    if spec.padding == "valid":
        return x
    ph = _same_padding(x.shape[1], spec.kh, spec.stride)
    pw = _same_padding(x.shape[2], spec.kw, spec.stride)
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def conv_forward(x, weights, bias, spec):
    """Cross-correlate ``x`` with ``weights`` and add ``bias``.

    x: (T, H, W, Cin); weights: spec.weight_shape; bias: (Cout,) or None.
    Returns (T - kt + 1, Ho, Wo, Cout).
    """
    _check_conv_args(x, weights, bias, spec)
    to, ho, wo, co = conv_output_shape(x.shape, spec)
    xp = _pad_spatial(np.ascontiguousarray(x, dtype=np.float64), spec)
    s = spec.stride
    y = np.zeros((to, ho, wo, co))
    for dt in range(spec.kt):
        win = sliding_window_view(xp[dt:dt + to], (spec.kh, spec.kw), axis=(1, 2))
        win = win[:, ::s, ::s]
        # win: (To, Ho, Wo, Cin, kh, kw) against weights[dt]: (kh, kw, Cin, Cout)
        y += np.tensordot(win, weights[dt], axes=([4, 5, 3], [0, 1, 2]))
    if bias is not None:
        y += bias
    return y


def conv_backward(x, weights, spec, upstream):
    """Gradient of conv_forward with respect to its input.

    ``upstream`` must have the forward output shape. Weights are frozen,
    so no weight gradient is produced.
    """
    _check_conv_args(x, weights, None, spec)
    out_shape = conv_output_shape(x.shape, spec)
    if upstream.shape != out_shape:
        raise ShapeMismatchError(
            "upstream shape does not match conv output", dimension="upstream",
            expected=out_shape, actual=upstream.shape)
    to, ho, wo, _ = out_shape
    s = spec.stride
    if spec.padding == "same":
        ph = _same_padding(x.shape[1], spec.kh, s)
        pw = _same_padding(x.shape[2], spec.kw, s)
    else:
        ph = pw = (0, 0)
    padded_shape = (x.shape[0], x.shape[1] + sum(ph), x.shape[2] + sum(pw),
                    spec.in_channels)
    gxp = np.zeros(padded_shape)
    for dt in range(spec.kt):
        # (To, Ho, Wo, kh, kw, Cin)
        gpatch = np.tensordot(upstream, weights[dt], axes=([3], [3]))
        for i in range(spec.kh):
            for j in range(spec.kw):
                gxp[dt:dt + to,
                    i:i + s * ho:s,
                    j:j + s * wo:s] += gpatch[:, :, :, i, j, :]
    return gxp[:, ph[0]:padded_shape[1] - ph[1], pw[0]:padded_shape[2] - pw[1], :]


def maxpool_forward(x, window, stride):
    """Spatial max pooling over square windows (valid placement only).

    Returns (output, argmax) where argmax holds, per output element, the
    flat row * W + col input position of its maximum. Ties go to the first
    position in row-major scan order.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(
            "maxpool input must be (time, height, width, channels)",
            dimension="ndim", expected=4, actual=x.ndim)
    t, h, w, c = x.shape
    if window < 1 or stride < 1:
        raise ShapeMismatchError(
            "window and stride must be >= 1", dimension="window",
            expected=">= 1", actual=(window, stride))
    if window > h or window > w:
        raise ShapeMismatchError(
            "pooling window larger than input", dimension="window",
            expected=f"<= {min(h, w)}", actual=window)
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    rows = stride * np.arange(ho)
    cols = stride * np.arange(wo)
    best = None
    argmax = None
    for i in range(window):
        for j in range(window):
            cand = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            flat = ((rows + i)[:, None] * w + (cols + j)[None, :])
            flat = np.broadcast_to(flat[None, :, :, None], cand.shape)
            if best is None:
                best = cand.copy()
                argmax = flat.copy()
            else:
                mask = cand > best
                np.copyto(best, cand, where=mask)
                np.copyto(argmax, flat, where=mask)
    return best, argmax


def maxpool_backward(upstream, argmax, input_shape):
    """Route each upstream element to its recorded argmax position."""
    t, h, w, c = input_shape
    if upstream.shape != argmax.shape:
        raise ShapeMismatchError(
            "upstream shape does not match pooling output",
            dimension="upstream", expected=argmax.shape, actual=upstream.shape)
    gx = np.zeros((t, h * w, c))
    t_idx = np.arange(t)[:, None, None, None]
    c_idx = np.arange(c)[None, None, None, :]
    np.add.at(gx, (t_idx, argmax, c_idx), upstream)
    return gx.reshape(input_shape)


def square_forward(x):
    """Elementwise squaring activation."""
    return x * x


def square_backward(x, upstream):
    return 2.0 * x * upstream


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0.0)


def divnorm_l1_forward(x):
    """Divide each position's channel vector by its L1 norm (plus epsilon)."""
    if x.ndim < 1:
        raise ShapeMismatchError(
            "divnorm input needs a channel dimension", dimension="ndim",
            expected=">= 1", actual=x.ndim)
    denom = np.sum(np.abs(x), axis=-1, keepdims=True) + DIVNORM_EPS
    return x / denom


def divnorm_l1_backward(x, upstream):
    denom = np.sum(np.abs(x), axis=-1, keepdims=True) + DIVNORM_EPS
    dot = np.sum(upstream * x, axis=-1, keepdims=True)
    return upstream / denom - np.sign(x) * dot / (denom * denom)


def downsample2x(x):
    """2x2 average pooling with stride 2 over the spatial axes.

    ``x`` is (..., H, W, C); an odd trailing row or column is dropped.
    Summation is pairwise per block so constant inputs stay bit-exact.
    """
    h, w = x.shape[-3], x.shape[-2]
    if h < 2 or w < 2:
        raise ShapeMismatchError(
            "downsample2x needs spatial extents >= 2", dimension="spatial",
            expected=">= 2", actual=(h, w))
    h2, w2 = h // 2, w // 2
    xc = x[..., :2 * h2, :2 * w2, :]
    a = xc[..., 0::2, 0::2, :]
    b = xc[..., 0::2, 1::2, :]
    c = xc[..., 1::2, 0::2, :]
    d = xc[..., 1::2, 1::2, :]
    return ((a + b) + (c + d)) * 0.25


def downsample2x_backward(upstream, input_shape):
    """Redistribute each upstream element uniformly over its 2x2 block."""
    h, w = input_shape[-3], input_shape[-2]
    h2, w2 = h // 2, w // 2
    expected = input_shape[:-3] + (h2, w2, input_shape[-1])
    if upstream.shape != tuple(expected):
        raise ShapeMismatchError(
            "upstream shape does not match pooled output",
            dimension="upstream", expected=tuple(expected),
            actual=upstream.shape)
    gx = np.zeros(input_shape)
    q = upstream * 0.25
    gx[..., 0:2 * h2:2, 0:2 * w2:2, :] = q
    gx[..., 0:2 * h2:2, 1:2 * w2:2, :] = q
    gx[..., 1:2 * h2:2, 0:2 * w2:2, :] = q
    gx[..., 1:2 * h2:2, 1:2 * w2:2, :] = q
    return gx
