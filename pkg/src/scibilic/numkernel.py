"""Differentiable building blocks for the network, on plain numpy arrays.

Tensors are ``numpy.ndarray`` in NCHW layout. The compute dtype follows the
inputs: float32 arrays are processed in float32 (the training path), float64
arrays in float64 (the gradient-check path). Each differentiable op comes with
an explicit backward function; there is no general autodiff graph.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .rng import RngStream

__all__ = [
    "ShapeError",
    "DropoutMode",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_grad",
    "conv_output_size",
    "nearest_upsample",
    "nearest_upsample_grad",
    "upsample_conv2d_forward",
    "upsample_conv2d_backward",
    "spatial_dropout",
    "dropout_scale",
    "relu",
    "relu_grad",
    "concat_channels",
    "concat_channels_grad",
]


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class DropoutMode(str, Enum):
    TRAIN = "train"
    MC_SAMPLE = "mc_sample"
    OFF = "off"


def _float_dtype(*arrays: np.ndarray) -> np.dtype:
    dt = np.result_type(*arrays)
    return np.dtype(np.float64) if dt == np.float64 else np.dtype(np.float32)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int, padding: int):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-axis input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"input has {c} channels but kernel expects {kc} (input {x.shape}, kernel {kernel.shape})")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} output channels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"padded input {h}x{w} (+2*{padding}) smaller than kernel {kh}x{kw}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def conv2d_forward(x, kernel, bias, stride: int = 1, padding: int = 0):
    """Cross-correlation with zero padding; returns ``(output, cache)``.

    The cache holds the column matrix so the backward pass does not rebuild it.
    """
    _check_conv(x, kernel, bias, stride, padding)
    dt = _float_dtype(x, kernel, bias)
    x = np.asarray(x, dtype=dt)
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad(x, padding)
    # columns laid out (C, kh, kw, N, Ho, Wo) so one GEMM covers the whole batch
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=dt)
    for dy in range(kh):
        ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
        for dx in range(kw):
            xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
            cols[:, dy, dx] = xp[:, :, ys, xs].transpose(1, 0, 2, 3)
    cols2d = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = np.asarray(kernel, dtype=dt).reshape(f, -1)
    out = (wmat @ cols2d).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    out += np.asarray(bias, dtype=dt)[None, :, None, None]
    cache = (x.shape, kernel, cols2d, stride, padding, dt)
    return out, cache


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    return conv2d_forward(x, kernel, bias, stride, padding)[0]


def conv2d_backward(cache, upstream: np.ndarray):
    """Gradients ``(grad_input, grad_kernel, grad_bias)`` of the forward sum."""
    (n, c, h, w), kernel, cols2d, stride, padding, dt = cache
    f, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if upstream.shape != (n, f, ho, wo):
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {(n, f, ho, wo)}")
    g2 = np.ascontiguousarray(np.asarray(upstream, dtype=dt).transpose(1, 0, 2, 3)).reshape(f, -1)
    wmat = np.asarray(kernel, dtype=dt).reshape(f, -1)
    grad_kernel = (g2 @ cols2d.T).reshape(kernel.shape)
    grad_bias = g2.sum(axis=1)
    gcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dt)
    for dy in range(kh):
        ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
        for dx in range(kw):
            xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
            gxp[:, :, ys, xs] += gcols[:, dy, dx]
    grad_input = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


def conv2d_grad(x, kernel, bias, upstream_grad, stride: int = 1, padding: int = 0):
    _, cache = conv2d_forward(x, kernel, bias, stride, padding)
    return conv2d_backward(cache, upstream_grad)


def nearest_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample expects NCHW input, got {x.shape}")
    if factor == 1:
        return x.copy()
    n, c, h, w = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, factor, w, factor))
    return out.reshape(n, c, h * factor, w * factor)


def nearest_upsample_grad(upstream: np.ndarray, factor: int) -> np.ndarray:
    n, c, hf, wf = upstream.shape
    if hf % factor or wf % factor:
        raise ShapeError(f"gradient extents {hf}x{wf} not divisible by factor {factor}")
    return upstream.reshape(n, c, hf // factor, factor, wf // factor, factor).sum(axis=(3, 5))


def _phase_maps(k: int, factor: int, dtype) -> np.ndarray:
    """0/1 maps folding a k-tap kernel onto low-resolution taps, one per phase.

    Output row ``factor*i + a`` of ``conv(upsample(x))`` reads upsampled row
    ``factor*i + a + d`` for ``d`` in ``[-r, r]``, i.e. source row
    ``i + floor((a + d) / factor)``. Returns ``(factor, ks, k)`` with
    ``ks = 2 * ceil(r / factor) + 1``.
    """
    r = k // 2
    reach = -(-r // factor)
    ks = 2 * reach + 1
    maps = np.zeros((factor, ks, k), dtype=dtype)
    for a in range(factor):
        for d in range(-r, r + 1):
            maps[a, (a + d) // factor + reach, d + r] = 1
    return maps


def upsample_conv2d_forward(x, kernel, bias, factor: int):
    """``conv2d(nearest_upsample(x, factor), kernel, bias, padding=k // 2)`` computed
    at low resolution, one folded kernel per output phase.
    """
    _check_conv(x, kernel, bias, 1, kernel.shape[-1] // 2)
    f_out, c, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"fused upsample-conv needs a square kernel, got {kh}x{kw}")
    dt = _float_dtype(x, kernel, bias)
    maps = _phase_maps(kh, factor, dt)
    ks = maps.shape[1]
    folded = np.einsum("asy,fcyx,btx->abfcst", maps, np.asarray(kernel, dtype=dt), maps, optimize=True)
    zero_bias = np.zeros(factor * factor * f_out, dtype=dt)
    low, conv_cache = conv2d_forward(x, folded.reshape(-1, c, ks, ks), zero_bias, 1, ks // 2)
    n, _, h, w = low.shape
    out = low.reshape(n, factor, factor, f_out, h, w).transpose(0, 3, 4, 1, 5, 2)
    out = out.reshape(n, f_out, h * factor, w * factor) + np.asarray(bias, dtype=dt)[None, :, None, None]
    return out, (conv_cache, maps, kernel.shape, factor)


def upsample_conv2d_backward(cache, upstream: np.ndarray):
    conv_cache, maps, kshape, factor = cache
    f_out = kshape[0]
    n, _, hf, wf = upstream.shape
    h, w = hf // factor, wf // factor
    g = upstream.reshape(n, f_out, h, factor, w, factor).transpose(0, 3, 5, 1, 2, 4)
    g = np.ascontiguousarray(g).reshape(n, factor * factor * f_out, h, w)
    gx, g_folded, _ = conv2d_backward(conv_cache, g)
    ks = maps.shape[1]
    g_folded = g_folded.reshape(factor, factor, f_out, kshape[1], ks, ks)
    grad_kernel = np.einsum("asy,abfcst,btx->fcyx", maps, g_folded, maps, optimize=True)
    grad_bias = upstream.sum(axis=(0, 2, 3))
    return gx, grad_kernel, grad_bias


def dropout_scale(shape: tuple[int, ...], p: float, mode: DropoutMode | str,
                  rng: RngStream | None, dtype=np.float32) -> np.ndarray | None:
    """Per-(n, c) multiplier: 0 for dropped channels, 1/(1-p) for survivors.

    Returns ``None`` when dropout is inactive (mode off or p == 0).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    mode = DropoutMode(mode)
    if mode is DropoutMode.OFF or p == 0.0:
        return None
    if rng is None:
        raise ValueError(f"dropout in mode {mode.value!r} needs an RngStream")
    keep = rng.random(shape[:2]) >= p
    scale = keep.astype(dtype) * dtype(1.0 / (1.0 - p))
    return scale[:, :, None, None]


def spatial_dropout(x: np.ndarray, p: float, mode: DropoutMode | str = DropoutMode.TRAIN,
                    rng: RngStream | None = None) -> np.ndarray:
    """Whole-channel (inverted) dropout. Backward is ``upstream * scale``."""
    scale = dropout_scale(x.shape, p, mode, rng, dtype=x.dtype.type)
    if scale is None:
        return x
    return x * scale


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=x.dtype)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # derivative taken as 0 at x == 0
    return upstream * (x > 0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: batch/spatial extents differ")
    return np.concatenate([a, b], axis=1)


def concat_channels_grad(upstream: np.ndarray, channels_a: int):
    return upstream[:, :channels_a], upstream[:, channels_a:]
