"""Dense rank-4 tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out as
(batch, channels, height, width).  Every kernel here is a pure function and
never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent.

    ``node`` names the graph node being executed, when known.
    """

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        if node is not None:
            message = f"node {node!r}: {message}"
        super().__init__(message)


def as_tensor(values, node: str | None = None) -> np.ndarray:
    """Return ``values`` as a float64 rank-4 array, validating extents."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 (n, c, h, w), got shape {arr.shape}", node)
    if min(arr.shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}", node)
    return arr


@dataclass(frozen=True)
class ChannelVector:
    """One value per channel of a layer's output."""

    values: np.ndarray
    layer_id: str

    def __len__(self) -> int:
        return len(self.values)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, node: str | None = None) -> np.ndarray:
    """Cross-correlation with zero padding.

    weight has shape (c_out, c_in, k_h, k_w); bias is (c_out,) or None.
    """
    x = as_tensor(x, node)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be rank 4, got {weight.shape}", node)
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {x.shape[1]}", node)
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} padding={padding}", node)
    oh = conv_output_size(x.shape[2], kh, stride, padding)
    ow = conv_output_size(x.shape[3], kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape[2:]}", node)
    win = _windows(x, kh, kw, stride, padding)
    # (n, c, oh, ow, kh, kw) x (o, c, kh, kw) -> (n, oh, ow, o)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)", node)
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_input_grad(grad_out, weight, input_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transpose of :func:`conv2d` with respect to its input (bias-free)."""
    weight = np.asarray(weight, dtype=np.float64)
    n, c, h, w = input_shape
    _, _, kh, kw = weight.shape
    _, _, oh, ow = grad_out.shape
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, weight[:, :, i, j], axes=([1], [0]))
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gx)


def conv2d_weight_grad(grad_out, x, kernel_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    _, _, kh, kw = kernel_shape
    win = _windows(np.asarray(x, dtype=np.float64), kh, kw, stride, padding)
    # (n, c, oh, ow, kh, kw) x (n, o, oh, ow) -> (c, kh, kw, o)
    g = np.tensordot(win, grad_out, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(g.transpose(3, 0, 1, 2))


def interp_matrix(size_in: int, size_out: int, align_corners: bool = True) -> np.ndarray:
    """Row-stochastic (size_out, size_in) matrix of 1-D linear interpolation weights."""
    if size_in < 1 or size_out < 1:
        raise ShapeError(f"resize extents must be >= 1, got {size_in} -> {size_out}")
    m = np.zeros((size_out, size_in))
    for i in range(size_out):
        if align_corners:
            src = 0.0 if size_out == 1 else i * (size_in - 1) / (size_out - 1)
        else:
            src = (i + 0.5) * size_in / size_out - 0.5
            src = min(max(src, 0.0), size_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, size_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = True, node: str | None = None) -> np.ndarray:
    x = as_tensor(x, node)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {out_h}x{out_w}", node)
    ry = interp_matrix(x.shape[2], out_h, align_corners)
    rx = interp_matrix(x.shape[3], out_w, align_corners)
    return np.ascontiguousarray(ry @ x @ rx.T)


def bilinear_resize_transpose(g, in_h: int, in_w: int, align_corners: bool = True) -> np.ndarray:
    """Adjoint of :func:`bilinear_resize`, mapping output-sized arrays back to input size."""
    ry = interp_matrix(in_h, g.shape[2], align_corners)
    rx = interp_matrix(in_w, g.shape[3], align_corners)
    return np.ascontiguousarray(ry.T @ np.asarray(g, dtype=np.float64) @ rx)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pointwise(x, fn: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if fn == "relu":
        return np.maximum(x, 0.0)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise function {fn!r}")


def binary(a, b, fn: str, node: str | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}", node)
    if fn == "add":
        return a + b
    if fn == "mul":
        return a * b
    raise ValueError(f"unknown binary function {fn!r}")


def concat_channels(parts, node: str | None = None) -> np.ndarray:
    parts = [as_tensor(p, node) for p in parts]
    if not parts:
        raise ShapeError("nothing to concatenate", node)
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concat {p.shape} with {parts[0].shape}", node)
    return np.concatenate(parts, axis=1)


def split_channels(x, extents) -> list[np.ndarray]:
    x = np.asarray(x)
    if sum(extents) != x.shape[1] or any(e < 1 for e in extents):
        raise ShapeError(f"extents {list(extents)} do not partition {x.shape[1]} channels")
    cuts = np.cumsum(extents)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, cuts, axis=1)]


def spatial_sum(x, layer_id: str = "") -> ChannelVector:
    x = as_tensor(x)
    if x.shape[0] != 1:
        raise ShapeError(f"spatial_sum expects batch 1, got {x.shape[0]}")
    return ChannelVector(x[0].sum(axis=(1, 2)), layer_id)
