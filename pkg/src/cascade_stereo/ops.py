"""Differentiable tensor operations used by the stereo network.

Layout is channels-last. Spatial operations accept an optional leading batch
axis: ``conv2d`` takes ``(H, W, C)`` or ``(B, H, W, C)``, ``conv3d`` takes
``(D, H, W, C)`` or ``(B, D, H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _tuple(value, nd: int) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * nd
    value = tuple(int(v) for v in value)
    if len(value) != nd:
        raise ShapeError(f"expected {nd} values, got {value}")
    return value


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    kernel_extent: tuple[int, ...]
    stride: tuple[int, ...]
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if len(self.kernel_extent) != len(self.stride):
            raise ValueError("kernel_extent and stride must have the same length")
        if any(k not in (1, 3) for k in self.kernel_extent):
            raise ValueError(f"kernel extent must be 1 or 3, got {self.kernel_extent}")
        if any(s not in (1, 2) for s in self.stride):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> tuple[int, ...]:
        return tuple((k - 1) // 2 for k in self.kernel_extent)

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return (*self.kernel_extent, self.in_channels, self.out_channels)


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# shared convolution kernels (float64 in, float64 out)


def _batched(x: np.ndarray, nd: int) -> tuple[np.ndarray, bool]:
    if x.ndim == nd + 1:
        return x[None], True
    if x.ndim == nd + 2:
        return x, False
    raise ShapeError(f"expected a rank {nd + 1} or {nd + 2} input, got shape {x.shape}")


def _window(offset: Sequence[int], stride: Sequence[int], sizes: Sequence[int]) -> tuple:
    spatial = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, sizes))
    return (slice(None), *spatial, slice(None))


def _correlate(xpad, w, stride, out_sizes, block_elems: int = 1 << 22) -> np.ndarray:
    """out[b, o] = sum over kernel offsets of xpad[b, s*o + k] @ w[k].

    ``xpad`` may be stored in 32 bits; patches are widened to float64 one
    block of the leading spatial axis at a time to bound peak memory.
    """
    nd = len(stride)
    batch, cin = xpad.shape[0], xpad.shape[-1]
    out = np.zeros((batch, *out_sizes, w.shape[-1]))
    per_row = batch * int(np.prod(out_sizes[1:])) * cin
    rows = max(1, block_elems // max(per_row, 1))
    for lo in range(0, out_sizes[0], rows):
        sizes = (min(rows, out_sizes[0] - lo), *out_sizes[1:])
        n_out = batch * int(np.prod(sizes))
        acc = np.zeros((n_out, w.shape[-1]))
        for offset in product(*(range(k) for k in w.shape[:nd])):
            start = (offset[0] + stride[0] * lo, *offset[1:])
            patch = np.asarray(xpad[_window(start, stride, sizes)], dtype=np.float64).reshape(n_out, cin)
            acc += patch @ w[offset]
        out[:, lo:lo + sizes[0]] = acc.reshape(batch, *sizes, -1)
    return out


def _scatter(y, w, stride, padded_sizes) -> np.ndarray:
    """Adjoint of ``_correlate`` with respect to its input: buf[b, s*o + k] += y[b, o] @ w[k]."""
    nd = len(stride)
    sizes = y.shape[1:-1]
    buf = np.zeros((y.shape[0], *padded_sizes, w.shape[-1]))
    flat = y.reshape(-1, y.shape[-1])
    for offset in product(*(range(k) for k in w.shape[:nd])):
        buf[_window(offset, stride, sizes)] += (flat @ w[offset]).reshape(*y.shape[:-1], -1)
    return buf


def _kernel_grad(xpad, g, stride, kernel_extent) -> np.ndarray:
    """grad_w[k] = sum over (b, o) of outer(xpad[b, s*o + k], g[b, o])."""
    sizes = g.shape[1:-1]
    g_flat = g.reshape(-1, g.shape[-1])
    grad = np.empty((*kernel_extent, xpad.shape[-1], g.shape[-1]))
    for offset in product(*(range(k) for k in kernel_extent)):
        patch = np.asarray(xpad[_window(offset, stride, sizes)], dtype=np.float64)
        grad[offset] = patch.reshape(g_flat.shape[0], -1).T @ g_flat
    return grad


def _pad_spatial(x: np.ndarray, pad: Sequence[int]) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, [(0, 0), *((p, p) for p in pad), (0, 0)])


def _unpad_spatial(x: np.ndarray, pad: Sequence[int], sizes: Sequence[int]) -> np.ndarray:
    spatial = tuple(slice(p, p + n) for p, n in zip(pad, sizes))
    return x[(slice(None), *spatial, slice(None))]


def _check_kernel(x: Tensor, kernel: Tensor, bias: Tensor | None, nd: int) -> None:
    if kernel.ndim != nd + 2:
        raise ShapeError(f"kernel must have rank {nd + 2}, got shape {kernel.shape}")
    if x.shape[-1] != kernel.shape[-2]:
        raise ShapeError(
            f"input has {x.shape[-1]} channels but kernel {kernel.shape} expects {kernel.shape[-2]}"
        )
    if bias is not None and bias.shape != (kernel.shape[-1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[-1]} output channels")


def _conv(x: Tensor, kernel: Tensor, bias: Tensor | None, stride, padding, nd: int) -> Tensor:
    _check_kernel(x, kernel, bias, nd)
    xb, squeeze = _batched(x.data, nd)
    extent = kernel.shape[:nd]
    stride = _tuple(stride, nd)
    pad = _tuple([(k - 1) // 2 for k in extent] if padding is None else padding, nd)
    in_sizes = xb.shape[1:-1]
    out_sizes = tuple(conv_output_size(n, k, s, p) for n, k, s, p in zip(in_sizes, extent, stride, pad))
    if min(out_sizes) < 1:
        raise ShapeError(f"input spatial size {in_sizes} too small for kernel {extent}")
    w = _f64(kernel)
    xpad = _pad_spatial(xb, pad)
    out = _correlate(xpad, w, stride, out_sizes)
    if bias is not None:
        out += _f64(bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gb = g[None] if squeeze else g
        gx = None
        if x.requires_grad:
            gpad = _scatter(gb, np.swapaxes(w, -1, -2), stride, xpad.shape[1:-1])
            gx = _unpad_spatial(gpad, pad, in_sizes)
            gx = gx[0] if squeeze else gx
        gw = _kernel_grad(xpad, gb, stride, extent) if kernel.requires_grad else None
        gbias = gb.reshape(-1, gb.shape[-1]).sum(axis=0) if bias is not None else None
        return gx, gw, gbias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out[0] if squeeze else out, parents, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=None) -> Tensor:
    """2D cross-correlation with zero padding; kernel is ``(kh, kw, Cin, Cout)``.

    Padding defaults to ``(k - 1) // 2`` so stride-1 layers keep their resolution.
    """
    return _conv(x, kernel, bias, stride, padding, 2)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=None) -> Tensor:
    """3D cross-correlation; kernel is ``(kd, kh, kw, Cin, Cout)``."""
    return _conv(x, kernel, bias, stride, padding, 3)


def _transposed(x: Tensor, kernel: Tensor, bias: Tensor | None, target, stride, padding, nd: int) -> Tensor:
    _check_kernel(x, kernel, bias, nd)
    xb, squeeze = _batched(_f64(x), nd)
    extent = kernel.shape[:nd]
    stride = _tuple(stride, nd)
    pad = _tuple([(k - 1) // 2 for k in extent] if padding is None else padding, nd)
    in_sizes = xb.shape[1:-1]
    target = _tuple(target, nd)
    for n, t, k, s, p in zip(in_sizes, target, extent, stride, pad):
        if conv_output_size(t, k, s, p) != n:
            raise ShapeError(
                f"target size {t} is not reachable from input size {n} with stride {s}; "
                f"expected one of {{{s * n - 1}, {s * n}}}"
            )
    w = _f64(kernel)
    padded_sizes = tuple(t + 2 * p for t, p in zip(target, pad))
    out = _unpad_spatial(_scatter(xb, w, stride, padded_sizes), pad, target)
    if bias is not None:
        out = out + _f64(bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gb = g[None] if squeeze else g
        gpad = _pad_spatial(gb, pad)
        gx = None
        if x.requires_grad:
            gx = _correlate(gpad, np.swapaxes(w, -1, -2), stride, in_sizes)
            gx = gx[0] if squeeze else gx
        gw = None
        if kernel.requires_grad:
            gw = np.swapaxes(_kernel_grad(gpad, xb, stride, extent), -1, -2)
        gbias = gb.reshape(-1, gb.shape[-1]).sum(axis=0) if bias is not None else None
        return gx, gw, gbias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out[0] if squeeze else out, parents, backward)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, target_shape, stride=2) -> Tensor:
    """Learned upsampling: the input-adjoint of a padded stride-2 ``conv2d``.

    ``target_shape`` is the spatial size of the encoder tensor being matched.
    It must be ``2n - 1`` or ``2n`` for an input of size ``n``.
    """
    return _transposed(x, kernel, bias, target_shape, stride, None, 2)


def transposed_conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None, target_shape, stride=2) -> Tensor:
    return _transposed(x, kernel, bias, target_shape, stride, None, 3)


# ---------------------------------------------------------------------------
# pooling, normalization, activations


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling in ceil mode; a partial window at an odd edge pools only its real entries."""
    xb, squeeze = _batched(_f64(x), 2)
    b, h, w, c = xb.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    padded = np.full((b, 2 * h2, 2 * w2, c), -np.inf)
    padded[:, :h, :w] = xb
    windows = padded.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = g[None] if squeeze else g
        routed = np.zeros((b, h2, w2, c, 4))
        np.put_along_axis(routed, arg[..., None], gb[..., None], axis=-1)
        full = routed.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
        gx = full[:, :h, :w]
        return (gx[0] if squeeze else gx,)

    return make_result(out[0] if squeeze else out, (x,), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over every non-channel axis.

    In training mode the running statistics are updated in place; they are
    plain arrays and never part of the tape.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have shape ({c},)")
    xf = _f64(x)
    axes = tuple(range(x.ndim - 1))
    count = xf.size // c
    if training:
        mean = xf.mean(axis=axes)
        var = xf.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xf - mean) * inv
    g64 = _f64(gamma)
    out = g64 * xhat + _f64(beta)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        if training:
            gx = (g64 * inv / count) * (count * g - gbeta - xhat * ggamma)
        else:
            gx = g * (g64 * inv)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    xf = _f64(x)
    positive = xf > 0

    def backward(g):
        return (g * positive,)

    return make_result(np.maximum(xf, 0.0), (x,), backward)  # NaN propagates


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xf = _f64(x)
    e = np.exp(xf - xf.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward)


# ---------------------------------------------------------------------------
# structural and elementwise helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return make_result(_f64(a) + _f64(b), (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}")
    af, bf = _f64(a), _f64(b)

    def backward(g):
        return g * bf, g * af

    return make_result(af * bf, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return make_result(_f64(x) * factor, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; argument order is preserved."""
    if len(tensors) < 1:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            i != axis and n != m for i, (n, m) in enumerate(zip(t.shape, tensors[0].shape))
        ):
            raise ShapeError(
                f"concat along axis {axis} needs matching shapes elsewhere, "
                f"got {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([_f64(t) for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    axis = axis % x.ndim
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"slice [{start}, {start + length}) out of range for axis size {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return make_result(_f64(x)[index], (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to axis size {x.shape[axis]}")
    starts = np.cumsum([0, *sizes[:-1]])
    return [narrow(x, axis, int(s), int(n)) for s, n in zip(starts, sizes)]


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return make_result(_f64(x).transpose(axes), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(_f64(x).reshape(tuple(shape)), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full(x.shape, g.reshape(())),)

    return make_result(np.array([_f64(x).sum()]), (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} does not match {x.shape}")

    def backward(g):
        return (g.reshape(()) * w,)

    return make_result(np.array([(_f64(x) * w).sum()]), (x,), backward)
