"""Differentiable volumetric primitives.

Every function takes and returns :class:`~focalfuse.tensor.Tensor` objects
laid out as (batch, channel, W, H, Z).  Reductions run in the input dtype in
a fixed order, so repeated calls are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError, NumericError
from .tensor import Tensor, check_finite_input, make_output

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise DimensionError(f"expected 3 per-axis values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3-D (transposed) convolution."""

    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1
    output_padding: tuple = (0, 0, 0)

    def __post_init__(self):
        for field in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, field, _triple(getattr(self, field)))
        if self.groups < 1:
            raise DimensionError("groups must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise DimensionError(f"invalid convolution geometry {self}")

    @classmethod
    def make(cls, kernel=3, stride=1, padding=0, groups=1, output_padding=0) -> "ConvSpec":
        return cls(_triple(kernel), _triple(stride), _triple(padding), groups,
                   _triple(output_padding))


def conv_output_extent(extent: int, k: int, s: int, p: int) -> int:
    return (extent + 2 * p - k) // s + 1


def _is_depthwise(cin_g: int, cout_g: int) -> bool:
    return cin_g == 1 and cout_g == 1


def _tap_slices(out_ext, stride, offset):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_ext))


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _im2col(xp: np.ndarray, kernel, stride, out_ext, groups: int) -> np.ndarray:
    """Columns shaped (G, Cin_g*kW*kH*kZ, B*N) for a padded input."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, : stride[0] * (out_ext[0] - 1) + 1: stride[0],
              : stride[1] * (out_ext[1] - 1) + 1: stride[1],
              : stride[2] * (out_ext[2] - 1) + 1: stride[2]]
    # (B, C, W', H', Z', kw, kh, kz) -> (C, kw, kh, kz, B, W', H', Z')
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4)
    n = B * out_ext[0] * out_ext[1] * out_ext[2]
    return np.ascontiguousarray(cols).reshape(groups, (C // groups) * int(np.prod(kernel)), n)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride, padding, groups: int) -> np.ndarray:
    B, C = x.shape[:2]
    cout = w.shape[0]
    kernel = w.shape[2:]
    cin_g, cout_g = C // groups, cout // groups
    xp = _pad(x, padding)
    out_ext = tuple(conv_output_extent(d, k, s, p)
                    for d, k, s, p in zip(x.shape[2:], kernel, stride, padding))
    if _is_depthwise(cin_g, cout_g):
        out = np.zeros((B, cout) + out_ext, dtype=x.dtype)
        for tap in product(*(range(k) for k in kernel)):
            sl = _tap_slices(out_ext, stride, tap)
            out += xp[(slice(None), slice(None)) + sl] * w[(slice(None), 0) + tap][None, :, None, None, None]
        return out
    cols = _im2col(xp, kernel, stride, out_ext, groups)
    wm = w.reshape(groups, cout_g, cin_g * int(np.prod(kernel)))
    out = np.matmul(wm, cols)  # (G, cout_g, B*N)
    return out.reshape(cout, B, *out_ext).transpose(1, 0, 2, 3, 4).copy()


def _conv_input_adjoint(g: np.ndarray, w: np.ndarray, in_shape, stride, padding,
                        groups: int) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    B, cout = g.shape[:2]
    out_ext = g.shape[2:]
    kernel = w.shape[2:]
    C = in_shape[1]
    cin_g, cout_g = C // groups, cout // groups
    padded = tuple(d + 2 * p for d, p in zip(in_shape[2:], padding))
    gxp = np.zeros((B, C) + padded, dtype=g.dtype)
    if _is_depthwise(cin_g, cout_g):
        for tap in product(*(range(k) for k in kernel)):
            sl = _tap_slices(out_ext, stride, tap)
            gxp[(slice(None), slice(None)) + sl] += g * w[(slice(None), 0) + tap][None, :, None, None, None]
    else:
        gm = g.transpose(1, 0, 2, 3, 4).reshape(groups, cout_g, -1)
        wm = w.reshape(groups, cout_g, cin_g * int(np.prod(kernel)))
        dcols = np.matmul(wm.transpose(0, 2, 1), gm)  # (G, cin_g*K, B*N)
        dcols = dcols.reshape(C, *kernel, B, *out_ext)
        for tap in product(*(range(k) for k in kernel)):
            sl = _tap_slices(out_ext, stride, tap)
            gxp[(slice(None), slice(None)) + sl] += dcols[(slice(None),) + tap].transpose(1, 0, 2, 3, 4)
    crop = tuple(slice(p, p + d) for p, d in zip(padding, in_shape[2:]))
    return gxp[(slice(None), slice(None)) + crop].copy()


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, w_shape, stride, padding,
                      groups: int) -> np.ndarray:
    C = x.shape[1]
    cout = g.shape[1]
    kernel = tuple(w_shape[2:])
    out_ext = g.shape[2:]
    cin_g, cout_g = C // groups, cout // groups
    xp = _pad(x, padding)
    if _is_depthwise(cin_g, cout_g):
        gw = np.zeros(w_shape, dtype=g.dtype)
        for tap in product(*(range(k) for k in kernel)):
            sl = _tap_slices(out_ext, stride, tap)
            gw[(slice(None), 0) + tap] = (xp[(slice(None), slice(None)) + sl] * g).sum(axis=(0, 2, 3, 4))
        return gw
    cols = _im2col(xp, kernel, stride, out_ext, groups)
    gm = g.transpose(1, 0, 2, 3, 4).reshape(groups, cout_g, -1)
    gw = np.matmul(gm, cols.transpose(0, 2, 1))
    return gw.reshape(w_shape)


def _check_conv_shapes(op, x, w, spec, transposed=False):
    if x.ndim != 5:
        raise DimensionError(f"{op}: input must be 5-D (B,C,W,H,Z), got {x.shape}")
    if w.ndim != 5 or tuple(w.shape[2:]) != spec.kernel:
        raise DimensionError(f"{op}: weight shape {w.shape} does not match kernel {spec.kernel}")
    C = x.shape[1]
    g = spec.groups
    if C % g:
        raise DimensionError(f"{op}: groups={g} does not divide input channels {C}")
    if transposed:
        if w.shape[0] != C:
            raise DimensionError(f"{op}: weight expects {w.shape[0]} input channels, input has {C}")
    else:
        if w.shape[0] % g:
            raise DimensionError(f"{op}: groups={g} does not divide output channels {w.shape[0]}")
        if w.shape[1] * g != C:
            raise DimensionError(
                f"{op}: weight expects {w.shape[1] * g} input channels, input has {C}")


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           spec: Optional[ConvSpec] = None) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (Cout, Cin/groups, kW, kH, kZ)."""
    spec = spec or ConvSpec(kernel=weight.shape[2:])
    _check_conv_shapes("conv3d", x, weight, spec)
    for d, k, p in zip(x.shape[2:], spec.kernel, spec.padding):
        if d + 2 * p < k:
            raise DimensionError(f"conv3d: extent {d} with padding {p} smaller than kernel {k}")
    check_finite_input("conv3d", x, weight, bias)
    out = _conv_forward(x.data, weight.data, spec.stride, spec.padding, spec.groups)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias.data[None, :, None, None, None]

    def vjp(g):
        gx = (_conv_input_adjoint(g, weight.data, x.shape, spec.stride, spec.padding, spec.groups)
              if x.requires_grad else None)
        gw = (_conv_weight_grad(x.data, g, weight.shape, spec.stride, spec.padding, spec.groups)
              if weight.requires_grad else None)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, vjp, "conv3d")


def conv_transpose_output_extent(extent: int, k: int, s: int, p: int, op: int) -> int:
    return (extent - 1) * s - 2 * p + k + op


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     spec: Optional[ConvSpec] = None) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout/groups, kW, kH, kZ).

    The forward map is exactly the input adjoint of :func:`conv3d` with the
    same weight, stride and padding.
    """
    spec = spec or ConvSpec(kernel=weight.shape[2:])
    _check_conv_shapes("conv_transpose3d", x, weight, spec, transposed=True)
    for op, s in zip(spec.output_padding, spec.stride):
        if op >= s:
            raise DimensionError("conv_transpose3d: output_padding must be smaller than stride")
    check_finite_input("conv_transpose3d", x, weight, bias)
    cout = weight.shape[1] * spec.groups
    out_ext = tuple(conv_transpose_output_extent(d, k, s, p, o) for d, k, s, p, o in
                    zip(x.shape[2:], spec.kernel, spec.stride, spec.padding, spec.output_padding))
    if min(out_ext) < 1:
        raise DimensionError(f"conv_transpose3d: non-positive output extent {out_ext}")
    out_shape = (x.shape[0], cout) + out_ext
    out = _conv_input_adjoint(x.data, weight.data, out_shape, spec.stride, spec.padding, spec.groups)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv_transpose3d: bias shape {bias.shape} != ({cout},)")
        out += bias.data[None, :, None, None, None]

    def vjp(g):
        gx = (_conv_forward(g, weight.data, spec.stride, spec.padding, spec.groups)
              if x.requires_grad else None)
        gw = (_conv_weight_grad(g, x.data, weight.shape, spec.stride, spec.padding, spec.groups)
              if weight.requires_grad else None)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, vjp, "conv_transpose3d")


def pool3d(x: Tensor, kind: str = "max", kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping 2x2x2 max or average pooling."""
    if kernel != 2 or stride != 2:
        raise DimensionError("pool3d supports kernel=2, stride=2 only")
    if x.ndim != 5:
        raise DimensionError(f"pool3d: input must be 5-D, got {x.shape}")
    B, C, W, H, Z = x.shape
    if W % 2 or H % 2 or Z % 2:
        raise DimensionError(f"pool3d: spatial extents must be even, got {(W, H, Z)}")
    check_finite_input("pool3d", x)
    blocks = (x.data.reshape(B, C, W // 2, 2, H // 2, 2, Z // 2, 2)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, W // 2, H // 2, Z // 2, 8))

    def unblock(gb):
        return (gb.reshape(B, C, W // 2, H // 2, Z // 2, 2, 2, 2)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape))

    if kind == "max":
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def vjp(g):
            gb = np.zeros(blocks.shape, dtype=g.dtype)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
            return (unblock(gb),)
    elif kind == "avg":
        out = blocks.mean(axis=-1)

        def vjp(g):
            gb = np.broadcast_to((g / 8)[..., None], blocks.shape).astype(g.dtype)
            return (unblock(gb),)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return make_output(out, (x,), vjp, f"pool3d[{kind}]")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial voxels, keeping a 1x1x1 spatial shape."""
    if x.ndim != 5:
        raise DimensionError(f"global_avg_pool: input must be 5-D, got {x.shape}")
    n = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make_output(out, (x,), vjp, "global_avg_pool")


def _linear_axis_weights(n_in: int, n_out: int):
    """Source indices and fractions for align-corners-false linear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resize_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    i0, i1, frac = _linear_axis_weights(n_in, n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    f = frac.astype(a.dtype).reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    # lo + f*(hi-lo) keeps constant fields exact.
    return lo + f * (hi - lo)


def _resize_axis_adjoint(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    n_out = g.shape[axis]
    if n_in == n_out:
        return g
    i0, i1, frac = _linear_axis_weights(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    moved = np.moveaxis(g, axis, -1)
    res = moved @ m.astype(g.dtype)
    return np.moveaxis(res, -1, axis)


def resize_trilinear(x: Tensor, target_spatial: Sequence[int]) -> Tensor:
    """Separable trilinear resampling with half-pixel (align-corners-false) centres."""
    target = _triple(target_spatial)
    if min(target) < 1:
        raise DimensionError(f"resize_trilinear: target extents must be >= 1, got {target}")
    if x.ndim != 5:
        raise DimensionError(f"resize_trilinear: input must be 5-D, got {x.shape}")
    src_ext = x.shape[2:]
    if tuple(src_ext) == target:
        out = x.data.copy()
    else:
        out = x.data
        for ax, n in zip((2, 3, 4), target):
            out = _resize_axis(out, ax, n)
        out = np.ascontiguousarray(out)

    def vjp(g):
        for ax, n in zip((4, 3, 2), reversed(src_ext)):
            g = _resize_axis_adjoint(g, ax, n)
        return (np.ascontiguousarray(g),)

    return make_output(out, (x,), vjp, "resize_trilinear")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-voxel affine map over the channel axis; ``weight`` is (Cout, Cin)."""
    if x.ndim < 2:
        raise DimensionError(f"linear: input must have a channel axis, got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"linear: weight {weight.shape} incompatible with {x.shape[1]} input channels")
    check_finite_input("linear", x, weight, bias)
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    xm = x.data.reshape(B, C, -1)
    out = np.matmul(weight.data, xm)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias.data[None, :, None]
    out = out.reshape((B, weight.shape[0]) + spatial)

    def vjp(g):
        gm = g.reshape(B, weight.shape[0], -1)
        gx = np.matmul(weight.data.T, gm).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, vjp, "linear")


def instance_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardisation followed by an optional affine map."""
    if x.ndim != 5:
        raise DimensionError(f"instance_norm: input must be 5-D, got {x.shape}")
    n = x.shape[2] * x.shape[3] * x.shape[4]
    if n < 2:
        raise NumericError("instance_norm: needs at least 2 spatial voxels per slice")
    check_finite_input("instance_norm", x, weight, bias)
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]

    def vjp(g):
        dxhat = g * weight.data[None, :, None, None, None] if weight is not None else g
        gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3, 4)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    inputs = [x]
    if weight is not None:
        inputs.append(weight)
    if bias is not None:
        inputs.append(bias)
    return make_output(out, inputs, vjp, "instance_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    check_finite_input("gelu", x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return make_output(out, (x,), vjp, "gelu")


def relu(x: Tensor) -> Tensor:
    check_finite_input("relu", x)
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))

    def vjp(g):
        return (g * mask,)

    return make_output(out, (x,), vjp, "relu")


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax across axis 1 with max subtraction."""
    check_finite_input("softmax_channel", x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_output(p, (x,), vjp, "softmax_channel")


_ACTIVATIONS = {"gelu": gelu, "relu": relu, "softmax_channel": softmax_channel}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise DimensionError("concat_channels: need at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat_channels: non-channel extents differ: {ref} vs {t.shape}")
    if len(inputs) == 1:
        out = inputs[0].data.copy()
    else:
        out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return make_output(out, inputs, vjp, "concat_channels", check_finite=False)
