"""Dense tensor storage conventions and the forward numerical kernels.

Tensors are plain contiguous numpy arrays, float32 by default (float64 for
oracle-precision checks), laid out row-major with the NCHW convention for
activations.  Kernels are pure functions: inputs are never modified and
repeated calls are bitwise identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError, NumericError

F32 = np.float32
F64 = np.float64

# When enabled every kernel checks its output for NaN/Inf.  Cheap enough at
# desk scale; the test suite switches it on.
DEBUG_CHECKS = os.environ.get("POL_DEBUG_CHECKS", "0") == "1"


def tensor(data, dtype=F32) -> np.ndarray:
    """Build a validated tensor: contiguous, 1..4 axes, every extent >= 1."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    validate(arr)
    return arr


def validate(arr: np.ndarray):
    if arr.ndim < 1 or arr.ndim > 4:
        raise ShapeError(f"tensors have 1..4 axes, got {arr.ndim}")
    for ax, n in enumerate(arr.shape):
        if n < 1:
            raise ShapeError("every extent must be >= 1", axis=ax)
    if arr.dtype not in (F32, F64):
        raise ShapeError(f"unsupported dtype {arr.dtype}")


def _check_finite(arr: np.ndarray, where: str):
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")


@dataclass
class ConvParams:
    """Weights of one convolution layer.

    `weight` is (C_out, C_in, kH, kW).  For conv2d the input has C_in
    channels and `bias` has length C_out; conv_transpose2d runs the adjoint
    map, so its input has C_out channels, its output C_in, and `bias` (when
    used for a transposed layer) has length C_in.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    pad_mode: str = "zero"

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError("conv weight must be (C_out, C_in, kH, kW)")
        if self.stride < 1:
            raise ShapeError("stride must be positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.pad_mode not in ("zero", "reflect"):
            raise ShapeError(f"unknown pad_mode {self.pad_mode!r}")


def conv_out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    num = extent + 2 * pad - kernel
    if num < 0:
        raise ShapeError(
            f"invalid conv geometry: extent {extent}, kernel {kernel}, "
            f"stride {stride}, pad {pad}"
        )
    return num // stride + 1


def _pad2d(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    spec = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, spec)
    return np.pad(x, spec, mode="reflect")


def _pad2d_adjoint(g: np.ndarray, pad: int, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of _pad2d: fold padded-region gradients back onto the source."""
    if pad == 0:
        return g
    if mode == "zero":
        return g[:, :, pad:pad + h, pad:pad + w]
    ih = _reflect_index(np.arange(-pad, h + pad), h)
    iw = _reflect_index(np.arange(-pad, w + pad), w)
    out = np.zeros(g.shape[:2] + (h, w), dtype=g.dtype)
    np.add.at(out, (slice(None), slice(None), ih[:, None], iw[None, :]), g)
    return out


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # numpy 'reflect' style: no edge repetition, period 2(n-1)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N*ho*wo, C*kh*kw) patch matrix (copies)."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(
        n * ho * wo, c * kh * kw
    )


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to (N,C,Hp,Wp)."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            wj = j + stride * wo
            out[:, :, i:hi:stride, j:wj:stride] += c6[:, :, i, j]
    return out


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Strided 2-d cross-correlation with per-channel bias."""
    out, _ = conv2d_forward(x, p.weight, p.bias, p.stride, p.padding, p.pad_mode)
    return out


def conv2d_forward(x, weight, bias, stride, pad, pad_mode):
    """Forward pass returning (output, patch matrix) so backward can reuse it."""
    if x.ndim != 4:
        raise ShapeError("conv2d input must be NCHW")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, weight expects {ci}", axis=1)
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias must be ({co},), got {bias.shape}")
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    cols = _im2col(_pad2d(x, pad, pad_mode), kh, kw, stride, ho, wo)
    out = cols @ weight.reshape(co, -1).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    _check_finite(out, "conv2d")
    return out, cols


def conv2d_grads(x, weight, cols, dout, stride, pad, pad_mode, with_dx=True):
    """Gradients of conv2d wrt (input, weight, bias)."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    ho, wo = dout.shape[2], dout.shape[3]
    gmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
    dw = (gmat.T @ cols).reshape(weight.shape)
    db = gmat.sum(axis=0)
    dx = None
    if with_dx:
        dcols = gmat @ weight.reshape(co, -1)
        dxp = _col2im(dcols, n, c, h + 2 * pad, w + 2 * pad, kh, kw, stride, ho, wo)
        dx = _pad2d_adjoint(dxp, pad, pad_mode, h, w)
    return dx, dw, db


def conv_transpose2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Adjoint of conv2d with the same weight tensor (fractionally strided)."""
    return conv_transpose2d_forward(x, p.weight, p.bias, p.stride, p.padding)


def conv_transpose2d_forward(x, weight, bias, stride, pad):
    if x.ndim != 4:
        raise ShapeError("conv_transpose2d input must be NCHW")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != co:
        raise ShapeError(f"input has {c} channels, weight expects {co}", axis=1)
    if bias is not None and bias.shape != (ci,):
        raise ShapeError(f"transpose bias must be ({ci},), got {bias.shape}")
    h_out = (h - 1) * stride - 2 * pad + kh
    w_out = (w - 1) * stride - 2 * pad + kw
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv_transpose2d output extent would be < 1")
    xmat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, co)
    cols = xmat @ weight.reshape(co, -1)
    out = _col2im(cols, n, ci, h_out + 2 * pad, w_out + 2 * pad, kh, kw, stride, h, w)
    out = out[:, :, pad:pad + h_out, pad:pad + w_out]
    if bias is not None:
        out = out + bias.reshape(1, ci, 1, 1)
    out = np.ascontiguousarray(out)
    _check_finite(out, "conv_transpose2d")
    return out


def conv_transpose2d_grads(x, weight, dout, stride, pad, with_dx=True):
    """Gradients of conv_transpose2d wrt (input, weight, bias)."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    gp = _pad2d(dout, pad, "zero")
    gcols = _im2col(gp, kh, kw, stride, h, w)
    xmat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, co)
    dw = (xmat.T @ gcols).reshape(weight.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if with_dx:
        dxmat = gcols @ weight.reshape(co, -1).T
        dx = np.ascontiguousarray(
            dxmat.reshape(n, h, w, co).transpose(0, 3, 1, 2)
        )
    return dx, dw, db


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalize each (sample, channel) plane to zero mean / unit variance,
    then apply the per-channel affine map."""
    out, _, _ = instance_norm_forward(x, gamma, beta, eps)
    return out


def instance_norm_forward(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ShapeError("eps must be > 0")
    if x.ndim != 4:
        raise ShapeError("instance_norm input must be NCHW")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},)", axis=1)
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mu) * inv
    out = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    _check_finite(out, "instance_norm")
    return np.ascontiguousarray(out), xhat, inv


def instance_norm_grads(gamma, xhat, inv, dout):
    c = xhat.shape[1]
    dgamma = np.einsum("nchw,nchw->c", dout, xhat, dtype=dout.dtype)
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, c, 1, 1)
    m1 = dxhat.mean(axis=(2, 3), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma.astype(dout.dtype, copy=False), dbeta


def activation(x: np.ndarray, kind: str, alpha: float = 0.2) -> np.ndarray:
    """Elementwise non-linearity; `kind` is relu|leaky_relu|sigmoid|tanh."""
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "leaky_relu":
        if not 0.0 < alpha < 1.0:
            raise ShapeError("leaky_relu alpha must be in (0,1)")
        out = np.where(x > 0, x, np.asarray(alpha, dtype=x.dtype) * x)
    elif kind == "sigmoid":
        out = sigmoid(x)
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind == "identity":
        out = x.copy()
    else:
        raise ShapeError(f"unknown activation {kind!r}")
    _check_finite(out, kind)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) in overflow-safe form."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes {a.shape} vs {b.shape} differ")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ShapeError(f"unknown elementwise op {op!r}")


def reduce(a: np.ndarray, b: np.ndarray | None = None, op: str = "mean"):
    """Scalar reductions; l1_mean/l2_mean are per-element means of |a-b| and
    (a-b)^2 so loss weights stay resolution independent."""
    if op == "mean":
        return a.mean(dtype=a.dtype)
    if b is None or a.shape != b.shape:
        raise ShapeError(f"reduce {op}: needs two same-shape tensors")
    d = a - b
    if op == "l1_mean":
        return np.abs(d).mean(dtype=a.dtype)
    if op == "l2_mean":
        return (d * d).mean(dtype=a.dtype)
    raise ShapeError(f"unknown reduce op {op!r}")
