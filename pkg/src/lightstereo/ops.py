"""Dense NCHW tensor kernels with matching backward passes.

Every operation here is a pure function of numpy arrays. Forward kernels
accumulate in float64 internally and return the promoted dtype of their
inputs, so a float32 model stays float32 while gradient checks can run the
same code end to end in float64.

Backward functions return the gradient of ``sum(grad_output * forward(...))``
with respect to each input, which is the contraction the model graph needs.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Inconsistent shapes, strides, or layer configuration."""


class NumericError(ArithmeticError):
    """A kernel produced or received non-finite values."""


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def check_nchw(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ConfigurationError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ConfigurationError(f"{name} has an empty dimension: {x.shape}")
    return x


def check_finite(x: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {context}")
    return x


@dataclass
class ConvParams:
    """Weights and geometry for a 2-D cross-correlation.

    weight is (c_out, c_in // groups, k_h, k_w); depthwise convolution is the
    special case groups == c_in == c_out.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        if self.weight.ndim != 4:
            raise ConfigurationError(f"conv weight must be 4-D, got {self.weight.shape}")
        self.stride = _as_pair(self.stride)
        self.padding = _as_pair(self.padding)
        self.groups = int(self.groups)
        c_out = self.weight.shape[0]
        if self.groups < 1 or c_out % self.groups != 0:
            raise ConfigurationError(f"c_out={c_out} not divisible by groups={self.groups}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (c_out,):
                raise ConfigurationError(f"bias shape {self.bias.shape} != ({c_out},)")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.padding[0] < 0 or self.padding[1] < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def conv_output_hw(h: int, w: int, p: ConvParams) -> tuple[int, int]:
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (w + 2 * pw - kw) // sw + 1
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(
            f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {p.stride}, padding {p.padding}"
        )
    return h_out, w_out


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
             h_out: int, w_out: int) -> np.ndarray:
    # strided view (n, c, h_out, w_out, kh, kw); no copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw][:, :, :h_out, :w_out]


def _pad_cast(x: np.ndarray, ph: int, pw: int, dtype) -> np.ndarray:
    xc = x.astype(dtype, copy=False)
    if ph == 0 and pw == 0:
        return xc
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dtype)
    out[:, :, ph:ph + h, pw:pw + w] = xc
    return out


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlate x (n, c_in, h, w) with p.weight, zero padding.

    Accumulation is float64 internally; the result carries the promoted input
    dtype (float32 in the production path).
    """
    x = check_nchw(x)
    check_finite(x, "conv2d input")
    n, c_in, h, w = x.shape
    if c_in != p.c_in:
        raise ConfigurationError(f"conv2d: input has {c_in} channels, weights expect {p.c_in}")
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    h_out, w_out = conv_output_hw(h, w, p)
    out_dtype = np.result_type(x.dtype, p.weight.dtype)
    w64 = p.weight.astype(np.float64, copy=False)
    pointwise = kh == 1 and kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0)
    depthwise = p.groups == c_in and p.c_out == c_in

    if pointwise and p.groups == 1:
        x64 = x.astype(np.float64, copy=False).reshape(n, c_in, h * w)
        y = np.matmul(w64.reshape(p.c_out, c_in), x64).reshape(n, p.c_out, h, w)
    elif depthwise:
        xp = _pad_cast(x, ph, pw, np.float64)
        y = np.zeros((n, c_in, h_out, w_out), dtype=np.float64)
        tmp = np.empty_like(y)
        for u in range(kh):
            for v in range(kw):
                tap = xp[:, :, u:u + sh * (h_out - 1) + 1:sh, v:v + sw * (w_out - 1) + 1:sw]
                np.multiply(tap, w64[:, 0, u, v].reshape(1, -1, 1, 1), out=tmp)
                y += tmp
    elif p.groups == 1:
        xp = _pad_cast(x, ph, pw, np.float64)
        win = _windows(xp, kh, kw, sh, sw, h_out, w_out)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
        y = cols @ w64.reshape(p.c_out, -1).T
        y = np.ascontiguousarray(y.reshape(n, h_out, w_out, p.c_out).transpose(0, 3, 1, 2))
    else:
        xp = _pad_cast(x, ph, pw, np.float64)
        win = _windows(xp, kh, kw, sh, sw, h_out, w_out)
        cig = c_in // p.groups
        cog = p.c_out // p.groups
        y = np.empty((n, p.c_out, h_out, w_out), dtype=np.float64)
        for g in range(p.groups):
            wg = win[:, g * cig:(g + 1) * cig]
            cols = wg.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, cig * kh * kw)
            yg = cols @ w64[g * cog:(g + 1) * cog].reshape(cog, -1).T
            y[:, g * cog:(g + 1) * cog] = yg.reshape(n, h_out, w_out, cog).transpose(0, 3, 1, 2)

    if p.bias is not None:
        y += p.bias.astype(np.float64).reshape(1, -1, 1, 1)
    y = y.astype(out_dtype, copy=False)
    return check_finite(y, "conv2d output")


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Gradients of sum(grad_out * conv2d(x, p)) w.r.t. (x, weight, bias)."""
    x = check_nchw(x)
    grad_out = check_nchw(grad_out, "grad_out")
    n, c_in, h, w = x.shape
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    h_out, w_out = conv_output_hw(h, w, p)
    if grad_out.shape != (n, p.c_out, h_out, w_out):
        raise ConfigurationError(
            f"conv2d_backward: grad_out shape {grad_out.shape} != {(n, p.c_out, h_out, w_out)}"
        )
    x_dtype = x.dtype
    w_dtype = p.weight.dtype
    w64 = p.weight.astype(np.float64, copy=False)
    g64 = grad_out.astype(np.float64, copy=False)
    pointwise = kh == 1 and kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0)
    depthwise = p.groups == c_in and p.c_out == c_in

    if pointwise and p.groups == 1:
        xm = x.astype(np.float64, copy=False).reshape(n, c_in, h * w)
        gm = g64.reshape(n, p.c_out, h * w)
        grad_w = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
        grad_x = np.matmul(w64.reshape(p.c_out, c_in).T, gm).reshape(n, c_in, h, w)
    elif depthwise:
        xp = _pad64(x, ph, pw)
        grad_w = np.empty(p.weight.shape, dtype=np.float64)
        grad_xp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                tap = xp[:, :, u:u + sh * (h_out - 1) + 1:sh, v:v + sw * (w_out - 1) + 1:sw]
                grad_w[:, 0, u, v] = (tap * g64).sum(axis=(0, 2, 3))
                grad_xp[:, :, u:u + sh * h_out:sh, v:v + sw * w_out:sw] += (
                    g64 * w64[:, 0, u, v].reshape(1, -1, 1, 1)
                )
        grad_x = grad_xp[:, :, ph:ph + h, pw:pw + w]
    else:
        xp = _pad64(x, ph, pw)
        win = _windows(xp, kh, kw, sh, sw, h_out, w_out)
        cig = c_in // p.groups
        cog = p.c_out // p.groups
        if p.groups == 1:
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
            gmat = g64.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, p.c_out)
            grad_w = (gmat.T @ cols).reshape(p.weight.shape)
        else:
            grad_w = np.empty(p.weight.shape, dtype=np.float64)
            for g in range(p.groups):
                wg = win[:, g * cig:(g + 1) * cig]
                cols = wg.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, cig * kh * kw)
                gmat = g64[:, g * cog:(g + 1) * cog].transpose(0, 2, 3, 1).reshape(-1, cog)
                grad_w[g * cog:(g + 1) * cog] = (gmat.T @ cols).reshape(cog, cig, kh, kw)
        # input gradient, scattered kernel tap by kernel tap
        grad_xp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                if p.groups == 1:
                    t = np.tensordot(g64, w64[:, :, u, v], axes=([1], [0]))
                    t = t.transpose(0, 3, 1, 2)
                else:
                    t = np.empty((n, c_in, h_out, w_out), dtype=np.float64)
                    for g in range(p.groups):
                        tg = np.tensordot(g64[:, g * cog:(g + 1) * cog],
                                          w64[g * cog:(g + 1) * cog, :, u, v], axes=([1], [0]))
                        t[:, g * cig:(g + 1) * cig] = tg.transpose(0, 3, 1, 2)
                grad_xp[:, :, u:u + sh * h_out:sh, v:v + sw * w_out:sw] += t
        grad_x = grad_xp[:, :, ph:ph + h, pw:pw + w]

    grad_b = g64.sum(axis=(0, 2, 3)).astype(w_dtype) if p.bias is not None else None
    return grad_x.astype(x_dtype), grad_w.astype(w_dtype), grad_b


def relu6(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    check_finite(x, "relu6 input")
    return np.minimum(np.maximum(x, 0), 6).astype(x.dtype)


def relu6_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    mask = (x > 0) & (x < 6)
    return (grad_out * mask).astype(grad_out.dtype)


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ConfigurationError(f"batch norm {name} shape != ({c},)")
        if self.eps <= 0:
            raise ConfigurationError("batch norm eps must be > 0")
        if not (0.0 < self.momentum < 1.0):
            raise ConfigurationError("batch norm momentum must be in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running_var entries must be >= 0")


def batch_norm(x: np.ndarray, p: BatchNormParams, training: bool):
    """Normalize per channel; returns (output, cache) for the backward pass.

    Training mode uses batch statistics (biased variance) and updates the
    running buffers in place; inference uses the running statistics.
    """
    x = check_nchw(x)
    check_finite(x, "batch_norm input")
    n, c, h, w = x.shape
    if len(p.gamma) != c:
        raise ConfigurationError(f"batch_norm: {c} channels but params carry {len(p.gamma)}")
    dt = x.dtype
    if training:
        # float64 accumulation for the statistics, elementwise math in dt
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = (np.square(x, dtype=np.float64) if dt != np.float64 else x * x).mean(
            axis=(0, 2, 3), dtype=np.float64) - mean * mean
        var = np.maximum(var, 0.0)
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * var
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(dt)
    xhat = (x - mean.astype(dt).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = p.gamma.reshape(1, c, 1, 1) * xhat + p.beta.reshape(1, c, 1, 1)
    y = y.astype(dt, copy=False)
    check_finite(y, "batch_norm output")
    cache = (xhat, inv_std, p.gamma, training)
    return y, cache


def batch_norm_backward(cache, grad_out: np.ndarray):
    """Gradients w.r.t. (input, gamma, beta) from a batch_norm cache."""
    xhat, inv_std, gamma, training = cache
    d = grad_out.dtype
    c = xhat.shape[1]
    gx_hat_prod = grad_out * xhat
    grad_gamma = gx_hat_prod.sum(axis=(0, 2, 3), dtype=np.float64).astype(d)
    grad_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(d)
    gxhat = grad_out * gamma.astype(d).reshape(1, c, 1, 1)
    if training:
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(d)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(d)
        grad_x = inv_std.astype(d).reshape(1, c, 1, 1) * (gxhat - mean_g - xhat * mean_gx)
    else:
        grad_x = gxhat * inv_std.astype(d).reshape(1, c, 1, 1)
    return grad_x.astype(d, copy=False), grad_gamma, grad_beta


_INTERP_CACHE: dict = {}


def _interp_matrix(in_size: int, out_size: int, align_corners: bool) -> np.ndarray:
    """Dense (out x in) bilinear sampling matrix (<= 2 taps per row)."""
    key = (in_size, out_size, align_corners)
    m = _INTERP_CACHE.get(key)
    if m is not None:
        return m
    idx = np.arange(out_size, dtype=np.float64)
    if align_corners and out_size > 1:
        src = idx * (in_size - 1) / (out_size - 1)
    elif align_corners:
        src = np.zeros(out_size)
    else:
        src = (idx + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    _INTERP_CACHE[key] = m
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int,
                    align_corners: bool = False) -> np.ndarray:
    """Bilinear interpolation to (out_h, out_w), half-pixel centers by default."""
    x = check_nchw(x)
    check_finite(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("bilinear_resize: output dims must be >= 1")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    mh = _interp_matrix(h, out_h, align_corners)
    mw = _interp_matrix(w, out_w, align_corners)
    y = np.matmul(np.matmul(mh, x.astype(np.float64, copy=False)), mw.T)
    return y.astype(x.dtype)


def bilinear_resize_backward(in_shape: Sequence[int], grad_out: np.ndarray,
                             align_corners: bool = False) -> np.ndarray:
    """Gradient of bilinear_resize w.r.t. its input of shape in_shape."""
    n, c, h, w = in_shape
    go = check_nchw(grad_out, "grad_out")
    out_h, out_w = go.shape[2], go.shape[3]
    if (out_h, out_w) == (h, w):
        return go.copy()
    mh = _interp_matrix(h, out_h, align_corners)
    mw = _interp_matrix(w, out_w, align_corners)
    gx = np.matmul(np.matmul(mh.T, go.astype(np.float64, copy=False)), mw)
    return gx.astype(grad_out.dtype)


def channel_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax along the channel axis, stabilized by max subtraction."""
    x = check_nchw(x)
    check_finite(x, "channel_softmax input")
    x64 = x.astype(np.float64, copy=False)
    z = x64 - x64.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return s.astype(x.dtype)


def channel_softmax_backward(softmax_out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    s = softmax_out.astype(np.float64, copy=False)
    g = grad_out.astype(np.float64, copy=False)
    dot = (g * s).sum(axis=1, keepdims=True)
    return (s * (g - dot)).astype(grad_out.dtype)


def ewise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ConfigurationError(f"ewise add: shapes {a.shape} and {b.shape} differ")
    out = a + b
    return check_finite(out, "ewise add output")


def ewise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ConfigurationError(f"ewise mul: shapes {a.shape} and {b.shape} differ")
    out = a * b
    return check_finite(out, "ewise mul output")


def ewise_mul_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    return grad_out * b, grad_out * a


def concat_channels(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis in argument order."""
    if not tensors:
        raise ConfigurationError("concat_channels: empty input list")
    t0 = check_nchw(tensors[0])
    for t in tensors[1:]:
        t = check_nchw(t)
        if (t.shape[0],) + t.shape[2:] != (t0.shape[0],) + t0.shape[2:]:
            raise ConfigurationError(
                f"concat_channels: n/h/w mismatch between {t0.shape} and {t.shape}"
            )
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(channel_counts: Sequence[int], grad_out: np.ndarray):
    splits = np.cumsum(channel_counts)[:-1]
    return np.split(grad_out, splits, axis=1)
