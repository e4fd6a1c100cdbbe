"""Differentiable layer primitives (forward + backward) on numpy arrays.

Every forward returns ``(output, cache)``; the matching backward consumes the
upstream gradient plus that cache and returns gradients for its inputs.
All functions preserve the input dtype, so gradient checks can run in float64
while training runs in float32.

Conventions:
    activations  [N, C, H, W]
    conv weights [F, C, kh, kw], bias [F]
    dense weights [out, in], bias [out]
"""

from __future__ import annotations

import numpy as np

from . import _fastconv
from .errors import DegenerateBatchError, NumericError, ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

try:  # optional: compiled gather/scatter for the conv hot path
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _im2col_numpy(x_padded: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = x_padded.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (k, k), axis=(2, 3))
    # win: [N, C, out_h, out_w, k, k] -> [N, out_h, out_w, C, k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(cols).reshape(n * out_h * out_w, c * k * k)


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _im2col_kernel(xp, k, out_h, out_w, out):  # pragma: no cover - compiled
        n_img, c_in = xp.shape[0], xp.shape[1]
        for n in range(n_img):
            for y in range(out_h):
                for x in range(out_w):
                    row = (n * out_h + y) * out_w + x
                    col = 0
                    for c in range(c_in):
                        for dy in range(k):
                            for dx in range(k):
                                out[row, col] = xp[n, c, y + dy, x + dx]
                                col += 1

def _im2col(x_padded: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """Stride-1 patch matrix: [N*out_h*out_w, C*k*k], rows in (n, y, x) order."""
    if _HAVE_NUMBA:
        n, c = x_padded.shape[:2]
        out = np.empty((n * out_h * out_w, c * k * k), dtype=x_padded.dtype)
        _im2col_kernel(np.ascontiguousarray(x_padded), k, out_h, out_w, out)
        return out
    return _im2col_numpy(x_padded, k, out_h, out_w)


# im2col matrices above this size are recomputed in backward instead of cached
_COLS_CACHE_LIMIT_BYTES = 220 * 1024 * 1024


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-size zero-padded stride-1 convolution (odd square kernels)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d expects an odd square kernel, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")

    n, _, h, w = x.shape
    f, c, k, _ = weight.shape
    if _fastconv.eligible(x, weight):
        return _fastconv.fast_conv3x3_forward(x, weight, bias), (x, weight, None)
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, h, w)
    wmat = weight.reshape(f, c * k * k)
    out = cols @ wmat.T
    out += bias
    y = np.ascontiguousarray(out.reshape(n, h, w, f).transpose(0, 3, 1, 2))
    saved_cols = cols if cols.nbytes <= _COLS_CACHE_LIMIT_BYTES else None
    return y, (x, weight, saved_cols)


def conv2d_backward(dy: np.ndarray, cache):
    """Gradients of conv2d_forward; returns (dx, dweight, dbias)."""
    x, weight, cols = cache
    f, c, k, _ = weight.shape
    n, _, h, w = x.shape
    if dy.shape != (n, f, h, w):
        raise ShapeError(f"upstream grad shape {dy.shape} != {(n, f, h, w)}")
    if _fastconv.eligible(x, weight) and dy.dtype == np.float32:
        dy = np.ascontiguousarray(dy)
        dweight, dbias = _fastconv.fast_conv3x3_param_grads(x, dy)
        dx = _fastconv.fast_conv3x3_input_grad(dy, weight)
        return dx, dweight, dbias
    pad = (k - 1) // 2
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _im2col(xp, k, h, w)

    dy_rows = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * h * w, f)
    dbias = dy_rows.sum(axis=0)
    dweight = np.ascontiguousarray((cols.T @ dy_rows).T).reshape(weight.shape)

    # dx is the full correlation of dy with the flipped kernel, channels swapped.
    dyp = np.pad(dy, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else dy
    dy_cols = _im2col(dyp, k, h, w)
    wflip = np.ascontiguousarray(
        weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    ).reshape(c, f * k * k)
    dx_rows = dy_cols @ wflip.T
    dx = np.ascontiguousarray(dx_rows.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    return dx, dweight, dbias


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    epsilon: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
):
    """Per-channel batch normalization over [N, C, H, W].

    Train mode normalizes with batch moments and updates ``running_mean`` /
    ``running_var`` in place; inference mode uses the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    fast = _fastconv.HAVE_FAST_PATH and x.dtype == np.float32 and x.flags.c_contiguous
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batch statistics need >= 2 elements per channel, got {m}"
            )
        if fast:
            mean64 = np.empty(c, dtype=np.float64)
            var64 = np.empty(c, dtype=np.float64)
            _fastconv.bn_moments(x, mean64, var64)
            mean = mean64.astype(x.dtype)
            var = var64.astype(x.dtype)
        else:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))  # biased, matches the normalization
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "inference":
        mean = running_mean
        var = running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    if fast:
        xhat = np.empty_like(x)
        y = np.empty_like(x)
        _fastconv.bn_apply(
            x, mean.astype(x.dtype), inv_std, gamma, beta, xhat, y
        )
    else:
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, mode)
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(dy: np.ndarray, cache):
    """Gradients of batchnorm_forward; returns (dx, dgamma, dbeta)."""
    xhat, gamma, inv_std, mode = cache
    if dy.shape != xhat.shape:
        raise ShapeError(f"upstream grad shape {dy.shape} != {xhat.shape}")
    n, c, h, w = dy.shape
    fast = (
        _fastconv.HAVE_FAST_PATH
        and dy.dtype == np.float32
        and mode == "train"
        and dy.flags.c_contiguous
        and xhat.flags.c_contiguous
    )
    if fast:
        dbeta64 = np.empty(c, dtype=np.float64)
        dgamma64 = np.empty(c, dtype=np.float64)
        _fastconv.bn_bwd_sums(dy, xhat, dbeta64, dgamma64)
        dbeta = dbeta64.astype(dy.dtype)
        dgamma = dgamma64.astype(dy.dtype)
        dx = np.empty_like(dy)
        _fastconv.bn_bwd_dx(
            dy, xhat, gamma, inv_std,
            dbeta64.astype(np.float32), dgamma64.astype(np.float32),
            np.float32(1.0 / (n * h * w)), dx,
        )
        return dx, dgamma, dbeta
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if mode == "inference":
        dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    m = n * h * w
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std / m)[None, :, None, None] * (
        m * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def relu_forward(x: np.ndarray):
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def maxpool2x2_forward(x: np.ndarray):
    """2x2/stride-2 max pooling; odd trailing rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool needs spatial dims >= 2, got {h}x{w}")
    oh, ow = h // 2, w // 2
    xc = x[:, :, : 2 * oh, : 2 * ow]
    tiles = xc.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, oh, ow, 4
    )
    winner = tiles.argmax(axis=4)  # first max wins on ties
    y = np.take_along_axis(tiles, winner[..., None], axis=4)[..., 0]
    return y, (x.shape, winner)


def maxpool2x2_backward(dy: np.ndarray, cache):
    in_shape, winner = cache
    n, c, h, w = in_shape
    oh, ow = h // 2, w // 2
    if dy.shape != (n, c, oh, ow):
        raise ShapeError(f"upstream grad shape {dy.shape} != {(n, c, oh, ow)}")
    if _fastconv.HAVE_FAST_PATH:
        dx = np.zeros(in_shape, dtype=dy.dtype)
        _fastconv.maxpool_bwd(np.ascontiguousarray(dy), winner, dx)
        return dx
    dtiles = np.zeros((n, c, oh, ow, 4), dtype=dy.dtype)
    np.put_along_axis(dtiles, winner[..., None], dy[..., None], axis=4)
    dxc = dtiles.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, 2 * oh, 2 * ow
    )
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, : 2 * oh, : 2 * ow] = dxc
    return dx


def global_avg_pool_forward(x: np.ndarray):
    """Per-channel spatial mean: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy: np.ndarray, cache):
    n, c, h, w = cache
    if dy.shape != (n, c):
        raise ShapeError(f"upstream grad shape {dy.shape} != {(n, c)}")
    return np.broadcast_to(dy[:, :, None, None] / (h * w), cache).astype(
        dy.dtype, copy=False
    )


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Affine map on [N, in] -> [N, out] with weight [out, in]."""
    if x.ndim != 2:
        raise ShapeError(f"dense expects [N, features], got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} features but weight expects {weight.shape[1]}"
        )
    y = x @ weight.T + bias
    return y, (x, weight)


def dense_backward(dy: np.ndarray, cache):
    x, weight = cache
    if dy.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(
            f"upstream grad shape {dy.shape} != {(x.shape[0], weight.shape[0])}"
        )
    dx = dy @ weight
    dweight = dy.T @ x
    dbias = dy.sum(axis=0)
    return dx, dweight, dbias


def dropout_forward(x: np.ndarray, ratio: float, mode: str, rng: np.random.Generator):
    """Inverted dropout: train mode zeroes units w.p. ``ratio`` and rescales
    survivors by 1/(1-ratio); inference mode is the identity."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode == "inference" or ratio == 0.0:
        return x, None
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    keep = (rng.random(x.shape) >= ratio).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - ratio))
    return x * keep * scale, keep * scale


def dropout_backward(dy: np.ndarray, cache):
    if cache is None:
        return dy
    return dy * cache


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [N, classes], got {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericError("softmax received non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
