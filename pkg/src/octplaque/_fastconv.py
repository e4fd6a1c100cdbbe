"""Compiled float32 kernels for the 3x3-convolution hot path.

These are pure speed substitutes for the im2col/GEMM route in
:mod:`octplaque.layers`; the GEMM route remains the reference implementation
(and the only route for float64 and non-3x3 kernels).  Tests assert that both
routes agree.  Everything here is single-threaded and deterministic.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_FAST_PATH = True
except ImportError:  # pragma: no cover
    HAVE_FAST_PATH = False

    def njit(*a, **k):  # pragma: no cover
        def deco(f):
            return f

        return deco


# Direct convs vectorize poorly on very narrow rows; GEMM wins there.
MIN_WIDTH = 16


@njit(cache=True, fastmath=True)
def conv3x3_fwd(xp, w, b, out, acc):  # pragma: no cover - compiled
    n_img, c_in, hp, wp = xp.shape
    f_out = w.shape[0]
    h, wd = hp - 2, wp - 2
    for n in range(n_img):
        for f in range(f_out):
            for y in range(h):
                for x in range(wd):
                    acc[x] = b[f]
                for c in range(c_in):
                    r0 = xp[n, c, y]
                    r1 = xp[n, c, y + 1]
                    r2 = xp[n, c, y + 2]
                    w00 = w[f, c, 0, 0]; w01 = w[f, c, 0, 1]; w02 = w[f, c, 0, 2]
                    w10 = w[f, c, 1, 0]; w11 = w[f, c, 1, 1]; w12 = w[f, c, 1, 2]
                    w20 = w[f, c, 2, 0]; w21 = w[f, c, 2, 1]; w22 = w[f, c, 2, 2]
                    for x in range(wd):
                        acc[x] += (
                            w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2]
                            + w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2]
                            + w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2]
                        )
                for x in range(wd):
                    out[n, f, y, x] = acc[x]


@njit(cache=True, fastmath=True)
def conv3x3_dw(xp, dy, dw, db):  # pragma: no cover - compiled
    """Accumulate weight/bias grads: dw[f,c,a,b] = sum dy[n,f,y,x]*xp[n,c,y+a,x+b]."""
    n_img, c_in, hp, wp = xp.shape
    f_out = dy.shape[1]
    h, wd = hp - 2, wp - 2
    for n in range(n_img):
        for f in range(f_out):
            for y in range(h):
                g = dy[n, f, y]
                bs = np.float32(0.0)
                for x in range(wd):
                    bs += g[x]
                db[f] += bs
                for c in range(c_in):
                    r0 = xp[n, c, y]
                    r1 = xp[n, c, y + 1]
                    r2 = xp[n, c, y + 2]
                    s00 = np.float32(0.0); s01 = np.float32(0.0); s02 = np.float32(0.0)
                    s10 = np.float32(0.0); s11 = np.float32(0.0); s12 = np.float32(0.0)
                    s20 = np.float32(0.0); s21 = np.float32(0.0); s22 = np.float32(0.0)
                    for x in range(wd):
                        gx = g[x]
                        s00 += gx * r0[x]; s01 += gx * r0[x + 1]; s02 += gx * r0[x + 2]
                        s10 += gx * r1[x]; s11 += gx * r1[x + 1]; s12 += gx * r1[x + 2]
                        s20 += gx * r2[x]; s21 += gx * r2[x + 1]; s22 += gx * r2[x + 2]
                    dw[f, c, 0, 0] += s00; dw[f, c, 0, 1] += s01; dw[f, c, 0, 2] += s02
                    dw[f, c, 1, 0] += s10; dw[f, c, 1, 1] += s11; dw[f, c, 1, 2] += s12
                    dw[f, c, 2, 0] += s20; dw[f, c, 2, 1] += s21; dw[f, c, 2, 2] += s22


@njit(cache=True, fastmath=True)
def maxpool_bwd(dy, winner, dx):  # pragma: no cover - compiled
    n_img, c_in, oh, ow = dy.shape
    for n in range(n_img):
        for c in range(c_in):
            for y in range(oh):
                for x in range(ow):
                    k = winner[n, c, y, x]
                    dx[n, c, 2 * y + k // 2, 2 * x + k % 2] = dy[n, c, y, x]


@njit(cache=True)
def bn_moments(x, mean, var):  # pragma: no cover - compiled
    """Per-channel mean/biased variance with float64 accumulators."""
    n_img, c_in, h, w = x.shape
    m = n_img * h * w
    for c in range(c_in):
        s = 0.0
        s2 = 0.0
        for n in range(n_img):
            for y in range(h):
                row = x[n, c, y]
                for xx in range(w):
                    v = np.float64(row[xx])
                    s += v
                    s2 += v * v
        mu = s / m
        mean[c] = mu
        var[c] = s2 / m - mu * mu


@njit(cache=True, fastmath=True)
def bn_apply(x, mean, inv_std, gamma, beta, xhat, out):  # pragma: no cover
    n_img, c_in, h, w = x.shape
    for n in range(n_img):
        for c in range(c_in):
            mu = mean[c]; istd = inv_std[c]; g = gamma[c]; b = beta[c]
            for y in range(h):
                rx = x[n, c, y]; rh = xhat[n, c, y]; ro = out[n, c, y]
                for xx in range(w):
                    hv = (rx[xx] - mu) * istd
                    rh[xx] = hv
                    ro[xx] = g * hv + b


@njit(cache=True)
def bn_bwd_sums(dy, xhat, dbeta, dgamma):  # pragma: no cover - compiled
    n_img, c_in, h, w = dy.shape
    for c in range(c_in):
        sb = 0.0
        sg = 0.0
        for n in range(n_img):
            for y in range(h):
                rd = dy[n, c, y]; rh = xhat[n, c, y]
                for xx in range(w):
                    sb += np.float64(rd[xx])
                    sg += np.float64(rd[xx]) * np.float64(rh[xx])
        dbeta[c] = sb
        dgamma[c] = sg


@njit(cache=True, fastmath=True)
def bn_bwd_dx(dy, xhat, gamma, inv_std, dbeta, dgamma, inv_m, dx):  # pragma: no cover
    n_img, c_in, h, w = dy.shape
    for n in range(n_img):
        for c in range(c_in):
            a = gamma[c] * inv_std[c]
            mb = dbeta[c] * inv_m
            mg = dgamma[c] * inv_m
            for y in range(h):
                rd = dy[n, c, y]; rh = xhat[n, c, y]; ro = dx[n, c, y]
                for xx in range(w):
                    ro[xx] = a * (rd[xx] - mb - rh[xx] * mg)


def fast_conv3x3_forward(x, weight, bias):
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((n, weight.shape[0], h, w), dtype=np.float32)
    acc = np.empty(w, dtype=np.float32)
    conv3x3_fwd(xp, weight, bias, out, acc)
    return out


def fast_conv3x3_input_grad(dy, weight):
    """dx as the full correlation of dy with the flipped, channel-swapped kernel."""
    n, f, h, w = dy.shape
    c = weight.shape[1]
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wflip = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = np.empty((n, c, h, w), dtype=np.float32)
    acc = np.empty(w, dtype=np.float32)
    conv3x3_fwd(dyp, wflip, np.zeros(c, dtype=np.float32), dx, acc)
    return dx


def fast_conv3x3_param_grads(x, dy):
    f, c = dy.shape[1], x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dw = np.zeros((f, c, 3, 3), dtype=np.float32)
    db = np.zeros(f, dtype=np.float32)
    conv3x3_dw(xp, dy, dw, db)
    return dw, db


def eligible(x, weight) -> bool:
    """Whether the compiled route applies to this call."""
    return (
        HAVE_FAST_PATH
        and x.dtype == np.float32
        and weight.dtype == np.float32
        and weight.shape[2:] == (3, 3)
        and x.shape[3] >= MIN_WIDTH
    )
