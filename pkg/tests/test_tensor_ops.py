"""Layer-level numerics: direct-summation oracles, finite-difference
gradient checks, and trivial hand-computed pins."""

import numpy as np
import pytest

from octplaque import layers
from octplaque.errors import DegenerateBatchError, NumericError, ShapeError

from conftest import numeric_grad, rel_err

GRAD_TOL = 1e-6


def conv_oracle(x, weight, bias):
    """Direct quadruple-sum convolution with zero padding (slow, obvious)."""
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, f, h, w), dtype=np.float64)
    for b in range(n):
        for o in range(f):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, ci, i + u, j + v] * weight[o, ci, u, v]
                    out[b, o, i, j] = acc + bias[o]
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_matches_direct_sum_oracle(rng):
    for _ in range(5):
        n, c, f, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4), 3
        h, w = rng.integers(3, 8), rng.integers(3, 8)
        x = rng.standard_normal((n, c, h, w))
        weight = rng.standard_normal((f, c, k, k))
        bias = rng.standard_normal(f)
        got, _ = layers.conv2d_forward(x, weight, bias)
        want = conv_oracle(x, weight, bias)
        assert np.max(np.abs(got - want)) < 1e-12


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 6, 6))
    weight = np.zeros((1, 1, 3, 3))
    weight[0, 0, 1, 1] = 1.0
    y, _ = layers.conv2d_forward(x, weight, np.zeros(1))
    assert np.allclose(y, x)


def test_conv_gradcheck(rng):
    cases = 0
    worst = 0.0
    while cases < 20:
        n, c, f = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        k = int(rng.choice([1, 3, 5]))
        h, w = int(rng.integers(k, k + 4)), int(rng.integers(k, k + 4))
        x = rng.standard_normal((n, c, h, w))
        weight = rng.standard_normal((f, c, k, k))
        bias = rng.standard_normal(f)
        proj = rng.standard_normal((n, f, h, w))

        y, cache = layers.conv2d_forward(x, weight, bias)
        dx, dw, db = layers.conv2d_backward(proj, cache)

        worst = max(
            worst,
            rel_err(dx, numeric_grad(
                lambda v: float((layers.conv2d_forward(v, weight, bias)[0] * proj).sum()), x)),
            rel_err(dw, numeric_grad(
                lambda v: float((layers.conv2d_forward(x, v, bias)[0] * proj).sum()), weight)),
            rel_err(db, numeric_grad(
                lambda v: float((layers.conv2d_forward(x, weight, v)[0] * proj).sum()), bias)),
        )
        cases += 1
    assert worst < GRAD_TOL


def test_conv_fast_path_matches_reference(rng):
    """The optimized float32 3x3 kernels must agree with the float64 path."""
    x64 = rng.standard_normal((3, 4, 20, 20))
    w64 = rng.standard_normal((5, 4, 3, 3)) * 0.2
    b64 = rng.standard_normal(5) * 0.1
    dy64 = rng.standard_normal((3, 5, 20, 20))

    y64, cache64 = layers.conv2d_forward(x64, w64, b64)
    dx64, dw64, db64 = layers.conv2d_backward(dy64, cache64)

    x32, w32, b32 = (a.astype(np.float32) for a in (x64, w64, b64))
    y32, cache32 = layers.conv2d_forward(x32, w32, b32)
    dx32, dw32, db32 = layers.conv2d_backward(dy64.astype(np.float32), cache32)

    # float32 path scored against the double-precision result, relative to
    # the overall magnitude (elementwise ratios blow up near cancellations)
    def scaled_err(a32, a64):
        return float(np.max(np.abs(a32 - a64)) / np.max(np.abs(a64)))

    assert scaled_err(y32, y64) < 1e-5
    assert scaled_err(dx32, dx64) < 1e-5
    assert scaled_err(dw32, dw64) < 1e-5
    assert scaled_err(db32, db64) < 1e-5


def test_conv_shape_errors(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    with pytest.raises(ShapeError):
        layers.conv2d_forward(x, rng.standard_normal((4, 3, 2, 2)), np.zeros(4))
    with pytest.raises(ShapeError):
        layers.conv2d_forward(x, rng.standard_normal((4, 2, 3, 3)), np.zeros(4))
    with pytest.raises(ShapeError):
        layers.conv2d_forward(x, rng.standard_normal((4, 3, 3, 3)), np.zeros(5))


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_normalizes_and_updates_running_stats(rng):
    x = rng.standard_normal((4, 3, 6, 6)) * 3 + 5
    gamma, beta = np.ones(3), np.zeros(3)
    rmean, rvar = np.zeros(3), np.ones(3)
    y, _ = layers.batchnorm_forward(x, gamma, beta, rmean, rvar, mode="train")
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    # running stats blend: 0.99 * old + 0.01 * batch
    assert np.allclose(rmean, 0.01 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(rvar, 0.99 + 0.01 * x.var(axis=(0, 2, 3)))


def test_batchnorm_inference_uses_running_stats(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    rmean = rng.standard_normal(3)
    rvar = rng.random(3) + 0.5
    y, _ = layers.batchnorm_forward(
        x, gamma, beta, rmean.copy(), rvar.copy(), mode="inference"
    )
    want = gamma[None, :, None, None] * (
        x - rmean[None, :, None, None]
    ) / np.sqrt(rvar + layers.BN_EPSILON)[None, :, None, None] + beta[None, :, None, None]
    assert np.allclose(y, want)


def test_batchnorm_gradcheck(rng):
    worst = 0.0
    for mode in ("train", "inference"):
        for _ in range(10):
            n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
            h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
            x = rng.standard_normal((n, c, h, w))
            gamma = rng.standard_normal(c)
            beta = rng.standard_normal(c)
            rmean = rng.standard_normal(c)
            rvar = rng.random(c) + 0.5
            proj = rng.standard_normal((n, c, h, w))

            def run(xv, gv, bv):
                y, _ = layers.batchnorm_forward(
                    xv, gv, bv, rmean.copy(), rvar.copy(), mode=mode
                )
                return float((y * proj).sum())

            _, cache = layers.batchnorm_forward(
                x, gamma, beta, rmean.copy(), rvar.copy(), mode=mode
            )
            dx, dgamma, dbeta = layers.batchnorm_backward(proj, cache)
            worst = max(
                worst,
                rel_err(dx, numeric_grad(lambda v: run(v, gamma, beta), x)),
                rel_err(dgamma, numeric_grad(lambda v: run(x, v, beta), gamma)),
                rel_err(dbeta, numeric_grad(lambda v: run(x, gamma, v), beta)),
            )
    assert worst < GRAD_TOL


def test_batchnorm_fast_path_matches_reference(rng):
    x64 = rng.standard_normal((4, 3, 8, 8))
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    dy = rng.standard_normal((4, 3, 8, 8))
    y64, c64 = layers.batchnorm_forward(
        x64, gamma, beta, np.zeros(3), np.ones(3), mode="train"
    )
    dx64, dg64, db64 = layers.batchnorm_backward(dy, c64)
    y32, c32 = layers.batchnorm_forward(
        x64.astype(np.float32), gamma.astype(np.float32), beta.astype(np.float32),
        np.zeros(3, np.float32), np.ones(3, np.float32), mode="train",
    )
    dx32, dg32, db32 = layers.batchnorm_backward(dy.astype(np.float32), c32)

    def scaled_err(a32, a64):
        return float(np.max(np.abs(a32 - a64)) / np.max(np.abs(a64)))

    assert scaled_err(y32, y64) < 1e-5
    assert scaled_err(dx32, dx64) < 1e-5
    assert scaled_err(dg32, dg64) < 1e-5
    assert scaled_err(db32, db64) < 1e-5


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        layers.batchnorm_forward(
            np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2),
            np.zeros(2), np.ones(2), mode="train",
        )


# ---------------------------------------------------------------- relu / pools


def test_relu_pin_and_gradcheck(rng):
    x = np.array([[-1.0, 0.0, 2.0]])
    y, cache = layers.relu_forward(x)
    assert np.array_equal(y, [[0.0, 0.0, 2.0]])
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 0.1] += 0.2  # stay away from the kink
        proj = rng.standard_normal((3, 4))
        _, cache = layers.relu_forward(x)
        dx = layers.relu_backward(proj, cache)
        worst = max(worst, rel_err(dx, numeric_grad(
            lambda v: float((layers.relu_forward(v)[0] * proj).sum()), x)))
    assert worst < GRAD_TOL


def test_maxpool_pin_and_tie_break():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, _ = layers.maxpool2x2_forward(x)
    assert y.item() == 4.0
    # tie: first maximum in row-major tile order receives the gradient
    x = np.full((1, 1, 2, 2), 7.0)
    y, cache = layers.maxpool2x2_forward(x)
    dx = layers.maxpool2x2_backward(np.ones((1, 1, 1, 1)), cache)
    assert dx[0, 0, 0, 0] == 1.0
    assert dx.sum() == 1.0


def test_maxpool_odd_input_drops_trailing(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    y, cache = layers.maxpool2x2_forward(x)
    assert y.shape == (2, 3, 2, 3)
    dx = layers.maxpool2x2_backward(np.ones_like(y), cache)
    assert dx.shape == x.shape
    assert np.all(dx[:, :, 4, :] == 0) and np.all(dx[:, :, :, 6] == 0)


def test_maxpool_gradcheck(rng):
    worst = 0.0
    for _ in range(20):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        # distinct values keep the argmax stable under the FD perturbation
        x = rng.permutation(n * c * h * w).astype(np.float64).reshape(n, c, h, w)
        proj = rng.standard_normal((n, c, h // 2, w // 2))
        _, cache = layers.maxpool2x2_forward(x)
        dx = layers.maxpool2x2_backward(proj, cache)
        worst = max(worst, rel_err(dx, numeric_grad(
            lambda v: float((layers.maxpool2x2_forward(v)[0] * proj).sum()), x)))
    assert worst < GRAD_TOL


def test_global_avg_pool(rng):
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    y, _ = layers.global_avg_pool_forward(x)
    assert np.array_equal(y, [[1.5, 5.5]])
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((2, 3, 4, 4))
        proj = rng.standard_normal((2, 3))
        _, cache = layers.global_avg_pool_forward(x)
        dx = layers.global_avg_pool_backward(proj, cache)
        worst = max(worst, rel_err(dx, numeric_grad(
            lambda v: float((layers.global_avg_pool_forward(v)[0] * proj).sum()), x)))
    assert worst < GRAD_TOL


# ---------------------------------------------------------------- dense / dropout


def test_dense_pin_and_gradcheck(rng):
    y, _ = layers.dense_forward(
        np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([5.0])
    )
    assert y.item() == 1 * 3 + 2 * 4 + 5
    worst = 0.0
    for _ in range(20):
        n, fin, fout = (int(rng.integers(1, 5)) for _ in range(3))
        x = rng.standard_normal((n, fin))
        weight = rng.standard_normal((fout, fin))
        bias = rng.standard_normal(fout)
        proj = rng.standard_normal((n, fout))
        _, cache = layers.dense_forward(x, weight, bias)
        dx, dw, db = layers.dense_backward(proj, cache)
        worst = max(
            worst,
            rel_err(dx, numeric_grad(
                lambda v: float((layers.dense_forward(v, weight, bias)[0] * proj).sum()), x)),
            rel_err(dw, numeric_grad(
                lambda v: float((layers.dense_forward(x, v, bias)[0] * proj).sum()), weight)),
            rel_err(db, numeric_grad(
                lambda v: float((layers.dense_forward(x, weight, v)[0] * proj).sum()), bias)),
        )
    assert worst < GRAD_TOL


def test_dropout_inference_is_identity(rng):
    x = rng.standard_normal((4, 6))
    y, cache = layers.dropout_forward(x, 0.5, "inference", rng)
    assert y is x and cache is None


def test_dropout_preserves_expectation(rng):
    """Inverted scaling keeps E[y] = x; empirical mean within 2%."""
    x = np.ones((100, 100))
    total = np.zeros_like(x)
    trials = 200  # 2e6 unit draws in total
    for _ in range(trials):
        y, _ = layers.dropout_forward(x, 0.5, "train", rng)
        total += y
    assert abs(total.mean() / trials - 1.0) < 0.02


def test_dropout_backward_uses_same_mask(rng):
    x = rng.standard_normal((5, 5))
    y, cache = layers.dropout_forward(x, 0.5, "train", rng)
    dy = rng.standard_normal((5, 5))
    dx = layers.dropout_backward(dy, cache)
    # zeroed units get zero gradient; survivors get the 1/(1-p) scale
    assert np.array_equal(dx == 0, y == 0)
    assert np.allclose(dx[y != 0], 2.0 * dy[y != 0])


def test_dropout_rejects_bad_ratio(rng):
    with pytest.raises(ValueError):
        layers.dropout_forward(np.ones(3).reshape(1, 3), 1.0, "train", rng)


# ---------------------------------------------------------------- softmax


def test_softmax_rows_and_shift_invariance(rng):
    logits = rng.standard_normal((6, 5))
    p = layers.softmax(logits)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(p > 0)
    assert np.allclose(p, layers.softmax(logits + 123.0))
    z = np.array([[0.0, np.log(3.0)]])
    assert np.allclose(layers.softmax(z), [[0.25, 0.75]])


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        layers.softmax(np.array([[np.nan, 0.0]]))


def test_layer_outputs_preserve_dtype(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y, _ = layers.conv2d_forward(x, w, np.zeros(4, np.float32))
    assert y.dtype == np.float32
    y, _ = layers.batchnorm_forward(
        y, np.ones(4, np.float32), np.zeros(4, np.float32),
        np.zeros(4, np.float32), np.ones(4, np.float32), mode="train",
    )
    assert y.dtype == np.float32
