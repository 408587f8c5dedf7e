"""Pure numpy reference implementation of the 3D convolution kernels.

Each kernel tap (a, b, c) contributes one strided-slice GEMM; the loop runs
over the kernel volume (27 iterations for a 3x3x3 kernel), so the heavy
lifting stays inside numpy/BLAS.
"""
import numpy as np

OPENMP = False


def set_threads(n):
    """No-op: numpy kernels use whatever BLAS threading is configured."""


def max_threads():
    return 1


def _out_dim(n_in, k, stride, pad):
    return (n_in + 2 * pad - k) // stride + 1


def _bounds(k, n_in, n_out, stride, pad):
    lo = np.empty(k, dtype=np.intp)
    hi = np.empty(k, dtype=np.intp)
    for a in range(k):
        lo[a] = max(0, (pad - a + stride - 1) // stride)
        hi[a] = min(n_out - 1, (n_in - 1 + pad - a) // stride)
    return lo, hi


def conv3d_forward(x, w, stride, pad):
    N, Ci, Di, Hi, Wi = x.shape
    Co, _, kd, kh, kw = w.shape
    s = stride
    Do, Ho, Wo = (_out_dim(n, k, s, pad) for n, k in ((Di, kd), (Hi, kh), (Wi, kw)))
    ld, hd = _bounds(kd, Di, Do, s, pad)
    lh, hh = _bounds(kh, Hi, Ho, s, pad)
    lw, hw = _bounds(kw, Wi, Wo, s, pad)

    y = np.zeros((N, Co, Do, Ho, Wo), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                d0, d1 = ld[a], hd[a] + 1
                h0, h1 = lh[b], hh[b] + 1
                w0, w1 = lw[c], hw[c] + 1
                if d0 >= d1 or h0 >= h1 or w0 >= w1:
                    continue
                xs = x[:, :,
                       d0 * s - pad + a:(d1 - 1) * s - pad + a + 1:s,
                       h0 * s - pad + b:(h1 - 1) * s - pad + b + 1:s,
                       w0 * s - pad + c:(w1 - 1) * s - pad + c + 1:s]
                t = np.tensordot(xs, w[:, :, a, b, c], axes=([1], [1]))
                y[:, :, d0:d1, h0:h1, w0:w1] += np.moveaxis(t, -1, 1)
    return y


def conv3d_grad_input(gy, w, x_shape, stride, pad):
    N, Co, Do, Ho, Wo = gy.shape
    _, Ci, kd, kh, kw = w.shape
    s = stride
    Di, Hi, Wi = x_shape[2], x_shape[3], x_shape[4]
    ld, hd = _bounds(kd, Di, Do, s, pad)
    lh, hh = _bounds(kh, Hi, Ho, s, pad)
    lw, hw = _bounds(kw, Wi, Wo, s, pad)

    gx = np.zeros((N, Ci, Di, Hi, Wi), dtype=gy.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                d0, d1 = ld[a], hd[a] + 1
                h0, h1 = lh[b], hh[b] + 1
                w0, w1 = lw[c], hw[c] + 1
                if d0 >= d1 or h0 >= h1 or w0 >= w1:
                    continue
                t = np.tensordot(gy[:, :, d0:d1, h0:h1, w0:w1],
                                 w[:, :, a, b, c], axes=([1], [0]))
                gx[:, :,
                   d0 * s - pad + a:(d1 - 1) * s - pad + a + 1:s,
                   h0 * s - pad + b:(h1 - 1) * s - pad + b + 1:s,
                   w0 * s - pad + c:(w1 - 1) * s - pad + c + 1:s] += np.moveaxis(t, -1, 1)
    return gx


def conv3d_grad_weight(gy, x, w_shape, stride, pad):
    N, Co, Do, Ho, Wo = gy.shape
    Ci = x.shape[1]
    Di, Hi, Wi = x.shape[2], x.shape[3], x.shape[4]
    kd, kh, kw = w_shape[2], w_shape[3], w_shape[4]
    s = stride
    ld, hd = _bounds(kd, Di, Do, s, pad)
    lh, hh = _bounds(kh, Hi, Ho, s, pad)
    lw, hw = _bounds(kw, Wi, Wo, s, pad)

    gw = np.zeros((Co, Ci, kd, kh, kw), dtype=gy.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                d0, d1 = ld[a], hd[a] + 1
                h0, h1 = lh[b], hh[b] + 1
                w0, w1 = lw[c], hw[c] + 1
                if d0 >= d1 or h0 >= h1 or w0 >= w1:
                    continue
                xs = x[:, :,
                       d0 * s - pad + a:(d1 - 1) * s - pad + a + 1:s,
                       h0 * s - pad + b:(h1 - 1) * s - pad + b + 1:s,
                       w0 * s - pad + c:(w1 - 1) * s - pad + c + 1:s]
                gw[:, :, a, b, c] = np.tensordot(
                    gy[:, :, d0:d1, h0:h1, w0:w1], xs,
                    axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw
