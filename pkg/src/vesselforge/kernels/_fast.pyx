# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels (forward, grad-input, grad-weight).

Parallel loops partition the work over independent output slabs
((n, c_out) for forward, (n, c_in) for grad-input, (c_out, c_in) for
grad-weight), so every array element is written by exactly one thread and
results are bitwise identical for any thread count.
"""
import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel cimport prange

cnp.import_array()

ctypedef fused real:
    float
    double

OPENMP = True


def set_threads(int n):
    """Set the OpenMP thread count for subsequent kernel calls."""
    if n > 0:
        openmp.omp_set_num_threads(n)


def max_threads():
    return openmp.omp_get_max_threads()


def _bounds(Py_ssize_t k, Py_ssize_t n_in, Py_ssize_t n_out,
            Py_ssize_t stride, Py_ssize_t pad):
    """Per-tap inclusive output index bounds keeping input reads in range."""
    lo = np.empty(k, dtype=np.intp)
    hi = np.empty(k, dtype=np.intp)
    for a in range(k):
        lo[a] = max(0, (pad - a + stride - 1) // stride)
        hi[a] = min(n_out - 1, (n_in - 1 + pad - a) // stride)
    return lo, hi


def conv3d_forward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                   int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t Di = x.shape[2], Hi = x.shape[3], Wi = x.shape[4]
    cdef Py_ssize_t Co = w.shape[0]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t s = stride, p = pad
    cdef Py_ssize_t Do = (Di + 2 * p - kd) // s + 1
    cdef Py_ssize_t Ho = (Hi + 2 * p - kh) // s + 1
    cdef Py_ssize_t Wo = (Wi + 2 * p - kw) // s + 1

    y_arr = np.zeros((N, Co, Do, Ho, Wo),
                     dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, :, ::1] y = y_arr

    lo_d_a, hi_d_a = _bounds(kd, Di, Do, s, p)
    lo_h_a, hi_h_a = _bounds(kh, Hi, Ho, s, p)
    lo_w_a, hi_w_a = _bounds(kw, Wi, Wo, s, p)
    cdef Py_ssize_t[::1] lo_d = lo_d_a, hi_d = hi_d_a
    cdef Py_ssize_t[::1] lo_h = lo_h_a, hi_h = hi_h_a
    cdef Py_ssize_t[::1] lo_w = lo_w_a, hi_w = hi_w_a

    cdef Py_ssize_t nco, n, co, ci, a, b, c, od, oh, ow, id_, ih
    cdef real wv

    for nco in prange(N * Co, nogil=True, schedule='static'):
        n = nco // Co
        co = nco - n * Co
        for ci in range(Ci):
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        wv = w[co, ci, a, b, c]
                        for od in range(lo_d[a], hi_d[a] + 1):
                            id_ = od * s - p + a
                            for oh in range(lo_h[b], hi_h[b] + 1):
                                ih = oh * s - p + b
                                for ow in range(lo_w[c], hi_w[c] + 1):
                                    y[n, co, od, oh, ow] = y[n, co, od, oh, ow] + wv * x[n, ci, id_, ih, ow * s - p + c]
    return y_arr


def conv3d_grad_input(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w,
                      x_shape, int stride, int pad):
    cdef Py_ssize_t N = gy.shape[0], Co = gy.shape[1]
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]
    cdef Py_ssize_t Ci = w.shape[1]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t s = stride, p = pad
    cdef Py_ssize_t Di = x_shape[2], Hi = x_shape[3], Wi = x_shape[4]

    gx_arr = np.zeros((N, Ci, Di, Hi, Wi),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, :, ::1] gx = gx_arr

    lo_d_a, hi_d_a = _bounds(kd, Di, Do, s, p)
    lo_h_a, hi_h_a = _bounds(kh, Hi, Ho, s, p)
    lo_w_a, hi_w_a = _bounds(kw, Wi, Wo, s, p)
    cdef Py_ssize_t[::1] lo_d = lo_d_a, hi_d = hi_d_a
    cdef Py_ssize_t[::1] lo_h = lo_h_a, hi_h = hi_h_a
    cdef Py_ssize_t[::1] lo_w = lo_w_a, hi_w = hi_w_a

    cdef Py_ssize_t nci, n, ci, co, a, b, c, od, oh, ow, id_, ih
    cdef real wv

    for nci in prange(N * Ci, nogil=True, schedule='static'):
        n = nci // Ci
        ci = nci - n * Ci
        for co in range(Co):
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        wv = w[co, ci, a, b, c]
                        for od in range(lo_d[a], hi_d[a] + 1):
                            id_ = od * s - p + a
                            for oh in range(lo_h[b], hi_h[b] + 1):
                                ih = oh * s - p + b
                                for ow in range(lo_w[c], hi_w[c] + 1):
                                    gx[n, ci, id_, ih, ow * s - p + c] = gx[n, ci, id_, ih, ow * s - p + c] + wv * gy[n, co, od, oh, ow]
    return gx_arr


def conv3d_grad_weight(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] x,
                       w_shape, int stride, int pad):
    cdef Py_ssize_t N = gy.shape[0], Co = gy.shape[1]
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t Di = x.shape[2], Hi = x.shape[3], Wi = x.shape[4]
    cdef Py_ssize_t kd = w_shape[2], kh = w_shape[3], kw = w_shape[4]
    cdef Py_ssize_t s = stride, p = pad

    gw_arr = np.zeros((Co, Ci, kd, kh, kw),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, :, ::1] gw = gw_arr

    lo_d_a, hi_d_a = _bounds(kd, Di, Do, s, p)
    lo_h_a, hi_h_a = _bounds(kh, Hi, Ho, s, p)
    lo_w_a, hi_w_a = _bounds(kw, Wi, Wo, s, p)
    cdef Py_ssize_t[::1] lo_d = lo_d_a, hi_d = hi_d_a
    cdef Py_ssize_t[::1] lo_h = lo_h_a, hi_h = hi_h_a
    cdef Py_ssize_t[::1] lo_w = lo_w_a, hi_w = hi_w_a

    cdef Py_ssize_t coci, co, ci, n, a, b, c, od, oh, ow, id_, ih
    cdef double acc

    for coci in prange(Co * Ci, nogil=True, schedule='static'):
        co = coci // Ci
        ci = coci - co * Ci
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    acc = 0.0
                    for n in range(N):
                        for od in range(lo_d[a], hi_d[a] + 1):
                            id_ = od * s - p + a
                            for oh in range(lo_h[b], hi_h[b] + 1):
                                ih = oh * s - p + b
                                for ow in range(lo_w[c], hi_w[c] + 1):
                                    acc = acc + gy[n, co, od, oh, ow] * x[n, ci, id_, ih, ow * s - p + c]
                    gw[co, ci, a, b, c] = <real> acc
    return gw_arr
