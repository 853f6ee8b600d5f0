# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bicubic Catmull-Rom kernel; same contract as ``_pykernels.eval_slabs``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _weights(double t, double* w, double* dw) noexcept nogil:
    cdef double t2 = t * t
    cdef double t3 = t2 * t
    w[0] = 0.5 * (-t + 2.0 * t2 - t3)
    w[1] = 0.5 * (2.0 - 5.0 * t2 + 3.0 * t3)
    w[2] = 0.5 * (t + 4.0 * t2 - 3.0 * t3)
    w[3] = 0.5 * (-t2 + t3)
    dw[0] = 0.5 * (-1.0 + 4.0 * t - 3.0 * t2)
    dw[1] = 0.5 * (-10.0 * t + 9.0 * t2)
    dw[2] = 0.5 * (1.0 + 8.0 * t - 9.0 * t2)
    dw[3] = 0.5 * (-2.0 * t + 3.0 * t2)


def eval_slabs(const double[:, :, ::1] data, const long long[:, ::1] slabs,
               const double[::1] fx, const double[::1] fy):
    cdef Py_ssize_t n_pts = slabs.shape[0]
    cdef Py_ssize_t n_slab = slabs.shape[1]
    cdef Py_ssize_t nx = data.shape[2]
    cdef Py_ssize_t ny = data.shape[1]
    val_arr = np.empty((n_pts, n_slab), dtype=np.float64)
    ddx_arr = np.empty((n_pts, n_slab), dtype=np.float64)
    ddy_arr = np.empty((n_pts, n_slab), dtype=np.float64)
    cdef double[:, ::1] val = val_arr
    cdef double[:, ::1] ddx = ddx_arr
    cdef double[:, ::1] ddy = ddy_arr

    cdef double wx[4]
    cdef double dwx[4]
    cdef double wy[4]
    cdef double dwy[4]
    cdef Py_ssize_t p, s, r, c, ix, iy, k
    cdef double row_v, row_d, acc_v, acc_dx, acc_dy, g

    with nogil:
        for p in range(n_pts):
            ix = <Py_ssize_t>floor(fx[p])
            iy = <Py_ssize_t>floor(fy[p])
            if ix > nx - 3:
                ix = nx - 3
            if iy > ny - 3:
                iy = ny - 3
            _weights(fx[p] - ix, wx, dwx)
            _weights(fy[p] - iy, wy, dwy)
            for s in range(n_slab):
                k = slabs[p, s]
                acc_v = 0.0
                acc_dx = 0.0
                acc_dy = 0.0
                for r in range(4):
                    row_v = 0.0
                    row_d = 0.0
                    for c in range(4):
                        g = data[k, iy - 1 + r, ix - 1 + c]
                        row_v = row_v + g * wx[c]
                        row_d = row_d + g * dwx[c]
                    acc_v = acc_v + row_v * wy[r]
                    acc_dx = acc_dx + row_d * wy[r]
                    acc_dy = acc_dy + row_v * dwy[r]
                val[p, s] = acc_v
                ddx[p, s] = acc_dx
                ddy[p, s] = acc_dy
    return val_arr, ddx_arr, ddy_arr
