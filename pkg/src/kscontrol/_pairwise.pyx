# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""O(N^2) pairwise drift kernel with radial-table lookup.

Each row i sums over all j (self term skipped; the gradient vanishes at 0
anyway), in ascending j order, so results are bit-identical for any thread
count under the static prange schedule.  Beyond the table extent the kernel
derivative is the analytic Coulomb tail  tail_coef / r^2  (radial component).
"""

import numpy as np

cimport numpy as cnp
from cython.parallel import prange
from libc.math cimport sqrt


def pairwise_accumulate(double[:, ::1] pos, double[::1] dphi, double inv_dr,
                        double r_max, double tail_coef, double scale,
                        double[:, ::1] out, int num_threads):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t m = dphi.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double dx, dy, dz, r2, r, w, t, ax, ay, az
    for i in prange(n, nogil=True, schedule='static', num_threads=num_threads):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            r = sqrt(r2)
            if r <= 0.0:
                continue
            if r < r_max:
                t = r * inv_dr
                k = <Py_ssize_t> t
                if k >= m - 1:
                    k = m - 2
                w = (dphi[k] + (dphi[k + 1] - dphi[k]) * (t - k)) / r
            else:
                w = tail_coef / (r2 * r)
            ax = ax + w * dx
            ay = ay + w * dy
            az = az + w * dz
        out[i, 0] = scale * ax
        out[i, 1] = scale * ay
        out[i, 2] = scale * az
    return np.asarray(out)
