# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled arc-cosine Gram and ReLU backprop kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport acos, sqrt, M_PI

cnp.import_array()


cdef inline void _kap(double u, double* k, double* kp) noexcept nogil:
    cdef double t
    if u > 1.0:
        u = 1.0
    elif u < -1.0:
        u = -1.0
    t = M_PI - acos(u)
    kp[0] = t / (2.0 * M_PI)
    k[0] = (sqrt(1.0 - u * u) + u * t) / (2.0 * M_PI)


def arccos_kernel_matrix(U, bint symmetric=False):
    """Arc-cosine kernel and derivative at cosines U, one fused pass.

    With ``symmetric`` only the upper triangle is evaluated and the diagonal
    is taken at u = 1 exactly (self-overlap of a unit vector).
    """
    cdef double[:, ::1] u = np.ascontiguousarray(U, dtype=np.float64)
    cdef Py_ssize_t m = u.shape[0], k = u.shape[1], i, j, j0
    K_arr = np.empty((m, k))
    Kp_arr = np.empty((m, k))
    cdef double[:, ::1] K = K_arr
    cdef double[:, ::1] Kp = Kp_arr
    with nogil:
        for i in range(m):
            j0 = i if symmetric else 0
            for j in range(j0, k):
                _kap(1.0 if (symmetric and j == i) else u[i, j], &K[i, j], &Kp[i, j])
                if symmetric and j != i:
                    K[j, i] = K[i, j]
                    Kp[j, i] = Kp[i, j]
    return K_arr, Kp_arr
