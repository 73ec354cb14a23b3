# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel-matrix assembly.

Same contract as ``_kernels_py.kernel_arrays``.  Loops over the lower
triangle only and skips pairs outside the window support.
"""

import numpy as np
from libc.math cimport sin, cos, exp, fabs, M_PI


cdef inline void _window(double tau, double* c, double* c1, double* c2) noexcept nogil:
    cdef double om, om3, om4, om5, p, p1
    if tau >= 1.0:
        c[0] = 0.0
        c1[0] = 0.0
        c2[0] = 0.0
        return
    om = 1.0 - tau
    om3 = om * om * om
    om4 = om3 * om
    om5 = om4 * om
    p = 24.0 * tau * tau + 15.0 * tau + 3.0
    p1 = 48.0 * tau + 15.0
    c[0] = om5 * p / 3.0
    c1[0] = (om5 * p1 - 5.0 * om4 * p) / 3.0
    c2[0] = (48.0 * om5 - 10.0 * om4 * p1 + 20.0 * om3 * p) / 3.0


def kernel_arrays(const double[::1] ts, const double[::1] T, const double[::1] a,
                  const double[::1] da,
                  const double[::1] dda, double sigma_n2, bint window, int order):
    cdef Py_ssize_t n = ts.shape[0]
    cdef Py_ssize_t N = a.shape[0]
    cdef Py_ssize_t q = 2 * N + 1
    cdef Py_ssize_t i, j, k, x, y, jx, jy
    cdef double d, tau, c, c1, c2, W, W1, W2, u, sn, sin2u, g, E, WE, val

    R_arr = np.zeros((n, n))
    cdef double[:, ::1] R = R_arr
    D1_arr = None
    D2_arr = None
    cdef double[:, :, ::1] D1
    cdef double[:, :, :, ::1] D2
    if order >= 1:
        D1_arr = np.zeros((q, n, n))
        D1 = D1_arr
    if order >= 2:
        D2_arr = np.zeros((q, q, n, n))
        D2 = D2_arr

    s_arr = np.empty(max(N, 1))
    s1_arr = np.empty(max(N, 1))
    s2_arr = np.empty(max(N, 1))
    G1_arr = np.empty(q)
    cdef double[::1] s = s_arr
    cdef double[::1] s1 = s1_arr
    cdef double[::1] s2 = s2_arr
    cdef double[::1] G1 = G1_arr

    with nogil:
        for i in range(n):
            R[i, i] = 1.0 + sigma_n2
            for j in range(i):
                d = ts[i] - ts[j]
                W = 1.0
                W1 = 0.0
                W2 = 0.0
                if window:
                    tau = fabs(d) / T[0]
                    if tau >= 1.0:
                        continue
                    _window(tau, &c, &c1, &c2)
                    W = c
                    W1 = -tau * c1
                    W2 = tau * c1 + tau * tau * c2
                g = 0.0
                for k in range(N):
                    u = M_PI * d / T[k + 1]
                    sn = sin(u)
                    sin2u = sin(2.0 * u)
                    s[k] = sn * sn
                    s1[k] = -u * sin2u
                    s2[k] = u * sin2u + 2.0 * u * u * cos(2.0 * u)
                    g = g + a[k] * s[k]
                E = exp(-g)
                WE = W * E
                R[i, j] = WE
                R[j, i] = WE
                if order < 1:
                    continue
                G1[0] = 0.0
                for k in range(N):
                    G1[1 + k] = a[k] * s1[k]
                    G1[1 + N + k] = da[k] * s[k]
                val = W1 * E
                D1[0, i, j] = val
                D1[0, j, i] = val
                for x in range(1, q):
                    val = -WE * G1[x]
                    D1[x, i, j] = val
                    D1[x, j, i] = val
                if order < 2:
                    continue
                val = W2 * E
                D2[0, 0, i, j] = val
                D2[0, 0, j, i] = val
                for x in range(1, q):
                    val = -W1 * E * G1[x]
                    D2[0, x, i, j] = val
                    D2[0, x, j, i] = val
                    D2[x, 0, i, j] = val
                    D2[x, 0, j, i] = val
                for x in range(1, q):
                    jx = (x - 1) % N
                    for y in range(x, q):
                        jy = (y - 1) % N
                        val = G1[x] * G1[y]
                        if jx == jy:
                            if x == y and x <= N:
                                val = val - a[jx] * s2[jx]
                            elif x == y:
                                val = val - dda[jx] * s[jx]
                            else:
                                val = val - da[jx] * s1[jx]
                        val = WE * val
                        D2[x, y, i, j] = val
                        D2[x, y, j, i] = val
                        if y != x:
                            D2[y, x, i, j] = val
                            D2[y, x, j, i] = val
    return R_arr, D1_arr, D2_arr
