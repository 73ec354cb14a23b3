"""Vectorized numpy implementation of the kernel-matrix kernels.

Used when the compiled extension is unavailable, and as the reference the
extension is tested against.
"""

import numpy as np


def window_values(tau):
    """Window ``C`` and its first two tau-derivatives; zero for ``tau >= 1``."""
    tau = np.asarray(tau, dtype=float)
    inside = tau < 1.0
    t = np.where(inside, tau, 0.0)
    om = 1.0 - t
    om3 = om ** 3
    om4 = om3 * om
    om5 = om4 * om
    p = 24.0 * t * t + 15.0 * t + 3.0
    p1 = 48.0 * t + 15.0
    c = om5 * p / 3.0
    c1 = (om5 * p1 - 5.0 * om4 * p) / 3.0
    c2 = (48.0 * om5 - 10.0 * om4 * p1 + 20.0 * om3 * p) / 3.0
    zero = np.zeros_like(c)
    return (np.where(inside, c, zero), np.where(inside, c1, zero),
            np.where(inside, c2, zero))


def kernel_arrays(ts, T, a, da, dda, sigma_n2, window, order):
    """Unscaled kernel matrix and its flat-coordinate partials.

    Coordinates are ``[phi_0, phi_1..phi_N, xi_1..xi_N]``.  Returns
    ``(R, D1, D2)``; ``D1`` has shape (2N+1, n, n) and ``D2`` shape
    (2N+1, 2N+1, n, n), each None below the requested order.
    """
    ts = np.asarray(ts, dtype=float)
    n = ts.size
    N = len(a)
    q = 2 * N + 1
    d = ts[:, None] - ts[None, :]
    if window:
        tau = np.abs(d) / T[0]
        c, c1, c2 = window_values(tau)
        W = c
        W1 = -tau * c1
        W2 = tau * c1 + tau * tau * c2
    else:
        W = np.ones((n, n))
        W1 = W2 = np.zeros((n, n))

    s = np.empty((N, n, n))
    s1 = np.empty((N, n, n))
    s2 = np.empty((N, n, n))
    g = np.zeros((n, n))
    for j in range(N):
        u = np.pi * d / T[j + 1]
        sn = np.sin(u)
        sin2u = np.sin(2.0 * u)
        s[j] = sn * sn
        s1[j] = -u * sin2u
        s2[j] = u * sin2u + 2.0 * u * u * np.cos(2.0 * u)
        g += a[j] * s[j]
    E = np.exp(-g)
    R = W * E
    R[np.diag_indices(n)] += sigma_n2
    if order == 0:
        return R, None, None

    # first derivatives of g; E' = -E g'
    G1 = np.zeros((q, n, n))
    for j in range(N):
        G1[1 + j] = a[j] * s1[j]
        G1[1 + N + j] = da[j] * s[j]
    D1 = np.empty((q, n, n))
    D1[0] = W1 * E
    for x in range(1, q):
        D1[x] = -W * E * G1[x]
    if order == 1:
        return R, D1, None

    D2 = np.zeros((q, q, n, n))
    D2[0, 0] = W2 * E
    for x in range(1, q):
        D2[0, x] = D2[x, 0] = -W1 * E * G1[x]
    WE = W * E
    for x in range(1, q):
        for y in range(x, q):
            val = G1[x] * G1[y]
            jx = (x - 1) % N
            jy = (y - 1) % N
            if jx == jy:
                if x == y and x <= N:
                    val = val - a[jx] * s2[jx]
                elif x == y:
                    val = val - dda[jx] * s[jx]
                else:
                    val = val - da[jx] * s1[jx]
            D2[x, y] = WE * val
            if y != x:
                D2[y, x] = D2[x, y]
    return R, D1, D2
