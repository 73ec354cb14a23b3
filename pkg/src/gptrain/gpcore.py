"""Kernel-matrix factorization, hyperlikelihood derivatives and prediction.

After the single O(n^3) factorization in :func:`assemble`, the log
hyperlikelihood and each gradient component cost O(n^2): the quadratic
term uses matrix-vector products with the cached ``alpha = K^-1 y`` and
the trace term is an elementwise product with the stored inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .covmodel import cross_covariance, kernel_matrix
from .errors import DomainError, NumericError, UsageError

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-12
JITTER_MAX = 1e-6
VARIANCE_CLAMP = 1e-10


@dataclass(frozen=True)
class TrainingSet:
    """Sample times ``ts`` and observed outputs ``ys``."""

    ts: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        ts = np.array(self.ts, dtype=float).ravel()
        ys = np.array(self.ys, dtype=float).ravel()
        if ts.size < 1 or ts.size != ys.size:
            raise DomainError("ts and ys must be non-empty and of equal length")
        if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(ys))):
            raise DomainError("training data must be finite")
        if np.unique(ts).size != ts.size:
            raise DomainError("sample times must be pairwise distinct")
        ts.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self):
        return self.ts.size

    def fingerprint(self):
        """Stable identifier of the data, used to pair evidence results."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.ts.tobytes())
        h.update(self.ys.tobytes())
        return h.hexdigest()[:16]


def cholesky_with_jitter(K):
    """Lower Cholesky factor, inflating the diagonal on failure.

    Jitter starts at ``1e-12 * mean(diag K)`` and grows tenfold up to
    ``1e-6 * mean(diag K)``.  Returns ``(L, jitter)``.
    """
    L, info = lapack.dpotrf(K, lower=1, clean=1, overwrite_a=0)
    if info == 0:
        return L, 0.0
    if info < 0:
        raise UsageError(f"dpotrf: illegal argument {-info}")
    pivot = info
    scale = float(np.mean(np.diag(K)))
    frac = JITTER_START
    while frac <= JITTER_MAX * (1 + 1e-9):
        Kj = K.copy()
        Kj[np.diag_indices_from(Kj)] += frac * scale
        L, info = lapack.dpotrf(Kj, lower=1, clean=1, overwrite_a=1)
        if info == 0:
            return L, frac * scale
        pivot = info
        frac *= 10.0
    raise NumericError(f"kernel matrix not positive definite (leading minor {pivot})", pivot=pivot)


@dataclass(frozen=True, eq=False)
class KernelState:
    """Factorized kernel matrix at ``point``.

    ``inv`` holds K^-1 when the state was assembled with ``inverse=True``
    (needed for derivatives); value-only evaluations skip it.
    """

    chol: np.ndarray
    alpha: np.ndarray
    log_det: float
    point: object
    jitter: float = 0.0
    inv: np.ndarray | None = None

    @property
    def n(self):
        return self.alpha.size

    def K(self):
        return self.chol @ self.chol.T

    def require_inverse(self):
        if self.inv is None:
            raise UsageError("KernelState was assembled without its inverse; "
                             "use assemble(..., inverse=True) for derivatives")
        return self.inv


def factorize(K, ys, point=None, inverse=True):
    """Factor an explicit kernel matrix into a :class:`KernelState`."""
    L, jitter = cholesky_with_jitter(K)
    alpha, info = lapack.dpotrs(L, ys, lower=1)
    if info != 0:
        raise NumericError("triangular solve failed")
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    inv = None
    if inverse:
        inv, info = lapack.dpotri(L, lower=1)
        if info != 0:
            raise NumericError("inverse from Cholesky factor failed", pivot=info)
        inv = np.tril(inv) + np.tril(inv, -1).T
    alpha = np.asarray(alpha, dtype=float).ravel()
    return KernelState(L, alpha, log_det, point, jitter, inv)


def assemble(model, point, data, inverse=True, validate=True):
    """Build and factorize K at ``point`` over the training times.

    ``validate`` rejects points outside the prior box or with out-of-order
    periodic timescales.
    """
    if validate:
        model.check_point(point)
    K = kernel_matrix(model, point, data.ts)
    return factorize(K, data.ys, point, inverse)


def log_hyperlikelihood(state, data):
    """``-0.5 [y^T K^-1 y + ln det K + n ln 2 pi]``."""
    quad = float(data.ys @ state.alpha)
    return -0.5 * (quad + state.log_det + data.n * LOG_2PI)


def _quad_forms(alpha, first):
    """``alpha^T dK_a alpha`` and ``dK_a alpha`` for every coordinate."""
    m, n, _ = first.shape
    v = first.reshape(m * n, n) @ alpha
    v = v.reshape(m, n)
    return v @ alpha, v


def _traces(inv, first):
    """``Tr(K^-1 dK_a)`` via an elementwise product (both symmetric)."""
    m = first.shape[0]
    return first.reshape(m, -1) @ inv.ravel()


def _check_partials(state, partials):
    if partials.first.shape[1:] != (state.n, state.n):
        raise UsageError("partials do not match the kernel state dimension")


def hyperlikelihood_gradient(state, partials, data):
    """Gradient of the log hyperlikelihood over the coordinates of ``partials``."""
    _check_partials(state, partials)
    inv = state.require_inverse()
    quad, _ = _quad_forms(state.alpha, partials.first)
    return 0.5 * quad - 0.5 * _traces(inv, partials.first)


def _hessian_terms(state, partials):
    """Building blocks shared by the full and profiled Hessians.

    Returns ``(quad, cross, second_quad, trace_pair, trace_second)`` with
    ``cross[a, b] = (dK_a alpha)^T K^-1 (dK_b alpha)``,
    ``second_quad[a, b] = alpha^T d2K_ab alpha``,
    ``trace_pair[a, b] = Tr(K^-1 dK_a K^-1 dK_b)`` and
    ``trace_second[a, b] = Tr(K^-1 d2K_ab)``.
    """
    if partials.second is None:
        raise UsageError("Hessian needs second-order partials")
    _check_partials(state, partials)
    inv = state.require_inverse()
    D1, D2 = partials.first, partials.second
    m, n = D1.shape[0], state.n
    quad, v = _quad_forms(state.alpha, D1)
    cross = v @ inv @ v.T
    flat2 = D2.reshape(m * m, n * n)
    trace_second = (flat2 @ inv.ravel()).reshape(m, m)
    second_quad = (D2.reshape(m * m * n, n) @ state.alpha).reshape(m * m, n) @ state.alpha
    second_quad = second_quad.reshape(m, m)
    # K^-1 dK_a is dense; this is the one O(n^3)-per-coordinate step
    Wmat = np.einsum("ij,ajk->aik", inv, D1, optimize=True)
    trace_pair = np.einsum("aij,bji->ab", Wmat, Wmat, optimize=True)
    return quad, cross, second_quad, trace_pair, trace_second


def hyperlikelihood_hessian(state, partials, data):
    """Negated second-derivative matrix ``H`` of the log hyperlikelihood."""
    _, cross, second_quad, trace_pair, trace_second = _hessian_terms(state, partials)
    H = cross - 0.5 * second_quad - 0.5 * trace_pair + 0.5 * trace_second
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray


def predict(model, state, data, queries):
    """Predictive mean and variance at ``queries`` (treated as new samples)."""
    queries = np.atleast_1d(np.asarray(queries, dtype=float))
    if not np.all(np.isfinite(queries)):
        raise DomainError("query times must be finite")
    point = state.point
    kstar = cross_covariance(model, point, queries, data.ts)
    mean = kstar @ state.alpha
    s2 = 1.0 if point.psi is None else math.exp(2.0 * point.psi)
    kss = s2 * (1.0 + model.sigma_n ** 2)
    vsol = solve_triangular(state.chol, kstar.T, lower=True, check_finite=False)
    var = kss - np.sum(vsol * vsol, axis=0)
    tol = VARIANCE_CLAMP * s2
    if np.any(var < -tol):
        raise NumericError(f"negative predictive variance {var.min():.3g} beyond round-off")
    var = np.where(var < 0, 0.0, var)
    return PredictiveDistribution(mean, var)
