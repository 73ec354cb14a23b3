"""Analytic profiling and marginalization over the overall scale sigma_f.

Every function here expects a :class:`~gptrain.gpcore.KernelState`
assembled at ``sigma_f = 1`` (a HyperPoint with ``psi=None``); the scale
then enters only through ``sigma_f_hat_sq = y^T K^-1 y / n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .covmodel import kernel_partials
from .errors import DegenerateDataError, UsageError
from .gpcore import LOG_2PI, _hessian_terms, _quad_forms, _traces, assemble


def _require_unscaled(state):
    if state.point is not None and getattr(state.point, "psi", None) is not None:
        raise UsageError("profiled quantities need K assembled at sigma_f = 1 (psi=None)")


def sigma_f_hat_sq(state, data):
    """Maximizing scale ``y^T K^-1 y / n``."""
    _require_unscaled(state)
    if not np.any(data.ys):
        raise DegenerateDataError("y is identically zero; the scale has no maximum")
    return float(data.ys @ state.alpha) / data.n


def log_p_max(state, data):
    """Profiled log hyperlikelihood ``-(n/2) ln(2 pi e s^2) - 0.5 ln det K``."""
    s2 = sigma_f_hat_sq(state, data)
    return -0.5 * data.n * (LOG_2PI + 1.0 + math.log(s2)) - 0.5 * state.log_det


def log_p_scaled(state, data, sigma_f):
    """Log hyperlikelihood at an explicit scale, with K at ``sigma_f = 1``."""
    _require_unscaled(state)
    s2 = sigma_f * sigma_f
    quad = float(data.ys @ state.alpha)
    return -0.5 * quad / s2 - 0.5 * state.log_det - 0.5 * data.n * (LOG_2PI + math.log(s2))


def log_p_max_gradient(state, partials, data):
    """Gradient of :func:`log_p_max` over the remaining coordinates."""
    s2 = sigma_f_hat_sq(state, data)
    inv = state.require_inverse()
    quad, _ = _quad_forms(state.alpha, partials.first)
    return quad / (2.0 * s2) - 0.5 * _traces(inv, partials.first)


def marg_log_const(n):
    """``ln[(1/2) (2e/n)^(n/2) Gamma(n/2)]``: log P_marg - log P_max under ``c/sigma_f``, c = 1."""
    if n < 1:
        raise UsageError("n must be >= 1")
    return -math.log(2.0) + 0.5 * n * (math.log(2.0 / n) + 1.0) + math.lgamma(0.5 * n)


def log_p_marg(state, data):
    """Log hyperlikelihood marginalized over sigma_f with the Jeffreys prior."""
    return log_p_max(state, data) + marg_log_const(data.n)


def profiled_hessian(state, partials, data):
    """Negated Hessian of :func:`log_p_max` (equivalently of ``ln P_marg``)."""
    s2 = sigma_f_hat_sq(state, data)
    n = data.n
    quad, cross, second_quad, trace_pair, trace_second = _hessian_terms(state, partials)
    d2 = (np.outer(quad, quad) / (2.0 * n * s2 * s2)
          - (2.0 * cross - second_quad) / (2.0 * s2)
          + 0.5 * trace_pair - 0.5 * trace_second)
    H = -d2
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class ProfiledReport:
    sigma_f_hat_sq: float
    log_p_max: float
    grad: np.ndarray
    hessian: np.ndarray | None
    marg_log_const: float


def profiled_report(model, point, data, hessian=True):
    """All profiled quantities at a reduced-space point in one factorization."""
    if point.psi is not None:
        raise UsageError("profiled_report takes a reduced-space point (psi=None)")
    state = assemble(model, point, data)
    partials = kernel_partials(model, point, data.ts, order=2 if hessian else 1)
    return ProfiledReport(
        sigma_f_hat_sq(state, data),
        log_p_max(state, data),
        log_p_max_gradient(state, partials, data),
        profiled_hessian(state, partials, data) if hessian else None,
        marg_log_const(data.n),
    )
