"""Windowed multi-periodic covariance functions in flat-prior coordinates.

The kernel with ``N`` periodic factors is

    k(t, t') = s^2 C(|t - t'| / T_0) exp[-sum_j (2 / l_j^2) sin^2(pi (t - t') / T_j)]
               + s^2 sigma_n^2 delta_ii'

where ``C`` is a compact-support polynomial window and ``delta`` acts on
sample indices.  ``N = 1`` and ``N = 2`` give the one- and two-timescale
models ``k1`` and ``k2``.

Hyperparameters are handled in coordinates in which the prior is flat:

    T_j = exp(phi_j)                                   (Jeffreys prior on T_j)
    l_j = exp(mu + sqrt(2) sigma_l erfinv(2 xi_j))     (log-normal prior on l_j)
    s   = exp(psi)                                     (optional, see ``profile``)

Flat coordinate vectors are ordered ``[phi_0, ..., phi_N, xi_1, ..., xi_N]``
with ``psi`` appended last in full-space mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import erfinv

from .errors import DomainError, TransformOverflowError, UsageError
from . import kernels

PSI_BOUNDS_DEFAULT = (math.log(1e-3), math.log(1e3))


def wendland_window(tau):
    """Compact-support window ``(1 - tau)^5 (24 tau^2 + 15 tau + 3) / 3``.

    This is the Wendland function ``(1 - tau)^5 (8 tau^2 + 5 tau + 1)``,
    positive definite on the line and C^4 at ``tau = 1``.  Zero for
    ``tau >= 1``.  Accepts a scalar or an array.
    """
    arr = np.asarray(tau, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("wendland_window requires tau >= 0")
    c = kernels.window_values(np.atleast_1d(arr))[0].reshape(arr.shape)
    return float(c) if c.ndim == 0 else c


def window_derivative(tau):
    """First derivative dC/dtau of :func:`wendland_window`."""
    arr = np.asarray(tau, dtype=float)
    if np.any(arr < 0):
        raise DomainError("window_derivative requires tau >= 0")
    c1 = kernels.window_values(np.atleast_1d(arr))[1].reshape(arr.shape)
    return float(c1) if c1.ndim == 0 else c1


def erfinv_checked(x):
    x = float(x)
    if abs(x) >= 1.0:
        raise TransformOverflowError(
            f"erfinv({x}) diverges; smoothness coordinate must lie strictly inside (-0.5, 0.5)")
    return float(erfinv(x))


@dataclass(frozen=True)
class PriorSpec:
    """Flat-prior box over the hyperparameter coordinates.

    Parameters
    ----------
    phi_bounds : tuple of (lo, hi)
        One interval per timescale coordinate ``phi_0 .. phi_N``.  The
        periodic timescales ``phi_1 .. phi_N`` must share one interval so
        that the ordered region has volume ``prod / N!``.
    xi_bounds : tuple of (lo, hi)
        One interval per smoothness coordinate, inside ``(-0.5, 0.5)``.
    mu, sigma_l : float
        Location and scale of the log-normal prior on ``l_j``.
    psi_bounds : (lo, hi)
        Range of ``psi = ln sigma_f`` used only in full-space mode.
    """

    phi_bounds: tuple
    xi_bounds: tuple
    mu: float = 1.0
    sigma_l: float = 2.0
    psi_bounds: tuple = PSI_BOUNDS_DEFAULT

    def __post_init__(self):
        phi = tuple((float(lo), float(hi)) for lo, hi in self.phi_bounds)
        xi = tuple((float(lo), float(hi)) for lo, hi in self.xi_bounds)
        psi = (float(self.psi_bounds[0]), float(self.psi_bounds[1]))
        object.__setattr__(self, "phi_bounds", phi)
        object.__setattr__(self, "xi_bounds", xi)
        object.__setattr__(self, "psi_bounds", psi)
        if len(phi) != len(xi) + 1:
            raise UsageError("need exactly one more timescale interval than smoothness intervals")
        for lo, hi in phi + xi + (psi,):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise DomainError(f"invalid prior interval ({lo}, {hi})")
        for lo, hi in xi:
            if lo < -0.5 or hi > 0.5:
                raise DomainError("smoothness bounds must lie within (-0.5, 0.5)")
        if len(set(phi[1:])) > 1:
            raise DomainError("periodic timescales must share one prior interval")
        if not (self.sigma_l > 0 and math.isfinite(self.mu)):
            raise DomainError("log-normal prior needs finite mu and sigma_l > 0")

    @classmethod
    def from_times(cls, ts, n_periodic, periodic_floor="nyquist", **kwargs):
        """Default box from the sample times.

        The window timescale ``phi_0`` spans ``(ln dt_min, ln dt_max)``.
        Periodic timescales start at the Nyquist period ``2 dt_min`` by
        default: on a regular grid a period ``T < 2 dt`` is an exact alias
        of a longer one, which duplicates every peak of the hyperlikelihood
        (``periodic_floor="min_gap"`` keeps ``dt_min`` instead).  If
        ``2 dt_min`` is not below ``dt_max`` the floor falls back to
        ``dt_min``.
        """
        if periodic_floor not in ("nyquist", "min_gap"):
            raise UsageError("periodic_floor must be 'nyquist' or 'min_gap'")
        ts = np.sort(np.asarray(ts, dtype=float))
        if ts.size < 2:
            raise DomainError("at least two sample times are needed to set timescale bounds")
        gaps = np.diff(ts)
        dt = float(gaps[gaps > 0].min())
        span = float(ts[-1] - ts[0])
        if span <= dt:
            raise DomainError("timescale range is empty: smallest and largest separations coincide")
        floor = 2.0 * dt if periodic_floor == "nyquist" and 2.0 * dt < span else dt
        window = (math.log(dt), math.log(span))
        periodic = (math.log(floor), math.log(span))
        return cls(phi_bounds=(window,) + (periodic,) * n_periodic,
                   xi_bounds=((-0.5, 0.5),) * n_periodic, **kwargs)

    @property
    def n_periodic(self):
        return len(self.xi_bounds)

    def bounds(self, full=False):
        """Lower and upper bound arrays in flat-vector order."""
        ivals = list(self.phi_bounds) + list(self.xi_bounds)
        if full:
            ivals.append(self.psi_bounds)
        arr = np.array(ivals, dtype=float)
        return arr[:, 0].copy(), arr[:, 1].copy()

    def log_volume(self, full=False):
        lo, hi = self.bounds(full)
        return float(np.sum(np.log(hi - lo)) - math.lgamma(self.n_periodic + 1))

    def volume(self, full=False):
        return math.exp(self.log_volume(full))

    def override(self, key, lo, hi):
        """Return a copy with one interval replaced.

        ``key`` is ``phi`` (all periodic timescales), ``phiK``, ``xi``
        (all smoothness), ``xiK``, ``psi``, ``mu`` or ``sigma_l`` (the last
        two take ``lo`` only).
        """
        N = self.n_periodic
        phi = list(self.phi_bounds)
        xi = list(self.xi_bounds)
        if key == "psi":
            return replace(self, psi_bounds=(lo, hi))
        if key == "mu":
            return replace(self, mu=lo)
        if key == "sigma_l":
            return replace(self, sigma_l=lo)
        if key == "phi":
            phi[1:] = [(lo, hi)] * N
        elif key == "xi":
            xi = [(lo, hi)] * N
        elif key.startswith("phi") and key[3:].isdigit():
            j = int(key[3:])
            if j > N:
                raise UsageError(f"no coordinate {key}")
            if j == 0:
                phi[0] = (lo, hi)
            else:
                phi[1:] = [(lo, hi)] * N
        elif key.startswith("xi") and key[2:].isdigit():
            j = int(key[2:])
            if not 1 <= j <= N:
                raise UsageError(f"no coordinate {key}")
            xi[j - 1] = (lo, hi)
        else:
            raise UsageError(f"unknown prior key {key!r}")
        return replace(self, phi_bounds=tuple(phi), xi_bounds=tuple(xi))

    def to_dict(self):
        return {"phi_bounds": [list(b) for b in self.phi_bounds],
                "xi_bounds": [list(b) for b in self.xi_bounds],
                "mu": self.mu, "sigma_l": self.sigma_l,
                "psi_bounds": list(self.psi_bounds)}


@dataclass(frozen=True)
class HyperPoint:
    """Hyperparameters in flat coordinates.  ``psi`` is None when profiled out."""

    phi: tuple
    xi: tuple
    psi: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(float(v) for v in self.phi))
        object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        if self.psi is not None:
            object.__setattr__(self, "psi", float(self.psi))
        if len(self.phi) != len(self.xi) + 1:
            raise UsageError("HyperPoint needs len(phi) == len(xi) + 1")

    @property
    def n_periodic(self):
        return len(self.xi)

    @property
    def full(self):
        return self.psi is not None

    def vector(self):
        v = list(self.phi) + list(self.xi)
        if self.psi is not None:
            v.append(self.psi)
        return np.array(v, dtype=float)

    @classmethod
    def from_vector(cls, vec, n_periodic, full=False):
        vec = np.asarray(vec, dtype=float)
        m = 2 * n_periodic + 1 + (1 if full else 0)
        if vec.shape != (m,):
            raise UsageError(f"expected a flat vector of length {m}, got shape {vec.shape}")
        N = n_periodic
        return cls(phi=tuple(vec[:N + 1]), xi=tuple(vec[N + 1:2 * N + 1]),
                   psi=float(vec[-1]) if full else None)

    def with_psi(self, psi):
        return replace(self, psi=psi)

    def to_dict(self):
        return {"phi": list(self.phi), "xi": list(self.xi), "psi": self.psi}


class NaturalParams(NamedTuple):
    sigma_f: float
    timescales: np.ndarray  # T_0 .. T_N
    smoothness: np.ndarray  # l_1 .. l_N


def coordinate_names(n_periodic, full=False):
    names = [f"phi{j}" for j in range(n_periodic + 1)]
    names += [f"xi{j}" for j in range(1, n_periodic + 1)]
    if full:
        names.append("psi")
    return names


def to_natural(point, spec):
    """Map a flat-coordinate point to ``(sigma_f, T_0..T_N, l_1..l_N)``."""
    T = np.exp(np.array(point.phi))
    lam = np.array([spec.mu + math.sqrt(2.0) * spec.sigma_l * erfinv_checked(2.0 * x)
                    for x in point.xi])
    sigma_f = 1.0 if point.psi is None else math.exp(point.psi)
    return NaturalParams(sigma_f, T, np.exp(lam))


def _amplitude_chain(xi, spec):
    """Periodic amplitudes ``a = 2 / l^2`` and their first two xi-derivatives."""
    a = np.empty(len(xi))
    da = np.empty(len(xi))
    dda = np.empty(len(xi))
    sl = spec.sigma_l
    for j, x in enumerate(xi):
        w = erfinv_checked(2.0 * x)
        lam = spec.mu + math.sqrt(2.0) * sl * w
        e = math.exp(w * w)
        lam1 = math.sqrt(2.0 * math.pi) * sl * e
        lam2 = 2.0 * math.sqrt(2.0) * math.pi * sl * w * e * e
        a[j] = 2.0 * math.exp(-2.0 * lam)
        da[j] = -2.0 * a[j] * lam1
        dda[j] = 4.0 * a[j] * lam1 * lam1 - 2.0 * a[j] * lam2
    return a, da, dda


@dataclass(frozen=True)
class CovarianceModel:
    """Kernel family: ``n_periodic`` periodic factors under a compact window.

    ``sigma_n`` is the fixed fractional noise level.  ``prior_spec`` is
    normally filled from the data with :meth:`for_times`.  With
    ``has_window=False`` the window factor is dropped and ``phi_0`` becomes
    an inert coordinate.
    """

    n_periodic: int = 1
    sigma_n: float = 1e-2
    prior_spec: PriorSpec | None = None
    has_window: bool = True

    def __post_init__(self):
        if self.n_periodic < 0:
            raise DomainError("n_periodic must be >= 0")
        if not self.sigma_n > 0:
            raise DomainError("sigma_n must be positive")
        if self.prior_spec is not None and self.prior_spec.n_periodic != self.n_periodic:
            raise UsageError("prior_spec has a different number of periodic components")

    @property
    def name(self):
        return {1: "k1", 2: "k2"}.get(self.n_periodic, f"periodic:{self.n_periodic}")

    def n_coords(self, full=False):
        return 2 * self.n_periodic + 1 + (1 if full else 0)

    def coordinate_names(self, full=False):
        return coordinate_names(self.n_periodic, full)

    def with_prior(self, spec):
        return replace(self, prior_spec=spec)

    def for_times(self, ts, **kwargs):
        return self.with_prior(PriorSpec.from_times(ts, self.n_periodic, **kwargs))

    @property
    def spec(self):
        if self.prior_spec is None:
            raise UsageError("model has no prior_spec; call for_times() first")
        return self.prior_spec

    def check_point(self, point, ordered=True):
        """Raise DomainError unless ``point`` lies in the prior box (ordering included)."""
        spec = self.spec
        if point.n_periodic != self.n_periodic:
            raise UsageError("HyperPoint has the wrong number of periodic components")
        lo, hi = spec.bounds(point.full)
        v = point.vector()
        bad = np.flatnonzero((v < lo) | (v > hi) | ~np.isfinite(v))
        if bad.size:
            names = self.coordinate_names(point.full)
            raise DomainError("coordinates outside prior bounds: "
                              + ", ".join(names[i] for i in bad))
        if ordered and any(b < a for a, b in zip(point.phi[1:], point.phi[2:])):
            raise DomainError("periodic timescales must be non-decreasing (T_1 <= ... <= T_N)")

    def to_dict(self):
        return {"name": self.name, "n_periodic": self.n_periodic, "sigma_n": self.sigma_n,
                "has_window": self.has_window,
                "prior": None if self.prior_spec is None else self.prior_spec.to_dict()}


def k1(sigma_n=1e-2, prior_spec=None):
    return CovarianceModel(1, sigma_n, prior_spec)


def k2(sigma_n=1e-2, prior_spec=None):
    return CovarianceModel(2, sigma_n, prior_spec)


def parse_model(text, sigma_n=1e-2):
    """``k1``, ``k2`` or ``periodic:N``."""
    text = text.strip().lower()
    if text == "k1":
        return k1(sigma_n)
    if text == "k2":
        return k2(sigma_n)
    if text.startswith("periodic:"):
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad model spec {text!r}") from None
        return CovarianceModel(n, sigma_n)
    raise UsageError(f"unknown model {text!r}; expected k1, k2 or periodic:N")


class _Transform(NamedTuple):
    mu: float = 1.0
    sigma_l: float = 2.0


def _natural_arrays(model, point):
    # the kernel only needs the smoothness transform, not the box
    spec = model.prior_spec or _Transform()
    T = np.exp(np.array(point.phi, dtype=float))
    a, da, dda = _amplitude_chain(point.xi, spec)
    return T, a, da, dda


def kernel_eval(model, point, t, t_prime, same_sample=False):
    """Single covariance value; ``same_sample`` switches on the noise term."""
    T, a, _, _ = _natural_arrays(model, point)
    s2 = 1.0 if point.psi is None else math.exp(2.0 * point.psi)
    d = float(t) - float(t_prime)
    w = 1.0
    if model.has_window:
        w = wendland_window(abs(d) / T[0])
    g = sum(a[j] * math.sin(math.pi * d / T[j + 1]) ** 2 for j in range(model.n_periodic))
    val = w * math.exp(-g)
    if same_sample:
        val += model.sigma_n ** 2
    return s2 * val


def kernel_matrix(model, point, ts):
    """Kernel matrix over the sample times ``ts`` (noise on the diagonal)."""
    ts = np.ascontiguousarray(ts, dtype=float)
    T, a, da, dda = _natural_arrays(model, point)
    R = kernels.backend.kernel_arrays(ts, T, a, da, dda, model.sigma_n ** 2,
                                      model.has_window, 0)[0]
    if point.psi is not None:
        R *= math.exp(2.0 * point.psi)
    return R


def cross_covariance(model, point, t_query, ts):
    """Covariances between query times and sample times, without noise."""
    T, a, _, _ = _natural_arrays(model, point)
    d = np.asarray(t_query, dtype=float)[:, None] - np.asarray(ts, dtype=float)[None, :]
    out = kernels.correlation(d, T, a, model.has_window)
    if point.psi is not None:
        out *= math.exp(2.0 * point.psi)
    return out


@dataclass(frozen=True, eq=False)
class KernelPartials:
    """Kernel partials in flat coordinates.

    ``first[a]`` is dK/dtheta_a and ``second[a, b]`` is d2K/dtheta_a dtheta_b
    (None when only first order was requested).
    """

    first: np.ndarray
    second: np.ndarray | None
    names: tuple

    @property
    def m(self):
        return self.first.shape[0]


def kernel_partials(model, point, ts, order=1):
    """Analytic first (and optionally second) partials of K in flat coordinates."""
    if order not in (1, 2):
        raise UsageError("order must be 1 or 2")
    ts = np.ascontiguousarray(ts, dtype=float)
    T, a, da, dda = _natural_arrays(model, point)
    R, D1, D2 = kernels.backend.kernel_arrays(ts, T, a, da, dda, model.sigma_n ** 2,
                                              model.has_window, order)
    if point.psi is None:
        return KernelPartials(D1, D2, tuple(model.coordinate_names(False)))
    s2 = math.exp(2.0 * point.psi)
    q, n = D1.shape[0], ts.size
    K = s2 * R
    first = np.empty((q + 1, n, n))
    first[:q] = s2 * D1
    first[q] = 2.0 * K
    second = None
    if order == 2:
        second = np.empty((q + 1, q + 1, n, n))
        second[:q, :q] = s2 * D2
        second[:q, q] = 2.0 * first[:q]
        second[q, :q] = second[:q, q]
        second[q, q] = 4.0 * K
    return KernelPartials(first, second, tuple(model.coordinate_names(True)))
