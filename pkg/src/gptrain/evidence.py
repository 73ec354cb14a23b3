"""Evidence estimates: Laplace approximation, Monte-Carlo oracle, Bayes factors.

All evidences are normalized by the flat-prior volume ``V``, i.e.
``Z = (1/V) int P(y | theta) dtheta``.  In the reduced space the
integrand is the hyperlikelihood with ``sigma_f`` marginalized under the
``1/sigma_f`` prior (``log_p_max + marg_log_const``); the timescale
ordering constraint makes the box volume ``prod(widths) / N!``.

Two numerical estimators are provided:

``monte_carlo``
    plain Monte Carlo with uniform draws over the ordered box.  Unbiased
    and assumption-free, but its variance explodes once the posterior
    occupies a small fraction of the box.
``importance``
    defensive importance sampling: a mixture of a uniform component and
    multivariate Student-t components centred on the distinct maxima found
    by a multi-start search, each with the inverse Hessian (inflated) as
    scale.  The estimator stays unbiased whatever the proposal; the uniform
    share bounds the weights.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .covmodel import HyperPoint, kernel_partials
from .errors import GPTrainError, LaplaceUntrustedError, UnreliableEstimateError, UsageError
from .gpcore import assemble, hyperlikelihood_gradient, hyperlikelihood_hessian
from .profile import log_p_max, marg_log_const, profiled_report
from .train import OptimizerOptions, _active_mask, canonical_order, maximize

LOG_2PI = math.log(2.0 * math.pi)
MIN_ESS = 10.0
BOUNDARY_SIGMAS = 2.0
BASIN_GAP = 3.0
DECREMENT_TOL = 1e-3
PINNED_FRACTION = 1e-4


@dataclass
class EvidenceResult:
    """An evidence estimate for one model on one dataset.

    ``std_err`` is the standard error of ``log_z`` (0 for Laplace).
    ``trusted`` is False when a diagnostic says the estimate should not be
    relied on; the reasons are listed in ``diagnostics["warnings"]``.
    """

    log_z: float
    method: str
    std_err: float
    n_evals: int
    peak_point: HyperPoint | None
    hessian_log_det: float | None
    model: str = ""
    n_data: int = 0
    data_fingerprint: str = ""
    trusted: bool = True
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"log_z": self.log_z, "method": self.method, "std_err": self.std_err,
                "n_evals": self.n_evals,
                "peak_point": None if self.peak_point is None else self.peak_point.to_dict(),
                "hessian_log_det": self.hessian_log_det, "model": self.model,
                "n_data": self.n_data, "data_fingerprint": self.data_fingerprint,
                "trusted": self.trusted, "diagnostics": _jsonable(self.diagnostics)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# --------------------------------------------------------------------------
# Laplace approximation


def distinct_basins(fit, value_tol=1e-3, coord_tol=1e-2):
    """Group the per-start end points into distinct local maxima.

    Two end points belong to the same basin when their values agree within
    ``value_tol`` and their coordinates within ``coord_tol`` of the box
    widths (taken from the spread of the starts).  Returns a list of
    ``(value, vector, count)`` sorted by decreasing value.
    """
    recs = [r for r in fit.per_start_records if np.isfinite(r.value)]
    if not recs:
        return []
    starts = np.array([r.start for r in fit.per_start_records])
    width = np.ptp(starts, axis=0) if len(starts) > 1 else np.ones(starts.shape[1])
    width = np.where(width > 0, width, 1.0)
    basins = []
    for r in sorted(recs, key=lambda r: -r.value):
        for b in basins:
            if (abs(b[0] - r.value) < value_tol
                    and np.all(np.abs(b[1] - r.final) < coord_tol * width)):
                b[2] += 1
                break
        else:
            basins.append([r.value, r.final, 1])
    return [tuple(b) for b in basins]


def _peak_diagnostics(fit, hessian, spec, full, grad=None):
    """Boundary, multimodality and convergence checks at the peak."""
    lo, hi = spec.bounds(full)
    x = fit.best_point.vector()
    warnings = []
    diag = {}
    try:
        cov = np.linalg.inv(hessian)
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        cov, sd = None, np.full(x.size, np.inf)
    dist = np.minimum(x - lo, hi - x)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigmas = np.where(sd > 0, dist / sd, np.inf)
    names = list(fit.coordinate_names)
    diag["bound_distance_sigmas"] = dict(zip(names, sigmas.tolist()))
    diag["bound_distance_fraction"] = dict(zip(names, (dist / (hi - lo)).tolist()))
    # pinned coordinates count even when the Hessian gives no usable width
    near = [nm for nm, s, fr in zip(names, sigmas, dist / (hi - lo))
            if s < BOUNDARY_SIGMAS or fr < PINNED_FRACTION]
    if near:
        warnings.append("peak within %.1f standard deviations of the prior boundary in %s"
                        % (BOUNDARY_SIGMAS, ", ".join(near)))
    basins = distinct_basins(fit)
    diag["n_basins"] = len(basins)
    rivals = [b for b in basins[1:] if b[0] > fit.log_p_at_peak - BASIN_GAP]
    diag["competing_basins"] = [{"log_p": b[0], "point": b[1].tolist(), "starts": b[2]}
                                for b in rivals]
    if rivals:
        warnings.append("%d other local maxima within %.1f nats of the peak (multimodal surface)"
                        % (len(rivals), BASIN_GAP))
    if grad is not None and cov is not None:
        # coordinates pinned at a bound with an outward gradient are not free
        free = np.where(_active_mask(x, np.asarray(grad, dtype=float), lo, hi), 0.0, grad)
        dec = 0.5 * float(free @ cov @ free)
        diag["newton_decrement"] = dec
        if dec > DECREMENT_TOL:
            warnings.append("peak not converged (Newton decrement %.2g nats)" % dec)
    diag["warnings"] = warnings
    return diag


def laplace_evidence(fit, hessian, spec, mode=None, grad=None):
    """Gaussian approximation of the evidence around the best fit.

    ``log_z = log_p_peak - ln V + (m/2) ln 2 pi - (1/2) ln det H``.  In
    reduced mode ``log_p_peak`` is ``log_p_max + marg_log_const(n)`` and
    ``V`` excludes the ``psi`` range.

    Raises
    ------
    LaplaceUntrustedError
        ``H`` is not positive definite (saddle point or a peak pinned to
        the prior boundary); the diagnostics are attached.
    """
    mode = mode or fit.mode
    if mode not in ("reduced", "full"):
        raise UsageError("mode must be 'reduced' or 'full'")
    full = mode == "full"
    if full != fit.full:
        raise UsageError(f"fit was run in {fit.mode} mode, not {mode}")
    H = np.asarray(hessian, dtype=float)
    m = H.shape[0]
    if H.shape != (m, m) or m != fit.best_point.vector().size:
        raise UsageError("Hessian does not match the fitted coordinates")
    diag = _peak_diagnostics(fit, H, spec, full, grad)
    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(0.5 * (H + H.T))
        diag["hessian_eigenvalues"] = eig.tolist()
        diag["warnings"].insert(0, "Hessian not positive definite at the peak")
        raise LaplaceUntrustedError(
            "Hessian is not positive definite at the best fit: the peak is a saddle or sits "
            "on the prior boundary; inspect FitResult.per_start_records and the diagnostics",
            diag) from None
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    log_peak = fit.log_p_at_peak
    if not full:
        if fit.n_data < 1:
            raise UsageError("FitResult does not record the data size")
        log_peak += marg_log_const(fit.n_data)
    log_z = log_peak - spec.log_volume(full) + 0.5 * m * LOG_2PI - 0.5 * log_det
    return EvidenceResult(log_z, "laplace_full" if full else "laplace_reduced", 0.0,
                          fit.n_evals, fit.best_point, log_det,
                          n_data=fit.n_data, data_fingerprint=fit.data_fingerprint,
                          trusted=not diag["warnings"], diagnostics=diag)


def peak_hessian(model, data, fit):
    """Negated Hessian and gradient of the fitted objective at the best point."""
    point = fit.best_point
    if fit.full:
        state = assemble(model, point, data)
        partials = kernel_partials(model, point, data.ts, order=2)
        return (hyperlikelihood_hessian(state, partials, data),
                hyperlikelihood_gradient(state, partials, data))
    rep = profiled_report(model, point, data, hessian=True)
    return rep.hessian, rep.grad


def laplace_from_data(model, data, opts=None, fit=None):
    """Fit (unless given) and return the Laplace evidence.

    ``n_evals`` counts every multi-start evaluation plus the one
    evaluation at which the Hessian is formed.  An untrusted estimate is
    still returned (``trusted=False``); only a non-positive-definite
    Hessian raises.
    """
    if fit is None:
        fit = maximize(model, data, opts)
    H, g = peak_hessian(model, data, fit)
    try:
        res = laplace_evidence(fit, H, model.spec, fit.mode, grad=g)
    except LaplaceUntrustedError as exc:
        exc.diagnostics["n_evals"] = fit.n_evals + 1
        raise
    res.n_evals = fit.n_evals + 1
    res.model = model.name
    res.diagnostics["fit"] = {"n_starts": fit.n_starts, "converged_starts": fit.converged_starts}
    return res


# --------------------------------------------------------------------------
# Numerical evidence


class _Integrand:
    """``ln P`` in the reduced space, marginalized over sigma_f."""

    def __init__(self, model, data):
        self.model = model
        self.data = data
        self.const = marg_log_const(data.n)
        self.n_failed = 0

    def __call__(self, x):
        point = HyperPoint.from_vector(x, self.model.n_periodic)
        try:
            state = assemble(self.model, point, self.data, inverse=False, validate=False)
            return log_p_max(state, self.data) + self.const
        except GPTrainError:
            self.n_failed += 1
            return -math.inf


def _block_sizes(budget, block_size):
    n_blocks = max(1, math.ceil(budget / block_size))
    sizes = [budget // n_blocks] * n_blocks
    for i in range(budget - sum(sizes)):
        sizes[i] += 1
    return sizes


def _run_blocks(fn, budget, seed, block_size, n_jobs):
    """Evaluate ``fn(rng, size)`` over seeded blocks; ordered reduction."""
    sizes = _block_sizes(budget, block_size)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = [(np.random.default_rng(s), k) for s, k in zip(streams, sizes)]
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(lambda a: fn(*a), jobs))
    else:
        parts = [fn(*a) for a in jobs]
    return np.concatenate(parts)


def log_mean_exp(log_w):
    """``ln mean(exp(log_w))``, its delta-method standard error and the ESS."""
    log_w = np.asarray(log_w, dtype=float)
    n = log_w.size
    top = np.max(log_w)
    if not np.isfinite(top):
        return -math.inf, math.inf, 0.0
    w = np.exp(log_w - top)
    mean = w.mean()
    var = w.var(ddof=1) if n > 1 else 0.0
    std_err = math.sqrt(var / n) / mean
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return float(top + math.log(mean)), std_err, ess


def _uniform_ordered(rng, size, lo, hi, n_periodic):
    u = lo + rng.random((size, lo.size)) * (hi - lo)
    return np.array([canonical_order(x, n_periodic)[0] for x in u])


def _student_logpdf(x, mean, chol, nu):
    d = mean.size
    z = np.linalg.solve(chol, (x - mean).T).T
    maha = np.sum(z * z, axis=1)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return (gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu) - 0.5 * d * math.log(nu * math.pi)
            - 0.5 * log_det - 0.5 * (nu + d) * np.log1p(maha / nu))


@dataclass(frozen=True)
class MixtureProposal:
    """Defensive mixture of a uniform box component and Student-t components.

    ``weights[0]`` belongs to the uniform component (density ``1/V_box``
    over the unordered box).
    """

    lo: np.ndarray
    hi: np.ndarray
    means: tuple
    chols: tuple
    weights: np.ndarray
    nu: float = 4.0

    def sample(self, rng, size):
        d = self.lo.size
        comp = rng.choice(len(self.weights), size=size, p=self.weights)
        out = np.empty((size, d))
        u = comp == 0
        out[u] = self.lo + rng.random((int(u.sum()), d)) * (self.hi - self.lo)
        for k, (mu, L) in enumerate(zip(self.means, self.chols), start=1):
            sel = comp == k
            cnt = int(sel.sum())
            if not cnt:
                continue
            z = rng.standard_normal((cnt, d))
            g = rng.chisquare(self.nu, size=cnt) / self.nu
            out[sel] = mu + (z @ L.T) / np.sqrt(g)[:, None]
        return out

    def log_pdf(self, x):
        log_box = -float(np.sum(np.log(self.hi - self.lo)))
        inside = np.all((x > self.lo) & (x < self.hi), axis=1)
        terms = [np.where(inside, math.log(self.weights[0]) + log_box, -np.inf)]
        for w, mu, L in zip(self.weights[1:], self.means, self.chols):
            terms.append(math.log(w) + _student_logpdf(x, mu, L, self.nu))
        return logsumexp(np.vstack(terms), axis=0)


def build_proposal(model, data, fit, defensive=0.1, inflate=1.5, max_components=8,
                   value_window=15.0):
    """Mixture proposal from the distinct maxima of a multi-start fit.

    Each maximum within ``value_window`` nats of the best becomes a
    Student-t component with scale ``inflate^2 H^-1`` (``H`` the profiled
    Hessian there, eigenvalues floored so that no direction is wider than
    the box); components are weighted by their Laplace mass.  Returns
    ``(proposal, n_hessian_evals)``.
    """
    lo, hi = model.spec.bounds(False)
    width = hi - lo
    basins = [b for b in distinct_basins(fit) if b[0] > fit.log_p_at_peak - value_window]
    basins = basins[:max_components]
    means, chols, logmass = [], [], []
    for value, x, _ in basins:
        point = HyperPoint.from_vector(x, model.n_periodic)
        H = profiled_report(model, point, data).hessian
        evals, vecs = np.linalg.eigh(0.5 * (H + H.T))
        floor = 1.0 / float(np.max(width)) ** 2
        evals = np.maximum(evals, floor)
        cov = (vecs / evals) @ vecs.T * inflate ** 2
        L = np.linalg.cholesky(cov)
        means.append(np.asarray(x, dtype=float))
        chols.append(L)
        logmass.append(value + float(np.sum(np.log(np.diag(L)))))
    if means:
        lm = np.array(logmass)
        wk = np.exp(lm - lm.max())
        wk = (1.0 - defensive) * wk / wk.sum()
        weights = np.concatenate([[defensive], wk])
    else:
        weights = np.array([1.0])
    return MixtureProposal(lo, hi, tuple(means), tuple(chols), weights), len(means)


def numeric_evidence(model, data, budget=20000, seed=0, method="monte_carlo", fit=None,
                     fit_options=None, block_size=1000, n_jobs=1, proposal=None):
    """Monte-Carlo estimate of the reduced-space evidence.

    Parameters
    ----------
    budget : int
        Number of integrand evaluations used by the estimator (>= 1000).
    method : {"monte_carlo", "importance"}
        Plain uniform sampling over the ordered box, or defensive
        importance sampling around the maxima of ``fit``.  Without a fit
        the importance method runs its own multi-start search
        (``fit_options``, default 40 refined starts), whose evaluations are
        counted in ``n_evals`` on top of ``budget``.
    seed : int
        Seeds the per-block random substreams; results are deterministic
        for a given ``(seed, budget, block_size)``.

    Raises
    ------
    UnreliableEstimateError
        The effective sample size is below 10; the partial result is
        attached as ``exc.partial``.
    """
    if budget < 1000:
        raise UsageError("budget must be >= 1000")
    if method not in ("monte_carlo", "importance"):
        raise UsageError("method must be 'monte_carlo' or 'importance'")
    spec = model.spec
    lo, hi = spec.bounds(False)
    N = model.n_periodic
    f = _Integrand(model, data)
    extra_evals = 0
    diag = {"budget": budget, "seed": seed, "block_size": block_size}

    if method == "monte_carlo":
        def block(rng, size):
            xs = _uniform_ordered(rng, size, lo, hi, N)
            return np.array([f(x) for x in xs])
        log_w = _run_blocks(block, budget, seed, block_size, n_jobs)
        peak = None
    else:
        if proposal is None:
            if fit is None:
                opts = fit_options or OptimizerOptions(n_starts=40, seed=seed)
                fit = maximize(model, data, opts)
                extra_evals += fit.n_evals
            if fit.full:
                raise UsageError("importance sampling needs a reduced-space fit")
            proposal, n_hess = build_proposal(model, data, fit)
            extra_evals += n_hess
        log_vol_box = float(np.sum(np.log(hi - lo)))
        lg = math.lgamma(N + 1)
        # target density on the unordered box: P(x) * N! / V_box on the ordered region

        def block(rng, size):
            xs = proposal.sample(rng, size)
            lq = proposal.log_pdf(xs)
            out = np.full(size, -np.inf)
            for i, x in enumerate(xs):
                if np.all(x > lo) and np.all(x < hi) and canonical_order(x, N)[1] is None:
                    out[i] = f(x) + lg - log_vol_box - lq[i]
            return out
        log_w = _run_blocks(block, budget, seed, block_size, n_jobs)
        peak = fit.best_point if fit is not None else None
        diag["n_components"] = len(proposal.means)
        diag["defensive_weight"] = float(proposal.weights[0])

    log_z, std_err, ess = log_mean_exp(log_w)
    diag["ess"] = ess
    diag["n_failed"] = f.n_failed
    res = EvidenceResult(log_z, method, std_err, budget + extra_evals, peak, None,
                         model=model.name, n_data=data.n,
                         data_fingerprint=data.fingerprint(), diagnostics=diag)
    if ess < MIN_ESS:
        res.trusted = False
        raise UnreliableEstimateError(
            f"effective sample size {ess:.2f} < {MIN_ESS:g}: the integrand is too peaked "
            "for this budget and sampler", res)
    return res


# --------------------------------------------------------------------------
# Model comparison


@dataclass(frozen=True)
class BayesFactor:
    """``log_b = log_z(b) - log_z(a)``: positive favours model ``b``."""

    log_b: float
    std_err: float
    model_a: str
    model_b: str

    def to_dict(self):
        return {"log_b": self.log_b, "std_err": self.std_err,
                "model_a": self.model_a, "model_b": self.model_b}


_FAMILIES = {"laplace_reduced": "reduced", "monte_carlo": "reduced", "importance": "reduced",
             "laplace_full": "full"}


def bayes_factor(z_a, z_b):
    """Log Bayes factor of ``z_b`` over ``z_a`` with root-sum-square error."""
    if z_a.data_fingerprint != z_b.data_fingerprint or z_a.n_data != z_b.n_data:
        raise UsageError("evidences were computed on different datasets")
    if _FAMILIES.get(z_a.method) != _FAMILIES.get(z_b.method):
        raise UsageError("cannot compare full-space and sigma_f-marginalized evidences")
    return BayesFactor(z_b.log_z - z_a.log_z, math.hypot(z_a.std_err, z_b.std_err),
                       z_a.model, z_b.model)
