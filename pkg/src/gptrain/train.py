"""Multi-start gradient-based maximization of the hyperlikelihood.

The default mode maximizes the profiled log hyperlikelihood over the
reduced coordinates (sigma_f solved analytically); ``mode="full"``
maximizes the plain log hyperlikelihood with ``psi`` included.

Starts are Latin-hypercube points in the flat-prior box.  With
``screen_factor > 1`` the search runs in two stages: every candidate
start gets a short run of ``screen_evals`` evaluations, and only the
``n_starts`` best are continued to convergence.  Short-run values are a
good predictor of which basin a start ends in, so this buys much better
coverage of the box for a modest number of extra evaluations.

Two local methods are available: bounded L-BFGS (``"lbfgs"``, default,
via scipy) and a Polak-Ribiere conjugate-gradient ascent (``"cg"``).
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import line_search, minimize
from scipy.stats import qmc

from .covmodel import HyperPoint, kernel_partials
from .errors import GPTrainError, OptimizationError, UsageError
from .gpcore import assemble, hyperlikelihood_gradient, log_hyperlikelihood
from .profile import log_p_max, log_p_max_gradient, sigma_f_hat_sq

# fraction of a coordinate's range treated as "at the bound"
ACTIVE_TOL = 1e-6
# iterations over which the value-stall test is applied
STALL_WINDOW = 5


@dataclass
class OptimizerOptions:
    n_starts: int = 10
    gtol: float = 1e-6
    max_iters: int = 500
    seed: int = 0
    mode: str = "reduced"
    max_evals_total: int | None = None
    n_jobs: int = 1
    c1: float = 1e-4
    contraction: float = 0.5
    ftol: float = 1e-12
    method: str = "lbfgs"
    screen_factor: int = 4
    screen_evals: int = 10
    step_scale: float = 0.01

    def __post_init__(self):
        if self.n_starts < 1:
            raise UsageError("n_starts must be >= 1")
        if self.mode not in ("reduced", "full"):
            raise UsageError("mode must be 'reduced' or 'full'")
        if self.method not in ("lbfgs", "cg"):
            raise UsageError("method must be 'lbfgs' or 'cg'")
        if self.screen_factor < 1 or self.screen_evals < 1:
            raise UsageError("screen_factor and screen_evals must be >= 1")
        if not self.step_scale > 0:
            raise UsageError("step_scale must be positive")
        if not 0 < self.contraction < 1 or not 0 < self.c1 < 1:
            raise UsageError("line-search constants must lie in (0, 1)")


@dataclass
class StartRecord:
    start: np.ndarray
    final: np.ndarray
    value: float
    n_evals: int
    n_iters: int
    converged: bool
    grad_norm: float
    history: list = field(default_factory=list)
    stop_reason: str = ""

    def to_dict(self):
        d = asdict(self)
        d["start"] = self.start.tolist()
        d["final"] = self.final.tolist()
        return d


@dataclass
class FitResult:
    """Best multi-start result; ``log_p_at_peak`` is the max of the per-start values.

    ``per_start_records`` holds every candidate, including those dropped
    after screening (``stop_reason == "screened"``); ``n_starts`` counts
    the runs continued to convergence.
    """

    best_point: HyperPoint
    log_p_at_peak: float
    sigma_f_hat: float
    n_starts: int
    n_evals: int
    converged_starts: int
    per_start_records: list
    mode: str
    coordinate_names: tuple
    options: dict
    n_data: int = 0
    data_fingerprint: str = ""

    @property
    def full(self):
        return self.mode == "full"

    def to_dict(self):
        return {"best_point": self.best_point.to_dict(),
                "best_vector": self.best_point.vector().tolist(),
                "coordinate_names": list(self.coordinate_names),
                "log_p_at_peak": self.log_p_at_peak,
                "sigma_f_hat": self.sigma_f_hat,
                "n_starts": self.n_starts, "n_evals": self.n_evals,
                "converged_starts": self.converged_starts, "mode": self.mode,
                "options": self.options, "n_data": self.n_data,
                "data_fingerprint": self.data_fingerprint,
                "per_start_records": [r.to_dict() for r in self.per_start_records]}


class Objective:
    """Value-and-gradient of the training objective at a flat vector.

    Every call is one likelihood evaluation (one factorization); the
    gradient comes with it at O(n^2) extra cost per coordinate.
    """

    def __init__(self, model, data, mode="reduced"):
        self.model = model
        self.data = data
        self.full = mode == "full"
        self.n_evals = 0

    def point(self, x):
        return HyperPoint.from_vector(x, self.model.n_periodic, self.full)

    def __call__(self, x):
        self.n_evals += 1
        p = self.point(x)
        state = assemble(self.model, p, self.data, validate=False)
        partials = kernel_partials(self.model, p, self.data.ts, order=1)
        if self.full:
            return (log_hyperlikelihood(state, self.data),
                    hyperlikelihood_gradient(state, partials, self.data))
        return log_p_max(state, self.data), log_p_max_gradient(state, partials, self.data)

    def value(self, x):
        self.n_evals += 1
        p = self.point(x)
        state = assemble(self.model, p, self.data, inverse=False, validate=False)
        if self.full:
            return log_hyperlikelihood(state, self.data)
        return log_p_max(state, self.data)


def canonical_order(x, n_periodic):
    """Sort the periodic timescales ascending, carrying each paired xi along.

    Returns ``(x_sorted, perm)``; ``perm`` is None when already ordered.
    """
    N = n_periodic
    if N < 2:
        return x, None
    phis = x[1:N + 1]
    order = np.argsort(phis, kind="stable")
    if np.all(order == np.arange(N)):
        return x, None
    y = x.copy()
    y[1:N + 1] = phis[order]
    y[N + 1:2 * N + 1] = x[N + 1:2 * N + 1][order]
    return y, order


def bounded_step(x, direction, lo, hi, n_periodic=0, contraction=0.5, max_halvings=60):
    """Step ``x + direction`` pulled strictly inside ``(lo, hi)`` by halving.

    Crossing an ordering boundary between periodic timescales is resolved
    by relabeling the components rather than by backtracking.  Returns
    ``(new_x, fraction_of_step_taken)``; a zero or non-finite direction is
    a no-op.
    """
    direction = np.asarray(direction, dtype=float)
    if not np.all(np.isfinite(direction)) or not np.any(direction):
        return x.copy(), 0.0
    frac = 1.0
    for _ in range(max_halvings):
        y = x + frac * direction
        if np.all(y > lo) and np.all(y < hi):
            return canonical_order(y, n_periodic)[0], frac
        frac *= contraction
    return x.copy(), 0.0


def _active_mask(x, g, lo, hi):
    width = hi - lo
    at_lo = (x - lo < ACTIVE_TOL * width) & (g < 0)
    at_hi = (hi - x < ACTIVE_TOL * width) & (g > 0)
    return at_lo | at_hi


def _max_feasible_step(x, d, lo, hi, shrink=0.99):
    """Largest ``a`` with ``x + a d`` strictly inside the box (scaled by ``shrink``)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(d > 0, (hi - x) / d, np.inf)
        down = np.where(d < 0, (lo - x) / d, np.inf)
    return shrink * float(min(up.min(), down.min()))


class _BudgetExhausted(Exception):
    """Raised by :class:`_Evaluator` when a new evaluation would exceed the cap."""


class _Evaluator:
    """Counts evaluations, enforces the cap and caches recent (value, gradient) pairs.

    ``best`` holds ``(value, x, gradient)`` of the best finite evaluation.
    """

    CACHE_SIZE = 16

    def __init__(self, fun, max_evals=None):
        self.fun = fun
        self.max_evals = max_evals
        self.n_evals = 0
        self.best = None
        self._cache = OrderedDict()

    @property
    def exhausted(self):
        return self.max_evals is not None and self.n_evals >= self.max_evals

    def peek(self, z):
        """Cached value at ``z`` without spending an evaluation (None if absent)."""
        hit = self._cache.get(np.asarray(z, dtype=float).tobytes())
        return None if hit is None else hit[0]

    def __call__(self, z):
        key = z.tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        if self.exhausted:
            raise _BudgetExhausted
        self.n_evals += 1
        try:
            f, g = self.fun(z)
            f = float(f)
            g = np.asarray(g, dtype=float)
            if not math.isfinite(f) or not np.all(np.isfinite(g)):
                raise FloatingPointError
        except (GPTrainError, np.linalg.LinAlgError, FloatingPointError):
            f, g = -math.inf, None
        if g is not None and (self.best is None or f > self.best[0]):
            self.best = (f, np.array(z, dtype=float), g)
        self._cache[key] = (f, g)
        if len(self._cache) > self.CACHE_SIZE:
            self._cache.popitem(last=False)
        return f, g


def _wolfe(ev, x, d, f, g, f_prev, amax, c1, c2):
    """Strong-Wolfe step along ``d`` for the ascent problem, or None."""
    def neg_f(z):
        v, _ = ev(z)
        return -v if math.isfinite(v) else 1e300

    def neg_g(z):
        _, gz = ev(z)
        return -gz if gz is not None else np.zeros_like(z)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = line_search(neg_f, neg_g, x, d, gfk=-g, old_fval=-f,
                          old_old_fval=None if f_prev is None else -f_prev,
                          c1=c1, c2=c2, amax=amax, maxiter=20)
    alpha = res[0]
    if alpha is None or not alpha > 0:
        return None
    return float(alpha)


def conjugate_gradient_ascent(fun, x0, lo, hi, n_periodic=0, gtol=1e-6, max_iters=500,
                              c1=1e-4, contraction=0.5, max_evals=None, c2=0.4, ftol=1e-12):
    """Polak-Ribiere (PR+) ascent inside a box.

    ``fun(x)`` returns ``(value, gradient)``; each distinct call counts as
    one evaluation.  Steps come from a strong-Wolfe line search capped at
    the box; when it fails, Armijo backtracking via :func:`bounded_step`
    takes over, then a steepest-ascent restart.  Coordinates pinned at a
    bound with outward gradient are frozen and excluded from the stopping
    test.

    Two stopping tests count as convergence: the projected gradient below
    ``gtol`` (``stop_reason="gtol"``), or a total gain over the last few
    iterations below ``ftol * max(1, |f|)`` (``"ftol"``).  The second
    matters in stiff directions, where round-off in the value hides the
    remaining ascent long before the gradient reaches ``gtol``.  Returns a
    :class:`StartRecord`.
    """
    x = np.array(x0, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    ev = _Evaluator(fun, max_evals)

    f, g = ev(x)
    if g is None:
        return StartRecord(np.array(x0, float), x, -math.inf, ev.n_evals, 0, False, math.inf,
                           stop_reason="non-finite start")
    history = [f]
    d = None
    f_prev = None
    step = None
    converged = False
    reason = "max_iters"
    it = 0
    try:
        while it < max_iters:
            active = _active_mask(x, g, lo, hi)
            pg = np.where(active, 0.0, g)
            if np.max(np.abs(pg)) < gtol:
                converged, reason = True, "gtol"
                break
            if (len(history) > STALL_WINDOW
                    and history[-1] - history[-1 - STALL_WINDOW] <= ftol * max(1.0, abs(f))):
                converged, reason = True, "ftol"
                break
            if ev.exhausted:
                reason = "budget"
                break
            if d is None:
                d = pg.copy()
            d = np.where(active, 0.0, d)
            slope = float(pg @ d)
            if slope <= 0:
                d = pg.copy()
                slope = float(pg @ pg)
            it += 1
            amax = _max_feasible_step(x, d, lo, hi)
            alpha = _wolfe(ev, x, d, f, pg, f_prev, amax, c1, c2) if amax > 0 else None
            x_new = None
            if alpha is not None:
                x_new = x + alpha * d
                f_new, g_new = ev(x_new)
                if g_new is None or f_new < f:
                    x_new = None
            if x_new is None and amax > 0:
                # peak beyond the box along d: take the capped step if still ascending
                cand = x + amax * d
                f_c, g_c = ev(cand)
                if g_c is not None and f_c >= f + c1 * amax * slope and float(g_c @ d) > 0:
                    x_new, f_new, g_new, alpha = cand, f_c, g_c, amax
            if x_new is None:
                # Armijo backtracking inside the box
                if step is None:
                    step = 0.05 / float(np.max(np.abs(d) / width))
                trial = step
                while not ev.exhausted:
                    cand, frac = bounded_step(x, trial * d, lo, hi, 0, contraction)
                    if frac == 0.0 or np.max(np.abs(cand - x) / width) < 1e-15:
                        break
                    f_c, g_c = ev(cand)
                    if g_c is not None and f_c >= f + c1 * frac * trial * slope:
                        x_new, f_new, g_new = cand, f_c, g_c
                        alpha = frac * trial
                        break
                    trial *= contraction
            if x_new is None:
                if not np.array_equal(d, pg):
                    d = None
                    f_prev = None
                    continue
                reason = "no ascent step"
                break
            step = alpha
            ordered, perm = canonical_order(x_new, n_periodic)
            if perm is not None:
                # relabeled components: same value, permuted gradient, restart CG
                x_new = ordered
                f_new, g_new = ev(x_new)
                if g_new is None:
                    reason = "non-finite after relabel"
                    break
                d_next = None
            else:
                beta = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
                d_next = g_new + beta * d
                if float(g_new @ d_next) < 0.01 * float(g_new @ g_new):
                    d_next = None
            f_prev = f
            x, f, g = x_new, f_new, g_new
            history.append(f)
            d = d_next
    except _BudgetExhausted:
        # x, f, g still hold the last accepted iterate
        converged, reason = False, "budget"
    gnorm = float(np.max(np.abs(np.where(_active_mask(x, g, lo, hi), 0.0, g))))
    return StartRecord(np.array(x0, float), x, f, ev.n_evals, it, converged, gnorm, history,
                       reason)


def lbfgs_ascent(fun, x0, lo, hi, n_periodic=0, gtol=1e-6, max_iters=500, max_evals=None,
                 step_scale=0.01, ftol=1e-12):
    """Bounded L-BFGS ascent from ``x0``; returns a :class:`StartRecord`.

    The search runs in coordinates scaled to ``step_scale`` of each box
    width, which keeps the first (unit-length) quasi-Newton step local
    instead of jumping to a corner of the box.  Iterates stay strictly
    inside the box; the final point is put in canonical timescale order.
    """
    x0 = np.array(x0, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    scale = step_scale * width
    margin = 1e-9 * width
    ev = _Evaluator(fun, max_evals)
    history = []

    def neg(z):
        f, g = ev(z * scale)
        if g is None:
            return 1e300, np.zeros_like(z)
        return -f, -g * scale

    f0, g0 = ev(x0)
    if g0 is None:
        return StartRecord(x0, x0, -math.inf, ev.n_evals, 0, False, math.inf,
                           stop_reason="non-finite start")
    history.append(f0)

    def record(zk):
        fk = ev.peek(zk * scale)
        if fk is not None:
            history.append(fk)

    maxfun = max_evals if max_evals is not None else 15000
    bounds = list(zip((lo + margin) / scale, (hi - margin) / scale))
    res = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            res = minimize(neg, x0 / scale, jac=True, method="L-BFGS-B", bounds=bounds,
                           callback=record,
                           options={"maxiter": max_iters, "maxfun": maxfun, "ftol": ftol,
                                    "gtol": gtol * float(scale.min()), "maxls": 30})
        except _BudgetExhausted:
            pass
    # the best evaluated point is the final L-BFGS iterate except after an
    # interrupted line search, where it is the last accepted one
    f, x, g = ev.best
    x, perm = canonical_order(x, n_periodic)
    if perm is not None:
        N = n_periodic
        g = g.copy()
        g[1:N + 1] = g[1:N + 1][perm]
        g[N + 1:2 * N + 1] = g[N + 1:2 * N + 1][perm]
    gnorm = float(np.max(np.abs(np.where(_active_mask(x, g, lo, hi), 0.0, g))))
    nit = 0 if res is None else int(res.nit)
    if gnorm < gtol:
        converged, reason = True, "gtol"
    elif res is None:
        converged, reason = False, "budget"
    elif res.status == 0:
        converged, reason = True, "ftol"
    elif ev.exhausted:
        converged, reason = False, "budget"
    elif res.status == 1:
        converged, reason = False, "max_iters"
    else:
        converged, reason = False, "no ascent step"
    return StartRecord(x0, x, f, ev.n_evals, nit, converged, gnorm, history, reason)


def draw_starts(lo, hi, n_starts, n_periodic, seed):
    """Latin-hypercube start points in the box, periodic timescales sorted."""
    sampler = qmc.LatinHypercube(d=lo.size, seed=np.random.default_rng(seed))
    u = sampler.random(n_starts)
    pts = lo + u * (hi - lo)
    return np.array([canonical_order(p, n_periodic)[0] for p in pts])


def maximize(model, data, opts=None, starts=None):
    """Multi-start maximization; returns the best run as a :class:`FitResult`.

    ``starts`` (an array of flat vectors) bypasses the Latin-hypercube
    draw and the screening stage.
    """
    opts = opts or OptimizerOptions()
    full = opts.mode == "full"
    lo, hi = model.spec.bounds(full)
    N = model.n_periodic
    screening = starts is None and opts.screen_factor > 1
    if starts is None:
        starts = _initial_points(model.spec, opts, full)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    per_start_cap = None
    if opts.max_evals_total is not None:
        per_start_cap = max(1, opts.max_evals_total // len(starts))
        if screening:
            per_start_cap = max(1, opts.max_evals_total // (2 * len(starts)))

    def local(x0, cap):
        obj = Objective(model, data, opts.mode)
        if opts.method == "lbfgs":
            return lbfgs_ascent(obj, x0, lo, hi, N, opts.gtol, opts.max_iters, cap,
                                opts.step_scale, opts.ftol)
        return conjugate_gradient_ascent(obj, x0, lo, hi, N, opts.gtol, opts.max_iters,
                                         opts.c1, opts.contraction, cap, ftol=opts.ftol)

    def run_all(points, cap):
        if opts.n_jobs > 1:
            with ThreadPoolExecutor(opts.n_jobs) as pool:
                return list(pool.map(lambda x0: local(x0, cap), points))
        return [local(x0, cap) for x0 in points]

    if screening:
        screen_cap = opts.screen_evals
        if per_start_cap is not None:
            screen_cap = min(screen_cap, per_start_cap)
        short = run_all(starts, screen_cap)
        values = np.array([r.value for r in short])
        # stable ordering keeps ties deterministic (lowest index first)
        keep = np.argsort(-values, kind="stable")[:opts.n_starts]
        if opts.max_evals_total is None:
            refined = dict(zip(keep.tolist(), run_all([short[i].final for i in keep], None)))
        else:
            used = sum(r.n_evals for r in short)
            refined = _refine_within_budget(local, [short[i].final for i in keep], keep,
                                            opts.max_evals_total - used, opts.screen_evals)
        records = []
        for i, r in enumerate(short):
            if i in refined:
                cont = refined[i]
                records.append(StartRecord(r.start, cont.final, cont.value,
                                           r.n_evals + cont.n_evals, r.n_iters + cont.n_iters,
                                           cont.converged, cont.grad_norm,
                                           r.history + cont.history[1:], cont.stop_reason))
            else:
                records.append(StartRecord(r.start, r.final, r.value, r.n_evals, r.n_iters,
                                           False, r.grad_norm, r.history, "screened"))
        n_runs = len(keep)
    elif opts.max_evals_total is not None:
        refined = _refine_within_budget(local, list(starts), np.arange(len(starts)),
                                        opts.max_evals_total, 1)
        records = [refined[i] for i in range(len(starts))]
        n_runs = len(records)
    else:
        records = run_all(starts, None)
        n_runs = len(records)

    values = np.array([r.value for r in records])
    n_evals = int(sum(r.n_evals for r in records))
    if not np.any(np.isfinite(values)):
        raise OptimizationError("no start produced a finite hyperlikelihood",
                                {"n_evals": n_evals, "starts": starts.tolist()})
    best = records[int(np.argmax(values))]
    point = HyperPoint.from_vector(best.final, N, full)
    if full:
        sigma_f = math.exp(point.psi)
    else:
        state = assemble(model, point, data, inverse=False)
        sigma_f = math.sqrt(sigma_f_hat_sq(state, data))
    return FitResult(point, float(best.value), sigma_f, n_runs, n_evals,
                     sum(r.converged for r in records), records, opts.mode,
                     tuple(model.coordinate_names(full)), asdict(opts),
                     data.n, data.fingerprint())


def _refine_within_budget(local, points, labels, budget, reserve):
    """Run ``points`` in order, each allowed what is left minus a reserve.

    Every later run keeps ``reserve`` evaluations, so the first (most
    promising) runs can go to convergence and the budget is never
    exceeded.  Sequential by construction, hence deterministic.
    """
    out = {}
    remaining = budget
    for k, (label, x0) in enumerate(zip(labels, points)):
        later = len(points) - k - 1
        cap = max(1, remaining - reserve * later)
        rec = local(x0, cap)
        remaining -= rec.n_evals
        out[int(label)] = rec
    return out


def _initial_points(spec, opts, full):
    """Candidate starts; the reduced coordinates do not depend on ``mode``.

    In full mode ``psi`` comes from its own stream, so reduced- and
    full-space searches begin from the same timescales and smoothnesses.
    """
    count = opts.n_starts * (opts.screen_factor if opts.screen_factor > 1 else 1)
    lo, hi = spec.bounds(False)
    pts = draw_starts(lo, hi, count, spec.n_periodic, opts.seed)
    if not full:
        return pts
    plo, phi = spec.psi_bounds
    psi = np.random.default_rng([opts.seed, 1]).uniform(plo, phi, size=count)
    return np.column_stack([pts, psi])
