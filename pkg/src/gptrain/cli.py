"""Command-line interface: ``gptrain generate|fit|evidence|compare|predict``.

Every command writes machine-readable output (JSON for results, CSV for
series and curves) atomically, embeds its full configuration, and is
deterministic given the input bytes, the configuration and the seed.
Timing fields (``wall_time_s``) are the only non-deterministic content.

Exit codes: 0 success, 2 usage error, 3 numeric or optimization failure,
4 untrusted Laplace estimate (output is still written).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import numpy as np
from scipy.special import erfinv

from . import kernels
from .covmodel import HyperPoint, _Transform, coordinate_names, parse_model, to_natural
from .data import atomic_write, format_series, load_series, sample_gp
from .errors import (GPTrainError, LaplaceUntrustedError, NumericError, OptimizationError,
                     DegenerateDataError, UnreliableEstimateError)
from .evidence import bayes_factor, laplace_from_data, numeric_evidence, peak_hessian
from .gpcore import assemble, predict
from .train import OptimizerOptions, maximize

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_UNTRUSTED = 0, 2, 3, 4

DEFAULT_K2 = {"phi": "3.5,1.5,3.0", "xi": "0,0"}


class CLIUsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; serialized verbatim into its output."""

    command: str = ""
    model: str = "k2"
    models: str = "k1,k2"
    sigma_n: float = 1e-2
    seed: int = 0
    input: str | None = None
    output: str | None = None
    starts: int = 10
    gtol: float = 1e-6
    max_iters: int = 500
    optimizer: str = "lbfgs"
    screen_factor: int = 4
    max_evals: int | None = None
    budget: int = 20000
    method: str = "laplace"
    prior_override: list = field(default_factory=list)
    periodic_floor: str = "nyquist"
    # generate
    n: int = 100
    t0: float = 1.0
    dt: float = 1.0
    phi: str = DEFAULT_K2["phi"]
    xi: str = DEFAULT_K2["xi"]
    sigma_f: float = 1.0
    truth_output: str | None = None
    # predict / compare
    fit_file: str | None = None
    queries: str | None = None
    curves: str | None = None
    # ingestion
    time_column: str | None = None
    value_column: str | None = None
    time_format: str | None = None
    jobs: int = 1

    def to_dict(self):
        return asdict(self)


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def read_config_file(path):
    """Flat ``key = value`` file; ``#`` comments; ``prior_override`` may repeat."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CLIUsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _CONFIG_TYPES:
                raise CLIUsageError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "prior_override":
                out.setdefault(key, []).append(value)
            else:
                out[key] = _coerce(key, value)
    return out


def _coerce(key, text):
    kind = str(_CONFIG_TYPES[key])
    if text.lower() in ("none", "null", ""):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise CLIUsageError(f"config key {key}: cannot parse {text!r}") from None
    return text


def _float_list(text, what):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise CLIUsageError(f"--{what}: expected comma-separated numbers, got {text!r}") from None


def build_model(cfg, ts=None, name=None):
    model = parse_model(name or cfg.model, cfg.sigma_n)
    if ts is None:
        return model
    model = model.for_times(ts, periodic_floor=cfg.periodic_floor)
    spec = model.spec
    for item in cfg.prior_override:
        try:
            key, rng = item.split("=", 1)
            vals = _float_list(rng, "prior-override")
            lo = vals[0]
            hi = vals[1] if len(vals) > 1 else vals[0]
        except (ValueError, IndexError):
            raise CLIUsageError(f"--prior-override expects key=lo,hi, got {item!r}") from None
        spec = spec.override(key.strip(), lo, hi)
    return model.with_prior(spec)


def optimizer_options(cfg):
    return OptimizerOptions(n_starts=cfg.starts, gtol=cfg.gtol, max_iters=cfg.max_iters,
                            seed=cfg.seed, method=cfg.optimizer,
                            screen_factor=cfg.screen_factor, max_evals_total=cfg.max_evals,
                            n_jobs=cfg.jobs)


def load_training(cfg):
    if not cfg.input:
        raise CLIUsageError("--input is required")
    series = load_series(cfg.input, cfg.time_column, cfg.value_column, cfg.time_format)
    return series, series.training_set()


def envelope(cfg, kind, body):
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "backend": kernels.BACKEND_NAME,
           "config": cfg.to_dict()}
    doc.update(body)
    return doc


def emit_json(cfg, doc, path=None):
    text = json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"
    path = path if path is not None else cfg.output
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def load_schema(kind):
    ref = resources.files("gptrain") / "schemas" / f"{kind}.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg):
    if cfg.n < 1:
        raise CLIUsageError("--n must be >= 1")
    ts = cfg.t0 + cfg.dt * np.arange(cfg.n)
    # two samples cannot span a timescale range; the prior box is irrelevant here
    model = build_model(cfg, ts if cfg.n > 2 else None)
    phi = _float_list(cfg.phi, "phi")
    xi = _float_list(cfg.xi, "xi")
    if len(phi) != model.n_periodic + 1 or len(xi) != model.n_periodic:
        raise CLIUsageError(f"{model.name} needs {model.n_periodic + 1} phi and "
                            f"{model.n_periodic} xi values")
    if not cfg.sigma_f > 0:
        raise CLIUsageError("--sigma-f must be positive")
    point = HyperPoint(phi, xi, math.log(cfg.sigma_f))
    ys = sample_gp(model, point, ts, cfg.seed)
    text = format_series(ts, ys)
    if cfg.output in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write(cfg.output, text)
    truth = envelope(cfg, "truth", {
        "model": model.to_dict(), "point": point.to_dict(),
        "natural": _natural_dict(point, model), "seed": cfg.seed, "n": cfg.n})
    truth_path = cfg.truth_output
    if truth_path is None and cfg.output not in (None, "-"):
        truth_path = cfg.output + ".truth.json"
    if truth_path is not None:
        emit_json(cfg, truth, truth_path)
    return EXIT_OK


def _natural_dict(point, model, sd=None):
    """Natural hyperparameters, with delta-method errors when ``sd`` is given."""
    spec = model.prior_spec or _Transform()
    nat = to_natural(point, spec)
    out = {"timescales": nat.timescales.tolist(), "smoothness": nat.smoothness.tolist(),
           "sigma_f": nat.sigma_f}
    if sd is not None:
        N = model.n_periodic
        out["timescales_se"] = (nat.timescales * sd[:N + 1]).tolist()
        # d ln l / d xi = sqrt(2 pi) sigma_l exp(erfinv(2 xi)^2)
        w = erfinv(2.0 * np.asarray(point.xi))
        dlam = math.sqrt(2.0 * math.pi) * spec.sigma_l * np.exp(w * w)
        out["smoothness_se"] = (nat.smoothness * dlam * sd[N + 1:2 * N + 1]).tolist()
    return out


def _fit_report(model, data, fit):
    H, g = peak_hessian(model, data, fit)
    try:
        cov = np.linalg.inv(H)
        sd = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
        pd = bool(np.all(np.linalg.eigvalsh(H) > 0))
    except np.linalg.LinAlgError:
        sd, pd = np.full(H.shape[0], np.nan), False
    names = coordinate_names(model.n_periodic, fit.full)
    point = fit.best_point
    nat = _natural_dict(point if fit.full else point.with_psi(math.log(fit.sigma_f_hat)),
                        model, sd)
    body = {
        "model": model.to_dict(),
        "fit": fit.to_dict(),
        "coordinates": dict(zip(names, point.vector().tolist())),
        "standard_errors": dict(zip(names, sd.tolist())),
        "natural": nat,
        "sigma_f_hat": fit.sigma_f_hat,
        "hessian": H.tolist(),
        "hessian_positive_definite": pd,
        "gradient_at_peak": g.tolist(),
    }
    return body, pd


def cmd_fit(cfg):
    _, data = load_training(cfg)
    model = build_model(cfg, data.ts)
    fit = maximize(model, data, optimizer_options(cfg))
    body, _ = _fit_report(model, data, fit)
    emit_json(cfg, envelope(cfg, "fit", body))
    return EXIT_OK


def _evidence(cfg, model, data):
    """One evidence estimate; returns ``(result_dict, exit_code)``."""
    t0 = time.perf_counter()
    code = EXIT_OK
    if cfg.method == "laplace":
        opts = optimizer_options(cfg)
        try:
            res = laplace_from_data(model, data, opts)
            res.model = model.name
            out = res.to_dict()
            if not res.trusted:
                code = EXIT_UNTRUSTED
        except LaplaceUntrustedError as exc:
            out = {"log_z": None, "method": "laplace_reduced", "std_err": 0.0,
                   "n_evals": exc.diagnostics.get("n_evals"), "model": model.name,
                   "n_data": data.n, "data_fingerprint": data.fingerprint(),
                   "peak_point": None, "hessian_log_det": None, "trusted": False,
                   "error": str(exc), "diagnostics": exc.diagnostics}
            code = EXIT_UNTRUSTED
    elif cfg.method in ("mc", "importance"):
        method = "monte_carlo" if cfg.method == "mc" else "importance"
        try:
            res = numeric_evidence(model, data, cfg.budget, cfg.seed, method=method,
                                   n_jobs=cfg.jobs)
        except UnreliableEstimateError as exc:
            if exc.partial is None:
                raise
            res = exc.partial
            res.diagnostics["error"] = str(exc)
            code = EXIT_NUMERIC
        out = res.to_dict()
    else:
        raise CLIUsageError("--method must be laplace, mc or importance")
    out["wall_time_s"] = time.perf_counter() - t0
    return out, code


def cmd_evidence(cfg):
    _, data = load_training(cfg)
    model = build_model(cfg, data.ts)
    out, code = _evidence(cfg, model, data)
    emit_json(cfg, envelope(cfg, "evidence", {"evidence": out}))
    return code


def _as_result(d):
    from .evidence import EvidenceResult

    return EvidenceResult(d["log_z"], d["method"], d["std_err"], d["n_evals"] or 0, None, None,
                          d["model"], d["n_data"], d["data_fingerprint"])


def cmd_compare(cfg):
    series, data = load_training(cfg)
    names = [m.strip() for m in cfg.models.split(",") if m.strip()]
    if len(names) < 2:
        raise CLIUsageError("--models needs at least two model specs")
    results, models, code = [], [], EXIT_OK
    for name in names:
        model = build_model(cfg, data.ts, name)
        out, c = _evidence(cfg, model, data)
        results.append(out)
        models.append(model)
        code = EXIT_NUMERIC if EXIT_NUMERIC in (code, c) else max(code, c)
    table = []
    base = results[0]
    for out in results[1:]:
        if base["log_z"] is None or out["log_z"] is None:
            table.append({"model_a": base["model"], "model_b": out["model"], "log_b": None,
                          "std_err": None})
            continue
        bf = bayes_factor(_as_result(base), _as_result(out))
        table.append(bf.to_dict())
    if cfg.curves:
        _write_curves(cfg, models, results, data, series)
    emit_json(cfg, envelope(cfg, "compare", {"models": names, "evidence": results,
                                             "bayes_factors": table}))
    return code


def _query_times(cfg, data):
    if cfg.queries is None:
        lo, hi = float(data.ts[0]), float(data.ts[-1])
        return np.linspace(lo, hi, 4 * data.n)
    if ":" in cfg.queries:
        try:
            a, b, k = cfg.queries.split(":")
            return np.linspace(float(a), float(b), int(k))
        except ValueError:
            raise CLIUsageError("--queries expects start:stop:count or a list") from None
    return np.array(_float_list(cfg.queries, "queries"))


def _predictive(model, data, point, queries):
    state = assemble(model, point, data, inverse=False, validate=False)
    return predict(model, state, data, queries)


def _scaled_point(model, data, result_point, sigma_f=None):
    point = HyperPoint(result_point["phi"], result_point["xi"], result_point.get("psi"))
    if point.psi is None:
        from .profile import sigma_f_hat_sq

        state = assemble(model, point, data, inverse=False, validate=False)
        point = point.with_psi(0.5 * math.log(sigma_f_hat_sq(state, data)))
    return point


def _write_curves(cfg, models, results, data, series):
    queries = _query_times(cfg, data)
    cols = [queries]
    header = ["t"]
    for model, res in zip(models, results):
        if res.get("peak_point") is None:
            continue
        point = _scaled_point(model, data, res["peak_point"])
        pred = _predictive(model, data, point, queries)
        cols += [pred.mean, pred.variance]
        header += [f"mean_{model.name}", f"var_{model.name}"]
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(f"{float(v):.17g}" for v in row))
    atomic_write(cfg.curves, "\n".join(lines) + "\n")


def cmd_predict(cfg):
    _, data = load_training(cfg)
    model = build_model(cfg, data.ts)
    if cfg.fit_file:
        with open(cfg.fit_file, encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            best = doc["fit"]["best_point"]
        except (KeyError, TypeError):
            raise CLIUsageError(f"{cfg.fit_file} is not a fit JSON document") from None
        if doc.get("model", {}).get("n_periodic") != model.n_periodic:
            raise CLIUsageError("--fit-file was produced for a different model")
    else:
        fit = maximize(model, data, optimizer_options(cfg))
        best = fit.best_point.to_dict()
    point = _scaled_point(model, data, best)
    queries = _query_times(cfg, data)
    pred = _predictive(model, data, point, queries)
    lines = ["t,mean,variance"]
    lines += [f"{t:.17g},{m:.17g},{v:.17g}"
              for t, m, v in zip(queries.tolist(), pred.mean.tolist(), pred.variance.tolist())]
    text = "\n".join(lines) + "\n"
    if cfg.output in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write(cfg.output, text)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "evidence": cmd_evidence,
            "compare": cmd_compare, "predict": cmd_predict}


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="flat key = value file; flags take precedence")
    g.add_argument("--model", help="k1, k2 or periodic:N")
    g.add_argument("--sigma-n", type=float, help="fractional noise level (default 1e-2)")
    g.add_argument("--seed", type=int)
    g.add_argument("--input", help="input CSV (t,y)")
    g.add_argument("--output", help="output path; '-' or omitted for stdout")
    g.add_argument("--starts", type=int, help="refined multi-start runs (default 10)")
    g.add_argument("--gtol", type=float, help="gradient sup-norm tolerance (default 1e-6)")
    g.add_argument("--max-iters", type=int)
    g.add_argument("--optimizer", choices=["lbfgs", "cg"])
    g.add_argument("--screen-factor", type=int,
                   help="candidate starts per refined run (1 disables screening)")
    g.add_argument("--max-evals", type=int, help="cap on total likelihood evaluations per fit")
    g.add_argument("--budget", type=int, help="Monte-Carlo evaluation budget (default 20000)")
    g.add_argument("--method", choices=["laplace", "mc", "importance"])
    g.add_argument("--prior-override", action="append", metavar="KEY=LO,HI",
                   help="replace a prior interval (phi, phi0, xi, xi1, psi, mu, sigma_l)")
    g.add_argument("--periodic-floor", choices=["nyquist", "min_gap"])
    g.add_argument("--jobs", type=int, help="worker threads for starts / sample blocks")
    g.add_argument("--time-column")
    g.add_argument("--value-column")
    g.add_argument("--time-format", help="strptime format for timestamp columns")

    parser = argparse.ArgumentParser(prog="gptrain",
                                     description="Fast GP hyperparameter training and evidence.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="draw a synthetic series")
    p.add_argument("--n", type=int)
    p.add_argument("--t0", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--phi", help="comma-separated phi_0..phi_N")
    p.add_argument("--xi", help="comma-separated xi_1..xi_N")
    p.add_argument("--sigma-f", type=float)
    p.add_argument("--truth-output")
    sub.add_parser("fit", parents=[common], help="maximize the hyperlikelihood")
    sub.add_parser("evidence", parents=[common], help="Laplace or Monte-Carlo evidence")
    p = sub.add_parser("compare", parents=[common], help="evidence and Bayes factors")
    p.add_argument("--models", help="comma-separated model specs (default k1,k2)")
    p.add_argument("--curves", help="write predictive curves CSV here")
    p.add_argument("--queries", help="start:stop:count or comma list")
    p = sub.add_parser("predict", parents=[common], help="predictive mean and variance")
    p.add_argument("--fit-file", help="fit JSON from `gptrain fit`")
    p.add_argument("--queries", help="start:stop:count or comma list")
    return parser


def resolve_config(args):
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for key, val in vars(args).items():
        if key == "config" or val is None:
            continue
        if key == "prior_override":
            values[key] = list(val)
        else:
            values[key] = val
    values["command"] = args.command
    return RunConfig(**values)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg.command](cfg)
    except (CLIUsageError, OSError) as exc:
        print(f"gptrain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, OptimizationError, UnreliableEstimateError,
            DegenerateDataError) as exc:
        print(f"gptrain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GPTrainError as exc:
        print(f"gptrain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
