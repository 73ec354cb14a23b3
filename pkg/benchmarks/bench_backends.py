"""Compare the compiled and pure-Python kernel backends.

Times three workloads per backend and per n:

* ``arrays``   – kernel matrix plus first and second partial arrays alone;
* ``grad``     – one profiled hyperlikelihood evaluation with gradient
  (what the optimizer pays per step);
* ``hessian``  – the profiled Hessian at a point (the Laplace step).

Usage::

    python benchmarks/bench_backends.py --n 100 300 --repeat 5 --output bench.json
"""

import argparse
import json
import sys
import timeit

import numpy as np

from gptrain import kernels
from gptrain.covmodel import HyperPoint, k2, kernel_partials
from gptrain.data import sample_gp
from gptrain.gpcore import TrainingSet
from gptrain.profile import profiled_report

REFERENCE = HyperPoint((3.5, 1.5, 3.0), (0.0, 0.0))


def workloads(n, seed=0):
    ts = np.arange(1.0, n + 1.0)
    model = k2().for_times(ts)
    # short series cannot hold the reference timescales inside the prior box
    lo, hi = model.spec.bounds(False)
    pad = 0.05 * (hi - lo)
    x = np.clip(REFERENCE.vector(), lo + pad, hi - pad)
    point = HyperPoint.from_vector(x, model.n_periodic)
    data = TrainingSet(ts, sample_gp(model, point, ts, seed))
    return {
        "arrays": lambda: kernel_partials(model, point, ts, order=2),
        "grad": lambda: profiled_report(model, point, data, hessian=False),
        "hessian": lambda: profiled_report(model, point, data, hessian=True),
    }


def best_time(fn, repeat):
    fn()  # warm caches and BLAS threads
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(ns, repeat):
    rows = []
    for n in ns:
        for name in sorted(kernels.BACKENDS):
            kernels.use_backend(name)
            for label, fn in workloads(n).items():
                rows.append({"n": n, "backend": name, "workload": label,
                             "seconds": best_time(fn, repeat)})
    return rows


def summarize(rows):
    table = {}
    for r in rows:
        table.setdefault((r["n"], r["workload"]), {})[r["backend"]] = r["seconds"]
    lines = [f"{'n':>5} {'workload':>9} {'python [s]':>12} {'compiled [s]':>13} {'speed-up':>9}"]
    for (n, label), t in sorted(table.items()):
        py, cc = t.get("python"), t.get("compiled")
        ratio = f"{py / cc:9.1f}" if py and cc else f"{'-':>9}"
        cc_text = f"{cc:13.5f}" if cc else f"{'n/a':>13}"
        lines.append(f"{n:5d} {label:>9} {py:12.5f} {cc_text} {ratio}")
    return "\n".join(lines)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, nargs="+", default=[30, 100, 300])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--output", help="also write the raw timings as JSON")
    args = parser.parse_args(argv)
    if "compiled" not in kernels.BACKENDS:
        print("compiled backend unavailable; timing the python fallback only", file=sys.stderr)
    initial = kernels.BACKEND_NAME
    try:
        rows = run(args.n, args.repeat)
    finally:
        kernels.use_backend(initial)
    print(summarize(rows))
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
