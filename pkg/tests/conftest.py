import numpy as np
import pytest

from gptrain import kernels
from gptrain.covmodel import HyperPoint, k2
from gptrain.data import sample_gp
from gptrain.gpcore import TrainingSet

# reference k2 hyperparameters used throughout: window e^3.5, periods e^1.5, e^3
REF_K2 = HyperPoint((3.5, 1.5, 3.0), (0.0, 0.0))


def central_diff(f, x, h=1e-5):
    """Central-difference derivative of ``f`` (scalar- or array-valued) at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=0)


def richardson_diff(f, x, h=1e-5):
    """Fourth-order derivative estimate: Richardson extrapolation of central differences.

    Combines steps ``h`` and ``h/2`` to cancel the O(h^2) truncation term, which
    dominates a plain central difference where the surface is sharply curved.
    """
    coarse = central_diff(f, x, h)
    fine = central_diff(f, x, 0.5 * h)
    return (4.0 * fine - coarse) / 3.0


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def random_point(rng, model, full=False, margin=0.05):
    """Uniform point inside the prior box (margin as a fraction of the width)."""
    lo, hi = model.spec.bounds(full)
    w = hi - lo
    x = lo + margin * w + rng.random(lo.size) * (1.0 - 2.0 * margin) * w
    N = model.n_periodic
    x[1:N + 1] = np.sort(x[1:N + 1])
    return HyperPoint.from_vector(x, N, full)


def make_data(model_fn, point, n, seed, spacing=1.0):
    ts = 1.0 + spacing * np.arange(n)
    model = model_fn().for_times(ts)
    ys = sample_gp(model, point, ts, seed)
    return model, TrainingSet(ts, ys)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    previous = kernels.BACKEND_NAME
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def k2_data_100():
    return make_data(k2, REF_K2, 100, seed=1)


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion, repeated in the terminal summary

ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    def emit(line):
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
