"""Synthetic GP draws and time-series CSV ingestion.

CSV format: UTF-8, header row (``t,y`` by default), decimal floats, one
sample per line, ``#`` comment lines.  Written files use 17 significant
digits so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from .covmodel import kernel_matrix
from .errors import InsufficientDataError, ParseError, SelectionError
from .gpcore import TrainingSet, cholesky_with_jitter


def sample_gp(model, point, ts, seed):
    """Draw ``y = sigma_f L z`` with ``L L^T`` the unit-scale kernel matrix."""
    ts = np.asarray(ts, dtype=float)
    if np.unique(ts).size != ts.size:
        raise SelectionError("sample times must be distinct")
    sigma_f = 1.0 if point.psi is None else math.exp(point.psi)
    unscaled = replace(point, psi=None)
    K = kernel_matrix(model, unscaled, ts)
    L, _ = cholesky_with_jitter(K)
    z = np.random.default_rng(seed).standard_normal(ts.size)
    return sigma_f * (L @ z)


@dataclass(frozen=True)
class SeriesFile:
    path: str | None
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.times.size

    @property
    def min_separation(self):
        """Smallest gap between consecutive samples (the prior's lower timescale)."""
        return float(np.min(np.diff(self.times))) if self.n > 1 else math.nan

    @property
    def span(self):
        return float(self.times[-1] - self.times[0]) if self.n > 1 else math.nan

    def training_set(self):
        return TrainingSet(self.times, self.values)


def _parse_time(text, fmt):
    if fmt is None:
        return float(text)
    return datetime.strptime(text.strip(), fmt)


def load_series(path, time_column=None, value_column=None, time_format=None,
                time_unit_hours=True):
    """Read a two-column series, collapsing duplicate times by their mean.

    Parameters
    ----------
    path : str or path-like
    time_column, value_column : str, optional
        Header names to use; default to the first two columns.
    time_format : str, optional
        ``strptime`` format for timestamp columns.  Timestamps are
        converted to hours (or seconds if ``time_unit_hours`` is False)
        since the first sample.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    series = parse_series(text, time_column, value_column, time_format, time_unit_hours)
    return replace(series, path=os.fspath(path))


def parse_series(text, time_column=None, value_column=None, time_format=None,
                 time_unit_hours=True):
    header = None
    rows = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = next(csv.reader([line]))
        fields = [f.strip() for f in fields]
        if header is None:
            header = fields
            ti = header.index(time_column) if time_column else 0
            vi = header.index(value_column) if value_column else 1
            if max(ti, vi) >= len(header):
                raise ParseError("header has fewer than two columns", lineno)
            continue
        try:
            t = _parse_time(fields[ti], time_format)
            v = float(fields[vi])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"cannot parse row {line.strip()!r} ({exc})", lineno) from None
        if isinstance(t, float) and not math.isfinite(t) or not math.isfinite(v):
            raise ParseError("non-finite value", lineno)
        rows.append((t, v))
    if header is None:
        raise ParseError("missing header row")
    if len(rows) < 2:
        raise InsufficientDataError(f"need at least 2 rows, found {len(rows)}")
    if time_format is not None:
        t0 = rows[0][0]
        unit = 3600.0 if time_unit_hours else 1.0
        rows = [((t - t0).total_seconds() / unit, v) for t, v in rows]
    times = np.array([r[0] for r in rows])
    values = np.array([r[1] for r in rows])
    if np.any(np.diff(times) < 0):
        raise ParseError("times are not monotone non-decreasing")
    uniq, inverse = np.unique(times, return_inverse=True)
    if uniq.size != times.size:
        sums = np.bincount(inverse, weights=values)
        counts = np.bincount(inverse)
        values = sums / counts
        times = uniq
    meta = {"columns": [header[ti], header[vi]], "n_raw": len(rows)}
    return SeriesFile(None, times, values, meta)


def subset(series, start=None, stop=None, stride=1, window=None):
    """Order-preserving selection by index range/stride or by time window.

    ``window=(t_lo, t_hi)`` keeps samples with ``t_lo <= t < t_hi``,
    measured from the first sample's time.
    """
    idx = np.arange(series.n)
    if window is not None:
        rel = series.times - series.times[0]
        idx = idx[(rel >= window[0]) & (rel < window[1])]
    idx = idx[slice(start, stop, stride)]
    if idx.size == 0:
        raise SelectionError("selection is empty")
    meta = dict(series.meta, subset={"start": start, "stop": stop, "stride": stride,
                                     "window": list(window) if window else None})
    return SeriesFile(series.path, series.times[idx], series.values[idx], meta)


def format_series(times, values, header=("t", "y")):
    lines = [",".join(header)]
    lines += [f"{t:.17g},{v:.17g}" for t, v in zip(map(float, times), map(float, values))]
    return "\n".join(lines) + "\n"


def atomic_write(path, text):
    """Write via a temporary file in the target directory and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_series(path, times, values, header=("t", "y")):
    atomic_write(path, format_series(times, values, header))
