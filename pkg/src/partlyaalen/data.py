"""Right-censored survival data, the event/censoring time grid and at-risk moments.

Conventions used throughout the package:

* ``Y_i(s) = 1{t_i >= s}`` (left-continuous at-risk indicator), so a subject
  whose time equals an event knot is still in the risk set at that knot.
* No observed time lies strictly between two consecutive knots, so on the
  interval ``(knots[k-1], knots[k]]`` every ``Y_i`` equals ``Y_i(knots[k])``.
  Piecewise-constant integrands are therefore indexed by the *right* knot of
  each interval.
* Observed times beyond ``tau`` are truncated to ``tau`` and treated as
  censored there.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

COND_LIMIT = 1e10


class DataError(ValueError):
    """Invalid input data or schema."""


class RankError(np.linalg.LinAlgError):
    """A moment matrix was too ill-conditioned to invert."""


def guarded_inverse(mats: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Invert a stack of square matrices, refusing ill-conditioned ones."""
    mats = np.asarray(mats, dtype=float)
    if mats.shape[-1] == 0:
        return mats.copy()
    cond = np.linalg.cond(mats)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if np.any(bad):
        raise RankError(f"{what} is singular or ill-conditioned (cond > {COND_LIMIT:g})")
    return np.linalg.inv(mats)


@dataclass(frozen=True)
class Dataset:
    """Survival triples ``(t_i, delta_i, z_i)`` with a parametric/nonparametric split.

    The first ``p`` covariate columns form the parametric block, the remaining
    ``q = r - p`` the nonparametric block.
    """

    times: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    p: int = 0
    names: tuple[str, ...] = ()

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        status = np.asarray(self.status).reshape(-1)
        z = np.asarray(self.covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != times.shape[0] or status.shape[0] != times.shape[0]:
            raise DataError("times, status and covariates must have the same number of rows")
        if not np.all(np.isfinite(times)):
            raise DataError("nonnumeric or infinite time")
        if np.any(times <= 0):
            raise DataError("nonpositive time")
        if not np.all(np.isin(status, (0, 1))):
            raise DataError("status outside {0,1}")
        if not np.all(np.isfinite(z)):
            raise DataError("missing covariate cell")
        r = z.shape[1]
        if r < 1:
            raise DataError("at least one covariate column is required")
        if not 0 <= self.p <= r:
            raise DataError(f"parametric block size p={self.p} outside [0, {r}]")
        names = tuple(self.names) if self.names else tuple(f"z{j + 1}" for j in range(r))
        if len(names) != r:
            raise DataError("number of column names does not match covariate columns")
        for attr, val in (("times", times), ("status", status.astype(int)), ("covariates", z)):
            val.setflags(write=False)
            object.__setattr__(self, attr, val)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def r(self) -> int:
        return self.covariates.shape[1]

    @property
    def q(self) -> int:
        return self.r - self.p

    @property
    def z1(self) -> np.ndarray:
        return self.covariates[:, : self.p]

    @property
    def z2(self) -> np.ndarray:
        return self.covariates[:, self.p :]

    def with_split(self, parametric: Sequence[str]) -> "Dataset":
        """Reorder columns so that ``parametric`` come first, in the given order."""
        idx = [self.names.index(c) for c in parametric]
        rest = [j for j in range(self.r) if j not in idx]
        order = idx + rest
        return Dataset(
            self.times, self.status, self.covariates[:, order], len(idx),
            tuple(self.names[j] for j in order),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "status", *self.names])
        for t, d, z in zip(self.times, self.status, self.covariates):
            w.writerow([repr(float(t)), int(d), *(repr(float(v)) for v in z)])
        return buf.getvalue()


def load_dataset(
    csv_text: str,
    time: str = "time",
    status: str = "status",
    parametric: Sequence[str] = (),
    nonparametric: Sequence[str] | None = None,
    standardize: Sequence[str] = (),
) -> Dataset:
    """Parse CSV text into a :class:`Dataset`.

    Columns listed in ``parametric`` come first; ``nonparametric`` defaults to
    every remaining covariate column in file order. Columns in ``standardize``
    are centred at their mean and scaled by their standard deviation.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty input: header row required") from None
    for col in (time, status):
        if col not in header:
            raise DataError(f"required column '{col}' missing from header")
    covs = [h for h in header if h not in (time, status)]
    parametric = list(parametric)
    if nonparametric is None:
        nonparametric = [c for c in covs if c not in parametric]
    else:
        nonparametric = list(nonparametric)
    chosen = parametric + nonparametric
    for c in chosen:
        if c not in covs:
            raise DataError(f"unknown covariate column '{c}'")
    if len(set(chosen)) != len(chosen) or len(chosen) != len(covs):
        raise DataError(
            f"p + q = {len(chosen)} does not match the {len(covs)} covariate columns"
        )

    ti, si = header.index(time), header.index(status)
    zi = [header.index(c) for c in chosen]
    times, stat, rows = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            t = float(row[ti])
        except ValueError:
            raise DataError(f"line {lineno}: nonnumeric time '{row[ti]}'") from None
        if not np.isfinite(t) or t <= 0:
            raise DataError(f"line {lineno}: nonpositive time {row[ti]}")
        try:
            d = float(row[si])
        except ValueError:
            raise DataError(f"line {lineno}: status outside {{0,1}}") from None
        if d not in (0.0, 1.0):
            raise DataError(f"line {lineno}: status outside {{0,1}}")
        vals = []
        for j in zi:
            cell = row[j].strip()
            if cell == "" or cell.lower() in ("na", "nan"):
                raise DataError(f"line {lineno}: missing covariate cell in '{header[j]}'")
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"line {lineno}: nonnumeric covariate '{cell}'") from None
        times.append(t)
        stat.append(int(d))
        rows.append(vals)
    if not rows:
        raise DataError("no data rows")
    z = np.asarray(rows, dtype=float)
    for c in standardize:
        j = chosen.index(c)
        sd = z[:, j].std(ddof=1)
        if sd <= 0:
            raise DataError(f"cannot standardize constant column '{c}'")
        z[:, j] = (z[:, j] - z[:, j].mean()) / sd
    return Dataset(np.asarray(times), np.asarray(stat), z, len(parametric), tuple(chosen))


@dataclass(frozen=True)
class TimeGrid:
    """Knots ``{0} U {observed times <= tau} U {tau}`` with event flags."""

    knots: np.ndarray
    event_flags: np.ndarray
    tau: float

    @property
    def event_times(self) -> np.ndarray:
        return self.knots[self.event_flags]

    @property
    def event_index(self) -> np.ndarray:
        return np.flatnonzero(self.event_flags)

    def locate(self, t) -> np.ndarray:
        """Index of the largest knot ``<= t``."""
        return np.searchsorted(self.knots, t, side="right") - 1

    def truncated(self, tau: float) -> "TimeGrid":
        keep = self.knots <= tau
        return TimeGrid(self.knots[keep], self.event_flags[keep], float(tau))


def build_time_grid(ds: Dataset, tau: float | str | None = "auto") -> TimeGrid:
    """Build the evaluation grid on ``[0, tau]``; ``tau='auto'`` is the last event time."""
    event_times = ds.times[ds.status == 1]
    if event_times.size == 0:
        raise DataError("no events")
    if tau is None or tau == "auto":
        tau = float(event_times.max())
    tau = float(tau)
    if not tau > 0:
        raise DataError("tau must be positive")
    if not np.any(event_times <= tau):
        raise DataError(f"no events at or before tau={tau:g}")
    obs = np.unique(ds.times[ds.times <= tau])
    knots = np.unique(np.concatenate([[0.0], obs, [tau]]))
    flags = np.isin(knots, event_times[event_times <= tau])
    return TimeGrid(knots, flags, tau)


class RiskSets:
    """Sorted risk-set bookkeeping for a dataset on a grid.

    Subjects are sorted by truncated time; the risk set at knot ``k`` is the
    suffix ``order[start[k]:]``.
    """

    def __init__(self, ds: Dataset, grid: TimeGrid):
        self.ds, self.grid = ds, grid
        t = np.minimum(ds.times, grid.tau)
        d = ds.status.astype(bool) & (ds.times <= grid.tau)
        self.order = np.argsort(t, kind="stable")
        self.t_sorted = t[self.order]
        self.truncated_times = t
        self.observed = d
        self.start = np.searchsorted(self.t_sorted, grid.knots, side="left")
        self.z_sorted = ds.covariates[self.order]
        ev_sorted = d[self.order]
        self.event_subjects: list[np.ndarray] = []
        for k in grid.event_index:
            lo = self.start[k]
            hi = np.searchsorted(self.t_sorted, grid.knots[k], side="right")
            sel = np.flatnonzero(ev_sorted[lo:hi]) + lo
            self.event_subjects.append(self.order[sel])

    def plain_moments(self, rows=None, cols=None) -> np.ndarray:
        """``sum_{t_i >= knot_k} z_i[rows] z_i[cols]^T`` for every knot (unscaled)."""
        z = self.z_sorted
        zr = z if rows is None else z[:, rows]
        zc = z if cols is None else z[:, cols]
        outer = zr[:, :, None] * zc[:, None, :]
        csum = np.concatenate([np.cumsum(outer[::-1], axis=0)[::-1], np.zeros((1,) + outer.shape[1:])])
        return csum[self.start]

    def at_risk_count(self) -> np.ndarray:
        return (self.ds.n - self.start).astype(float)

    def at_risk(self, k: int) -> np.ndarray:
        return self.order[self.start[k]:]


def at_risk_moment(
    ds: Dataset,
    s: float,
    weights: Callable[[float], np.ndarray] | None = None,
    rows: Sequence[int] | None = None,
    cols: Sequence[int] | None = None,
) -> np.ndarray:
    """``n^{-1} sum_i Y_i(s) w_i(s) z_{i,rows} z_{i,cols}^T`` with ``Y_i(s) = 1{t_i >= s}``.

    ``weights(s)`` must return one weight per subject. Rows/cols default to all
    columns, giving ``G_n(s)``; ``rows = cols = range(p)`` gives the default
    parametric-block weight matrix.
    """
    z = ds.covariates
    rows = list(range(ds.r)) if rows is None else list(rows)
    cols = list(range(ds.r)) if cols is None else list(cols)
    y = (ds.times >= s).astype(float)
    w = y if weights is None else y * np.asarray(weights(s), dtype=float)
    return (z[:, rows] * w[:, None]).T @ z[:, cols] / ds.n


@dataclass(frozen=True)
class StepPath:
    """Right-continuous piecewise-constant path on a set of knots."""

    knots: np.ndarray
    values: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.knots) != len(self.values):
            raise ValueError("values must have one entry per knot")

    def __call__(self, t):
        idx = np.searchsorted(self.knots, t, side="right") - 1
        idx = np.clip(idx, 0, len(self.knots) - 1)
        out = self.values[idx]
        below = np.asarray(t) < self.knots[0]
        if np.any(below):
            out = np.where(below.reshape(below.shape + (1,) * (out.ndim - below.ndim)), 0.0, out)
        return out

    def to_csv(self) -> str:
        vals = self.values.reshape(len(self.knots), -1)
        labels = self.labels or tuple(f"v{j + 1}" for j in range(vals.shape[1]))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", *labels])
        for t, row in zip(self.knots, vals):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])
        return buf.getvalue()
