"""Combined trial + observational sample: records, validation and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when input data violate the combined-sample schema."""


class ConvergenceError(RuntimeError):
    """Raised when a nuisance model fit does not converge.

    Attributes
    ----------
    model : str
        Name of the model that failed (e.g. ``"outcome cox arm=1"``).
    diagnostic : str
        Human readable reason.
    best : object
        Best iterate reached, when available.
    """

    def __init__(self, model: str, diagnostic: str, best=None):
        super().__init__(f"{model}: {diagnostic}")
        self.model = model
        self.diagnostic = diagnostic
        self.best = best


RCT = "rct"
OS = "os"


@dataclass(frozen=True)
class SubjectRecord:
    """One row of the combined sample.

    Trial rows carry follow-up time ``u``, event indicator and treatment;
    observational rows carry only covariates and a design weight.
    """

    id: str
    source: str
    x: tuple[float, ...]
    u: float | None = None
    event: bool | None = None
    a: bool | None = None
    design_weight: float | None = None

    def __post_init__(self):
        src = str(self.source).lower()
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if src == RCT:
            if self.u is None or self.event is None or self.a is None:
                raise DataError(f"row {self.id!r}: trial row missing u/event/a")
            if self.design_weight is not None:
                raise DataError(f"row {self.id!r}: trial row carries a design weight")
            if not math.isfinite(self.u):
                raise DataError(f"row {self.id!r}: non-finite follow-up time")
            if self.u < 0:
                raise DataError(f"row {self.id!r}: negative follow-up time")
        elif src == OS:
            if self.u is not None or self.event is not None or self.a is not None:
                raise DataError(f"row {self.id!r}: observational row carries u/event/a")
            if self.design_weight is None:
                raise DataError(f"row {self.id!r}: observational row missing design weight")
            if not (self.design_weight > 0 and math.isfinite(self.design_weight)):
                raise DataError(f"row {self.id!r}: nonpositive design weight")
        else:
            raise DataError(f"row {self.id!r}: unknown source {self.source!r}")
        if not all(math.isfinite(v) for v in self.x):
            raise DataError(f"row {self.id!r}: non-finite covariate")


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CombinedDataset:
    """Column-oriented, immutable combined sample.

    All arrays have one entry per row in original order. Trial-only columns
    (``u``, ``event``, ``a``) hold ``nan``/``False`` on observational rows and
    ``design_weight`` holds ``nan`` on trial rows.
    """

    ids: np.ndarray
    is_rct: np.ndarray
    x: np.ndarray
    u: np.ndarray
    event: np.ndarray
    a: np.ndarray
    design_weight: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        N = len(self.ids)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(N, -1) if N else x.reshape(0, 0)
        object.__setattr__(self, "ids", _frozen([str(i) for i in self.ids], object))
        object.__setattr__(self, "is_rct", _frozen(self.is_rct, bool))
        object.__setattr__(self, "x", _frozen(x, float))
        object.__setattr__(self, "u", _frozen(self.u, float))
        object.__setattr__(self, "event", _frozen(self.event, bool))
        object.__setattr__(self, "a", _frozen(self.a, bool))
        object.__setattr__(self, "design_weight", _frozen(self.design_weight, float))
        for name in ("is_rct", "u", "event", "a", "design_weight"):
            if len(getattr(self, name)) != N:
                raise DataError(f"column {name} has wrong length")
        if self.x.shape[0] != N:
            raise DataError("covariate matrix has wrong number of rows")
        if not self.covariate_names:
            object.__setattr__(
                self, "covariate_names", tuple(f"x{k + 1}" for k in range(self.p))
            )
        elif len(self.covariate_names) != self.p:
            raise DataError("covariate_names length differs from covariate dimension")
        rct = self.is_rct
        if np.any(np.isnan(self.u[rct])) or np.any(self.u[rct] < 0):
            raise DataError("negative or missing follow-up time on a trial row")
        if np.any(~(self.design_weight[~rct] > 0)):
            raise DataError("nonpositive design weight on an observational row")
        if not np.all(np.isfinite(self.x)):
            raise DataError("non-finite covariate")

    # -- counts -----------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.is_rct.sum())

    @property
    def m(self) -> int:
        return int((~self.is_rct).sum())

    @property
    def p(self) -> int:
        return int(self.x.shape[1]) if self.x.ndim == 2 else 0

    def __len__(self) -> int:
        return len(self.ids)

    # -- views ------------------------------------------------------------
    @property
    def rct(self) -> np.ndarray:
        """Row indices of trial subjects."""
        return np.flatnonzero(self.is_rct)

    @property
    def os(self) -> np.ndarray:
        """Row indices of observational subjects."""
        return np.flatnonzero(~self.is_rct)

    @property
    def records(self) -> list[SubjectRecord]:
        out = []
        for k in range(len(self)):
            if self.is_rct[k]:
                out.append(SubjectRecord(self.ids[k], RCT, tuple(self.x[k]),
                                         u=float(self.u[k]), event=bool(self.event[k]),
                                         a=bool(self.a[k])))
            else:
                out.append(SubjectRecord(self.ids[k], OS, tuple(self.x[k]),
                                         design_weight=float(self.design_weight[k])))
        return out

    def take(self, rows: Sequence[int]) -> "CombinedDataset":
        """Subset (or resample) rows; duplicated indices produce duplicated rows."""
        rows = np.asarray(rows, dtype=int)
        return CombinedDataset(
            ids=self.ids[rows], is_rct=self.is_rct[rows], x=self.x[rows],
            u=self.u[rows], event=self.event[rows], a=self.a[rows],
            design_weight=self.design_weight[rows],
            covariate_names=self.covariate_names,
        )

    def fingerprint(self) -> int:
        return hash((self.x.tobytes(), self.u.tobytes(), self.is_rct.tobytes()))

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord],
                     covariate_names: Sequence[str] = ()) -> "CombinedDataset":
        records = list(records)
        dims = {len(r.x) for r in records}
        if len(dims) > 1:
            raise DataError(f"records have differing covariate dimensions {sorted(dims)}")
        p = dims.pop() if dims else len(covariate_names)
        is_rct = [r.source == RCT for r in records]
        return cls(
            ids=[r.id for r in records],
            is_rct=is_rct,
            x=np.array([r.x for r in records], dtype=float).reshape(len(records), p),
            u=[r.u if r.u is not None else np.nan for r in records],
            event=[bool(r.event) for r in records],
            a=[bool(r.a) for r in records],
            design_weight=[r.design_weight if r.design_weight is not None else np.nan
                           for r in records],
            covariate_names=tuple(covariate_names),
        )

    @classmethod
    def from_arrays(cls, x_rct, u, event, a, x_os, design_weight=1.0,
                    ids=None) -> "CombinedDataset":
        """Assemble a dataset with all trial rows first, then observational rows."""
        x_rct = np.atleast_2d(np.asarray(x_rct, dtype=float))
        x_os = np.atleast_2d(np.asarray(x_os, dtype=float))
        if x_rct.shape[0] == 1 and len(np.atleast_1d(u)) != 1:
            x_rct = x_rct.T
        n, m = len(np.atleast_1d(u)), x_os.shape[0]
        if x_os.size == 0:
            x_os = np.empty((0, x_rct.shape[1]))
            m = 0
        if ids is None:
            ids = [f"r{i}" for i in range(n)] + [f"o{j}" for j in range(m)]
        d = np.broadcast_to(np.asarray(design_weight, dtype=float), (m,))
        return cls(
            ids=ids,
            is_rct=np.r_[np.ones(n, bool), np.zeros(m, bool)],
            x=np.vstack([x_rct, x_os]),
            u=np.r_[np.asarray(u, float).ravel(), np.full(m, np.nan)],
            event=np.r_[np.asarray(event, bool).ravel(), np.zeros(m, bool)],
            a=np.r_[np.asarray(a, bool).ravel(), np.zeros(m, bool)],
            design_weight=np.r_[np.full(n, np.nan), d],
        )


def arm_subset(data: CombinedDataset, a: bool) -> CombinedDataset:
    """Keep trial rows with treatment ``a`` and every observational row."""
    keep = ~data.is_rct | (data.a == bool(a))
    return data.take(np.flatnonzero(keep))


def validate_for_fitting(data: CombinedDataset) -> None:
    """Refuse datasets that cannot support arm-specific Cox fits."""
    if data.n == 0:
        raise DataError("no RCT rows")
    if data.m == 0:
        raise DataError("no OS rows")
    for arm in (True, False):
        mask = data.is_rct & (data.a == arm)
        if mask.sum() < 2:
            raise DataError(f"arm {int(arm)} has fewer than 2 trial subjects")
        if not data.event[mask].any():
            raise DataError(f"arm {int(arm)} has no events")


# -- CSV ------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnMap:
    """Header names used by :func:`ingest_csv` / :func:`write_csv`.

    ``covariates=None`` means every header of the form ``x<k>`` in file order.
    """

    id: str = "id"
    source: str = "source"
    u: str = "u"
    event: str = "event"
    a: str = "a"
    design_weight: str = "design_weight"
    covariates: tuple[str, ...] | None = None


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_bool(value: str, row: str, col: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise DataError(f"row {row!r}: column {col!r} is not boolean: {value!r}")


def _parse_float(value: str, row: str, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"row {row!r}: column {col!r} is not numeric: {value!r}") from None


def ingest_csv(path, schema: ColumnMap = ColumnMap()) -> CombinedDataset:
    """Read and validate a combined-sample CSV file.

    Empty cells denote absent optional fields. Lines starting with ``#`` before
    the header are ignored, so files written by :func:`write_csv` round-trip.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    header = reader.fieldnames or []
    covs = schema.covariates
    if covs is None:
        covs = tuple(h for h in header if h.startswith("x") and h[1:].isdigit())
    required = [schema.id, schema.source, schema.u, schema.event, schema.a,
                schema.design_weight, *covs]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if not covs:
        raise DataError("no covariate columns")

    records = []
    for line_no, row in enumerate(reader, start=2):
        rid = row[schema.id].strip() or f"line{line_no}"
        src = row[schema.source].strip().lower()
        if src not in (RCT, OS):
            raise DataError(f"row {rid!r}: source must be rct or os, got {row[schema.source]!r}")
        x = tuple(_parse_float(row[c], rid, c) for c in covs)
        cells = {k: row[getattr(schema, k)].strip() for k in ("u", "event", "a", "design_weight")}
        if src == RCT:
            absent = [k for k in ("u", "event", "a") if cells[k] == ""]
            if absent:
                raise DataError(f"row {rid!r}: RCT row missing {', '.join(absent)}")
            if cells["design_weight"] != "":
                raise DataError(f"row {rid!r}: schema violation, RCT row carries design_weight")
            rec = SubjectRecord(rid, RCT, x, u=_parse_float(cells["u"], rid, "u"),
                                event=_parse_bool(cells["event"], rid, "event"),
                                a=_parse_bool(cells["a"], rid, "a"))
        else:
            present = [k for k in ("u", "event", "a") if cells[k] != ""]
            if present:
                raise DataError(f"row {rid!r}: schema violation, OS row carries {', '.join(present)}")
            if cells["design_weight"] == "":
                raise DataError(f"row {rid!r}: OS row missing design_weight")
            rec = SubjectRecord(rid, OS, x, design_weight=_parse_float(
                cells["design_weight"], rid, "design_weight"))
        records.append(rec)
    return CombinedDataset.from_records(records, covariate_names=covs)


def write_csv(data: CombinedDataset, path, schema: ColumnMap = ColumnMap(),
              header_comment: str | None = None) -> None:
    """Write ``data`` in the layout read by :func:`ingest_csv`.

    Floats are written with ``repr`` so values round-trip exactly.
    """
    covs = schema.covariates or data.covariate_names
    cols = [schema.id, schema.source, schema.u, schema.event, schema.a, *covs,
            schema.design_weight]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for k in range(len(data)):
            xs = [repr(float(v)) for v in data.x[k]]
            if data.is_rct[k]:
                w.writerow([data.ids[k], RCT, repr(float(data.u[k])), int(data.event[k]),
                            int(data.a[k]), *xs, ""])
            else:
                w.writerow([data.ids[k], OS, "", "", "", *xs,
                            repr(float(data.design_weight[k]))])


# -- step functions -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepSurvival:
    """Right-continuous piecewise-constant curve.

    ``value_at_zero`` holds on ``[0, times[0])`` and ``values[k]`` on
    ``[times[k], times[k+1])``.
    """

    times: np.ndarray
    values: np.ndarray
    value_at_zero: float = 1.0

    def __post_init__(self):
        t = _frozen(self.times, float)
        v = _frozen(self.values, float)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if t.size and (np.any(np.diff(t) <= 0) or t[0] < 0):
            raise ValueError("times must be strictly increasing and nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "value_at_zero", float(self.value_at_zero))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        full = np.r_[self.value_at_zero, self.values]
        out = full[idx + 1]
        return out if out.ndim else float(out)

    def left_limit(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left") - 1
        out = np.r_[self.value_at_zero, self.values][idx + 1]
        return out if out.ndim else float(out)

    def integrate(self, tau: float) -> float:
        """Exact integral over ``[0, tau]``."""
        if tau <= 0:
            return 0.0
        knots = np.r_[0.0, self.times[self.times < tau], tau]
        heights = np.r_[self.value_at_zero, self.values[self.times < tau]]
        return float(np.dot(heights, np.diff(knots)))

    def on_grid(self, grid) -> "StepSurvival":
        """Same curve re-expressed on a (super-)grid of jump times."""
        grid = np.unique(np.asarray(grid, dtype=float))
        return StepSurvival(grid, self(grid), self.value_at_zero)

    def to_rows(self):
        yield 0.0, self.value_at_zero
        yield from zip(self.times.tolist(), self.values.tolist())
