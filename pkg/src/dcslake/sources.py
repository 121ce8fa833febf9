"""Clients for upstream data: fixture files, SQL databases, in-memory arrays.

All sources expose the same contract: ``fetch(after_ts)`` yields columnar
batches of rows with ``ts > after_ts`` (all rows when None), ordered by ts.
Sources are read-only and cheap to instantiate per sync job.

Fixture file format (one record per line, tab-separated)::

    element_id<TAB>iso8601_ts<TAB>value<TAB>status

where status may be empty. Run-interval files use
``run_number<TAB>start<TAB>end<TAB>kind`` and mask files
``start<TAB>end<TAB>label``; lines starting with '#' are comments.
"""

from __future__ import annotations

import csv
import os
import re
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd

from .errors import ParseError, SourceError, ValidationError
from .records import (
    STATUS_NULL,
    EventColumns,
    iso_from_micros,
    micros_from_iso,
    to_micros,
)

DEFAULT_BATCH_ROWS = 500_000

RUN_KINDS = ("physics", "special", "other")


class Source(Protocol):
    def fetch(self, after_ts: int | None = None) -> Iterator[EventColumns]:
        """Yield batches with ts > after_ts, ordered by ts."""
        ...


@dataclass(frozen=True)
class RunInterval:
    """One data-taking period, used for interval semi-joins."""

    run_number: int
    start_ts: int
    end_ts: int
    run_kind: str = "physics"


class ArraySource:
    """In-memory source over a columnar batch; used by tests and the generator."""

    def __init__(self, columns: EventColumns, batch_rows: int = DEFAULT_BATCH_ROWS):
        order = np.argsort(columns.ts, kind="stable")
        if len(columns) and not np.array_equal(order, np.arange(len(columns))):
            columns = columns.take(order)
        self._cols = columns
        self._batch_rows = batch_rows

    def fetch(self, after_ts: int | None = None) -> Iterator[EventColumns]:
        cols = self._cols
        start = 0
        if after_ts is not None:
            start = int(np.searchsorted(cols.ts, after_ts, side="right"))
        for i in range(start, len(cols), self._batch_rows):
            yield cols.take(slice(i, i + self._batch_rows))


class FixtureSource:
    """Newline-delimited TSV source, diff-friendly for tests and desk runs.

    The whole file is parsed eagerly (desk scale); rows are returned in ts
    order even if the file is not sorted.
    """

    def __init__(self, path: str | Path, batch_rows: int = DEFAULT_BATCH_ROWS):
        self.path = Path(path)
        self._batch_rows = batch_rows

    def fetch(self, after_ts: int | None = None) -> Iterator[EventColumns]:
        cols = self._load()
        yield from ArraySource(cols, self._batch_rows).fetch(after_ts)

    def _load(self) -> EventColumns:
        if not self.path.exists():
            raise SourceError(f"fixture file not found: {self.path}")
        try:
            frame = pd.read_csv(
                self.path,
                sep="\t",
                header=None,
                names=["element_id", "ts", "value", "status"],
                dtype={"element_id": np.uint32, "value": np.float64, "status": "Int32"},
                comment="#",
                skip_blank_lines=True,
                float_precision="round_trip",
            )
            if len(frame) == 0:
                return EventColumns.empty()
            if frame["value"].isna().any() or not np.isfinite(frame["value"]).all():
                raise ValueError("missing or non-finite value")
            ts = pd.to_datetime(frame["ts"], utc=True, format="ISO8601")
            if ts.isna().any():
                raise ValueError("unparseable timestamp")
        except pd.errors.EmptyDataError:
            return EventColumns.empty()
        except (ValueError, TypeError, pd.errors.ParserError):
            self._diagnose()
            raise ParseError(f"malformed fixture file: {self.path}")
        status = frame["status"].fillna(STATUS_NULL).astype(np.int32).to_numpy()
        return EventColumns(
            element_id=frame["element_id"].to_numpy(),
            ts=ts.astype(np.int64).to_numpy() // 1_000,
            value=frame["value"].to_numpy(),
            status=status,
        )

    def _diagnose(self) -> None:
        """Slow pass to locate the first malformed line for the error message."""
        import math

        with open(self.path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                parts = line.rstrip("\n").split("\t")
                # A missing trailing status field is tolerated (= empty status).
                if len(parts) not in (3, 4):
                    raise ParseError(
                        f"{self.path}:{line_no}: expected 4 tab-separated fields, "
                        f"got {len(parts)}",
                        line_no,
                    )
                eid, ts, value = parts[:3]
                status = parts[3] if len(parts) == 4 else ""
                try:
                    if int(eid) < 0:
                        raise ValueError
                    micros_from_iso(ts)
                    if not math.isfinite(float(value)):
                        raise ValueError
                    if status:
                        int(status)
                except (ValueError, ValidationError):
                    raise ParseError(
                        f"{self.path}:{line_no}: malformed record {stripped!r}", line_no
                    ) from None


_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.$]*$")


def _safe_ident(name: str) -> str:
    if not _IDENT_RE.match(name):
        raise ValidationError(f"unsafe SQL identifier: {name!r}")
    return name


def _ts_to_micros(value) -> int:
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        return micros_from_iso(value)
    return to_micros(value)


class SqlSource:
    """Generic SQL client issuing only portable range queries.

    The URL may reference environment variables (``${VAR}``) so credentials
    stay out of config files. The timestamp column may hold integer
    microseconds, native timestamps, or ISO strings (``ts_kind`` selects the
    cursor encoding used in the WHERE clause).
    """

    def __init__(
        self,
        url: str,
        table: str,
        *,
        ts_column: str = "ts",
        element_column: str = "element_id",
        value_column: str = "value",
        status_column: str = "status",
        ts_kind: str = "micros",
        batch_rows: int = DEFAULT_BATCH_ROWS,
    ):
        import sqlalchemy

        if ts_kind not in ("micros", "iso", "datetime"):
            raise ValidationError(f"unknown ts_kind: {ts_kind!r}")
        self._sa = sqlalchemy
        self.url = os.path.expandvars(url)
        self.table = _safe_ident(table)
        self.ts_column = _safe_ident(ts_column)
        self.element_column = _safe_ident(element_column)
        self.value_column = _safe_ident(value_column)
        self.status_column = _safe_ident(status_column)
        self.ts_kind = ts_kind
        self._batch_rows = batch_rows

    def _cursor_param(self, after_ts: int):
        if self.ts_kind == "micros":
            return int(after_ts)
        if self.ts_kind == "iso":
            return iso_from_micros(after_ts)
        from .records import from_micros

        return from_micros(after_ts)

    def fetch(self, after_ts: int | None = None) -> Iterator[EventColumns]:
        sql = (
            f"SELECT {self.element_column}, {self.ts_column}, "
            f"{self.value_column}, {self.status_column} FROM {self.table}"
        )
        params = {}
        if after_ts is not None:
            sql += f" WHERE {self.ts_column} > :cursor"
            params["cursor"] = self._cursor_param(after_ts)
        sql += f" ORDER BY {self.ts_column}"
        try:
            engine = self._sa.create_engine(self.url)
        except Exception as exc:
            raise SourceError(f"cannot open source {self.url!r}: {exc}") from exc
        try:
            with engine.connect() as conn:
                result = conn.execute(self._sa.text(sql), params)
                while True:
                    rows = result.fetchmany(self._batch_rows)
                    if not rows:
                        break
                    yield EventColumns(
                        element_id=np.array([r[0] for r in rows], dtype=np.uint32),
                        ts=np.array([_ts_to_micros(r[1]) for r in rows], dtype=np.int64),
                        value=np.array([r[2] for r in rows], dtype=np.float64),
                        status=np.array(
                            [STATUS_NULL if r[3] is None else r[3] for r in rows],
                            dtype=np.int32,
                        ),
                    )
        except SourceError:
            raise
        except Exception as exc:
            raise SourceError(f"source query failed on {self.table}: {exc}") from exc
        finally:
            engine.dispose()


def _merge_per_kind(intervals: list[RunInterval]) -> list[RunInterval]:
    """Merge overlapping intervals of the same kind; earlier run number kept."""
    merged: list[RunInterval] = []
    for kind in sorted({iv.run_kind for iv in intervals}):
        group = sorted(
            (iv for iv in intervals if iv.run_kind == kind),
            key=lambda iv: (iv.start_ts, iv.end_ts),
        )
        for iv in group:
            if merged and merged[-1].run_kind == kind and iv.start_ts < merged[-1].end_ts:
                prev = merged[-1]
                merged[-1] = RunInterval(
                    prev.run_number, prev.start_ts, max(prev.end_ts, iv.end_ts), kind
                )
            else:
                merged.append(iv)
    merged.sort(key=lambda iv: (iv.start_ts, iv.end_ts, iv.run_kind))
    return merged


def fetch_run_intervals(
    provider: str | Path | Iterable[tuple],
) -> list[RunInterval]:
    """Load run intervals from a file or row iterable; sorted, merged per kind.

    Rows carry (run_number, start, end, kind). Intervals with start >= end
    are rejected.
    """
    raw: list[RunInterval] = []
    if isinstance(provider, (str, Path)):
        path = Path(provider)
        if not path.exists():
            raise SourceError(f"run interval file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter="\t")
            for line_no, parts in enumerate(reader, start=1):
                if not parts or parts[0].lstrip().startswith("#"):
                    continue
                if len(parts) != 4:
                    raise ParseError(
                        f"{path}:{line_no}: expected 4 fields, got {len(parts)}", line_no
                    )
                raw.append(_make_run(parts[0], parts[1], parts[2], parts[3]))
    else:
        for row in provider:
            raw.append(_make_run(*row))
    return _merge_per_kind(raw)


def _make_run(run_number, start, end, kind) -> RunInterval:
    start_us = start if isinstance(start, int) else micros_from_iso(str(start))
    end_us = end if isinstance(end, int) else micros_from_iso(str(end))
    kind = str(kind).strip().lower()
    if kind not in RUN_KINDS:
        raise ValidationError(f"unknown run kind {kind!r} (expected one of {RUN_KINDS})")
    if start_us >= end_us:
        raise ValidationError(
            f"run {run_number}: start {iso_from_micros(start_us)} is not before "
            f"end {iso_from_micros(end_us)}"
        )
    return RunInterval(int(run_number), start_us, end_us, kind)


def write_run_intervals(path: str | Path, runs: Iterable[RunInterval]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# run_number\tstart\tend\tkind\n")
        for run in runs:
            fh.write(
                f"{run.run_number}\t{iso_from_micros(run.start_ts)}\t"
                f"{iso_from_micros(run.end_ts)}\t{run.run_kind}\n"
            )


def load_mask_intervals(path: str | Path) -> list[tuple[int, int, str]]:
    """Read (start, end, label) rows from a mask file."""
    path = Path(path)
    if not path.exists():
        raise SourceError(f"mask file not found: {path}")
    out: list[tuple[int, int, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for line_no, parts in enumerate(reader, start=1):
            if not parts or parts[0].lstrip().startswith("#"):
                continue
            if len(parts) < 2:
                raise ParseError(f"{path}:{line_no}: expected start and end", line_no)
            start = micros_from_iso(parts[0])
            end = micros_from_iso(parts[1])
            if start >= end:
                raise ValidationError(f"{path}:{line_no}: empty mask interval")
            out.append((start, end, parts[2] if len(parts) > 2 else ""))
    return out


def write_mask_intervals(
    path: str | Path, intervals: Iterable[tuple[int, int, str]]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# start\tend\tlabel\n")
        for start, end, label in intervals:
            fh.write(f"{iso_from_micros(start)}\t{iso_from_micros(end)}\t{label}\n")


def write_fixture(path: str | Path, columns: EventColumns) -> None:
    """Write a columnar batch in the fixture TSV format (ts order preserved)."""
    if columns.value is None or columns.status is None:
        raise ValidationError("fixture output requires value and status columns")
    ts_text = np.char.add(
        np.datetime_as_string(columns.ts.astype("datetime64[us]"), unit="us"), "Z"
    )
    # repr() is the shortest exact round-trip form; pandas' default float
    # formatting can lose the last digit.
    value_text = [repr(v) for v in columns.value.tolist()]
    status = pd.Series(columns.status, dtype="Int32")
    status[columns.status == STATUS_NULL] = pd.NA
    frame = pd.DataFrame(
        {
            "element_id": columns.element_id,
            "ts": ts_text,
            "value": value_text,
            "status": status,
        }
    )
    frame.to_csv(path, sep="\t", header=False, index=False, na_rep="")
