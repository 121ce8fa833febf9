"""Row and columnar-batch representations of archived sensor measurements.

Timestamps are integer microseconds since the Unix epoch, UTC, everywhere in
the library. Human-readable interfaces (fixture files, manifests, CLI output)
use ISO-8601 strings and convert at the boundary.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone

import numpy as np

from .errors import ValidationError

US_PER_SECOND = 1_000_000
US_PER_DAY = 86_400 * US_PER_SECOND

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_EPOCH_DATE = date(1970, 1, 1)

# Default archive epoch range: [1970-01-01, 2100-01-01).
MIN_TS_US = 0
MAX_TS_US = (date(2100, 1, 1) - _EPOCH_DATE).days * US_PER_DAY

# Sentinel for a missing status word in columnar form; None at the record level.
STATUS_NULL = int(np.iinfo(np.int32).min)

ALL_FIELDS = ("element_id", "ts", "value", "status")


def to_micros(when: datetime | date | int) -> int:
    """Convert a datetime/date to microseconds since epoch (naive = UTC)."""
    if isinstance(when, int):
        return when
    if isinstance(when, datetime):
        if when.tzinfo is None:
            when = when.replace(tzinfo=timezone.utc)
        delta = when - _EPOCH
    else:
        delta = datetime(when.year, when.month, when.day, tzinfo=timezone.utc) - _EPOCH
    return delta // timedelta(microseconds=1)


def from_micros(ts_us: int) -> datetime:
    return _EPOCH + timedelta(microseconds=int(ts_us))


def iso_from_micros(ts_us: int) -> str:
    return from_micros(ts_us).isoformat()


def micros_from_iso(text: str) -> int:
    """Parse an ISO-8601 timestamp or date; naive values are taken as UTC."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise ValidationError(f"invalid ISO-8601 timestamp: {text!r}") from exc
    return to_micros(parsed)


def day_of(ts_us: int) -> date:
    """UTC calendar day containing the timestamp."""
    return _EPOCH_DATE + timedelta(days=int(ts_us) // US_PER_DAY)


def day_start_us(day: date) -> int:
    return (day - _EPOCH_DATE).days * US_PER_DAY


def parse_duration_us(text: str | float | int) -> int:
    """Parse a duration like '90s', '30m', '24h', '1d' (bare numbers = seconds)."""
    if isinstance(text, (int, float)):
        return int(text * US_PER_SECOND)
    raw = text.strip().lower()
    factors = {"ms": 1_000, "s": US_PER_SECOND, "m": 60 * US_PER_SECOND,
               "h": 3_600 * US_PER_SECOND, "d": US_PER_DAY}
    for suffix in ("ms", "s", "m", "h", "d"):
        if raw.endswith(suffix):
            number = raw[: -len(suffix)]
            break
    else:
        suffix, number = "s", raw
    try:
        return int(float(number) * factors[suffix])
    except ValueError as exc:
        raise ValidationError(f"invalid duration: {text!r}") from exc


@dataclass(frozen=True, slots=True)
class EventRecord:
    """One archived measurement: who, when, what, and an optional status word.

    (element_id, ts) is unique within a table; duplicates are collapsed on
    write. `value` and `status` are None only when projected away by a scan.
    """

    element_id: int
    ts: int
    value: float | None
    status: int | None = None


@dataclass
class EventColumns:
    """A columnar batch of measurements.

    `value` / `status` are None when the corresponding field was not
    projected. Missing status words are STATUS_NULL in the array and None at
    the record level.
    """

    element_id: np.ndarray
    ts: np.ndarray
    value: np.ndarray | None = None
    status: np.ndarray | None = None

    def __post_init__(self):
        self.element_id = np.asarray(self.element_id, dtype=np.uint32)
        self.ts = np.asarray(self.ts, dtype=np.int64)
        if self.value is not None:
            self.value = np.asarray(self.value, dtype=np.float64)
        if self.status is not None:
            self.status = np.asarray(self.status, dtype=np.int32)
        n = len(self.element_id)
        for name in ("ts", "value", "status"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise ValidationError(f"column length mismatch: {name}")

    def __len__(self) -> int:
        return len(self.element_id)

    @classmethod
    def empty(cls, *, with_value: bool = True, with_status: bool = True) -> "EventColumns":
        return cls(
            element_id=np.empty(0, dtype=np.uint32),
            ts=np.empty(0, dtype=np.int64),
            value=np.empty(0, dtype=np.float64) if with_value else None,
            status=np.empty(0, dtype=np.int32) if with_status else None,
        )

    @classmethod
    def from_records(cls, records: Iterable[EventRecord]) -> "EventColumns":
        rows = list(records)
        if not rows:
            return cls.empty()
        return cls(
            element_id=np.array([r.element_id for r in rows], dtype=np.uint32),
            ts=np.array([r.ts for r in rows], dtype=np.int64),
            value=np.array(
                [np.nan if r.value is None else r.value for r in rows], dtype=np.float64
            ),
            status=np.array(
                [STATUS_NULL if r.status is None else r.status for r in rows], dtype=np.int32
            ),
        )

    def take(self, selector: np.ndarray) -> "EventColumns":
        """Subset by boolean mask or index array."""
        return EventColumns(
            element_id=self.element_id[selector],
            ts=self.ts[selector],
            value=None if self.value is None else self.value[selector],
            status=None if self.status is None else self.status[selector],
        )

    def is_sorted_by_key(self) -> bool:
        """True if rows are ordered by (element_id, ts)."""
        if len(self) < 2:
            return True
        eid, ts = self.element_id, self.ts
        de = np.diff(eid.astype(np.int64))
        return bool(np.all((de > 0) | ((de == 0) & (np.diff(ts) >= 0))))

    def sort_by_key(self) -> "EventColumns":
        """Stable sort by (element_id, ts); later input rows stay later on ties."""
        if self.is_sorted_by_key():
            return self
        order = np.lexsort((self.ts, self.element_id))
        return self.take(order)

    def iter_records(self) -> Iterator[EventRecord]:
        eid = self.element_id.tolist()
        ts = self.ts.tolist()
        val = self.value.tolist() if self.value is not None else None
        st = self.status.tolist() if self.status is not None else None
        for i in range(len(eid)):
            yield EventRecord(
                element_id=eid[i],
                ts=ts[i],
                value=None if val is None else val[i],
                status=None if st is None or st[i] == STATUS_NULL else st[i],
            )

    def to_records(self) -> list[EventRecord]:
        return list(self.iter_records())

    @staticmethod
    def concat(batches: Sequence["EventColumns"]) -> "EventColumns":
        batches = [b for b in batches if len(b)]
        if not batches:
            return EventColumns.empty()
        if len(batches) == 1:
            return batches[0]
        has_value = batches[0].value is not None
        has_status = batches[0].status is not None
        for b in batches:
            if (b.value is not None) != has_value or (b.status is not None) != has_status:
                raise ValidationError("cannot concat batches with mismatched projections")
        return EventColumns(
            element_id=np.concatenate([b.element_id for b in batches]),
            ts=np.concatenate([b.ts for b in batches]),
            value=np.concatenate([b.value for b in batches]) if has_value else None,
            status=np.concatenate([b.status for b in batches]) if has_status else None,
        )


def group_starts(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    """Start indices of maximal runs of equal (primary, secondary) pairs.

    Assumes rows are ordered so equal pairs are contiguous.
    """
    change = np.empty(len(primary), dtype=bool)
    change[0] = True
    change[1:] = (primary[1:] != primary[:-1]) | (secondary[1:] != secondary[:-1])
    return np.flatnonzero(change)


def as_batches(data) -> Iterator[EventColumns]:
    """Normalize record-level or batch-level input to EventColumns batches."""
    if isinstance(data, EventColumns):
        yield data
        return
    pending: list[EventRecord] = []
    for item in data:
        if isinstance(item, EventColumns):
            if pending:
                yield EventColumns.from_records(pending)
                pending = []
            yield item
        else:
            pending.append(item)
    if pending:
        yield EventColumns.from_records(pending)
