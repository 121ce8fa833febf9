"""Scheduled synchronization from transactional sources into the store.

The large append-only measurement table is synced incrementally from a
watermark (re-reading a small overlap window so late arrivals are never
missed; deduplication makes the replay idempotent). Small, less dynamic
tables are fully rewritten each cycle.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .errors import CommitConflictError, SourceError
from .records import EventColumns, day_of, iso_from_micros, US_PER_DAY
from .sources import Source
from .storage import PartitionMeta, TableStore, Watermark, merge_partition_meta

MODE_INCREMENTAL = "incremental"
MODE_FULL_OVERWRITE = "full_overwrite"


@dataclass
class SyncReport:
    """Outcome of one sync attempt for one table."""

    table: str
    mode: str
    rows_read: int = 0
    rows_written: int = 0
    partitions_touched: list[date] = field(default_factory=list)
    old_watermark: int | None = None
    new_watermark: int | None = None
    duration_s: float = 0.0
    manifest_version: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "mode": self.mode,
            "rows_read": self.rows_read,
            "rows_written": self.rows_written,
            "partitions_touched": [d.isoformat() for d in self.partitions_touched],
            "old_watermark": _iso_or_none(self.old_watermark),
            "new_watermark": _iso_or_none(self.new_watermark),
            "duration_s": round(self.duration_s, 6),
            "manifest_version": self.manifest_version,
            "error": self.error,
        }


def _iso_or_none(ts: int | None) -> str | None:
    return None if ts is None else iso_from_micros(ts)


def _existing_keys(store: TableStore, meta: PartitionMeta) -> set[tuple[int, int]]:
    cols, _ = store.read_partition_columns(meta, ("element_id", "ts"))
    return set(zip(cols.element_id.tolist(), cols.ts.tolist()))


def _split_by_day(batch: EventColumns) -> Iterator[tuple[date, EventColumns]]:
    """Split a ts-ordered batch into per-day runs."""
    if len(batch) == 0:
        return
    days = batch.ts // US_PER_DAY
    bounds = np.flatnonzero(np.diff(days)) + 1
    start = 0
    for stop in list(bounds) + [len(batch)]:
        yield day_of(int(batch.ts[start])), batch.take(slice(start, stop))
        start = stop


class _DayWriter:
    """Accumulates one day's incoming rows, then writes a single new file."""

    def __init__(
        self,
        store: TableStore,
        day: date,
        existing_meta: PartitionMeta | None,
    ):
        self.store = store
        self.day = day
        self.existing_meta = existing_meta
        self._existing_keys: set[tuple[int, int]] | None = None
        self.chunks: list[EventColumns] = []
        self.rows_written = 0

    def add(self, chunk: EventColumns) -> None:
        if self.existing_meta is not None:
            if self._existing_keys is None:
                self._existing_keys = _existing_keys(self.store, self.existing_meta)
            keys = self._existing_keys
            keep = np.fromiter(
                (
                    (e, t) not in keys
                    for e, t in zip(chunk.element_id.tolist(), chunk.ts.tolist())
                ),
                dtype=bool,
                count=len(chunk),
            )
            chunk = chunk.take(keep)
        if len(chunk):
            self.chunks.append(chunk)

    def flush(self) -> PartitionMeta | None:
        """Write the accumulated rows; returns the day's merged metadata."""
        if not self.chunks:
            return None
        new_meta = self.store.write_partition(self.day, EventColumns.concat(self.chunks))
        self.chunks = []
        self.rows_written = new_meta.row_count
        if self.existing_meta is not None:
            return merge_partition_meta(self.existing_meta, new_meta)
        return new_meta


def _run_sync(
    source: Source,
    table: str,
    store: TableStore,
    *,
    mode: str,
    overlap_us: int | None = None,
) -> SyncReport:
    started = time.perf_counter()
    manifest = store.read_manifest()
    watermark = manifest.watermark
    overlap = watermark.overlap_us if overlap_us is None else overlap_us
    report = SyncReport(table=table, mode=mode, old_watermark=watermark.last_ts)

    if mode == MODE_INCREMENTAL:
        cursor = None if watermark.last_ts is None else watermark.last_ts - overlap
        anti_join = True
    else:
        cursor = None
        anti_join = False

    changes: dict[date, PartitionMeta] = {}
    writers: dict[date, _DayWriter] = {}
    max_ts: int | None = None

    def flush(day: date) -> None:
        writer = writers.pop(day)
        merged = writer.flush()
        report.rows_written += writer.rows_written
        if writer.rows_written:
            report.partitions_touched.append(day)
        if merged is not None:
            changes[day] = merged

    for batch in source.fetch(cursor):
        if len(batch) == 0:
            continue
        report.rows_read += len(batch)
        max_ts = max(max_ts or 0, int(batch.ts.max()))
        for day, chunk in _split_by_day(batch):
            # Source batches arrive in ts order, so any day other than the
            # current chunk's is complete and can be flushed.
            for done in [d for d in writers if d != day]:
                flush(done)
            if day not in writers:
                # A day already flushed this sync (possible only with an
                # unsorted source) appends on top of its merged metadata.
                existing = changes.get(day)
                if existing is None and anti_join:
                    existing = manifest.partitions.get(day)
                writers[day] = _DayWriter(store, day, existing)
            writers[day].add(chunk)
    for day in list(writers):
        flush(day)

    old_last = watermark.last_ts
    new_last = old_last if max_ts is None else max(max_ts, old_last or 0)
    new_watermark = Watermark(table, new_last, overlap)

    if mode == MODE_FULL_OVERWRITE:
        committed = store.commit_manifest(
            changes.values(), new_watermark, replace=True, base_version=manifest.version
        )
        report.manifest_version = committed.version
    elif changes or new_last != old_last:
        committed = store.commit_manifest(
            changes.values(), new_watermark, base_version=manifest.version
        )
        report.manifest_version = committed.version
    else:
        report.manifest_version = manifest.version

    report.new_watermark = new_last
    report.partitions_touched = sorted(set(report.partitions_touched))
    report.duration_s = time.perf_counter() - started
    return report


def _with_conflict_retry(fn) -> SyncReport:
    try:
        return fn()
    except CommitConflictError:
        return fn()


def sync_incremental(
    source: Source, table: str, store: TableStore, *, overlap_us: int | None = None
) -> SyncReport:
    """Pull rows beyond the watermark (minus overlap) into day partitions.

    Rows whose (element_id, ts) already exist in the store are dropped, so an
    immediate re-run writes nothing. The watermark only ever advances. On a
    commit conflict the sync is retried once from scratch; on source failure
    the manifest is left untouched.
    """
    with store.writer_lock():
        return _with_conflict_retry(
            lambda: _run_sync(source, table, store, mode=MODE_INCREMENTAL, overlap_us=overlap_us)
        )


def sync_full_overwrite(
    source: Source, table: str, store: TableStore, *, overlap_us: int | None = None
) -> SyncReport:
    """Rewrite the table from the source; the new manifest references only
    newly written partitions. Prior versions stay readable."""
    with store.writer_lock():
        return _with_conflict_retry(
            lambda: _run_sync(
                source, table, store, mode=MODE_FULL_OVERWRITE, overlap_us=overlap_us
            )
        )


@dataclass(frozen=True)
class TableSyncSpec:
    """One (table, mode, source) entry of a sync schedule."""

    table: str
    mode: str
    source_factory: Callable[[], Source]
    overlap_us: int | None = None


@dataclass(frozen=True)
class ScheduleConfig:
    store_root: str
    tables: tuple[TableSyncSpec, ...]
    cadence_s: float = 86_400.0


def run_schedule(
    config: ScheduleConfig,
    *,
    cycles: int | None = 1,
    sleep_fn=time.sleep,
    store_factory=None,
) -> Iterator[SyncReport]:
    """Run sync cycles over all configured tables, in config order.

    One report per table per cycle; a failing table is reported in-stream and
    does not block the others. ``cycles=None`` loops forever at the configured
    cadence.
    """
    store_factory = store_factory or (lambda name: TableStore(config.store_root, name))
    cycle = 0
    while cycles is None or cycle < cycles:
        cycle_started = time.monotonic()
        for spec in config.tables:
            started = time.perf_counter()
            try:
                source = spec.source_factory()
                if spec.mode == MODE_INCREMENTAL:
                    report = sync_incremental(
                        source, spec.table, store_factory(spec.table), overlap_us=spec.overlap_us
                    )
                elif spec.mode == MODE_FULL_OVERWRITE:
                    report = sync_full_overwrite(
                        source, spec.table, store_factory(spec.table), overlap_us=spec.overlap_us
                    )
                else:
                    raise SourceError(f"unknown sync mode {spec.mode!r}")
            except Exception as exc:
                report = SyncReport(
                    table=spec.table,
                    mode=spec.mode,
                    duration_s=time.perf_counter() - started,
                    error=f"{type(exc).__name__}: {exc}",
                )
            yield report
        cycle += 1
        if cycles is None or cycle < cycles:
            remaining = config.cadence_s - (time.monotonic() - cycle_started)
            if remaining > 0:
                sleep_fn(remaining)
