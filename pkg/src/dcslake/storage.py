"""Day-partitioned columnar table store with versioned manifests.

Layout, per table::

    <root>/<table>/date=YYYY-MM-DD/part-<seq>.parquet
    <root>/<table>/_manifests/manifest-<version>.json
    <root>/<table>/_manifests/CURRENT

A manifest is an immutable snapshot of the table: the set of partitions, their
files, exact per-partition statistics, and the sync watermark. ``CURRENT`` is
a text file holding the latest committed version and is only ever updated by
atomic rename, so a reader either sees the previous snapshot or the new one,
never a partial commit. Readers pin a manifest for the whole query; scans
prune partitions from manifest statistics before any file is opened and apply
row filters before records reach the caller.
"""

from __future__ import annotations

import itertools
import json
import os
import re
import time
from collections import deque
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.parquet as pq
from filelock import FileLock, Timeout

from .errors import (
    CommitConflictError,
    PartitionBoundaryError,
    ScanError,
    ValidationError,
)
from .records import (
    ALL_FIELDS,
    MAX_TS_US,
    MIN_TS_US,
    STATUS_NULL,
    US_PER_DAY,
    EventColumns,
    EventRecord,
    day_of,
    day_start_us,
    iso_from_micros,
    micros_from_iso,
)

_PART_FILE_RE = re.compile(r"^part-(\d{4,})\.parquet$")

DEFAULT_OVERLAP_US = 3_600 * 1_000_000  # 1 hour re-read window for late arrivals


@dataclass(frozen=True)
class Watermark:
    """Incremental-sync cursor: high-water timestamp plus re-read overlap."""

    table: str
    last_ts: int | None
    overlap_us: int = DEFAULT_OVERLAP_US

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "last_ts": None if self.last_ts is None else iso_from_micros(self.last_ts),
            "overlap_seconds": self.overlap_us / 1_000_000,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Watermark":
        last = obj.get("last_ts")
        return cls(
            table=obj["table"],
            last_ts=None if last is None else micros_from_iso(last),
            overlap_us=int(round(float(obj["overlap_seconds"]) * 1_000_000)),
        )


@dataclass(frozen=True)
class PartitionMeta:
    """Per-day file list with exact statistics over the partition's rows."""

    table: str
    day: date
    files: tuple[str, ...]
    row_count: int
    min_ts: int | None
    max_ts: int | None
    min_value: float | None
    max_value: float | None
    element_ids: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "day": self.day.isoformat(),
            "files": list(self.files),
            "row_count": self.row_count,
            "min_ts": None if self.min_ts is None else iso_from_micros(self.min_ts),
            "max_ts": None if self.max_ts is None else iso_from_micros(self.max_ts),
            "min_value": self.min_value,
            "max_value": self.max_value,
            "element_ids": list(self.element_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PartitionMeta":
        return cls(
            table=obj["table"],
            day=date.fromisoformat(obj["day"]),
            files=tuple(obj["files"]),
            row_count=int(obj["row_count"]),
            min_ts=None if obj["min_ts"] is None else micros_from_iso(obj["min_ts"]),
            max_ts=None if obj["max_ts"] is None else micros_from_iso(obj["max_ts"]),
            min_value=obj["min_value"],
            max_value=obj["max_value"],
            element_ids=tuple(int(e) for e in obj["element_ids"]),
        )


def merge_partition_meta(a: PartitionMeta, b: PartitionMeta) -> PartitionMeta:
    """Combine statistics of two file sets for the same (table, day)."""
    if a.table != b.table or a.day != b.day:
        raise ValidationError("cannot merge partition metadata across tables or days")
    if a.row_count == 0:
        return b
    if b.row_count == 0:
        return a
    return PartitionMeta(
        table=a.table,
        day=a.day,
        files=a.files + b.files,
        row_count=a.row_count + b.row_count,
        min_ts=min(a.min_ts, b.min_ts),
        max_ts=max(a.max_ts, b.max_ts),
        min_value=min(a.min_value, b.min_value),
        max_value=max(a.max_value, b.max_value),
        element_ids=tuple(sorted(set(a.element_ids) | set(b.element_ids))),
    )


@dataclass(frozen=True)
class Manifest:
    """Versioned, immutable snapshot of a table."""

    version: int
    table: str
    partitions: dict[date, PartitionMeta]
    watermark: Watermark
    created_at_us: int

    def time_span(self) -> tuple[int, int] | None:
        """(min_ts, max_ts + 1) over all partitions, or None if empty."""
        mins = [p.min_ts for p in self.partitions.values() if p.min_ts is not None]
        maxs = [p.max_ts for p in self.partitions.values() if p.max_ts is not None]
        if not mins:
            return None
        return min(mins), max(maxs) + 1

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "table": self.table,
            "created_at": iso_from_micros(self.created_at_us),
            "watermark": self.watermark.to_json(),
            "partitions": {
                day.isoformat(): meta.to_json()
                for day, meta in sorted(self.partitions.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        return cls(
            version=int(obj["version"]),
            table=obj["table"],
            partitions={
                date.fromisoformat(day): PartitionMeta.from_json(meta)
                for day, meta in sorted(obj["partitions"].items())
            },
            watermark=Watermark.from_json(obj["watermark"]),
            created_at_us=micros_from_iso(obj["created_at"]),
        )


@dataclass
class ScanStats:
    """Instrumentation for one scan: how much pruning saved."""

    partitions_total: int = 0
    partitions_opened: int = 0
    rows_scanned: int = 0
    rows_returned: int = 0

    def to_json(self) -> dict:
        return {
            "partitions_total": self.partitions_total,
            "partitions_opened": self.partitions_opened,
            "rows_scanned": self.rows_scanned,
            "rows_returned": self.rows_returned,
        }


@dataclass(frozen=True)
class ValueRange:
    """A value-range predicate, e.g. ``value > 0.45``.

    Bounds are optional; inclusivity is per bound. Used both to filter rows
    and to refute whole partitions from their min/max statistics.
    """

    min_value: float | None = None
    max_value: float | None = None
    min_inclusive: bool = False
    max_inclusive: bool = False

    def mask(self, values: np.ndarray) -> np.ndarray:
        keep = np.ones(len(values), dtype=bool)
        if self.min_value is not None:
            keep &= values >= self.min_value if self.min_inclusive else values > self.min_value
        if self.max_value is not None:
            keep &= values <= self.max_value if self.max_inclusive else values < self.max_value
        return keep

    def refuted_by(self, lo: float, hi: float) -> bool:
        """True when no value in [lo, hi] can satisfy the predicate."""
        if self.min_value is not None:
            if hi < self.min_value or (not self.min_inclusive and hi <= self.min_value):
                return True
        if self.max_value is not None:
            if lo > self.max_value or (not self.max_inclusive and lo >= self.max_value):
                return True
        return False


def _validate_time_range(time_range: tuple[int, int]) -> tuple[int, int]:
    lo, hi = int(time_range[0]), int(time_range[1])
    if lo >= hi:
        raise ValidationError(f"empty time range: [{lo}, {hi})")
    return lo, hi


def prune_partitions(
    manifest: Manifest,
    time_range: tuple[int, int],
    value_pred: ValueRange | None = None,
    element_pred: Iterable[int] | None = None,
) -> list[PartitionMeta]:
    """Select the partitions whose statistics cannot refute the query.

    A partition survives iff its [min_ts, max_ts] overlaps the half-open time
    range, its value range can satisfy ``value_pred``, and its element-id set
    intersects ``element_pred``. Sound by construction: statistics are exact,
    so a partition containing a matching row is never excluded.
    """
    lo, hi = _validate_time_range(time_range)
    wanted = None if element_pred is None else set(int(e) for e in element_pred)
    out: list[PartitionMeta] = []
    for day in sorted(manifest.partitions):
        meta = manifest.partitions[day]
        if meta.row_count == 0:
            continue
        if meta.max_ts < lo or meta.min_ts >= hi:
            continue
        if value_pred is not None and value_pred.refuted_by(meta.min_value, meta.max_value):
            continue
        if wanted is not None and wanted.isdisjoint(meta.element_ids):
            continue
        out.append(meta)
    return out


def sort_and_dedup_last(cols: EventColumns) -> EventColumns:
    """Order rows by (element_id, ts), keeping the last input row per key.

    Stable sort means that within one batch the last-written duplicate wins,
    and across concatenated files the newest file wins.
    """
    n = len(cols)
    if n == 0:
        return cols
    order = np.lexsort((cols.ts, cols.element_id))
    out = cols.take(order)
    if n > 1:
        dup_next = (out.element_id[1:] == out.element_id[:-1]) & (out.ts[1:] == out.ts[:-1])
        if dup_next.any():
            keep = np.ones(n, dtype=bool)
            keep[:-1][dup_next] = False
            out = out.take(keep)
    return out


def _ordered_parallel(fn: Callable, items: Sequence, workers: int) -> Iterator:
    """Map fn over items with a bounded thread pool, yielding in input order."""
    if workers <= 1 or len(items) <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        it = iter(items)
        for item in itertools.islice(it, workers * 2):
            pending.append(pool.submit(fn, item))
        while pending:
            result = pending.popleft().result()
            nxt = next(it, _SENTINEL)
            if nxt is not _SENTINEL:
                pending.append(pool.submit(fn, nxt))
            yield result


_SENTINEL = object()


class TableStore:
    """One table's files, manifests, and writer lock.

    Single writer per table (advisory file lock), any number of concurrent
    readers. ``commit_checkpoint``, when set, is called with a step name at
    each point of the commit sequence; tests use it to inject crashes.
    """

    def __init__(
        self,
        root: str | Path,
        table: str,
        *,
        scan_workers: int = 4,
        default_overlap_us: int = DEFAULT_OVERLAP_US,
        lock_timeout_s: float = 10.0,
        epoch_range: tuple[int, int] = (MIN_TS_US, MAX_TS_US),
    ):
        self.root = Path(root)
        self.table = table
        self.scan_workers = scan_workers
        self.default_overlap_us = default_overlap_us
        self.lock_timeout_s = lock_timeout_s
        self.epoch_range = epoch_range
        self.commit_checkpoint: Callable[[str], None] | None = None
        self.table_dir = self.root / table
        self.manifests_dir = self.table_dir / "_manifests"
        self.manifests_dir.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.manifests_dir / "LOCK"))

    # -- manifests ----------------------------------------------------------

    def _current_path(self) -> Path:
        return self.manifests_dir / "CURRENT"

    def manifest_path(self, version: int) -> Path:
        return self.manifests_dir / f"manifest-{version}.json"

    def current_version(self) -> int:
        try:
            return int(self._current_path().read_text().strip())
        except FileNotFoundError:
            return 0

    def list_versions(self) -> list[int]:
        versions = []
        for p in self.manifests_dir.glob("manifest-*.json"):
            try:
                versions.append(int(p.stem.split("-", 1)[1]))
            except ValueError:
                continue
        return sorted(versions)

    def _empty_manifest(self) -> Manifest:
        return Manifest(
            version=0,
            table=self.table,
            partitions={},
            watermark=Watermark(self.table, None, self.default_overlap_us),
            created_at_us=0,
        )

    def read_manifest(self, version: int | None = None) -> Manifest:
        """Load a manifest snapshot; the current one when version is None."""
        if version is None:
            version = self.current_version()
        if version == 0:
            return self._empty_manifest()
        path = self.manifest_path(version)
        try:
            obj = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ScanError(f"manifest not found: {path}") from exc
        return Manifest.from_json(obj)

    @contextmanager
    def writer_lock(self, timeout: float | None = None):
        """Advisory single-writer lock for this table (reentrant in-process)."""
        timeout = self.lock_timeout_s if timeout is None else timeout
        try:
            self._lock.acquire(timeout=timeout)
        except Timeout as exc:
            raise CommitConflictError(
                f"another writer holds the lock for table {self.table!r}"
            ) from exc
        try:
            yield self
        finally:
            self._lock.release()

    def _checkpoint(self, name: str) -> None:
        if self.commit_checkpoint is not None:
            self.commit_checkpoint(name)

    def commit_manifest(
        self,
        changes: Iterable[PartitionMeta],
        new_watermark: Watermark | None = None,
        *,
        replace: bool = False,
        base_version: int | None = None,
    ) -> Manifest:
        """Publish a new manifest version atomically.

        ``changes`` replace the per-day entries of the previous snapshot
        (``replace=True`` discards the previous partition list entirely, for
        full-overwrite syncs). The commit becomes visible only when CURRENT is
        renamed into place; a crash before that leaves the store at the
        previous version with at most orphaned data files.
        """
        with self.writer_lock(timeout=self.lock_timeout_s):
            current = self.current_version()
            if base_version is not None and base_version != current:
                raise CommitConflictError(
                    f"manifest moved from version {base_version} to {current} "
                    f"while committing to table {self.table!r}"
                )
            previous = self.read_manifest(current)
            partitions = {} if replace else dict(previous.partitions)
            for meta in changes:
                if meta.table != self.table:
                    raise ValidationError(
                        f"partition for table {meta.table!r} committed to {self.table!r}"
                    )
                if meta.row_count > 0:
                    partitions[meta.day] = meta
            for meta in partitions.values():
                for rel in meta.files:
                    if not (self.table_dir / rel).exists():
                        raise ValidationError(f"manifest references missing file: {rel}")
            manifest = Manifest(
                version=current + 1,
                table=self.table,
                partitions=dict(sorted(partitions.items())),
                watermark=new_watermark or previous.watermark,
                created_at_us=time.time_ns() // 1_000,
            )
            self._checkpoint("commit:begin")
            self._write_atomic(
                self.manifest_path(manifest.version),
                json.dumps(manifest.to_json(), indent=1).encode(),
            )
            self._checkpoint("commit:manifest_written")
            current_tmp = self._current_path().with_name(f"CURRENT.tmp-{os.getpid()}")
            current_tmp.write_bytes(f"{manifest.version}\n".encode())
            self._checkpoint("commit:before_current_replace")
            os.replace(current_tmp, self._current_path())
            return manifest

    @staticmethod
    def _write_atomic(path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    # -- partition files ----------------------------------------------------

    def _partition_dir(self, day: date) -> Path:
        return self.table_dir / f"date={day.isoformat()}"

    def _next_file_seq(self, day: date) -> int:
        pdir = self._partition_dir(day)
        if not pdir.exists():
            return 0
        seqs = [
            int(m.group(1))
            for p in pdir.iterdir()
            if (m := _PART_FILE_RE.match(p.name))
        ]
        return max(seqs, default=-1) + 1

    def write_partition(
        self, day: date, records: Sequence[EventRecord] | EventColumns
    ) -> PartitionMeta:
        """Write one new data file for a day and return its exact statistics.

        Input need not be sorted; rows are stored ordered by (element_id, ts)
        with duplicate keys collapsed, last-seen value winning. An empty input
        produces no file and a zero-row PartitionMeta.
        """
        cols = records if isinstance(records, EventColumns) else EventColumns.from_records(records)
        if cols.value is None or cols.status is None:
            raise ValidationError("write_partition requires value and status columns")
        if len(cols) == 0:
            return PartitionMeta(self.table, day, (), 0, None, None, None, None, ())

        lo = day_start_us(day)
        hi = lo + US_PER_DAY
        if lo < self.epoch_range[0] or hi > self.epoch_range[1]:
            raise PartitionBoundaryError(f"day {day} outside store epoch range")
        ts_min = int(cols.ts.min())
        ts_max = int(cols.ts.max())
        if ts_min < lo or ts_max >= hi:
            bad = ts_min if ts_min < lo else ts_max
            raise PartitionBoundaryError(
                f"record at {iso_from_micros(bad)} falls outside partition day {day}"
            )
        if not np.isfinite(cols.value).all():
            raise ValidationError(f"non-finite value in records for day {day}")

        cols = sort_and_dedup_last(cols)
        pdir = self._partition_dir(day)
        pdir.mkdir(parents=True, exist_ok=True)
        rel = f"date={day.isoformat()}/part-{self._next_file_seq(day):04d}.parquet"
        path = self.table_dir / rel
        table = pa.table(
            {
                "element_id": pa.array(cols.element_id, type=pa.uint32()),
                "ts": pa.array(cols.ts, type=pa.int64()),
                "value": pa.array(cols.value, type=pa.float64()),
                "status": pa.array(
                    np.where(cols.status == STATUS_NULL, None, cols.status).tolist(),
                    type=pa.int32(),
                ),
            }
        )
        tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
        pq.write_table(table, tmp, compression="zstd")
        os.replace(tmp, path)

        return PartitionMeta(
            table=self.table,
            day=day,
            files=(rel,),
            row_count=len(cols),
            min_ts=int(cols.ts.min()),
            max_ts=int(cols.ts.max()),
            min_value=float(cols.value.min()),
            max_value=float(cols.value.max()),
            element_ids=tuple(np.unique(cols.element_id).tolist()),
        )

    def read_partition_columns(
        self, meta: PartitionMeta, columns: Sequence[str]
    ) -> tuple[EventColumns, int]:
        """Read a partition's files, merged and deduplicated.

        Returns (columns sorted by (element_id, ts), physical rows read).
        Key columns are always materialized; only requested optional columns
        are read from disk. When a day has several files, the newest file wins
        on duplicate (element_id, ts).
        """
        file_cols = sorted(set(columns) | {"element_id", "ts"})
        parts: list[EventColumns] = []
        physical = 0
        for rel in meta.files:
            path = self.table_dir / rel
            try:
                table = pq.read_table(path, columns=file_cols)
            except Exception as exc:
                raise ScanError(f"cannot read partition file {path}: {exc}") from exc
            physical += table.num_rows
            parts.append(self._from_arrow(table, file_cols))
        merged = EventColumns.concat(parts) if parts else EventColumns.empty()
        if len(meta.files) > 1:
            merged = sort_and_dedup_last(merged)
        elif not merged.is_sorted_by_key():
            merged = merged.sort_by_key()
        return merged, physical

    @staticmethod
    def _from_arrow(table: pa.Table, columns: Sequence[str]) -> EventColumns:
        def col(name: str) -> np.ndarray:
            return table.column(name).combine_chunks().to_numpy(zero_copy_only=False)

        status = None
        if "status" in columns:
            arr = table.column("status").combine_chunks()
            status = arr.fill_null(STATUS_NULL).to_numpy(zero_copy_only=False).astype(np.int32)
        return EventColumns(
            element_id=col("element_id"),
            ts=col("ts"),
            value=col("value") if "value" in columns else None,
            status=status,
        )

    # -- scans ----------------------------------------------------------------

    def scan_batches(
        self,
        manifest: Manifest,
        time_range: tuple[int, int],
        element_filter: Iterable[int] | None = None,
        projection: Sequence[str] = ALL_FIELDS,
        value_pred: ValueRange | None = None,
        workers: int | None = None,
    ) -> tuple[Iterator[EventColumns], ScanStats]:
        """Pruned, pushdown scan yielding per-partition columnar batches.

        Batches arrive in (day, element_id, ts) order. The returned ScanStats
        is filled in as the stream is consumed and is final once the stream is
        exhausted. Partition reads run on a small thread pool; output order is
        deterministic regardless.
        """
        lo, hi = _validate_time_range(time_range)
        projection = tuple(projection)
        if not projection:
            raise ValidationError("projection must name at least one field")
        unknown = set(projection) - set(ALL_FIELDS)
        if unknown:
            raise ValidationError(f"unknown projection fields: {sorted(unknown)}")

        filter_arr = None
        if element_filter is not None:
            filter_arr = np.unique(np.asarray(list(element_filter), dtype=np.uint32))
        pruned = prune_partitions(manifest, (lo, hi), value_pred, element_pred=filter_arr)
        stats = ScanStats(partitions_total=len(manifest.partitions))

        need_value = "value" in projection or value_pred is not None
        file_cols = ["element_id", "ts"]
        if need_value:
            file_cols.append("value")
        if "status" in projection:
            file_cols.append("status")
        workers = self.scan_workers if workers is None else workers

        def load(meta: PartitionMeta) -> tuple[int, EventColumns]:
            cols, physical = self.read_partition_columns(meta, file_cols)
            keep = (cols.ts >= lo) & (cols.ts < hi)
            if filter_arr is not None:
                keep &= np.isin(cols.element_id, filter_arr)
            if value_pred is not None:
                keep &= value_pred.mask(cols.value)
            out = cols.take(keep)
            if "value" not in projection:
                out.value = None
            return physical, out

        def gen() -> Iterator[EventColumns]:
            for physical, batch in _ordered_parallel(load, pruned, workers):
                stats.partitions_opened += 1
                stats.rows_scanned += physical
                stats.rows_returned += len(batch)
                if len(batch):
                    yield batch

        return gen(), stats

    def scan(
        self,
        manifest: Manifest,
        time_range: tuple[int, int],
        element_filter: Iterable[int] | None = None,
        projection: Sequence[str] = ALL_FIELDS,
        value_pred: ValueRange | None = None,
    ) -> tuple[Iterator[EventRecord], ScanStats]:
        """Record-level view of scan_batches, same ordering and stats."""
        batches, stats = self.scan_batches(
            manifest, time_range, element_filter, projection, value_pred
        )

        def gen() -> Iterator[EventRecord]:
            for batch in batches:
                yield from batch.iter_records()

        return gen(), stats


def open_table(root: str | Path, table: str, **kwargs) -> TableStore:
    return TableStore(root, table, **kwargs)
