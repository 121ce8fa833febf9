from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from dcslake.errors import SourceError
from dcslake.ingest import (
    MODE_FULL_OVERWRITE,
    MODE_INCREMENTAL,
    ScheduleConfig,
    TableSyncSpec,
    run_schedule,
    sync_full_overwrite,
    sync_incremental,
)
from dcslake.records import US_PER_DAY, EventColumns, EventRecord, day_start_us
from dcslake.sources import ArraySource
from dcslake.storage import TableStore

from conftest import dedup_last, make_records

T0 = day_start_us(date(2024, 2, 1))
SPAN_DAYS = 6
SPAN_US = SPAN_DAYS * US_PER_DAY


def _source(records: list[EventRecord]) -> ArraySource:
    return ArraySource(EventColumns.from_records(records))


def _store_rows(store: TableStore):
    manifest = store.read_manifest()
    if not manifest.partitions:
        return []
    stream, _ = store.scan(manifest, (0, 2**60))
    return [(r.element_id, r.ts, r.value, r.status) for r in stream]


def _store_row_count(store: TableStore) -> int:
    return sum(m.row_count for m in store.read_manifest().partitions.values())


class TestIncremental:
    def test_empty_delta(self, store):
        report = sync_incremental(_source([]), "eventhistory", store)
        assert report.rows_read == 0
        assert report.rows_written == 0
        assert report.partitions_touched == []
        assert report.new_watermark is None
        assert store.current_version() == 0

    def test_first_sync_then_noop_resync(self, store, rng):
        records = make_records(rng, 800, start_us=T0, span_us=SPAN_US)
        distinct = len(dedup_last(records))

        first = sync_incremental(_source(records), "eventhistory", store)
        assert first.rows_read == 800
        assert first.rows_written == distinct
        assert first.new_watermark == max(r.ts for r in records)
        assert first.manifest_version == 1

        second = sync_incremental(_source(records), "eventhistory", store)
        assert second.rows_written == 0
        assert second.new_watermark == first.new_watermark
        assert second.partitions_touched == []
        # No new manifest version for a no-op sync.
        assert store.current_version() == 1
        assert _store_row_count(store) == distinct

    def test_incremental_prefix_splits_equal_full_import(self, rng, tmp_path):
        """Any split of the stream into increments matches one full import."""
        records = sorted(
            make_records(rng, 1200, start_us=T0, span_us=SPAN_US), key=lambda r: r.ts
        )
        full_store = TableStore(tmp_path / "full", "eventhistory")
        sync_incremental(_source(records), "eventhistory", full_store)
        expected_rows = _store_rows(full_store)
        expected_daily = {
            d: m.row_count for d, m in full_store.read_manifest().partitions.items()
        }

        for trial in range(5):
            split = int(rng.integers(1, len(records)))
            inc_store = TableStore(tmp_path / f"inc{trial}", "eventhistory")
            sync_incremental(_source(records[:split]), "eventhistory", inc_store)
            sync_incremental(_source(records), "eventhistory", inc_store)
            assert _store_rows(inc_store) == expected_rows
            got_daily = {
                d: m.row_count for d, m in inc_store.read_manifest().partitions.items()
            }
            assert got_daily == expected_daily

    def test_late_arrival_within_overlap_is_picked_up(self, store, rng):
        records = sorted(
            make_records(rng, 300, start_us=T0, span_us=US_PER_DAY), key=lambda r: r.ts
        )
        sync_incremental(_source(records), "eventhistory", store)
        watermark = store.read_manifest().watermark
        # A row older than the watermark but inside the overlap window.
        late = EventRecord(99, watermark.last_ts - watermark.overlap_us // 2, 0.77, 0)
        report = sync_incremental(_source(records + [late]), "eventhistory", store)
        assert report.rows_written == 1
        assert (late.element_id, late.ts, late.value, late.status) in _store_rows(store)

    def test_watermark_monotonic_over_growing_source(self, store, rng):
        records = sorted(
            make_records(rng, 900, start_us=T0, span_us=SPAN_US), key=lambda r: r.ts
        )
        marks = []
        for cut in (200, 500, 500, 900):
            report = sync_incremental(_source(records[:cut]), "eventhistory", store)
            assert report.ok
            marks.append(report.new_watermark)
        assert marks == sorted(marks)
        assert _store_row_count(store) == len(dedup_last(records))

    def test_source_failure_leaves_manifest_unchanged(self, store, rng):
        records = make_records(rng, 100, start_us=T0, span_us=US_PER_DAY)
        sync_incremental(_source(records), "eventhistory", store)
        before = store.current_version()

        class FailingSource:
            def fetch(self, after_ts=None):
                raise SourceError("replica unreachable")
                yield  # pragma: no cover

        with pytest.raises(SourceError):
            sync_incremental(FailingSource(), "eventhistory", store)
        assert store.current_version() == before


class TestFullOverwrite:
    def test_identical_content_same_counts_new_version(self, store, rng):
        records = make_records(rng, 400, start_us=T0, span_us=SPAN_US)
        r1 = sync_full_overwrite(_source(records), "eventhistory", store)
        rows_before = _store_rows(store)
        r2 = sync_full_overwrite(_source(records), "eventhistory", store)
        assert r1.rows_written == r2.rows_written
        assert store.current_version() == 2
        assert _store_rows(store) == rows_before

    def test_removed_row_reduces_count_by_one(self, store, rng):
        records = list(dedup_last(make_records(rng, 400, start_us=T0, span_us=SPAN_US)).values())
        sync_full_overwrite(_source(records), "eventhistory", store)
        n_before = _store_row_count(store)
        sync_full_overwrite(_source(records[:-1]), "eventhistory", store)
        assert _store_row_count(store) == n_before - 1

    def test_random_mutations_store_equals_source(self, store, rng):
        records = list(dedup_last(make_records(rng, 500, start_us=T0, span_us=SPAN_US)).values())
        for _ in range(4):
            keep = rng.random(len(records)) > 0.2
            records = [r for r, k in zip(records, keep) if k]
            records += make_records(rng, 60, start_us=T0, span_us=SPAN_US)
            records = list(dedup_last(records).values())
            sync_full_overwrite(_source(records), "eventhistory", store)
            got = set(_store_rows(store))
            expected = {(r.element_id, r.ts, r.value, r.status) for r in records}
            assert got == expected

    def test_prior_version_remains_readable(self, store, rng):
        records = list(dedup_last(make_records(rng, 200, start_us=T0, span_us=SPAN_US)).values())
        sync_full_overwrite(_source(records), "eventhistory", store)
        pinned = store.read_manifest(1)
        rows_v1 = sorted(
            (r.element_id, r.ts) for r in store.scan(pinned, (T0, T0 + SPAN_US))[0]
        )
        sync_full_overwrite(_source(records[: len(records) // 2]), "eventhistory", store)
        # Old snapshot still scans completely after the overwrite.
        again = sorted(
            (r.element_id, r.ts) for r in store.scan(pinned, (T0, T0 + SPAN_US))[0]
        )
        assert again == rows_v1


class TestSchedule:
    def _config(self, tmp_path, a_source, b_source) -> ScheduleConfig:
        return ScheduleConfig(
            store_root=str(tmp_path / "lake"),
            tables=(
                TableSyncSpec("eventhistory", MODE_INCREMENTAL, a_source),
                TableSyncSpec("conditions", MODE_FULL_OVERWRITE, b_source),
            ),
            cadence_s=0.0,
        )

    def test_two_tables_two_modes(self, tmp_path, rng):
        a = make_records(rng, 100, start_us=T0, span_us=US_PER_DAY)
        b = make_records(rng, 50, start_us=T0, span_us=US_PER_DAY)
        config = self._config(tmp_path, lambda: _source(a), lambda: _source(b))
        reports = list(run_schedule(config, cycles=1))
        assert [(r.table, r.mode, r.ok) for r in reports] == [
            ("eventhistory", MODE_INCREMENTAL, True),
            ("conditions", MODE_FULL_OVERWRITE, True),
        ]

    def test_failing_table_does_not_block_others(self, tmp_path, rng):
        def broken():
            raise SourceError("down")

        b = make_records(rng, 50, start_us=T0, span_us=US_PER_DAY)
        config = self._config(tmp_path, broken, lambda: _source(b))
        reports = list(run_schedule(config, cycles=1))
        assert not reports[0].ok and "down" in reports[0].error
        assert reports[1].ok and reports[1].rows_written > 0

    def test_cumulative_rows_over_growing_source(self, tmp_path, rng):
        """Counting oracle: total written equals distinct keys added."""
        records = sorted(
            make_records(rng, 600, start_us=T0, span_us=SPAN_US), key=lambda r: r.ts
        )
        cuts = iter((200, 400, 600))
        current: list[EventRecord] = []

        def growing():
            current[:] = records[: next(cuts)]
            return _source(current)

        config = ScheduleConfig(
            store_root=str(tmp_path / "lake"),
            tables=(TableSyncSpec("eventhistory", MODE_INCREMENTAL, growing),),
            cadence_s=0.0,
        )
        reports = list(run_schedule(config, cycles=3))
        assert all(r.ok for r in reports)
        total = sum(r.rows_written for r in reports)
        assert total == len(dedup_last(records))
        store = TableStore(tmp_path / "lake", "eventhistory")
        assert _store_row_count(store) == total
