from __future__ import annotations

import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcslake.errors import ValidationError
from dcslake.query import (
    IntervalSet,
    daily_extreme,
    interval_semijoin,
    last_update_index,
    time_bin,
)
from dcslake.records import US_PER_DAY, EventColumns, EventRecord, day_of, day_start_us
from dcslake.storage import ScanStats

from conftest import make_records, populate_store

T0 = day_start_us(date(2024, 6, 1))
HOUR = 3_600 * 1_000_000


def brute_force_bins(records, width):
    """Grouping oracle: direct per-group two-pass formulas."""
    groups: dict[tuple[int, int], list[EventRecord]] = {}
    for r in records:
        groups.setdefault((r.element_id, r.ts - r.ts % width), []).append(r)
    out = {}
    for key, rows in groups.items():
        values = np.array([r.value for r in rows])
        last = max(rows, key=lambda r: r.ts).value
        out[key] = (
            len(rows),
            float(values.min()),
            float(values.max()),
            float(values.mean()),
            float(values.std()),  # population formula
            float(last),
        )
    return out


class TestTimeBin:
    def test_single_record(self):
        binned = time_bin([EventRecord(1, T0 + 5, 0.25, 0)], timedelta(days=1))
        assert list(binned) == [1]
        (b,) = binned[1].bins
        assert (b.bin_start, b.count, b.std) == (T0, 1, 0.0)
        assert b.min == b.max == b.mean == b.last == 0.25

    def test_constant_series_ten_days(self):
        records = [
            EventRecord(7, T0 + d * US_PER_DAY + h * HOUR, 0.2, 0)
            for d in range(10)
            for h in range(0, 24, 3)
        ]
        binned = time_bin(records, timedelta(days=1))
        series = binned[7]
        assert len(series.bins) == 10
        for b in series.bins:
            assert b.mean == 0.2
            assert b.std == 0.0
            assert b.count == 8

    def test_random_data_matches_grouping_oracle(self, rng):
        records = make_records(rng, 4000, start_us=T0, span_us=9 * US_PER_DAY, n_elements=7)
        for width in (US_PER_DAY, 6 * HOUR, int(1.5 * HOUR)):
            expected = brute_force_bins(records, width)
            binned = time_bin(records, width)
            got = {
                (element, b.bin_start): (b.count, b.min, b.max, b.mean, b.std, b.last)
                for element, series in binned.items()
                for b in series.bins
            }
            assert got.keys() == expected.keys()
            for key, exp in expected.items():
                g = got[key]
                assert g[0] == exp[0]
                assert g[1] == exp[1] and g[2] == exp[2]
                assert math.isclose(g[3], exp[3], rel_tol=1e-12)
                assert math.isclose(g[4], exp[4], rel_tol=1e-12, abs_tol=1e-15)
                assert g[5] == exp[5]

    def test_merge_across_batches_stable_at_hv_scale(self, rng):
        """Chan merging must stay exact-ish for large means, small spreads."""
        ts = T0 + np.sort(rng.integers(0, US_PER_DAY, size=5000))
        values = 505.0 + rng.normal(0, 0.1, size=5000)
        cols = EventColumns(
            element_id=np.full(5000, 3), ts=ts, value=values, status=np.zeros(5000)
        )
        # Same rows split into 7 batches vs one batch.
        split = [cols.take(slice(i, i + 800)) for i in range(0, 5000, 800)]
        one = time_bin([cols], US_PER_DAY)[3].bins[0]
        many = time_bin(split, US_PER_DAY)[3].bins[0]
        assert many.count == one.count
        assert math.isclose(many.mean, one.mean, rel_tol=1e-13)
        assert math.isclose(many.std, one.std, rel_tol=1e-10)
        oracle = float(values.std())
        assert math.isclose(many.std, oracle, rel_tol=1e-9)

    @given(
        st.lists(
            st.tuples(
                st.integers(1, 4),
                st.integers(0, 10 * US_PER_DAY - 1),
                st.floats(-100, 100, allow_nan=False),
            ),
            min_size=1,
            max_size=200,
        ),
        st.sampled_from([HOUR, US_PER_DAY, 7 * US_PER_DAY]),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, rows, width):
        """Sum of bin counts equals the input record count."""
        records = [EventRecord(e, T0 + t, v, 0) for e, t, v in rows]
        binned = time_bin(records, width)
        total = sum(b.count for s in binned.values() for b in s.bins)
        assert total == len(records)
        for series in binned.values():
            starts = [b.bin_start for b in series.bins]
            assert starts == sorted(starts)
            assert all(s % width == 0 for s in starts)
            for b in series.bins:
                assert b.count >= 1
                assert b.min <= b.mean <= b.max

    def test_requires_value_column(self):
        cols = EventColumns(element_id=[1], ts=[T0], value=None, status=None)
        with pytest.raises(ValidationError):
            time_bin([cols], US_PER_DAY)

    def test_invalid_width(self):
        with pytest.raises(ValidationError):
            time_bin([], 0)


class TestDailyExtreme:
    def test_single_record(self):
        got = daily_extreme([EventRecord(4, T0 + 17, 505.0, 0)], "max")
        assert got == {(4, date(2024, 6, 1)): 505.0}

    def test_three_values_one_day(self):
        records = [
            EventRecord(4, T0 + 1, 500.0, 0),
            EventRecord(4, T0 + 2, 510.0, 0),
            EventRecord(4, T0 + 3, 490.0, 0),
        ]
        assert daily_extreme(records, "max")[(4, date(2024, 6, 1))] == 510.0
        assert daily_extreme(records, "min")[(4, date(2024, 6, 1))] == 490.0

    def test_random_matches_fold_oracle(self, rng):
        records = make_records(rng, 3000, start_us=T0, span_us=12 * US_PER_DAY, n_elements=9)
        for kind, fold in (("max", max), ("min", min)):
            expected: dict = {}
            for r in records:
                key = (r.element_id, day_of(r.ts))
                expected[key] = fold(expected.get(key, r.value), r.value)
            assert daily_extreme(records, kind) == expected

    def test_batched_input_merges(self, rng):
        records = make_records(rng, 2000, start_us=T0, span_us=3 * US_PER_DAY, n_elements=5)
        whole = daily_extreme(records, "max")
        halves = daily_extreme(
            [
                EventColumns.from_records(records[:1000]),
                EventColumns.from_records(records[1000:]),
            ],
            "max",
        )
        assert whole == halves


class TestIntervalSet:
    def test_normalization_merges_overlaps_and_touching(self):
        iv = IntervalSet.from_pairs([(10, 20), (15, 30), (30, 40), (50, 60)])
        assert iv.pairs() == [(10, 40), (50, 60)]

    def test_empty_interval_rejected(self):
        with pytest.raises(ValidationError):
            IntervalSet.from_pairs([(5, 5)])

    def test_contains_half_open(self):
        iv = IntervalSet.from_pairs([(10, 20)])
        assert not iv.contains(9)
        assert iv.contains(10)
        assert iv.contains(19)
        assert not iv.contains(20)

    def test_subtract_from(self):
        iv = IntervalSet.from_pairs([(10, 20), (30, 40)])
        assert iv.subtract_from(0, 50) == [(0, 10), (20, 30), (40, 50)]
        assert iv.subtract_from(12, 18) == []
        assert iv.subtract_from(12, 35) == [(20, 30)]
        assert IntervalSet.empty().subtract_from(1, 5) == [(1, 5)]


class TestSemijoin:
    def _random_intervals(self, rng, lo, hi, n):
        pairs = []
        for _ in range(n):
            a = int(rng.integers(lo, hi - 1))
            b = int(rng.integers(a + 1, hi))
            pairs.append((a, b))
        return IntervalSet.from_pairs(pairs)

    def test_empty_intervals_keep_and_drop(self, rng):
        records = make_records(rng, 50, start_us=T0, span_us=US_PER_DAY)
        empty = IntervalSet.empty()
        assert interval_semijoin(records, empty, "keep") == []
        assert interval_semijoin(records, empty, "drop") == records

    def test_partition_property_and_membership_oracle(self, rng):
        records = make_records(rng, 1500, start_us=T0, span_us=20 * US_PER_DAY)
        for _ in range(25):
            intervals = self._random_intervals(
                rng, T0, T0 + 20 * US_PER_DAY, int(rng.integers(1, 8))
            )
            kept = interval_semijoin(records, intervals, "keep")
            dropped = interval_semijoin(records, intervals, "drop")
            # Linear-scan membership oracle per record.
            pairs = intervals.pairs()
            for r in records:
                inside = any(s <= r.ts < e for s, e in pairs)
                assert (r in kept) == inside
                assert (r in dropped) == (not inside)
            # keep ⊎ drop reconstitutes the input.
            assert sorted(
                kept + dropped, key=lambda r: (r.element_id, r.ts, r.value)
            ) == sorted(records, key=lambda r: (r.element_id, r.ts, r.value))

    def test_binned_semijoin_filters_by_bin_start(self, rng):
        records = make_records(rng, 800, start_us=T0, span_us=10 * US_PER_DAY)
        binned = time_bin(records, US_PER_DAY)
        intervals = IntervalSet.from_pairs([(T0 + 2 * US_PER_DAY, T0 + 5 * US_PER_DAY)])
        kept = interval_semijoin(binned, intervals, "keep")
        dropped = interval_semijoin(binned, intervals, "drop")
        for series in kept.values():
            for b in series.bins:
                assert T0 + 2 * US_PER_DAY <= b.bin_start < T0 + 5 * US_PER_DAY
        all_bins = {
            (e, b.bin_start) for e, s in binned.items() for b in s.bins
        }
        joined = {
            (e, b.bin_start)
            for part in (kept, dropped)
            for e, s in part.items()
            for b in s.bins
        }
        assert all_bins == joined

    def test_batch_shape_preserved(self, rng):
        records = make_records(rng, 300, start_us=T0, span_us=US_PER_DAY)
        cols = EventColumns.from_records(records)
        intervals = IntervalSet.from_pairs([(T0, T0 + US_PER_DAY // 2)])
        out = interval_semijoin(cols, intervals, "keep")
        assert isinstance(out, EventColumns)
        assert bool((out.ts < T0 + US_PER_DAY // 2).all())


class TestLastUpdateIndex:
    def test_single_and_absent_element(self, store):
        day = date(2024, 6, 1)
        meta = store.write_partition(day, [EventRecord(3, T0 + 55, 0.2, 0)])
        manifest = store.commit_manifest([meta])
        got = last_update_index(store, manifest, (T0, T0 + US_PER_DAY))
        assert got == {3: T0 + 55}
        # Absent from range: empty map.
        assert last_update_index(store, manifest, (T0 + 56, T0 + 100)) == {}

    def test_random_matches_full_scan_fold(self, store, rng):
        records = make_records(rng, 2500, start_us=T0, span_us=15 * US_PER_DAY)
        manifest = populate_store(store, records)
        for _ in range(15):
            lo = int(rng.integers(T0, T0 + 14 * US_PER_DAY))
            hi = int(rng.integers(lo + 1, T0 + 15 * US_PER_DAY + 1))
            subset = rng.integers(1, 21, size=6).tolist() if rng.random() < 0.5 else None
            expected: dict[int, int] = {}
            stream, _ = store.scan(manifest, (lo, hi), element_filter=subset)
            for r in stream:
                expected[r.element_id] = max(expected.get(r.element_id, 0), r.ts)
            got = last_update_index(store, manifest, (lo, hi), element_filter=subset)
            assert got == expected

    def test_early_stop_opens_fewer_partitions(self, store, rng):
        # One element present every day: newest partition resolves it.
        days = 10
        metas = []
        for i in range(days):
            day = date(2024, 6, 1 + i)
            metas.append(
                store.write_partition(day, [EventRecord(1, day_start_us(day) + 9, 0.1, 0)])
            )
        manifest = store.commit_manifest(metas)
        stats = ScanStats()
        got = last_update_index(
            store, manifest, (T0, T0 + days * US_PER_DAY), element_filter=[1], stats=stats
        )
        assert got == {1: day_start_us(date(2024, 6, 10)) + 9}
        assert stats.partitions_opened == 1
