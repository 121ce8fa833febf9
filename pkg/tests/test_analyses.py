from __future__ import annotations

import math
from datetime import date

import numpy as np
import pytest

from dcslake.analyses import (
    ElementInfo,
    ElementMapping,
    LinkFlag,
    RULE_HIGH_RSSI,
    RULE_OSCILLATING,
    RULE_STALE,
    detect_stale,
    flag_high_rssi,
    flag_oscillating,
    geometry_grid,
    hv_nominal_counts,
)
from dcslake.errors import ValidationError
from dcslake.query import BinnedSeries, BinStat, IntervalSet, time_bin
from dcslake.records import US_PER_DAY, EventRecord, day_start_us

T0 = day_start_us(date(2024, 1, 1))
HOUR = 3_600 * 1_000_000


def _series(element, bins, width=US_PER_DAY):
    return BinnedSeries(element_id=element, bin_width_us=width, bins=tuple(bins))


def _bin(start, *, count=10, vmin=0.2, vmax=0.2, mean=0.2, std=0.0, last=0.2):
    return BinStat(start, count, vmin, vmax, mean, std, last)


def _mapping(entries):
    return ElementMapping(
        ElementInfo(e, "MMG", w, s, l, f"B{e}", k) for e, w, s, l, k in entries
    )


class TestHighRssi:
    def test_four_bins_over_threshold_flagged(self):
        # Bin maxima at 0.46 V in 4 daily bins, threshold 0.45 V, more than 3
        # occurrences required: exactly at the selection edge.
        bins = [_bin(T0 + i * US_PER_DAY, vmax=0.46) for i in range(4)]
        flags = flag_high_rssi({11: _series(11, bins)}, 0.45, 3)
        assert len(flags) == 1
        flag = flags[0]
        assert flag.rule == RULE_HIGH_RSSI
        assert flag.occurrence_count == 4
        assert flag.peak_value == 0.46
        assert not flag.hard_failure
        assert flag.window == (T0, T0 + 4 * US_PER_DAY)

    def test_exactly_min_occurrences_not_flagged(self):
        bins = [_bin(T0 + i * US_PER_DAY, vmax=0.46) for i in range(3)]
        assert flag_high_rssi({11: _series(11, bins)}, 0.45, 3) == []

    def test_constant_low_series_not_flagged(self):
        bins = [_bin(T0 + i * US_PER_DAY, vmax=0.20) for i in range(100)]
        assert flag_high_rssi({5: _series(5, bins)}, 0.45, 3) == []

    def test_hard_failure_reported_at_no_signal_level(self):
        bins = [_bin(T0 + i * US_PER_DAY, vmax=0.5) for i in range(5)]
        (flag,) = flag_high_rssi({5: _series(5, bins)}, 0.45, 3)
        assert flag.hard_failure

    def test_non_rssi_element_rejected(self):
        mapping = _mapping([(1, 1, 1, 1, "hv_voltage")])
        bins = [_bin(T0, vmax=0.5)] * 4
        with pytest.raises(ValidationError, match=r"\[1\]"):
            flag_high_rssi({1: _series(1, bins)}, 0.45, 3, mapping=mapping)

    def test_parameter_validation(self):
        with pytest.raises(ValidationError):
            flag_high_rssi({}, 0.0, 3)
        with pytest.raises(ValidationError):
            flag_high_rssi({}, 0.6, 3)
        with pytest.raises(ValidationError):
            flag_high_rssi({}, 0.45, 0)

    def test_threshold_monotonicity(self, rng):
        """Raising threshold or min_occurrences never grows the flag set."""
        for _ in range(20):
            binned = {}
            for element in range(40):
                bins = [
                    _bin(
                        T0 + i * US_PER_DAY,
                        vmax=float(rng.uniform(0.1, 0.55)),
                        std=float(rng.uniform(0, 0.2)),
                    )
                    for i in range(int(rng.integers(1, 15)))
                ]
                binned[element] = _series(element, bins)
            base = {f.element_id for f in flag_high_rssi(binned, 0.30, 2)}
            higher = {f.element_id for f in flag_high_rssi(binned, 0.40, 2)}
            stricter = {f.element_id for f in flag_high_rssi(binned, 0.30, 4)}
            assert higher <= base
            assert stricter <= base
            osc_base = {f.element_id for f in flag_oscillating(binned, 0.05, 2)}
            osc_higher = {f.element_id for f in flag_oscillating(binned, 0.10, 2)}
            osc_stricter = {f.element_id for f in flag_oscillating(binned, 0.05, 5)}
            assert osc_higher <= osc_base
            assert osc_stricter <= osc_base


class TestOscillating:
    def test_constant_series_not_flagged(self):
        bins = [_bin(T0 + i * US_PER_DAY, std=0.0) for i in range(50)]
        assert flag_oscillating({2: _series(2, bins)}, 0.05, 3) == []

    def test_alternating_values_flagged_with_direct_std(self):
        """Std computed by the direct formula on an alternating 0.1/0.4 series."""
        records = []
        for day in range(5):
            for k in range(48):
                value = 0.1 if k % 2 == 0 else 0.4
                records.append(EventRecord(9, T0 + day * US_PER_DAY + k * 30 * 60 * 1_000_000, value, 0))
        binned = time_bin(records, US_PER_DAY)
        expected_std = float(np.std([0.1, 0.4] * 24))
        assert math.isclose(expected_std, 0.15, rel_tol=1e-12)
        for b in binned[9].bins:
            assert math.isclose(b.std, expected_std, rel_tol=1e-12)
        flags = flag_oscillating(binned, 0.05, 3)
        assert [f.element_id for f in flags] == [9]
        assert flags[0].occurrence_count == 5
        assert math.isclose(flags[0].peak_std, expected_std, rel_tol=1e-12)

    def test_min_bins_is_at_least(self):
        bins = [_bin(T0 + i * US_PER_DAY, std=0.2) for i in range(3)]
        assert len(flag_oscillating({1: _series(1, bins)}, 0.05, 3)) == 1

    def test_whole_window_mode(self):
        # Two half-window plateaus: tiny per-bin std, large whole-window std.
        bins = [
            _bin(T0, count=100, vmin=0.1, vmax=0.1, mean=0.1, std=0.001, last=0.1),
            _bin(T0 + US_PER_DAY, count=100, vmin=0.4, vmax=0.4, mean=0.4, std=0.001, last=0.4),
        ]
        binned = {3: _series(3, bins)}
        assert flag_oscillating(binned, 0.05, 1) == []
        flags = flag_oscillating(binned, 0.05, 1, whole_window=True)
        assert len(flags) == 1
        # Direct oracle: std of 100 x 0.1 and 100 x 0.4 with 0.001 within-bin std.
        expected = math.sqrt(0.15**2 + 0.001**2)
        assert math.isclose(flags[0].peak_std, expected, rel_tol=1e-9)


class TestDetectStale:
    def test_hourly_reporting_no_flags(self):
        ts = np.arange(T0, T0 + 10 * US_PER_DAY, HOUR, dtype=np.int64)
        flags = detect_stale(
            {4: int(ts[-1])}, {4: ts}, 24 * HOUR, window=(T0, T0 + 10 * US_PER_DAY)
        )
        assert flags == []

    def test_thirty_day_silence_one_interval(self):
        year = 365
        before = np.arange(T0, T0 + 100 * US_PER_DAY, HOUR, dtype=np.int64)
        after = np.arange(T0 + 130 * US_PER_DAY, T0 + year * US_PER_DAY, HOUR, dtype=np.int64)
        ts = np.concatenate([before, after])
        (flag,) = detect_stale(
            {4: int(ts[-1])}, {4: ts}, 24 * HOUR, window=(T0, T0 + year * US_PER_DAY)
        )
        assert flag.rule == RULE_STALE
        assert len(flag.stale_intervals) == 1
        lo, hi = flag.stale_intervals[0]
        length_days = (hi - lo) / US_PER_DAY
        assert 29.8 <= length_days <= 30.2

    def test_disable_reenable_cycles_give_two_intervals(self):
        pieces = [
            np.arange(T0, T0 + 10 * US_PER_DAY, HOUR),
            np.arange(T0 + 15 * US_PER_DAY, T0 + 20 * US_PER_DAY, HOUR),
            np.arange(T0 + 27 * US_PER_DAY, T0 + 30 * US_PER_DAY, HOUR),
        ]
        ts = np.concatenate(pieces).astype(np.int64)
        (flag,) = detect_stale({1: int(ts[-1])}, {1: ts}, 24 * HOUR, window=(T0, T0 + 30 * US_PER_DAY))
        assert len(flag.stale_intervals) == 2

    def test_mask_excuses_shutdown_silence(self):
        before = np.arange(T0, T0 + 50 * US_PER_DAY, HOUR, dtype=np.int64)
        after = np.arange(T0 + 80 * US_PER_DAY, T0 + 100 * US_PER_DAY, HOUR, dtype=np.int64)
        ts = np.concatenate([before, after])
        window = (T0, T0 + 100 * US_PER_DAY)
        masks = IntervalSet.from_pairs([(T0 + 49 * US_PER_DAY, T0 + 81 * US_PER_DAY)])
        assert detect_stale({1: int(ts[-1])}, {1: ts}, 24 * HOUR, masks, window) == []
        # Without the mask the same data is stale.
        assert len(detect_stale({1: int(ts[-1])}, {1: ts}, 24 * HOUR, None, window)) == 1

    def test_partial_mask_splits_interval(self):
        ts = np.array([T0, T0 + 40 * US_PER_DAY], dtype=np.int64)
        masks = IntervalSet.from_pairs([(T0 + 10 * US_PER_DAY, T0 + 30 * US_PER_DAY)])
        (flag,) = detect_stale(
            {1: int(ts[-1])}, {1: ts}, 24 * HOUR, masks, (T0, T0 + 40 * US_PER_DAY + 1)
        )
        assert flag.stale_intervals == (
            (T0, T0 + 10 * US_PER_DAY),
            (T0 + 30 * US_PER_DAY, T0 + 40 * US_PER_DAY),
        )

    def test_element_with_no_data_is_fully_stale(self):
        window = (T0, T0 + 10 * US_PER_DAY)
        (flag,) = detect_stale({}, {7: np.empty(0, dtype=np.int64)}, 24 * HOUR, None, window)
        assert flag.stale_intervals == (window,)

    def test_mask_monotonicity(self, rng):
        """Enlarging masks never grows the stale set."""
        window = (T0, T0 + 60 * US_PER_DAY)
        for _ in range(10):
            ts_index = {}
            for element in range(12):
                keep = rng.random(60) > 0.25
                days = np.flatnonzero(keep)
                ts_index[element] = (T0 + days * US_PER_DAY + HOUR).astype(np.int64)
            small = IntervalSet.from_pairs([(T0 + 20 * US_PER_DAY, T0 + 24 * US_PER_DAY)])
            large = IntervalSet.from_pairs([(T0 + 15 * US_PER_DAY, T0 + 30 * US_PER_DAY)])
            base = {f.element_id for f in detect_stale({}, ts_index, 36 * HOUR, None, window)}
            with_small = {
                f.element_id for f in detect_stale({}, ts_index, 36 * HOUR, small, window)
            }
            with_large = {
                f.element_id for f in detect_stale({}, ts_index, 36 * HOUR, large, window)
            }
            assert with_small <= base
            assert with_large <= with_small


class TestHvNominal:
    def _daily_max(self, channels, day, value):
        return {(c, day): value for c in channels}

    def test_all_channels_nominal(self):
        day = date(2024, 6, 3)
        daily = self._daily_max(range(64), day, 505.0)
        runs = IntervalSet.from_pairs([(day_start_us(day), day_start_us(day) + US_PER_DAY)])
        counts = hv_nominal_counts(daily, 505.0, runs)
        assert counts[day].above == 64
        assert counts[day].below == 0

    def test_all_channels_off(self):
        day = date(2024, 6, 3)
        daily = self._daily_max(range(64), day, 0.0)
        runs = IntervalSet.from_pairs([(day_start_us(day), day_start_us(day) + US_PER_DAY)])
        counts = hv_nominal_counts(daily, 505.0, runs)
        assert counts[day].above == 0
        assert counts[day].below == 64

    def test_day_outside_runs_excluded(self):
        run_day = date(2024, 6, 3)
        idle_day = date(2024, 6, 4)
        daily = self._daily_max(range(8), run_day, 505.0) | self._daily_max(
            range(8), idle_day, 505.0
        )
        runs = IntervalSet.from_pairs(
            [(day_start_us(run_day), day_start_us(run_day) + US_PER_DAY)]
        )
        counts = hv_nominal_counts(daily, 505.0, runs)
        assert run_day in counts and idle_day not in counts

    def test_random_counts_match_fold_oracle(self, rng):
        days = [date(2024, 6, 1 + i) for i in range(12)]
        daily = {}
        for c in range(40):
            for day in days:
                if rng.random() < 0.8:
                    daily[(c, day)] = float(rng.uniform(490, 510))
        run_days = {d for d in days if rng.random() < 0.6}
        runs = (
            IntervalSet.from_pairs(
                [(day_start_us(d), day_start_us(d) + US_PER_DAY) for d in run_days]
            )
            if run_days
            else IntervalSet.empty()
        )
        counts = hv_nominal_counts(daily, 505.0, runs)
        for day in days:
            channel_values = [v for (c, d), v in daily.items() if d == day]
            if day not in run_days:
                assert day not in counts
                continue
            expected_above = sum(1 for v in channel_values if v >= 505.0)
            assert counts[day].above == expected_above
            assert counts[day].below == len(channel_values) - expected_above
            # Conservation: above + below = channels with data.
            assert counts[day].above + counts[day].below == len(channel_values)


class TestGeometryGrid:
    def _flags(self, elements):
        return [LinkFlag(e, RULE_HIGH_RSSI, (T0, T0 + US_PER_DAY)) for e in elements]

    def test_no_flags_all_zero(self):
        mapping = _mapping([(1, 1, 1, 1, "rssi")])
        grid = geometry_grid([], mapping, wheel=1)
        assert grid.shape == (8, 16)
        assert grid.sum() == 0

    def test_single_flag_single_cell(self):
        mapping = _mapping([(42, 1, 7, 3, "rssi")])
        grid = geometry_grid(self._flags([42]), mapping, wheel=1)
        assert grid[3 - 1, 7 - 1] == 1
        assert grid.sum() == 1

    def test_wheel_selection_and_total(self):
        mapping = _mapping([(1, 1, 2, 2, "rssi"), (2, 2, 2, 2, "rssi"), (3, 1, 5, 8, "rssi")])
        grid1 = geometry_grid(self._flags([1, 2, 3]), mapping, wheel=1)
        grid2 = geometry_grid(self._flags([1, 2, 3]), mapping, wheel=2)
        assert grid1.sum() == 2
        assert grid2.sum() == 1

    def test_duplicate_rules_count_one_element_once(self):
        mapping = _mapping([(1, 1, 2, 2, "rssi")])
        flags = [
            LinkFlag(1, RULE_HIGH_RSSI, (T0, T0 + US_PER_DAY)),
            LinkFlag(1, RULE_OSCILLATING, (T0, T0 + US_PER_DAY)),
        ]
        assert geometry_grid(flags, mapping, wheel=1).sum() == 1

    def test_unmapped_flag_lists_ids(self):
        mapping = _mapping([(1, 1, 1, 1, "rssi")])
        with pytest.raises(ValidationError, match=r"\[7, 9\]"):
            geometry_grid(self._flags([1, 7, 9]), mapping, wheel=1)

    def test_random_grid_matches_counting_oracle(self, rng):
        entries = []
        for e in range(200):
            entries.append(
                (
                    e,
                    int(rng.integers(1, 3)),
                    int(rng.integers(1, 17)),
                    int(rng.integers(1, 9)),
                    "rssi",
                )
            )
        mapping = _mapping(entries)
        flagged = rng.choice(200, size=60, replace=False).tolist()
        for wheel in (1, 2):
            grid = geometry_grid(self._flags(flagged), mapping, wheel)
            expected = np.zeros((8, 16), dtype=int)
            for e, w, s, l, _ in entries:
                if e in flagged and w == wheel:
                    expected[l - 1, s - 1] += 1
            assert np.array_equal(grid, expected)


class TestElementMapping:
    def test_file_roundtrip(self, tmp_path):
        mapping = _mapping([(1, 1, 1, 1, "rssi"), (2, 2, 16, 8, "hv_voltage")])
        path = tmp_path / "mapping.tsv"
        mapping.to_file(path)
        loaded = ElementMapping.from_file(path)
        assert dict(loaded.items()) == dict(mapping.items())
        assert loaded.elements_of_kind("rssi") == [1]

    def test_invalid_geometry_rejected(self):
        with pytest.raises(ValidationError):
            _mapping([(1, 3, 1, 1, "rssi")])
        with pytest.raises(ValidationError):
            _mapping([(1, 1, 17, 1, "rssi")])
        with pytest.raises(ValidationError):
            _mapping([(1, 1, 1, 9, "rssi")])
        with pytest.raises(ValidationError):
            _mapping([(1, 1, 1, 1, "thermometer")])
