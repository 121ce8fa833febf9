"""Composable query primitives over scans.

Time bins are aligned to a UTC grid anchored at the Unix epoch, so daily bins
coincide with partition days. Interval sets are half-open [start, end), which
lets adjacent periods compose without double counting. All operations here
are pure functions of their inputs and safe to run concurrently over a pinned
manifest version.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .errors import ValidationError
from .records import (
    US_PER_DAY,
    EventColumns,
    EventRecord,
    as_batches,
    day_of,
    group_starts,
    parse_duration_us,
)
from .storage import Manifest, ScanStats, TableStore, prune_partitions


def _width_us(bin_width) -> int:
    if isinstance(bin_width, timedelta):
        width = int(bin_width / timedelta(microseconds=1))
    elif isinstance(bin_width, str):
        width = parse_duration_us(bin_width)
    else:
        width = int(bin_width)
    if width <= 0:
        raise ValidationError(f"bin width must be positive, got {bin_width!r}")
    return width


@dataclass(frozen=True)
class IntervalSet:
    """Sorted, disjoint half-open [start, end) intervals with a label."""

    starts: np.ndarray
    ends: np.ndarray
    label: str = ""

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]], label: str = "") -> "IntervalSet":
        """Normalize arbitrary intervals: sort, merge overlapping or touching."""
        items = sorted((int(s), int(e)) for s, e in pairs)
        merged: list[list[int]] = []
        for start, end in items:
            if start >= end:
                raise ValidationError(f"empty interval [{start}, {end})")
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        return cls(
            starts=np.array([m[0] for m in merged], dtype=np.int64),
            ends=np.array([m[1] for m in merged], dtype=np.int64),
            label=label,
        )

    @classmethod
    def empty(cls, label: str = "") -> "IntervalSet":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), label)

    def __len__(self) -> int:
        return len(self.starts)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.starts.tolist(), self.ends.tolist()))

    def contains(self, ts: np.ndarray | int) -> np.ndarray | bool:
        """Membership of timestamp(s) in the union of intervals."""
        scalar = np.isscalar(ts)
        arr = np.atleast_1d(np.asarray(ts, dtype=np.int64))
        if len(self) == 0:
            out = np.zeros(len(arr), dtype=bool)
        else:
            idx = np.searchsorted(self.starts, arr, side="right") - 1
            out = (idx >= 0) & (arr < self.ends[np.clip(idx, 0, None)])
        return bool(out[0]) if scalar else out

    def overlaps(self, start: int, end: int) -> bool:
        """True if [start, end) intersects any interval."""
        if len(self) == 0 or start >= end:
            return False
        i = np.searchsorted(self.ends, start, side="right")
        return i < len(self) and self.starts[i] < end

    def subtract_from(self, start: int, end: int) -> list[tuple[int, int]]:
        """Pieces of [start, end) not covered by this set."""
        pieces: list[tuple[int, int]] = []
        cursor = start
        if len(self):
            first = max(0, int(np.searchsorted(self.ends, start, side="right")))
            for i in range(first, len(self)):
                s, e = int(self.starts[i]), int(self.ends[i])
                if s >= end:
                    break
                if s > cursor:
                    pieces.append((cursor, s))
                cursor = max(cursor, e)
                if cursor >= end:
                    break
        if cursor < end:
            pieces.append((cursor, end))
        return pieces


def intervals_from_runs(runs, kinds: Sequence[str] | None = None, label: str = "runs") -> IntervalSet:
    """Coverage of run periods, optionally restricted to given kinds."""
    pairs = [
        (r.start_ts, r.end_ts)
        for r in runs
        if kinds is None or r.run_kind in kinds
    ]
    if not pairs:
        return IntervalSet.empty(label)
    return IntervalSet.from_pairs(pairs, label)


@dataclass(frozen=True)
class BinStat:
    """Aggregates of one time bin; std is the population formula."""

    bin_start: int
    count: int
    min: float
    max: float
    mean: float
    std: float
    last: float


@dataclass(frozen=True)
class BinnedSeries:
    element_id: int
    bin_width_us: int
    bins: tuple[BinStat, ...]


class _BinAcc:
    """Mergeable per-bin aggregate: count/mean/M2 merged pairwise (Chan)."""

    __slots__ = ("n", "mean", "m2", "vmin", "vmax", "last_ts", "last")

    def __init__(self, n, mean, m2, vmin, vmax, last_ts, last):
        self.n = n
        self.mean = mean
        self.m2 = m2
        self.vmin = vmin
        self.vmax = vmax
        self.last_ts = last_ts
        self.last = last

    def merge(self, other: "_BinAcc") -> None:
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        self.vmin = min(self.vmin, other.vmin)
        self.vmax = max(self.vmax, other.vmax)
        if other.last_ts >= self.last_ts:
            self.last_ts = other.last_ts
            self.last = other.last

    def stat(self, bin_start: int) -> BinStat:
        return BinStat(
            bin_start=bin_start,
            count=self.n,
            min=self.vmin,
            max=self.vmax,
            mean=min(max(self.mean, self.vmin), self.vmax),
            std=math.sqrt(max(self.m2, 0.0) / self.n),
            last=self.last,
        )


def time_bin(records, bin_width) -> dict[int, BinnedSeries]:
    """Group records into fixed-width, epoch-aligned time bins per element.

    Every record lands in exactly one bin; per-bin count/min/max/mean/std and
    the value at the latest timestamp are exact (groups are aggregated in two
    passes and partial groups merged across batches with a numerically stable
    update).
    """
    width = _width_us(bin_width)
    acc: dict[tuple[int, int], _BinAcc] = {}
    for batch in as_batches(records):
        if len(batch) == 0:
            continue
        if batch.value is None:
            raise ValidationError("time_bin requires the value column")
        batch = batch.sort_by_key()
        eid = batch.element_id
        bins = batch.ts - batch.ts % width
        values = batch.value
        starts = group_starts(eid, bins)
        ends = np.append(starts[1:], len(batch))
        counts = ends - starts
        vmin = np.minimum.reduceat(values, starts)
        vmax = np.maximum.reduceat(values, starts)
        # Corrected two-pass: clamping the mean into [min, max] keeps constant
        # groups exact, and the (Σd)²/n term cancels the resulting offset.
        means = np.clip(np.add.reduceat(values, starts) / counts, vmin, vmax)
        centered = values - np.repeat(means, counts)
        dev_sums = np.add.reduceat(centered, starts)
        m2 = np.add.reduceat(centered * centered, starts) - dev_sums * dev_sums / counts
        last_idx = ends - 1
        for i in range(len(starts)):
            key = (int(eid[starts[i]]), int(bins[starts[i]]))
            part = _BinAcc(
                n=int(counts[i]),
                mean=float(means[i]),
                m2=float(m2[i]),
                vmin=float(vmin[i]),
                vmax=float(vmax[i]),
                last_ts=int(batch.ts[last_idx[i]]),
                last=float(values[last_idx[i]]),
            )
            existing = acc.get(key)
            if existing is None:
                acc[key] = part
            else:
                existing.merge(part)

    by_element: dict[int, list[tuple[int, _BinAcc]]] = {}
    for (element, bin_start), a in acc.items():
        by_element.setdefault(element, []).append((bin_start, a))
    out: dict[int, BinnedSeries] = {}
    for element in sorted(by_element):
        items = sorted(by_element[element])
        out[element] = BinnedSeries(
            element_id=element,
            bin_width_us=width,
            bins=tuple(a.stat(bin_start) for bin_start, a in items),
        )
    return out


def daily_extreme(records, kind: str = "max") -> dict[tuple[int, date], float]:
    """Exact per-day max or min value per element; silent days are absent."""
    if kind not in ("max", "min"):
        raise ValidationError(f"kind must be 'max' or 'min', got {kind!r}")
    reduce_fn = np.maximum.reduceat if kind == "max" else np.minimum.reduceat
    pick = max if kind == "max" else min
    out: dict[tuple[int, date], float] = {}
    for batch in as_batches(records):
        if len(batch) == 0:
            continue
        if batch.value is None:
            raise ValidationError("daily_extreme requires the value column")
        batch = batch.sort_by_key()
        days = batch.ts // US_PER_DAY
        starts = group_starts(batch.element_id, days)
        extremes = reduce_fn(batch.value, starts)
        for i, start in enumerate(starts.tolist()):
            key = (int(batch.element_id[start]), day_of(int(batch.ts[start])))
            value = float(extremes[i])
            prior = out.get(key)
            out[key] = value if prior is None else pick(prior, value)
    return out


def interval_semijoin(data, intervals: IntervalSet, mode: str = "keep"):
    """Filter rows or bins by membership of their timestamp in the intervals.

    ``keep`` retains exactly the rows (or bins, by bin_start) inside some
    interval; ``drop`` is the exact complement, so keep and drop together
    reconstitute the input. The output has the same shape as the input:
    a mapping of BinnedSeries stays a mapping, record lists stay record
    lists, and batch iterables yield filtered batches.
    """
    if mode not in ("keep", "drop"):
        raise ValidationError(f"mode must be 'keep' or 'drop', got {mode!r}")

    if isinstance(data, Mapping):
        out: dict[int, BinnedSeries] = {}
        for element, series in data.items():
            starts = np.array([b.bin_start for b in series.bins], dtype=np.int64)
            inside = intervals.contains(starts)
            wanted = inside if mode == "keep" else ~inside
            kept = tuple(b for b, w in zip(series.bins, wanted) if w)
            if kept:
                out[element] = BinnedSeries(series.element_id, series.bin_width_us, kept)
        return out

    if isinstance(data, EventColumns):
        inside = intervals.contains(data.ts)
        return data.take(inside if mode == "keep" else ~inside)

    materialized = list(data)
    if materialized and isinstance(materialized[0], EventRecord):
        ts = np.array([r.ts for r in materialized], dtype=np.int64)
        inside = intervals.contains(ts)
        wanted = inside if mode == "keep" else ~inside
        return [r for r, w in zip(materialized, wanted) if w]

    def gen():
        for batch in materialized:
            inside = intervals.contains(batch.ts)
            filtered = batch.take(inside if mode == "keep" else ~inside)
            if len(filtered):
                yield filtered

    return gen()


def last_update_index(
    store: TableStore,
    manifest: Manifest,
    time_range: tuple[int, int],
    element_filter: Iterable[int] | None = None,
    stats: ScanStats | None = None,
) -> dict[int, int]:
    """Most recent timestamp per element within the range.

    Walks partitions newest-first and stops as soon as every candidate
    element has been resolved; partitions that cannot contain a remaining
    element are never opened.
    """
    pruned = prune_partitions(manifest, time_range, element_pred=element_filter)
    if stats is not None:
        stats.partitions_total = len(manifest.partitions)
    wanted = None if element_filter is None else {int(e) for e in element_filter}
    remaining: set[int] = set()
    for meta in pruned:
        ids = set(meta.element_ids) if wanted is None else wanted.intersection(meta.element_ids)
        remaining |= ids
    lo, hi = time_range
    out: dict[int, int] = {}
    for meta in reversed(pruned):
        if not remaining:
            break
        if remaining.isdisjoint(meta.element_ids):
            continue
        cols, physical = store.read_partition_columns(meta, ("element_id", "ts"))
        if stats is not None:
            stats.partitions_opened += 1
            stats.rows_scanned += physical
        keep = (cols.ts >= lo) & (cols.ts < hi)
        cols = cols.take(keep)
        if len(cols) == 0:
            continue
        starts = group_starts(cols.element_id, np.zeros(len(cols), dtype=np.int8))
        ends = np.append(starts[1:], len(cols))
        for i, start in enumerate(starts.tolist()):
            element = int(cols.element_id[start])
            if element in remaining:
                out[element] = int(cols.ts[ends[i] - 1])
                remaining.discard(element)
    return out


def manifest_time_range(manifest: Manifest) -> tuple[int, int]:
    """Full [min_ts, max_ts + 1) span of a table, for default query windows."""
    span = manifest.time_span()
    if span is None:
        raise ValidationError(f"table {manifest.table!r} is empty")
    return span
