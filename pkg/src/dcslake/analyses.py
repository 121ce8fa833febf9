"""Detector-health analyses over scan and binning outputs.

Implements the link diagnostics used on optical transceivers and HV channels:
selection of links whose diagnostic voltage sits above a failure threshold in
repeated time bins, detection of oscillating values via per-bin spread,
stale-channel detection from archive silence (with shutdown periods masked
out), above/below-nominal HV counting restricted to data-taking periods, and
the layer-by-sector geometry grid used for heatmaps.

All analyses are pure functions over query outputs; flag lists come back
ordered by element id.
"""

from __future__ import annotations

import csv
import math
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .query import (
    BinnedSeries,
    IntervalSet,
    daily_extreme,
    last_update_index,
    time_bin,
)
from .records import US_PER_DAY, day_of, group_starts
from .storage import Manifest, ScanStats, TableStore

# Diagnostic-voltage defaults: a link reads ~0.5 V when no signal is received,
# failures are selected above 0.45 V seen in more than 3 bins; HV channels
# nominally sit at 505 V.
RSSI_THRESHOLD_V = 0.45
RSSI_MIN_OCCURRENCES = 3
RSSI_NO_SIGNAL_V = 0.5
HV_NOMINAL_V = 505.0
STD_THRESHOLD_V = 0.05
STD_MIN_BINS = 3
STALENESS_US = 24 * 3_600 * 1_000_000

KIND_RSSI = "rssi"
KIND_HV_VOLTAGE = "hv_voltage"
KIND_HV_CURRENT = "hv_current"
KIND_OTHER = "other"
ELEMENT_KINDS = (KIND_RSSI, KIND_HV_VOLTAGE, KIND_HV_CURRENT, KIND_OTHER)

RULE_HIGH_RSSI = "high_rssi"
RULE_OSCILLATING = "oscillating"
RULE_STALE = "stale"

N_SECTORS = 16
N_LAYERS = 8
N_WHEELS = 2


@dataclass(frozen=True)
class ElementInfo:
    element_id: int
    detector: str
    wheel: int
    sector: int
    layer: int
    board: str
    kind: str


class ElementMapping:
    """Total mapping from element id to detector geometry and kind.

    Loaded from a tab-separated file with columns
    ``element_id detector wheel sector layer board kind``.
    """

    def __init__(self, infos: Iterable[ElementInfo]):
        self._by_id: dict[int, ElementInfo] = {}
        for info in infos:
            if not (1 <= info.wheel <= N_WHEELS):
                raise ValidationError(f"element {info.element_id}: wheel {info.wheel} not in 1..{N_WHEELS}")
            if not (1 <= info.sector <= N_SECTORS):
                raise ValidationError(
                    f"element {info.element_id}: sector {info.sector} not in 1..{N_SECTORS}"
                )
            if not (1 <= info.layer <= N_LAYERS):
                raise ValidationError(
                    f"element {info.element_id}: layer {info.layer} not in 1..{N_LAYERS}"
                )
            if info.kind not in ELEMENT_KINDS:
                raise ValidationError(
                    f"element {info.element_id}: unknown kind {info.kind!r}"
                )
            self._by_id[info.element_id] = info

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, element_id: int) -> bool:
        return element_id in self._by_id

    def get(self, element_id: int) -> ElementInfo | None:
        return self._by_id.get(element_id)

    def elements_of_kind(self, kind: str) -> list[int]:
        return sorted(e for e, info in self._by_id.items() if info.kind == kind)

    def items(self):
        return self._by_id.items()

    @classmethod
    def from_file(cls, path: str | Path) -> "ElementMapping":
        path = Path(path)
        infos = []
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter="\t")
            for line_no, parts in enumerate(reader, start=1):
                if not parts or parts[0].lstrip().startswith("#"):
                    continue
                if len(parts) != 7:
                    raise ParseError(
                        f"{path}:{line_no}: expected 7 fields, got {len(parts)}", line_no
                    )
                try:
                    infos.append(
                        ElementInfo(
                            element_id=int(parts[0]),
                            detector=parts[1],
                            wheel=int(parts[2]),
                            sector=int(parts[3]),
                            layer=int(parts[4]),
                            board=parts[5],
                            kind=parts[6].strip().lower(),
                        )
                    )
                except ValueError:
                    raise ParseError(f"{path}:{line_no}: malformed mapping row", line_no) from None
        return cls(infos)

    def to_file(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# element_id\tdetector\twheel\tsector\tlayer\tboard\tkind\n")
            for element_id in sorted(self._by_id):
                i = self._by_id[element_id]
                fh.write(
                    f"{i.element_id}\t{i.detector}\t{i.wheel}\t{i.sector}\t"
                    f"{i.layer}\t{i.board}\t{i.kind}\n"
                )


@dataclass(frozen=True)
class LinkFlag:
    """One analysis verdict for one element, with its supporting evidence."""

    element_id: int
    rule: str
    window: tuple[int, int]
    occurrence_count: int | None = None
    peak_value: float | None = None
    peak_std: float | None = None
    hard_failure: bool = False
    stale_intervals: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class DayCount:
    above: int
    below: int


DailyCounts = dict[date, DayCount]


def _check_kind(
    elements: Iterable[int], mapping: ElementMapping | None, expected: str, analysis: str
) -> None:
    if mapping is None:
        return
    wrong = sorted(
        e for e in elements if (info := mapping.get(e)) is not None and info.kind != expected
    )
    if wrong:
        raise ValidationError(
            f"{analysis} expects elements of kind {expected!r}; offending ids: {wrong}"
        )


def flag_high_rssi(
    binned: Mapping[int, BinnedSeries],
    threshold: float = RSSI_THRESHOLD_V,
    min_occurrences: int = RSSI_MIN_OCCURRENCES,
    mapping: ElementMapping | None = None,
) -> list[LinkFlag]:
    """Select elements whose bin maximum exceeds the threshold repeatedly.

    An element is flagged iff strictly more than ``min_occurrences`` bins have
    max > threshold, filtering out one-off excursions. Evidence carries the
    exceeding-bin count and the peak value; reaching the no-signal level
    (0.5 V) is reported as a hard failure but is not the selection criterion.
    """
    if not (0.0 < threshold <= RSSI_NO_SIGNAL_V):
        raise ValidationError(f"threshold must be in (0, {RSSI_NO_SIGNAL_V}], got {threshold}")
    if min_occurrences < 1:
        raise ValidationError("min_occurrences must be >= 1")
    _check_kind(binned.keys(), mapping, KIND_RSSI, "flag_high_rssi")
    flags = []
    for element in sorted(binned):
        series = binned[element]
        over = [b for b in series.bins if b.max > threshold]
        if len(over) > min_occurrences:
            peak = max(b.max for b in over)
            flags.append(
                LinkFlag(
                    element_id=element,
                    rule=RULE_HIGH_RSSI,
                    window=(over[0].bin_start, over[-1].bin_start + series.bin_width_us),
                    occurrence_count=len(over),
                    peak_value=peak,
                    hard_failure=peak >= RSSI_NO_SIGNAL_V,
                )
            )
    return flags


def flag_high_rssi_samples(
    batches,
    threshold: float = RSSI_THRESHOLD_V,
    min_occurrences: int = RSSI_MIN_OCCURRENCES,
) -> list[LinkFlag]:
    """Raw-sample variant of flag_high_rssi: counts individual measurements
    over the threshold instead of bins (a burst within one bin counts fully).
    """
    counts: dict[int, int] = {}
    peaks: dict[int, float] = {}
    windows: dict[int, tuple[int, int]] = {}
    for batch in batches:
        if batch.value is None:
            raise ValidationError("sample counting requires the value column")
        over = batch.value > threshold
        if not over.any():
            continue
        eids = batch.element_id[over]
        ts = batch.ts[over]
        vals = batch.value[over]
        for element in np.unique(eids):
            sel = eids == element
            element = int(element)
            counts[element] = counts.get(element, 0) + int(sel.sum())
            peaks[element] = max(peaks.get(element, 0.0), float(vals[sel].max()))
            lo, hi = int(ts[sel].min()), int(ts[sel].max()) + 1
            if element in windows:
                windows[element] = (min(windows[element][0], lo), max(windows[element][1], hi))
            else:
                windows[element] = (lo, hi)
    return [
        LinkFlag(
            element_id=e,
            rule=RULE_HIGH_RSSI,
            window=windows[e],
            occurrence_count=counts[e],
            peak_value=peaks[e],
            hard_failure=peaks[e] >= RSSI_NO_SIGNAL_V,
        )
        for e in sorted(counts)
        if counts[e] > min_occurrences
    ]


def flag_oscillating(
    binned: Mapping[int, BinnedSeries],
    std_threshold: float = STD_THRESHOLD_V,
    min_bins: int = STD_MIN_BINS,
    mapping: ElementMapping | None = None,
    whole_window: bool = False,
) -> list[LinkFlag]:
    """Select elements with unstable values: per-bin std over the threshold in
    at least ``min_bins`` bins (default), or over the whole window when
    ``whole_window`` is set.
    """
    if std_threshold <= 0:
        raise ValidationError("std_threshold must be positive")
    if min_bins < 1:
        raise ValidationError("min_bins must be >= 1")
    _check_kind(binned.keys(), mapping, KIND_RSSI, "flag_oscillating")
    flags = []
    for element in sorted(binned):
        series = binned[element]
        if whole_window:
            std = _combined_std(series.bins)
            if std > std_threshold:
                flags.append(
                    LinkFlag(
                        element_id=element,
                        rule=RULE_OSCILLATING,
                        window=(
                            series.bins[0].bin_start,
                            series.bins[-1].bin_start + series.bin_width_us,
                        ),
                        occurrence_count=len(series.bins),
                        peak_std=std,
                    )
                )
            continue
        unstable = [b for b in series.bins if b.std > std_threshold]
        if len(unstable) >= min_bins:
            flags.append(
                LinkFlag(
                    element_id=element,
                    rule=RULE_OSCILLATING,
                    window=(
                        unstable[0].bin_start,
                        unstable[-1].bin_start + series.bin_width_us,
                    ),
                    occurrence_count=len(unstable),
                    peak_std=max(b.std for b in unstable),
                )
            )
    return flags


def _combined_std(bins: Sequence) -> float:
    n, mean, m2 = 0, 0.0, 0.0
    for b in bins:
        bn = b.count
        b_m2 = b.std * b.std * bn
        if n == 0:
            n, mean, m2 = bn, b.mean, b_m2
        else:
            delta = b.mean - mean
            total = n + bn
            mean += delta * bn / total
            m2 += b_m2 + delta * delta * n * bn / total
            n = total
    return math.sqrt(max(m2, 0.0) / n) if n else 0.0


def detect_stale(
    last_update: Mapping[int, int],
    ts_index: Mapping[int, np.ndarray],
    staleness_us: int = STALENESS_US,
    masks: IntervalSet | None = None,
    window: tuple[int, int] | None = None,
) -> list[LinkFlag]:
    """Find elements whose archive stopped updating.

    For each element, the silent periods between consecutive records (and the
    window edges) are computed, known outage periods (``masks``, e.g. the
    year-end shutdown) are subtracted, and any remaining silence longer than
    ``staleness_us`` becomes a stale interval. Re-enable attempts show up as
    boundaries between consecutive intervals.

    ``ts_index`` maps each candidate element to its sorted record timestamps
    inside the window (an empty array marks an element known to exist but
    silent throughout); ``last_update`` supplies newest timestamps and may be
    a superset.
    """
    if staleness_us <= 0:
        raise ValidationError("staleness must be positive")
    masks = masks if masks is not None else IntervalSet.empty()
    if window is None:
        all_ts = [int(v) for v in last_update.values()]
        for arr in ts_index.values():
            if len(arr):
                all_ts.extend((int(arr[0]), int(arr[-1])))
        if not all_ts:
            return []
        window = (min(all_ts), max(all_ts) + 1)
    win_lo, win_hi = window

    flags = []
    for element in sorted(ts_index):
        ts = np.asarray(ts_index[element], dtype=np.int64)
        edges = np.concatenate(([win_lo], ts, [win_hi]))
        gap_lo = edges[:-1]
        gap_hi = edges[1:]
        # Mask subtraction only shrinks a gap, so shorter gaps can't qualify.
        candidates = np.flatnonzero(gap_hi - gap_lo > staleness_us)
        stale: list[tuple[int, int]] = []
        for i in candidates.tolist():
            for piece_lo, piece_hi in masks.subtract_from(int(gap_lo[i]), int(gap_hi[i])):
                if piece_hi - piece_lo > staleness_us:
                    stale.append((piece_lo, piece_hi))
        if stale:
            flags.append(
                LinkFlag(
                    element_id=element,
                    rule=RULE_STALE,
                    window=window,
                    occurrence_count=len(stale),
                    stale_intervals=tuple(stale),
                )
            )
    return flags


def hv_nominal_counts(
    daily_max: Mapping[tuple[int, date], float],
    nominal: float = HV_NOMINAL_V,
    run_intervals: IntervalSet | None = None,
) -> DailyCounts:
    """Count channels whose daily maximum sits at/above vs below nominal.

    Only days intersecting the run intervals are counted (None counts every
    day with data). A channel at exactly nominal counts as above, so the
    nominal operating point is never reported as a deficit.
    """
    per_day: dict[date, list[float]] = {}
    for (_, day), value in daily_max.items():
        per_day.setdefault(day, []).append(value)
    out: DailyCounts = {}
    for day in sorted(per_day):
        if run_intervals is not None:
            start = (day - date(1970, 1, 1)).days * US_PER_DAY
            if not run_intervals.overlaps(start, start + US_PER_DAY):
                continue
        values = per_day[day]
        above = sum(1 for v in values if v >= nominal)
        out[day] = DayCount(above=above, below=len(values) - above)
    return out


def geometry_grid(
    flags: Iterable[LinkFlag],
    mapping: ElementMapping,
    wheel: int,
    *,
    n_layers: int = N_LAYERS,
    n_sectors: int = N_SECTORS,
) -> np.ndarray:
    """Count flagged elements per (layer, sector) cell for one wheel.

    Returns an int array of shape (n_layers, n_sectors); cell [l-1, s-1]
    holds the number of distinct flagged elements mapped to layer l, sector
    s. The total over all cells equals the number of flagged elements on the
    wheel. Flagged elements missing from the mapping are an error.
    """
    if not (1 <= wheel <= N_WHEELS):
        raise ValidationError(f"wheel must be in 1..{N_WHEELS}, got {wheel}")
    elements = sorted({f.element_id for f in flags})
    unmapped = [e for e in elements if e not in mapping]
    if unmapped:
        raise ValidationError(f"flagged elements missing from mapping: {unmapped}")
    grid = np.zeros((n_layers, n_sectors), dtype=np.int64)
    for element in elements:
        info = mapping.get(element)
        if info.wheel != wheel:
            continue
        grid[info.layer - 1, info.sector - 1] += 1
    return grid


# -- end-to-end drivers ------------------------------------------------------


@dataclass
class PhaseTimings:
    """Wall-clock split of an analysis run: scanning+binning vs flag logic."""

    scan_bin_s: float = 0.0
    analyze_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.scan_bin_s + self.analyze_s


@dataclass
class AnalysisRun:
    flags: list[LinkFlag] = field(default_factory=list)
    counts: DailyCounts = field(default_factory=dict)
    grid: np.ndarray | None = None
    stats: ScanStats = field(default_factory=ScanStats)
    timings: PhaseTimings = field(default_factory=PhaseTimings)


def run_failed_links(
    store: TableStore,
    manifest: Manifest,
    mapping: ElementMapping,
    time_range: tuple[int, int],
    *,
    threshold: float = RSSI_THRESHOLD_V,
    min_occurrences: int = RSSI_MIN_OCCURRENCES,
    bin_width=US_PER_DAY,
    count_samples: bool = False,
) -> AnalysisRun:
    """Scan + bin the diagnostic voltages of all rssi elements, then select
    failed links."""
    started = time.perf_counter()
    elements = mapping.elements_of_kind(KIND_RSSI)
    batches, stats = store.scan_batches(
        manifest, time_range, element_filter=elements, projection=("element_id", "ts", "value")
    )
    if count_samples:
        materialized = list(batches)
        mid = time.perf_counter()
        flags = flag_high_rssi_samples(materialized, threshold, min_occurrences)
    else:
        binned = time_bin(batches, bin_width)
        mid = time.perf_counter()
        flags = flag_high_rssi(binned, threshold, min_occurrences, mapping=mapping)
    done = time.perf_counter()
    return AnalysisRun(
        flags=flags,
        stats=stats,
        timings=PhaseTimings(scan_bin_s=mid - started, analyze_s=done - mid),
    )


def run_oscillating(
    store: TableStore,
    manifest: Manifest,
    mapping: ElementMapping,
    time_range: tuple[int, int],
    *,
    std_threshold: float = STD_THRESHOLD_V,
    min_bins: int = STD_MIN_BINS,
    bin_width=US_PER_DAY,
    whole_window: bool = False,
) -> AnalysisRun:
    started = time.perf_counter()
    elements = mapping.elements_of_kind(KIND_RSSI)
    batches, stats = store.scan_batches(
        manifest, time_range, element_filter=elements, projection=("element_id", "ts", "value")
    )
    binned = time_bin(batches, bin_width)
    mid = time.perf_counter()
    flags = flag_oscillating(
        binned, std_threshold, min_bins, mapping=mapping, whole_window=whole_window
    )
    done = time.perf_counter()
    return AnalysisRun(
        flags=flags,
        stats=stats,
        timings=PhaseTimings(scan_bin_s=mid - started, analyze_s=done - mid),
    )


def run_stale(
    store: TableStore,
    manifest: Manifest,
    mapping: ElementMapping,
    time_range: tuple[int, int],
    *,
    staleness_us: int = STALENESS_US,
    masks: IntervalSet | None = None,
    kind: str = KIND_RSSI,
) -> AnalysisRun:
    """Gap analysis over the raw archive timestamps of all elements of a kind.

    Every mapped element of the kind is a candidate, including those with no
    data at all in the window.
    """
    started = time.perf_counter()
    elements = mapping.elements_of_kind(kind)
    batches, stats = store.scan_batches(
        manifest, time_range, element_filter=elements, projection=("element_id", "ts")
    )
    chunks: dict[int, list[np.ndarray]] = {e: [] for e in elements}
    for batch in batches:
        starts = group_starts(batch.element_id, np.zeros(len(batch), dtype=np.int8))
        ends = np.append(starts[1:], len(batch))
        for i, start in enumerate(starts.tolist()):
            chunks[int(batch.element_id[start])].append(batch.ts[start : ends[i]])
    ts_index = {
        e: (np.concatenate(parts) if parts else np.empty(0, dtype=np.int64))
        for e, parts in chunks.items()
    }
    last_update = {e: int(ts[-1]) for e, ts in ts_index.items() if len(ts)}
    mid = time.perf_counter()
    flags = detect_stale(last_update, ts_index, staleness_us, masks, window=time_range)
    done = time.perf_counter()
    return AnalysisRun(
        flags=flags,
        stats=stats,
        timings=PhaseTimings(scan_bin_s=mid - started, analyze_s=done - mid),
    )


def run_hv_nominal(
    store: TableStore,
    manifest: Manifest,
    mapping: ElementMapping,
    time_range: tuple[int, int],
    *,
    nominal: float = HV_NOMINAL_V,
    run_intervals: IntervalSet | None = None,
) -> AnalysisRun:
    started = time.perf_counter()
    elements = mapping.elements_of_kind(KIND_HV_VOLTAGE)
    batches, stats = store.scan_batches(
        manifest, time_range, element_filter=elements, projection=("element_id", "ts", "value")
    )
    daily = daily_extreme(batches, "max")
    mid = time.perf_counter()
    counts = hv_nominal_counts(daily, nominal, run_intervals)
    done = time.perf_counter()
    return AnalysisRun(
        counts=counts,
        stats=stats,
        timings=PhaseTimings(scan_bin_s=mid - started, analyze_s=done - mid),
    )
