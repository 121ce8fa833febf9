"""Synthetic telemetry generator with fault injection and ground truth.

Produces archive-like measurement streams for optical-link diagnostic
voltages and HV channels, with injectable fault patterns:

* ``stuck_high``      — diagnostic voltage pinned into (0.45, 0.5] for a window
                        (dropping back afterwards models a long-term recovery);
* ``oscillating``     — value toggling between two levels within the window;
* ``disabled_interval`` — the element emits nothing during the window
                        (re-enable cycles are just several windows);
* ``hv_off_interval`` — HV channels forced to ~0 V, labelled as a special run.

Change-based archiving is modelled with a deadband (a sample is emitted only
when it moved more than ``deadband`` from the last emitted value) plus a slow
heartbeat; a global shutdown window silences every element. Output is
deterministic for a given seed, ordered by timestamp, and written in the
fixture format the sync pipeline consumes unchanged.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .analyses import (
    ElementInfo,
    ElementMapping,
    KIND_HV_VOLTAGE,
    KIND_RSSI,
    N_LAYERS,
    N_SECTORS,
    RULE_HIGH_RSSI,
    RULE_OSCILLATING,
    RULE_STALE,
)
from .errors import ValidationError
from .query import IntervalSet
from .records import (
    STATUS_NULL,
    US_PER_DAY,
    US_PER_SECOND,
    EventColumns,
    day_start_us,
    iso_from_micros,
    micros_from_iso,
)
from .sources import RunInterval

FAULT_STUCK_HIGH = "stuck_high"
FAULT_OSCILLATING = "oscillating"
FAULT_DISABLED = "disabled_interval"
FAULT_HV_OFF = "hv_off_interval"
FAULT_KINDS = (FAULT_STUCK_HIGH, FAULT_OSCILLATING, FAULT_DISABLED, FAULT_HV_OFF)

_EXPECTED_RULE = {
    FAULT_STUCK_HIGH: RULE_HIGH_RSSI,
    FAULT_OSCILLATING: RULE_OSCILLATING,
    FAULT_DISABLED: RULE_STALE,
    FAULT_HV_OFF: None,
}

RSSI_ID_BASE = 1_000
HV_ID_BASE = 20_000


@dataclass(frozen=True)
class FaultSpec:
    """One injected fault: what, who, and when."""

    element_id: int
    kind: str
    start_ts: int
    end_ts: int
    level: float = 0.47       # stuck_high plateau
    low: float = 0.10         # oscillating levels
    high: float = 0.40


@dataclass
class GenConfig:
    """Shape and phenomenology of one generated dataset."""

    start_day: date = date(2024, 1, 1)
    days: int = 365
    n_rssi: int = 512
    n_hv: int = 64
    cadence_s: float = 1800.0
    jitter_s: float = 60.0
    heartbeat_s: float = 4 * 3600.0
    deadband_v: float = 0.002
    rssi_baseline: tuple[float, float] = (0.15, 0.30)
    rssi_noise_v: float = 0.004
    hv_nominal_v: float = 505.0
    hv_noise_v: float = 0.05
    status_null_rate: float = 0.01
    faults: list[FaultSpec] = field(default_factory=list)
    shutdown: tuple[int, int] | None = None
    run_block_days: tuple[float, float] = (2.0, 5.0)
    run_gap_days: tuple[float, float] = (0.5, 1.5)
    seed: int = 0

    @property
    def start_ts(self) -> int:
        return day_start_us(self.start_day)

    @property
    def end_ts(self) -> int:
        return self.start_ts + self.days * US_PER_DAY

    def rssi_ids(self) -> list[int]:
        return [RSSI_ID_BASE + i for i in range(self.n_rssi)]

    def hv_ids(self) -> list[int]:
        return [HV_ID_BASE + i for i in range(self.n_hv)]

    def validate(self) -> None:
        if self.days < 1 or self.n_rssi < 1 or self.n_hv < 0:
            raise ValidationError("span and element counts must be positive")
        if self.cadence_s <= 0 or self.jitter_s < 0 or self.heartbeat_s <= 0:
            raise ValidationError("cadence and heartbeat must be positive")
        if self.jitter_s * 2 >= self.cadence_s:
            raise ValidationError("jitter must be smaller than half the cadence")
        ids = set(self.rssi_ids()) | set(self.hv_ids())
        windows: dict[int, list[tuple[int, int]]] = {}
        for f in self.faults:
            if f.kind not in FAULT_KINDS:
                raise ValidationError(f"unknown fault kind {f.kind!r}")
            if f.element_id not in ids:
                raise ValidationError(f"fault on unknown element {f.element_id}")
            if f.kind == FAULT_HV_OFF and f.element_id not in self.hv_ids():
                raise ValidationError(f"hv_off fault on non-HV element {f.element_id}")
            if f.kind != FAULT_HV_OFF and f.element_id in self.hv_ids():
                raise ValidationError(f"link fault on HV element {f.element_id}")
            if not (self.start_ts <= f.start_ts < f.end_ts <= self.end_ts):
                raise ValidationError(
                    f"fault window outside generated span for element {f.element_id}"
                )
            windows.setdefault(f.element_id, []).append((f.start_ts, f.end_ts))
        for element, spans in windows.items():
            spans.sort()
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                if s2 < e1:
                    raise ValidationError(f"overlapping fault windows on element {element}")
        if self.shutdown is not None:
            s, e = self.shutdown
            if not (self.start_ts <= s < e <= self.end_ts):
                raise ValidationError("shutdown window outside generated span")


@dataclass(frozen=True)
class TruthEntry:
    element_id: int
    fault_kind: str
    start_ts: int
    end_ts: int
    expected_rule: str | None


@dataclass(frozen=True)
class GroundTruth:
    """Machine-readable record of every injection, for oracle tests."""

    entries: tuple[TruthEntry, ...]

    def expected_elements(self, rule: str) -> set[int]:
        return {e.element_id for e in self.entries if e.expected_rule == rule}

    def windows_for(self, element_id: int, rule: str) -> list[tuple[int, int]]:
        return sorted(
            (e.start_ts, e.end_ts)
            for e in self.entries
            if e.element_id == element_id and e.expected_rule == rule
        )

    def to_json(self) -> dict:
        return {
            "entries": [
                {
                    "element_id": e.element_id,
                    "fault_kind": e.fault_kind,
                    "start": iso_from_micros(e.start_ts),
                    "end": iso_from_micros(e.end_ts),
                    "expected_rule": e.expected_rule,
                }
                for e in self.entries
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(
            entries=tuple(
                TruthEntry(
                    element_id=int(e["element_id"]),
                    fault_kind=e["fault_kind"],
                    start_ts=micros_from_iso(e["start"]),
                    end_ts=micros_from_iso(e["end"]),
                    expected_rule=e["expected_rule"],
                )
                for e in obj["entries"]
            )
        )


@dataclass
class GenResult:
    events: EventColumns
    truth: GroundTruth
    run_intervals: list[RunInterval]
    shutdown_mask: IntervalSet
    mapping: ElementMapping


def build_mapping(config: GenConfig) -> ElementMapping:
    """Assign generated elements to wheels/sectors/layers.

    Links fill each wheel sector-by-sector, layer-by-layer; HV channels model
    the 64 channels of one sector (8 per layer).
    """
    infos = []
    per_wheel = N_SECTORS * N_LAYERS
    for i, element in enumerate(config.rssi_ids()):
        wheel = (i // per_wheel) % 2 + 1
        within = i % per_wheel
        sector = within // N_LAYERS + 1
        layer = within % N_LAYERS + 1
        copy = i // (2 * per_wheel)
        infos.append(
            ElementInfo(
                element_id=element,
                detector="MMG",
                wheel=wheel,
                sector=sector,
                layer=layer,
                board=f"L1DDC-W{wheel}S{sector:02d}L{layer}-{copy}",
                kind=KIND_RSSI,
            )
        )
    for j, element in enumerate(config.hv_ids()):
        layer = j // 8 % N_LAYERS + 1
        infos.append(
            ElementInfo(
                element_id=element,
                detector="MMG",
                wheel=1,
                sector=1,
                layer=layer,
                board=f"HV-S01L{layer}-{j % 8}",
                kind=KIND_HV_VOLTAGE,
            )
        )
    return ElementMapping(infos)


def _deadband_filter(
    ts: np.ndarray, values: np.ndarray, deadband: float, heartbeat_us: int
) -> np.ndarray:
    """Emission mask: value moved beyond the deadband or heartbeat elapsed."""
    n = len(ts)
    mask = np.ones(n, dtype=bool)
    if n == 0 or deadband <= 0:
        return mask
    ts_list = ts.tolist()
    val_list = values.tolist()
    last_ts = ts_list[0]
    last_val = val_list[0]
    for i in range(1, n):
        v = val_list[i]
        t = ts_list[i]
        if abs(v - last_val) > deadband or t - last_ts >= heartbeat_us:
            last_ts = t
            last_val = v
        else:
            mask[i] = False
    return mask


def _sample_times(rng: np.random.Generator, config: GenConfig) -> np.ndarray:
    cadence_us = int(config.cadence_s * US_PER_SECOND)
    jitter_us = int(config.jitter_s * US_PER_SECOND)
    count = (config.end_ts - config.start_ts) // cadence_us
    ts = config.start_ts + np.arange(count, dtype=np.int64) * cadence_us
    if jitter_us > 0:
        ts = ts + rng.integers(-jitter_us, jitter_us + 1, size=count, dtype=np.int64)
    ts = ts[(ts >= config.start_ts) & (ts < config.end_ts)]
    ts.sort(kind="stable")
    return ts


def _window_mask(ts: np.ndarray, windows: Sequence[tuple[int, int]]) -> np.ndarray:
    inside = np.zeros(len(ts), dtype=bool)
    for start, end in windows:
        lo = np.searchsorted(ts, start, side="left")
        hi = np.searchsorted(ts, end, side="left")
        inside[lo:hi] = True
    return inside


def _element_stream(
    rng: np.random.Generator,
    config: GenConfig,
    element: int,
    baseline: float,
    noise: float,
    faults: Sequence[FaultSpec],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ts = _sample_times(rng, config)
    values = baseline + rng.normal(0.0, noise, size=len(ts))

    removed = np.zeros(len(ts), dtype=bool)
    if config.shutdown is not None:
        removed |= _window_mask(ts, [config.shutdown])
    for fault in faults:
        window = [(fault.start_ts, fault.end_ts)]
        if fault.kind == FAULT_DISABLED:
            removed |= _window_mask(ts, window)
        elif fault.kind == FAULT_STUCK_HIGH:
            sel = _window_mask(ts, window)
            stuck = fault.level + rng.normal(0.0, noise, size=int(sel.sum()))
            values[sel] = np.clip(stuck, 0.4505, 0.5)
        elif fault.kind == FAULT_OSCILLATING:
            sel = np.flatnonzero(_window_mask(ts, window))
            toggle = np.where(np.arange(len(sel)) % 2 == 0, fault.low, fault.high)
            values[sel] = toggle + rng.normal(0.0, noise * 0.5, size=len(sel))
        elif fault.kind == FAULT_HV_OFF:
            sel = _window_mask(ts, window)
            values[sel] = np.abs(rng.normal(0.0, 0.2, size=int(sel.sum())))

    ts = ts[~removed]
    values = values[~removed]
    emit = _deadband_filter(
        ts, values, config.deadband_v, int(config.heartbeat_s * US_PER_SECOND)
    )
    ts = ts[emit]
    values = values[emit]
    status = np.zeros(len(ts), dtype=np.int32)
    if config.status_null_rate > 0 and len(ts):
        status[rng.random(len(ts)) < config.status_null_rate] = STATUS_NULL
    return ts, values, status


def _build_runs(rng: np.random.Generator, config: GenConfig) -> list[RunInterval]:
    """Physics blocks filling the span around blocked periods, plus one
    special run per hv_off window."""
    blocked_pairs = [
        (f.start_ts, f.end_ts) for f in config.faults if f.kind == FAULT_HV_OFF
    ]
    if config.shutdown is not None:
        blocked_pairs.append(config.shutdown)
    blocked = IntervalSet.from_pairs(blocked_pairs) if blocked_pairs else IntervalSet.empty()

    runs: list[RunInterval] = []
    run_number = 460_000
    t = config.start_ts
    min_block = int(config.run_block_days[0] * US_PER_DAY)
    max_block = int(config.run_block_days[1] * US_PER_DAY)
    min_gap = int(config.run_gap_days[0] * US_PER_DAY)
    max_gap = int(config.run_gap_days[1] * US_PER_DAY)
    while t < config.end_ts:
        if blocked.contains(t):
            idx = int(np.searchsorted(blocked.starts, t, side="right")) - 1
            t = int(blocked.ends[idx])
            continue
        length = int(rng.integers(min_block, max_block + 1))
        end = min(t + length, config.end_ts)
        nxt = blocked.starts[np.searchsorted(blocked.starts, t, side="left"):]
        if len(nxt):
            end = min(end, int(nxt[0]))
        if end - t >= US_PER_DAY // 4:
            runs.append(RunInterval(run_number, t, end, "physics"))
            run_number += 1
        t = end + int(rng.integers(min_gap, max_gap + 1))
    for start, end in sorted(set(
        (f.start_ts, f.end_ts) for f in config.faults if f.kind == FAULT_HV_OFF
    )):
        runs.append(RunInterval(run_number, start, end, "special"))
        run_number += 1
    runs.sort(key=lambda r: (r.start_ts, r.end_ts))
    return runs


def generate(config: GenConfig) -> GenResult:
    """Produce the full synthetic dataset for a configuration.

    Deterministic for a given seed: per-element RNG streams are derived from
    the seed and the element index, so changing one parameter does not
    reshuffle unrelated elements.
    """
    config.validate()
    root_seq = np.random.SeedSequence(config.seed)
    faults_by_element: dict[int, list[FaultSpec]] = {}
    for fault in config.faults:
        faults_by_element.setdefault(fault.element_id, []).append(fault)

    all_ids = config.rssi_ids() + config.hv_ids()
    streams = root_seq.spawn(len(all_ids) + 1)
    run_rng = np.random.default_rng(streams[-1])

    base_rng = np.random.default_rng(root_seq.spawn(1)[0])
    rssi_base = base_rng.uniform(*config.rssi_baseline, size=config.n_rssi)

    hv_set = set(config.hv_ids())
    eids: list[np.ndarray] = []
    tss: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    stats: list[np.ndarray] = []
    for idx, element in enumerate(all_ids):
        rng = np.random.default_rng(streams[idx])
        if element in hv_set:
            baseline, noise = config.hv_nominal_v, config.hv_noise_v
        else:
            baseline, noise = float(rssi_base[idx]), config.rssi_noise_v
        ts, values, status = _element_stream(
            rng, config, element, baseline, noise, faults_by_element.get(element, ())
        )
        eids.append(np.full(len(ts), element, dtype=np.uint32))
        tss.append(ts)
        vals.append(values)
        stats.append(status)

    events = EventColumns(
        element_id=np.concatenate(eids),
        ts=np.concatenate(tss),
        value=np.concatenate(vals),
        status=np.concatenate(stats),
    )
    order = np.argsort(events.ts, kind="stable")
    events = events.take(order)

    truth = GroundTruth(
        entries=tuple(
            TruthEntry(
                element_id=f.element_id,
                fault_kind=f.kind,
                start_ts=f.start_ts,
                end_ts=f.end_ts,
                expected_rule=_EXPECTED_RULE[f.kind],
            )
            for f in config.faults
        )
    )
    shutdown_mask = (
        IntervalSet.from_pairs([config.shutdown], label="shutdown")
        if config.shutdown is not None
        else IntervalSet.empty("shutdown")
    )
    return GenResult(
        events=events,
        truth=truth,
        run_intervals=_build_runs(run_rng, config),
        shutdown_mask=shutdown_mask,
        mapping=build_mapping(config),
    )


def plan_random_faults(
    config: GenConfig,
    *,
    n_stuck: int = 6,
    n_oscillating: int = 6,
    n_disabled: int = 6,
    n_hv_off: int = 2,
    rng: np.random.Generator | None = None,
) -> list[FaultSpec]:
    """Draw a non-overlapping fault plan consistent with default thresholds.

    Windows are long enough to produce the required number of daily bins and
    keep clear of the shutdown so injected truth is exactly recoverable.
    """
    rng = rng or np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[-1])
    margin = US_PER_DAY
    keepout = []
    if config.shutdown is not None:
        keepout.append((config.shutdown[0] - margin, config.shutdown[1] + margin))
    keepout_set = IntervalSet.from_pairs(keepout) if keepout else IntervalSet.empty()

    def draw_window(min_days: float, max_days: float, *, day_aligned: bool = False):
        for _ in range(200):
            length = int(rng.uniform(min_days, max_days) * US_PER_DAY)
            start = int(
                rng.integers(config.start_ts + margin, config.end_ts - length - margin)
            )
            if day_aligned:
                start -= start % US_PER_DAY
                length -= length % US_PER_DAY
                length = max(length, US_PER_DAY)
            end = start + length
            if not keepout_set.overlaps(start - margin, end + margin):
                return start, end
        raise ValidationError("could not place a fault window; span too crowded")

    needed = n_stuck + n_oscillating + n_disabled
    if needed > config.n_rssi:
        raise ValidationError("more faulty links requested than links configured")
    picks = rng.choice(config.rssi_ids(), size=needed, replace=False).tolist()
    stuck = picks[:n_stuck]
    oscillating = picks[n_stuck : n_stuck + n_oscillating]
    disabled = picks[n_stuck + n_oscillating :]

    min_span_days = 6.0
    if config.days < 20:
        raise ValidationError("fault planning needs a span of at least 20 days")

    faults: list[FaultSpec] = []
    for element in stuck:
        start, end = draw_window(min_span_days, min(15.0, config.days / 3))
        faults.append(FaultSpec(element, FAULT_STUCK_HIGH, start, end))
    for element in oscillating:
        start, end = draw_window(min_span_days, min(12.0, config.days / 3))
        faults.append(FaultSpec(element, FAULT_OSCILLATING, start, end))
    for element in disabled:
        n_windows = int(rng.integers(1, 4))
        cursor = config.start_ts + margin
        placed = 0
        for _ in range(n_windows):
            max_start = config.end_ts - 4 * US_PER_DAY
            if cursor >= max_start:
                break
            start = int(rng.integers(cursor, max_start))
            length = int(rng.uniform(3.0, 8.0) * US_PER_DAY)
            end = min(start + length, config.end_ts - margin)
            if keepout_set.overlaps(start - margin, end + margin) or end - start < 2 * US_PER_DAY:
                continue
            faults.append(FaultSpec(element, FAULT_DISABLED, start, end))
            placed += 1
            # Leave >= 2 days between windows so re-enables are visible.
            cursor = end + 2 * US_PER_DAY
        if placed == 0:
            start, end = draw_window(3.0, 8.0)
            faults.append(FaultSpec(element, FAULT_DISABLED, start, end))
    hv_ids = config.hv_ids()
    if hv_ids:
        for _ in range(n_hv_off):
            start, end = draw_window(1.0, 2.9, day_aligned=True)
            keepout.append((start - margin, end + margin))
            keepout_set = IntervalSet.from_pairs(keepout)
            for element in hv_ids:
                faults.append(FaultSpec(element, FAULT_HV_OFF, start, end))
    return faults


def default_config(
    seed: int = 0,
    *,
    days: int = 365,
    n_rssi: int = 512,
    n_hv: int = 64,
    start_day: date = date(2024, 1, 1),
    with_shutdown: bool = True,
    auto_faults: bool = True,
    **overrides,
) -> GenConfig:
    """A desk-scale configuration with a year-end shutdown and random faults."""
    config = GenConfig(
        start_day=start_day, days=days, n_rssi=n_rssi, n_hv=n_hv, seed=seed, **overrides
    )
    if with_shutdown and days >= 30:
        length_days = min(21, max(2, days // 12))
        start_idx = min(int(days * 0.92), days - length_days - 1)
        shutdown_start = config.start_ts + start_idx * US_PER_DAY
        config.shutdown = (shutdown_start, shutdown_start + length_days * US_PER_DAY)
    if auto_faults:
        config.faults = plan_random_faults(config)
    config.validate()
    return config


def write_outputs(result: GenResult, out_dir: str | Path) -> dict[str, Path]:
    """Write fixture events, ground truth, run intervals, mask, and mapping."""
    from .sources import write_fixture, write_mask_intervals, write_run_intervals

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.tsv",
        "truth": out / "truth.json",
        "runs": out / "runs.tsv",
        "mask": out / "shutdown_mask.tsv",
        "mapping": out / "mapping.tsv",
    }
    write_fixture(paths["events"], result.events)
    paths["truth"].write_text(json.dumps(result.truth.to_json(), indent=1))
    write_run_intervals(paths["runs"], result.run_intervals)
    write_mask_intervals(
        paths["mask"],
        [(int(s), int(e), "shutdown") for s, e in result.shutdown_mask.pairs()],
    )
    result.mapping.to_file(paths["mapping"])
    return paths
