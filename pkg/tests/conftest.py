from __future__ import annotations

import numpy as np
import pytest

from dcslake.records import US_PER_DAY, EventColumns, EventRecord, day_start_us
from dcslake.storage import TableStore, Watermark


def make_records(
    rng: np.random.Generator,
    n: int,
    *,
    start_us: int,
    span_us: int,
    n_elements: int = 20,
    element_base: int = 1,
    value_range: tuple[float, float] = (0.0, 1.0),
) -> list[EventRecord]:
    """Random records; (element_id, ts) pairs are not guaranteed unique."""
    eids = rng.integers(element_base, element_base + n_elements, size=n)
    ts = rng.integers(start_us, start_us + span_us, size=n)
    values = rng.uniform(*value_range, size=n)
    status = rng.integers(0, 4, size=n)
    return [
        EventRecord(int(e), int(t), float(v), int(s))
        for e, t, v, s in zip(eids, ts, values, status)
    ]


def dedup_last(records: list[EventRecord]) -> dict[tuple[int, int], EventRecord]:
    """Brute-force last-wins dedup oracle."""
    out: dict[tuple[int, int], EventRecord] = {}
    for r in records:
        out[(r.element_id, r.ts)] = r
    return out


def populate_store(
    store: TableStore, records: list[EventRecord], overlap_us: int = 3_600_000_000
):
    """Write records day by day and commit one manifest version."""
    by_day: dict = {}
    for r in records:
        by_day.setdefault(r.ts // US_PER_DAY, []).append(r)
    metas = []
    max_ts = None
    for day_idx in sorted(by_day):
        day_records = by_day[day_idx]
        from dcslake.records import day_of

        meta = store.write_partition(day_of(day_records[0].ts), day_records)
        metas.append(meta)
        max_ts = max(max_ts or 0, max(r.ts for r in day_records))
    return store.commit_manifest(metas, Watermark(store.table, max_ts, overlap_us))


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def store(tmp_path):
    return TableStore(tmp_path / "lake", "eventhistory")
