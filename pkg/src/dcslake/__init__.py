"""Desk-scale lakehouse for control-system telemetry.

Day-partitioned columnar storage with versioned manifests and pruned scans,
watermark-based incremental sync, query primitives (time binning, interval
joins), detector-health analyses, and a synthetic data generator for testing
the whole pipeline against injected ground truth.
"""

from .analyses import (
    AnalysisRun,
    DailyCounts,
    DayCount,
    ElementInfo,
    ElementMapping,
    LinkFlag,
    detect_stale,
    flag_high_rssi,
    flag_oscillating,
    geometry_grid,
    hv_nominal_counts,
    run_failed_links,
    run_hv_nominal,
    run_oscillating,
    run_stale,
)
from .errors import (
    CommitConflictError,
    ConfigError,
    DcsLakeError,
    ParseError,
    PartitionBoundaryError,
    ScanError,
    SourceError,
    ValidationError,
)
from .ingest import (
    ScheduleConfig,
    SyncReport,
    TableSyncSpec,
    run_schedule,
    sync_full_overwrite,
    sync_incremental,
)
from .query import (
    BinnedSeries,
    BinStat,
    IntervalSet,
    daily_extreme,
    interval_semijoin,
    intervals_from_runs,
    last_update_index,
    time_bin,
)
from .records import EventColumns, EventRecord
from .simgen import FaultSpec, GenConfig, GroundTruth, default_config, generate
from .sources import (
    ArraySource,
    FixtureSource,
    RunInterval,
    SqlSource,
    fetch_run_intervals,
)
from .storage import (
    Manifest,
    PartitionMeta,
    ScanStats,
    TableStore,
    ValueRange,
    Watermark,
    open_table,
    prune_partitions,
)

__version__ = "0.1.0"
