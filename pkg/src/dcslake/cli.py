"""Command-line surface: generate, sync, query, analyze.

Outputs are plot-ready CSV or JSON carrying the same data; analysis reports
embed the thresholds they were produced with. Exit codes: 0 success, 1
runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import csv
import functools
import json
import sys

import click

from . import analyses as an
from .config import load_gen_config, load_schedule_config
from .errors import ConfigError, DcsLakeError, ParseError, ValidationError
from .ingest import run_schedule
from .query import (
    IntervalSet,
    interval_semijoin,
    intervals_from_runs,
    manifest_time_range,
    time_bin,
)
from .records import iso_from_micros, micros_from_iso, parse_duration_us
from .simgen import generate, write_outputs
from .sources import fetch_run_intervals, load_mask_intervals
from .storage import TableStore


def _fail_usage(message: str):
    raise click.UsageError(message)


def _guard(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ValidationError, ParseError) as exc:
            raise click.UsageError(str(exc)) from exc
        except DcsLakeError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _emit(rows: list[dict], params: dict, fmt: str, out) -> None:
    """Write rows as CSV (params as '#' comments) or JSON (params embedded)."""
    if fmt == "json":
        json.dump({"params": params, "rows": rows}, out, indent=1, default=str)
        out.write("\n")
        return
    for key in sorted(params):
        out.write(f"# {key}={params[key]}\n")
    if not rows:
        return
    writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def _parse_time(value: str, name: str) -> int:
    try:
        return micros_from_iso(value)
    except ValidationError as exc:
        _fail_usage(f"--{name}: {exc}")


def _time_range(from_, to, manifest) -> tuple[int, int]:
    if from_ is None and to is None:
        return manifest_time_range(manifest)
    if from_ is None or to is None:
        _fail_usage("--from and --to must be given together")
    lo = _parse_time(from_, "from")
    hi = _parse_time(to, "to")
    if lo >= hi:
        _fail_usage(f"--from must be before --to (got [{from_}, {to}))")
    return lo, hi


def _open_output(path: str | None):
    return open(path, "w", encoding="utf-8", newline="") if path else sys.stdout


_store_option = click.option(
    "--store", "store_root", required=True, type=click.Path(), help="Lake root directory."
)
_table_option = click.option("--table", default="eventhistory", show_default=True)
_format_option = click.option(
    "--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True
)
_out_option = click.option("--out", "out_path", default=None, help="Output file (default stdout).")
_from_option = click.option("--from", "from_", default=None, help="Window start (ISO-8601 UTC).")
_to_option = click.option("--to", default=None, help="Window end, exclusive (ISO-8601 UTC).")
_mapping_option = click.option(
    "--mapping",
    "mapping_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Element mapping file (TSV).",
)


@click.group()
@click.version_option(package_name="dcslake")
def main():
    """Telemetry lake: generate, sync, query, and analyze archived sensor data."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Generator YAML.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@_guard
def gen(config_path, out_dir, seed):
    """Generate a synthetic dataset: events, ground truth, runs, mask, mapping."""
    config = load_gen_config(config_path, seed_override=seed)
    result = generate(config)
    paths = write_outputs(result, out_dir)
    click.echo(
        json.dumps(
            {
                "rows": len(result.events),
                "elements": config.n_rssi + config.n_hv,
                "days": config.days,
                "seed": config.seed,
                "files": {k: str(v) for k, v in paths.items()},
            }
        )
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Schedule YAML.")
@click.option("--table", default=None, help="Sync only this table.")
@click.option("--once", "mode_once", flag_value=True, default=True, help="Run one cycle (default).")
@click.option("--loop", "mode_once", flag_value=False, help="Run forever at the cadence.")
@_guard
def sync(config_path, table, mode_once):
    """Run the sync schedule; prints one JSON report line per table per cycle."""
    config = load_schedule_config(config_path)
    if table is not None:
        specs = tuple(s for s in config.tables if s.table == table)
        if not specs:
            _fail_usage(f"table {table!r} not in config")
        config = type(config)(store_root=config.store_root, tables=specs, cadence_s=config.cadence_s)
    failed = False
    for report in run_schedule(config, cycles=1 if mode_once else None):
        click.echo(json.dumps(report.to_json()))
        failed = failed or not report.ok
    if failed:
        sys.exit(1)


@main.command()
@_store_option
@_table_option
@click.option("--from", "from_", required=True, help="Window start (ISO-8601 UTC).")
@click.option("--to", required=True, help="Window end, exclusive (ISO-8601 UTC).")
@click.option("--elements", default=None, help="Comma-separated element ids.")
@click.option("--bin", "bin_width", default=None, help="Bin width (e.g. 1d, 6h); raw rows if unset.")
@click.option(
    "--keep-runs",
    "keep_runs",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="Run-interval file; keep only rows during runs.",
)
@click.option(
    "--drop-mask",
    "drop_mask",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="Mask file; drop rows inside the mask.",
)
@_format_option
@_out_option
@_guard
def query(store_root, table, from_, to, elements, bin_width, keep_runs, drop_mask, fmt, out_path):
    """Scan a time range, optionally bin it, and emit plot-ready rows.

    Scan statistics go to stderr as one JSON line.
    """
    store = TableStore(store_root, table)
    manifest = store.read_manifest()
    lo = _parse_time(from_, "from")
    hi = _parse_time(to, "to")
    if lo >= hi:
        _fail_usage(f"--from must be before --to (got [{from_}, {to}))")
    element_filter = None
    if elements:
        try:
            element_filter = [int(e) for e in elements.split(",") if e.strip()]
        except ValueError:
            _fail_usage(f"--elements must be comma-separated integers, got {elements!r}")

    batches, stats = store.scan_batches(manifest, (lo, hi), element_filter=element_filter)
    stream = batches
    params = {
        "table": table,
        "manifest_version": manifest.version,
        "from": iso_from_micros(lo),
        "to": iso_from_micros(hi),
    }
    if keep_runs:
        runs = fetch_run_intervals(keep_runs)
        stream = interval_semijoin(stream, intervals_from_runs(runs), "keep")
        params["keep_runs"] = keep_runs
    if drop_mask:
        mask = IntervalSet.from_pairs([(s, e) for s, e, _ in load_mask_intervals(drop_mask)])
        stream = interval_semijoin(stream, mask, "drop")
        params["drop_mask"] = drop_mask

    rows: list[dict] = []
    if bin_width:
        width = parse_duration_us(bin_width)
        params["bin_width"] = bin_width
        for element, series in time_bin(stream, width).items():
            for b in series.bins:
                rows.append(
                    {
                        "element_id": element,
                        "bin_start": iso_from_micros(b.bin_start),
                        "count": b.count,
                        "min": b.min,
                        "max": b.max,
                        "mean": b.mean,
                        "std": b.std,
                        "last": b.last,
                    }
                )
    else:
        for batch in stream:
            for r in batch.iter_records():
                rows.append(
                    {
                        "element_id": r.element_id,
                        "ts": iso_from_micros(r.ts),
                        "value": r.value,
                        "status": r.status,
                    }
                )
    out = _open_output(out_path)
    try:
        _emit(rows, params, fmt, out)
    finally:
        if out is not sys.stdout:
            out.close()
    click.echo(json.dumps(stats.to_json()), err=True)


@main.group()
def analyze():
    """Detector-health analyses over the lake."""


def _analysis_frame(store_root, table, mapping_path, from_, to):
    store = TableStore(store_root, table)
    manifest = store.read_manifest()
    mapping = an.ElementMapping.from_file(mapping_path)
    time_range = _time_range(from_, to, manifest)
    return store, manifest, mapping, time_range


def _flag_rows(flags) -> list[dict]:
    rows = []
    for f in flags:
        rows.append(
            {
                "element_id": f.element_id,
                "rule": f.rule,
                "occurrences": f.occurrence_count,
                "peak_value": f.peak_value,
                "peak_std": f.peak_std,
                "hard_failure": f.hard_failure,
                "window_start": iso_from_micros(f.window[0]),
                "window_end": iso_from_micros(f.window[1]),
                "stale_intervals": ";".join(
                    f"{iso_from_micros(s)}..{iso_from_micros(e)}" for s, e in f.stale_intervals
                )
                or None,
            }
        )
    return rows


@analyze.command("failed-links")
@_store_option
@_table_option
@_mapping_option
@_from_option
@_to_option
@click.option("--threshold", default=an.RSSI_THRESHOLD_V, show_default=True, help="Volts.")
@click.option("--min-occurrences", default=an.RSSI_MIN_OCCURRENCES, show_default=True)
@click.option("--bin", "bin_width", default="1d", show_default=True)
@click.option("--count-samples", is_flag=True, help="Count raw samples instead of bins.")
@_format_option
@_out_option
@_guard
def failed_links(
    store_root, table, mapping_path, from_, to, threshold, min_occurrences, bin_width,
    count_samples, fmt, out_path,
):
    """Links whose diagnostic voltage repeatedly exceeds the failure threshold."""
    store, manifest, mapping, time_range = _analysis_frame(
        store_root, table, mapping_path, from_, to
    )
    result = an.run_failed_links(
        store,
        manifest,
        mapping,
        time_range,
        threshold=threshold,
        min_occurrences=min_occurrences,
        bin_width=parse_duration_us(bin_width),
        count_samples=count_samples,
    )
    params = {
        "analysis": "failed-links",
        "threshold_v": threshold,
        "min_occurrences": min_occurrences,
        "bin_width": bin_width,
        "count_samples": count_samples,
        "from": iso_from_micros(time_range[0]),
        "to": iso_from_micros(time_range[1]),
        "manifest_version": manifest.version,
        "scan_bin_seconds": round(result.timings.scan_bin_s, 3),
        "total_seconds": round(result.timings.total_s, 3),
    }
    out = _open_output(out_path)
    try:
        _emit(_flag_rows(result.flags), params, fmt, out)
    finally:
        if out is not sys.stdout:
            out.close()


@analyze.command()
@_store_option
@_table_option
@_mapping_option
@_from_option
@_to_option
@click.option("--std-threshold", default=an.STD_THRESHOLD_V, show_default=True, help="Volts.")
@click.option("--min-bins", default=an.STD_MIN_BINS, show_default=True)
@click.option("--bin", "bin_width", default="1d", show_default=True)
@click.option("--whole-window", is_flag=True, help="Use the std over the whole window.")
@_format_option
@_out_option
@_guard
def oscillating(
    store_root, table, mapping_path, from_, to, std_threshold, min_bins, bin_width,
    whole_window, fmt, out_path,
):
    """Links with unstable diagnostic voltage (high per-bin spread)."""
    store, manifest, mapping, time_range = _analysis_frame(
        store_root, table, mapping_path, from_, to
    )
    result = an.run_oscillating(
        store,
        manifest,
        mapping,
        time_range,
        std_threshold=std_threshold,
        min_bins=min_bins,
        bin_width=parse_duration_us(bin_width),
        whole_window=whole_window,
    )
    params = {
        "analysis": "oscillating",
        "std_threshold_v": std_threshold,
        "min_bins": min_bins,
        "bin_width": bin_width,
        "whole_window": whole_window,
        "from": iso_from_micros(time_range[0]),
        "to": iso_from_micros(time_range[1]),
        "manifest_version": manifest.version,
    }
    out = _open_output(out_path)
    try:
        _emit(_flag_rows(result.flags), params, fmt, out)
    finally:
        if out is not sys.stdout:
            out.close()


@analyze.command()
@_store_option
@_table_option
@_mapping_option
@_from_option
@_to_option
@click.option("--staleness", default="24h", show_default=True, help="Silence threshold.")
@click.option(
    "--mask",
    "mask_path",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="Mask file of known outages (e.g. shutdowns).",
)
@_format_option
@_out_option
@_guard
def stale(store_root, table, mapping_path, from_, to, staleness, mask_path, fmt, out_path):
    """Links whose archive stopped updating for longer than the threshold."""
    store, manifest, mapping, time_range = _analysis_frame(
        store_root, table, mapping_path, from_, to
    )
    masks = None
    if mask_path:
        masks = IntervalSet.from_pairs(
            [(s, e) for s, e, _ in load_mask_intervals(mask_path)], label="mask"
        )
    result = an.run_stale(
        store,
        manifest,
        mapping,
        time_range,
        staleness_us=parse_duration_us(staleness),
        masks=masks,
    )
    params = {
        "analysis": "stale",
        "staleness": staleness,
        "mask": mask_path,
        "from": iso_from_micros(time_range[0]),
        "to": iso_from_micros(time_range[1]),
        "manifest_version": manifest.version,
    }
    out = _open_output(out_path)
    try:
        _emit(_flag_rows(result.flags), params, fmt, out)
    finally:
        if out is not sys.stdout:
            out.close()


@analyze.command("hv-nominal")
@_store_option
@_table_option
@_mapping_option
@_from_option
@_to_option
@click.option("--nominal", default=an.HV_NOMINAL_V, show_default=True, help="Volts.")
@click.option(
    "--runs",
    "runs_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Run-interval file; only days during runs are counted.",
)
@click.option(
    "--kinds", default="physics,special", show_default=True, help="Run kinds to include."
)
@_format_option
@_out_option
@_guard
def hv_nominal(store_root, table, mapping_path, from_, to, nominal, runs_path, kinds, fmt, out_path):
    """Daily channel counts at/above vs below nominal voltage during runs."""
    store, manifest, mapping, time_range = _analysis_frame(
        store_root, table, mapping_path, from_, to
    )
    runs = fetch_run_intervals(runs_path)
    wanted = tuple(k.strip() for k in kinds.split(",") if k.strip())
    intervals = intervals_from_runs(runs, kinds=wanted)
    result = an.run_hv_nominal(
        store, manifest, mapping, time_range, nominal=nominal, run_intervals=intervals
    )
    rows = [
        {"day": day.isoformat(), "above": c.above, "below": c.below}
        for day, c in sorted(result.counts.items())
    ]
    params = {
        "analysis": "hv-nominal",
        "nominal_v": nominal,
        "runs": runs_path,
        "kinds": kinds,
        "from": iso_from_micros(time_range[0]),
        "to": iso_from_micros(time_range[1]),
        "manifest_version": manifest.version,
    }
    out = _open_output(out_path)
    try:
        _emit(rows, params, fmt, out)
    finally:
        if out is not sys.stdout:
            out.close()


@analyze.command()
@_store_option
@_table_option
@_mapping_option
@_from_option
@_to_option
@click.option("--wheel", type=click.IntRange(1, 2), required=True)
@click.option(
    "--rule",
    type=click.Choice(["high_rssi", "oscillating", "both"]),
    default="high_rssi",
    show_default=True,
)
@click.option("--threshold", default=an.RSSI_THRESHOLD_V, show_default=True)
@click.option("--min-occurrences", default=an.RSSI_MIN_OCCURRENCES, show_default=True)
@click.option("--std-threshold", default=an.STD_THRESHOLD_V, show_default=True)
@click.option("--min-bins", default=an.STD_MIN_BINS, show_default=True)
@click.option("--bin", "bin_width", default="1d", show_default=True)
@_format_option
@_out_option
@_guard
def heatmap(
    store_root, table, mapping_path, from_, to, wheel, rule, threshold, min_occurrences,
    std_threshold, min_bins, bin_width, fmt, out_path,
):
    """Layer-by-sector counts of flagged links for one wheel (plot-ready)."""
    store, manifest, mapping, time_range = _analysis_frame(
        store_root, table, mapping_path, from_, to
    )
    width = parse_duration_us(bin_width)
    flags = []
    if rule in ("high_rssi", "both"):
        flags += an.run_failed_links(
            store, manifest, mapping, time_range,
            threshold=threshold, min_occurrences=min_occurrences, bin_width=width,
        ).flags
    if rule in ("oscillating", "both"):
        flags += an.run_oscillating(
            store, manifest, mapping, time_range,
            std_threshold=std_threshold, min_bins=min_bins, bin_width=width,
        ).flags
    grid = an.geometry_grid(flags, mapping, wheel)
    rows = [
        {"layer": layer + 1, "sector": sector + 1, "count": int(grid[layer, sector])}
        for layer in range(grid.shape[0])
        for sector in range(grid.shape[1])
    ]
    params = {
        "analysis": "heatmap",
        "wheel": wheel,
        "rule": rule,
        "threshold_v": threshold,
        "min_occurrences": min_occurrences,
        "std_threshold_v": std_threshold,
        "min_bins": min_bins,
        "bin_width": bin_width,
        "from": iso_from_micros(time_range[0]),
        "to": iso_from_micros(time_range[1]),
        "manifest_version": manifest.version,
    }
    out = _open_output(out_path)
    try:
        _emit(rows, params, fmt, out)
    finally:
        if out is not sys.stdout:
            out.close()


if __name__ == "__main__":
    main()
