"""Results on disk: per-round CSV, a JSON manifest, and long-format plot data.

The CSV is fully deterministic for a given config and seed (floats are
written with repr, so round-tripping is exact); the manifest embeds the
resolved config so a run can be replayed from the manifest alone.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import __version__
from .engine import ExperimentResult, RoundMetrics

__all__ = [
    "results_columns",
    "write_results",
    "read_results",
    "emit_plotdata",
    "write_plotdata",
]

SERIES = ("regular", "peak", "local", "alpha", "cluster_regular", "cluster_peak")
X_AXES = ("round", "comm", "compute")


def results_columns(num_clients: int, num_clusters: int) -> list[str]:
    cols = [
        "round",
        "alpha",
        "comm_models",
        "comm_params",
        "compute_passes",
        "distill_skipped",
        "acc_regular_mean",
        "acc_peak_mean",
        "local_acc_mean",
    ]
    cols += [f"cluster{k}_regular" for k in range(num_clusters)]
    cols += [f"cluster{k}_peak" for k in range(num_clusters)]
    cols += [f"client{i}_regular" for i in range(num_clients)]
    cols += [f"client{i}_peak" for i in range(num_clients)]
    return cols


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _row(m: RoundMetrics) -> list[str]:
    values = [
        m.round,
        m.alpha,
        m.comm_models,
        m.comm_params,
        m.compute_passes,
        m.distill_skipped,
        m.mean_regular,
        m.mean_peak,
        m.mean_local,
        *m.cluster_regular,
        *m.cluster_peak,
        *m.acc_regular,
        *m.acc_peak,
    ]
    return [_fmt(v) for v in values]


def write_results(
    result: ExperimentResult,
    out_dir: str | Path,
    wall_time_s: float | None = None,
) -> tuple[Path, Path]:
    """Write results.csv and manifest.json under out_dir; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    csv_path = out / "results.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(results_columns(cfg.clients, len(cfg.widths)))
        for m in result.metrics:
            writer.writerow(_row(m))
    manifest = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "code_version": __version__,
        "results_csv": csv_path.name,
        "wall_time_s": wall_time_s,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return csv_path, manifest_path


def read_results(path: str | Path) -> dict[str, list[float]]:
    """Read a results CSV back into column -> values (insertion-ordered)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty results file") from None
        table: dict[str, list[float]] = {name: [] for name in header}
        for row in reader:
            if len(row) != len(header):
                raise ValueError(f"{path}: ragged row {row!r}")
            for name, cell in zip(header, row):
                table[name].append(float(cell))
    return table


def _run_label(path: Path) -> str:
    return path.parent.name if path.name == "results.csv" and path.parent.name else path.stem


def emit_plotdata(
    paths: list[str | Path], series: str, x: str = "round"
) -> list[tuple[float, str, float]]:
    """Long-format rows (x, series, value) for one metric across runs.

    Multiple runs must share a round grid, otherwise curves would silently
    misalign. ``x`` picks the abscissa: round index, cumulative communicated
    parameters, or cumulative compute passes.
    """
    if series not in SERIES:
        raise ValueError(f"unknown series {series!r} (choose from {', '.join(SERIES)})")
    if x not in X_AXES:
        raise ValueError(f"unknown x axis {x!r} (choose from {', '.join(X_AXES)})")
    tables = []
    for p in paths:
        p = Path(p)
        tables.append((_run_label(p), read_results(p)))
    if len(tables) > 1:
        grids = [t["round"] for _, t in tables]
        if any(g != grids[0] for g in grids[1:]):
            raise ValueError("runs have different round grids; refusing to mix them")

    rows: list[tuple[float, str, float]] = []
    for label, table in tables:
        if x == "round":
            xs = table["round"]
        elif x == "comm":
            xs = list(np.cumsum(table["comm_params"]))
        else:
            xs = table["compute_passes"]
        if series in ("regular", "peak", "local", "alpha"):
            col = {
                "regular": "acc_regular_mean",
                "peak": "acc_peak_mean",
                "local": "local_acc_mean",
                "alpha": "alpha",
            }[series]
            for xv, v in zip(xs, table[col]):
                rows.append((float(xv), label, float(v)))
        else:
            suffix = "_regular" if series == "cluster_regular" else "_peak"
            cluster_cols = [
                c for c in table
                if c.startswith("cluster") and c.endswith(suffix)
            ]
            for col in cluster_cols:
                name = f"{label}:{col.removesuffix(suffix)}"
                for xv, v in zip(xs, table[col]):
                    rows.append((float(xv), name, float(v)))
    return rows


def write_plotdata(rows: list[tuple[float, str, float]], out_path: str | Path) -> Path:
    out_path = Path(out_path)
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "series", "value"])
        for xv, name, v in rows:
            writer.writerow([_fmt(xv), name, _fmt(v)])
    return out_path
