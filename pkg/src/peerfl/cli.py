"""Command-line entry points.

    peerfl run <config.json> --out <dir> [--seed S] [--override key=value ...]
    peerfl plotdata <results.csv ...> --series peak [--x round] [--out file]
    peerfl sweep <config.json> --grid key=v1,v2,... [--grid ...] --out <dir>

`run` executes one experiment and writes results.csv + manifest.json; a
manifest is itself a valid config, so `peerfl run out/manifest.json` replays
the run exactly. `sweep` runs the cartesian product of the grid values.
"""
from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, parse_config
from .engine import run_experiment
from .results import SERIES, X_AXES, emit_plotdata, write_plotdata, write_results


def _cmd_run(args: argparse.Namespace) -> int:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    start = time.perf_counter()
    result = run_experiment(cfg)
    wall = time.perf_counter() - start
    csv_path, manifest_path = write_results(result, args.out, wall_time_s=wall)
    last = result.metrics[-1]
    print(
        f"{cfg.name}: protocol={cfg.protocol} rounds={cfg.rounds} clients={cfg.clients} "
        f"seed={cfg.seed} final regular={last.mean_regular:.4f} peak={last.mean_peak:.4f} "
        f"({wall:.1f}s)"
    )
    print(f"results: {csv_path}")
    print(f"manifest: {manifest_path}")
    return 0


def _cmd_plotdata(args: argparse.Namespace) -> int:
    rows = emit_plotdata(args.results, args.series, args.x)
    if args.out:
        path = write_plotdata(rows, args.out)
        print(f"plotdata: {path} ({len(rows)} rows)")
    else:
        print("x,series,value")
        for xv, name, v in rows:
            print(f"{xv!r},{name},{v!r}")
    return 0


def _parse_grid(items: list[str]) -> list[tuple[str, list]]:
    grid = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid {item!r}: expected key=v1,v2,...")
        key, _, text = item.partition("=")
        values = []
        for piece in text.split(","):
            try:
                values.append(json.loads(piece))
            except json.JSONDecodeError:
                values.append(piece)
        if not values:
            raise ConfigError(f"grid {item!r}: no values")
        grid.append((key, values))
    return grid


def _cmd_sweep(args: argparse.Namespace) -> int:
    grid = _parse_grid(args.grid)
    keys = [k for k, _ in grid]
    out_root = Path(args.out)
    combos = list(itertools.product(*(v for _, v in grid)))
    print(f"sweep: {len(combos)} runs over {', '.join(keys)}")
    for combo in combos:
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)]
        tag = ",".join(
            f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo)
        ).replace("/", "-").replace(" ", "")
        cfg = parse_config(args.config, overrides + [f"name={json.dumps(tag)}"])
        start = time.perf_counter()
        result = run_experiment(cfg)
        wall = time.perf_counter() - start
        write_results(result, out_root / tag, wall_time_s=wall)
        last = result.metrics[-1]
        print(
            f"  {tag}: final regular={last.mean_regular:.4f} "
            f"peak={last.mean_peak:.4f} ({wall:.1f}s)"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peerfl",
        description="Deterministic decentralized federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config or manifest")
    p_run.add_argument("config", help="JSON config file (or a manifest.json)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (dots descend, values parsed as JSON)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_plot = sub.add_parser("plotdata", help="emit long-format plot data from results")
    p_plot.add_argument("results", nargs="+", help="results.csv paths")
    p_plot.add_argument("--series", required=True, choices=SERIES)
    p_plot.add_argument("--x", default="round", choices=X_AXES)
    p_plot.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p_plot.set_defaults(func=_cmd_plotdata)

    p_sweep = sub.add_parser("sweep", help="run a cartesian grid of configs")
    p_sweep.add_argument("config", help="base JSON config file")
    p_sweep.add_argument(
        "--grid", action="append", required=True, metavar="KEY=V1,V2,...",
        help="values to sweep for one key (repeatable)",
    )
    p_sweep.add_argument("--out", required=True, help="output root directory")
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
