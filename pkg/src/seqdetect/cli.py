"""Command-line surface.

Subcommands:
    calibrate   config -> threshold table file + (t,k) summary CSV
    detect      calibration file + stream CSV -> decision trace CSV
    simulate    config -> seeded Monte Carlo metrics CSV
    report      config -> long summary plus per-geometry wide grids

Every output directory receives a manifest.json describing the run.
Exit codes: 0 success, 2 config or validation error, 3 solver failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import re
import sys
from datetime import datetime, timezone

import cvxpy as cp

from . import __version__
from .calibration import CalibrationTable, SolverFailure
from .config import (
    ConfigError,
    build_family,
    build_geometry,
    build_model,
    build_scenario,
    calibrate_from_config,
    check_regime_geometry,
    load_config,
)
from .runtime import (
    DimensionMismatch,
    read_stream_csv,
    run_stream,
    write_trace_csv,
)
from .simharness import monte_carlo, write_metrics_csv

_METRIC_FIELDS = [
    "scenario", "kind", "trials", "t_target", "rho", "eps",
    "signals", "by_target", "signal_rate", "miss_rate",
    "wilson_lo", "wilson_hi", "stop_min", "stop_mean", "stop_max",
]


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    config: str | None
    out_dir: str
    seed: int | None
    regime: str | None
    tool_version: str
    started_at: str
    finished_at: str


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out_dir: str, command: str, *, config=None, seed=None,
                    regime=None, started_at: str = "") -> None:
    manifest = RunManifest(
        command=command, config=config, out_dir=out_dir, seed=seed,
        regime=regime, tool_version=__version__,
        started_at=started_at, finished_at=_now())
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(manifest), fh, indent=2)
        fh.write("\n")


def _prepare_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_cfg(args):
    cfg = load_config(args.config)
    overrides = {}
    for key in ("regime", "trials", "seed", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        check_regime_geometry(cfg.regime, cfg.geometry)
    return cfg


def _write_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    out = _prepare_out(args.out)
    table = calibrate_from_config(cfg)
    table.save(os.path.join(out, "calibration.json"))
    _write_csv(os.path.join(out, "summary.csv"), table.csv_rows())
    _write_manifest(out, "calibrate", config=args.config, seed=cfg.seed,
                    regime=cfg.regime, started_at=started)
    finite = sum(1 for e in table.entries.values() if math.isfinite(e.rho))
    print(f"calibrated {len(table.entries)} cells "
          f"({finite} with finite magnitude) -> {out}")
    return 0


def cmd_detect(args) -> int:
    started = _now()
    out = _prepare_out(args.out)
    table = CalibrationTable.load(args.calibration)
    increments = read_stream_csv(args.stream)
    trace = run_stream(table, increments)
    write_trace_csv(os.path.join(out, "trace.csv"), trace)
    _write_manifest(out, "detect", config=None, seed=args.seed,
                    regime=table.regime, started_at=started)
    v = trace.verdict
    extra = f" t={v.t}" if v.t is not None else ""
    if v.is_signal:
        extra += f" k={v.k} shape={v.label}"
    print(f"verdict: {v.kind}{extra}")
    return 0


def _load_or_calibrate(cfg, model, family, geometry) -> CalibrationTable:
    if cfg.calibration:
        return CalibrationTable.load(cfg.calibration)
    return calibrate_from_config(cfg, model, family, geometry)


def cmd_simulate(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    out = _prepare_out(args.out)
    model = build_model(cfg)
    family = build_family(cfg, model)
    geometry = build_geometry(cfg, model)
    table = _load_or_calibrate(cfg, model, family, geometry)
    scenario = build_scenario(cfg, model, family, geometry, table)

    rows = []
    if cfg.trials > 0:
        res = monte_carlo(table, scenario, cfg.trials,
                          seed=cfg.seed, workers=max(1, cfg.workers))
        lo, hi = res.wilson("signal")
        smin, smean, smax = res.stop_stats
        rows.append({
            "scenario": scenario.shape_label or "nuisance",
            "kind": res.kind,
            "trials": res.trials,
            "t_target": "" if res.t_target is None else res.t_target,
            "rho": repr(float(scenario.rho)),
            "eps": repr(float(cfg.eps)),
            "signals": res.n_signal,
            "by_target": res.n_by_target,
            "signal_rate": repr(res.signal_rate),
            "miss_rate": repr(res.miss_rate) if res.kind == "signal" else "",
            "wilson_lo": repr(lo),
            "wilson_hi": repr(hi),
            "stop_min": "" if math.isnan(smin) else repr(smin),
            "stop_mean": "" if math.isnan(smean) else repr(smean),
            "stop_max": "" if math.isnan(smax) else repr(smax),
        })
    write_metrics_csv(os.path.join(out, "metrics.csv"), rows,
                      fieldnames=_METRIC_FIELDS)
    _write_manifest(out, "simulate", config=args.config, seed=cfg.seed,
                    regime=cfg.regime, started_at=started)
    if rows:
        r = rows[0]
        print(f"{r['kind']} x{r['trials']}: signal_rate={r['signal_rate']}")
    else:
        print("no trials requested; wrote header-only metrics")
    return 0


_TRAILING_DIGITS = re.compile(r"(\d+)$")


def _grid_frames(table: CalibrationTable):
    """Group entries by shape-label prefix into (t, k) -> entry maps."""
    frames: dict = {}
    for e in table.entries.values():
        m = _TRAILING_DIGITS.search(e.label)
        prefix = e.label[: m.start()] if m else e.label
        k = int(m.group(1)) if m else e.k
        frames.setdefault(prefix, {})[(e.t, k)] = e
    return frames


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:.6g}"


def cmd_report(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    out = _prepare_out(args.out)
    model = build_model(cfg)
    family = build_family(cfg, model)
    geometry = build_geometry(cfg, model)
    table = _load_or_calibrate(cfg, model, family, geometry)
    _write_csv(os.path.join(out, "summary.csv"), table.csv_rows())

    for prefix, cells in sorted(_grid_frames(table).items()):
        ks = sorted({k for (_, k) in cells})
        ts = range(1, table.horizon + 1)
        for name, value in (("rho", lambda e: e.rho),
                            ("ratio", lambda e: e.ratio)):
            rows = [["t"] + [str(k) for k in ks]]
            for t in ts:
                row = [str(t)]
                for k in ks:
                    e = cells.get((t, k))
                    row.append(_fmt(value(e)) if e is not None else "")
                rows.append(row)
            _write_csv(os.path.join(out, f"{name}_grid_{prefix}.csv"), rows)
    _write_manifest(out, "report", config=args.config, seed=cfg.seed,
                    regime=cfg.regime, started_at=started)
    print(f"report grids -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdetect",
        description="calibrate and run sequential signal detectors")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument(
        "--regime", default=None,
        choices=("subgaussian", "gaussian", "union", "quadratic"))
    common.add_argument("--trials", type=int, default=None)
    common.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("calibrate", parents=[common],
                       help="solve for per-(t,shape) magnitudes and levels")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", parents=[common],
                       help="fold a recorded stream through a table")
    p.add_argument("--calibration", required=True)
    p.add_argument("--stream", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("simulate", parents=[common],
                       help="seeded Monte Carlo false-alarm/power runs")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common],
                       help="figure- and table-ready CSV grids")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SolverFailure as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return 3
    except cp.error.SolverError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return 3
    except DimensionMismatch as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
