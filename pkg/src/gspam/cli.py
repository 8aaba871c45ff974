"""Command-line experiment runner.

``gspam recover --config run.json [--seed N] [--out DIR]`` runs Monte Carlo
trials of support recovery for one benchmark; ``gspam sweep --config
sweep.json --axis {ctilde|d|k|rho|noise}`` repeats that over a list of values
and writes a CSV table plus an SVG chart.  See README.md for the schema.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .model import BENCHMARKS, ConfigurationError, NoiseSpec, QueryOracle, benchmark_problem, make_benchmark
from .recovery import RecoveryConfig, SolverConstants, expected_query_count, recover_supports

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "run_recover", "run_sweep", "main"]

TRIAL_COLUMNS = [
    "trial",
    "seed",
    "completed",
    "success",
    "S1_exact",
    "S2_exact",
    "queries",
    "expected_queries",
    "n_S1_hat",
    "n_S2_hat",
    "regime",
    "error",
]
SWEEP_COLUMNS = [
    "axis",
    "value",
    "d",
    "k",
    "rho",
    "C_tilde",
    "noise_level",
    "N1",
    "N2",
    "trials",
    "completed",
    "successes",
    "success_rate",
    "mean_queries",
    "min_queries",
    "max_queries",
]
AXES = ("ctilde", "d", "k", "rho", "noise")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    name: str
    d: int
    T: Optional[int] = None
    alpha_seed: int = 0
    noise_mode: str = "none"
    noise_level: float = 0.0
    noise_pattern: str = "uniform"
    N1: int = 1
    N2: int = 1
    p1: float = 0.01
    p2: float = 0.01
    C_tilde: float = 5.6
    seed: int = 0
    trials: int = 5
    problem: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    c_prime: float = 1.7
    r: float = 0.1
    solver: str = "hard_threshold"
    output_dir: str = "gspam-out"
    workers: int = 1
    sweep: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "benchmark": {"name": self.name, "d": self.d, "T": self.T, "alpha_seed": self.alpha_seed},
            "noise": {
                "mode": self.noise_mode,
                "level": self.noise_level,
                "pattern": self.noise_pattern,
                "N1": self.N1,
                "N2": self.N2,
                "p1": self.p1,
                "p2": self.p2,
            },
            "C_tilde": self.C_tilde,
            "seed": self.seed,
            "trials": self.trials,
            "problem": dict(sorted(self.problem.items())),
            "constants": dict(sorted(self.constants.items())),
            "c_prime": self.c_prime,
            "r": self.r,
            "solver": self.solver,
        }


# ---------------------------------------------------------------------------
# config parsing


def _field(obj, key, kind, where, default=None, required=False, check=None, hint=""):
    path = f"{where}.{key}" if where else key
    if key not in obj or obj[key] is None:
        if required:
            raise ConfigError(f"field '{path}': required")
        return default
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"field '{path}': expected an integer, got {value!r}")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"field '{path}': expected a number, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"field '{path}': expected a string, got {value!r}")
    if kind is dict and not isinstance(value, dict):
        raise ConfigError(f"field '{path}': expected an object, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise ConfigError(f"field '{path}': expected a list, got {value!r}")
    if kind is float:
        value = float(value)
    if check is not None and not check(value):
        raise ConfigError(f"field '{path}': {hint or 'invalid value'} (got {value!r})")
    return value


_TOP_KEYS = {
    "benchmark",
    "noise",
    "C_tilde",
    "seed",
    "trials",
    "problem",
    "constants",
    "c_prime",
    "r",
    "solver",
    "output_dir",
    "workers",
    "sweep",
}


def parse_config(raw: dict) -> RunConfig:
    """Validate a decoded JSON config; raises ConfigError naming the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {', '.join(unknown)}")
    bench = _field(raw, "benchmark", dict, "", required=True)
    name = _field(bench, "name", str, "benchmark", required=True, check=lambda v: v in BENCHMARKS,
                  hint=f"must be one of {sorted(BENCHMARKS)}")
    d = _field(bench, "d", int, "benchmark", required=True, check=lambda v: v >= 2, hint="must be >= 2")
    T = _field(bench, "T", int, "benchmark", check=lambda v: v >= 1, hint="must be >= 1")
    if name in ("f3", "f4") and T is None:
        raise ConfigError(f"field 'benchmark.T': required for {name}")
    alpha_seed = _field(bench, "alpha_seed", int, "benchmark", 0)

    noise = _field(raw, "noise", dict, "", {})
    mode = _field(noise, "mode", str, "noise", "none", check=lambda v: v in ("none", "bounded", "gaussian"),
                  hint="must be none, bounded or gaussian")
    level = _field(noise, "level", float, "noise", 0.0, check=lambda v: v >= 0, hint="must be >= 0")
    if mode != "none" and level <= 0:
        raise ConfigError(f"field 'noise.level': must be positive for {mode} noise")
    pattern = _field(noise, "pattern", str, "noise", "uniform", check=lambda v: v in ("uniform", "sign"),
                     hint="must be uniform or sign")
    N1 = _field(noise, "N1", int, "noise", 1, check=lambda v: v >= 1, hint="must be >= 1")
    N2 = _field(noise, "N2", int, "noise", 1, check=lambda v: v >= 1, hint="must be >= 1")
    p1 = _field(noise, "p1", float, "noise", 0.01, check=lambda v: 0 < v < 1, hint="must lie in (0, 1)")
    p2 = _field(noise, "p2", float, "noise", 0.01, check=lambda v: 0 < v < 1, hint="must lie in (0, 1)")

    default_ct = BENCHMARKS[name]["C_tilde"]
    C_tilde = _field(raw, "C_tilde", float, "", default_ct, check=lambda v: v > 0, hint="must be positive")
    seed = _field(raw, "seed", int, "", 0, check=lambda v: v >= 0, hint="must be >= 0")
    trials = _field(raw, "trials", int, "", 5, check=lambda v: v >= 1, hint="must be >= 1")
    problem = _field(raw, "problem", dict, "", {})
    allowed = {"D1", "D2", "lambda1", "lambda2", "B3", "k", "rho"}
    for key in problem:
        if key not in allowed:
            raise ConfigError(f"field 'problem.{key}': unknown; expected one of {sorted(allowed)}")
        _field(problem, key, int if key in ("k", "rho") else float, "problem", check=lambda v: v > 0,
               hint="must be positive")
    constants = _field(raw, "constants", dict, "", {})
    for key in constants:
        if key not in ("C1", "C2", "C3"):
            raise ConfigError(f"field 'constants.{key}': unknown; expected C1, C2 or C3")
        _field(constants, key, float, "constants", check=lambda v: v > 0, hint="must be positive")
    c_prime = _field(raw, "c_prime", float, "", 1.7, check=lambda v: v > 0, hint="must be positive")
    r = _field(raw, "r", float, "", 0.1, check=lambda v: v > 0, hint="must be positive")
    solver = _field(raw, "solver", str, "", "hard_threshold", check=lambda v: v in ("hard_threshold", "l1_equality"),
                    hint="must be hard_threshold or l1_equality")
    output_dir = _field(raw, "output_dir", str, "", "gspam-out")
    workers = _field(raw, "workers", int, "", 1, check=lambda v: v >= 1, hint="must be >= 1")
    sweep = _field(raw, "sweep", dict, "", {})
    for axis, values in sweep.items():
        if axis not in AXES:
            raise ConfigError(f"field 'sweep.{axis}': unknown axis; expected one of {list(AXES)}")
        _field(sweep, axis, list, "sweep", check=lambda v: len(v) > 0, hint="must be a non-empty list")
        _check_sweep_values(axis, values)

    cfg = RunConfig(
        name=name, d=d, T=T, alpha_seed=alpha_seed, noise_mode=mode, noise_level=level, noise_pattern=pattern,
        N1=N1, N2=N2, p1=p1, p2=p2, C_tilde=C_tilde, seed=seed, trials=trials, problem=dict(problem),
        constants=dict(constants), c_prime=c_prime, r=r, solver=solver, output_dir=output_dir, workers=workers,
        sweep={k: list(v) for k, v in sweep.items()},
    )
    try:
        make_benchmark(name, d, T, seed=alpha_seed, r=r)
    except ConfigurationError as exc:
        raise ConfigError(f"field 'benchmark': {exc}") from exc
    return cfg


def _check_sweep_values(axis, values):
    where = f"sweep.{axis}"
    if axis == "noise":
        for i, item in enumerate(values):
            if not isinstance(item, dict):
                raise ConfigError(f"field '{where}[{i}]': expected an object with level, N1, N2")
            _field(item, "level", float, f"{where}[{i}]", required=True, check=lambda v: v >= 0, hint="must be >= 0")
            _field(item, "N1", int, f"{where}[{i}]", 1, check=lambda v: v >= 1, hint="must be >= 1")
            _field(item, "N2", int, f"{where}[{i}]", 1, check=lambda v: v >= 1, hint="must be >= 1")
        levels = [float(item["level"]) for item in values]
    else:
        kind = float if axis == "ctilde" else int
        for i, v in enumerate(values):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool) and (kind is float or isinstance(v, int))
            if not ok or v <= 0:
                raise ConfigError(f"field '{where}[{i}]': expected a positive {'number' if kind is float else 'integer'}")
        levels = [float(v) for v in values]
    if levels != sorted(levels):
        raise ConfigError(f"field '{where}': values must be sorted ascending")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    try:
        return parse_config(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}{_locate(text, str(exc))}") from exc


def _locate(text, message):
    # point at the line of the offending key when it can be found
    start = message.find("'")
    if start < 0:
        return ""
    key = message[start + 1 : message.find("'", start + 1)].split(".")[-1].split("[")[0]
    for lineno, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return f" [line {lineno}]"
    return ""


# ---------------------------------------------------------------------------
# running trials


def trial_seed(master: int, trial: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(trial,)).generate_state(1, dtype=np.uint32)[0])


def _noise_spec(cfg: RunConfig) -> NoiseSpec:
    if cfg.noise_mode == "bounded":
        return NoiseSpec.bounded(cfg.noise_level, cfg.noise_pattern)
    if cfg.noise_mode == "gaussian":
        return NoiseSpec.gaussian(cfg.noise_level)
    return NoiseSpec.none()


def _recovery_config(cfg: RunConfig, model, seed: int) -> RecoveryConfig:
    problem = benchmark_problem(cfg.name, model, **cfg.problem)
    return RecoveryConfig(
        problem=problem,
        C_tilde=cfg.C_tilde,
        constants=SolverConstants(**cfg.constants),
        c_prime=cfg.c_prime,
        solver=cfg.solver,
        seed=seed,
        noise_bound=cfg.noise_level if cfg.noise_mode == "bounded" else 0.0,
        noise_sigma=math.sqrt(cfg.noise_level) if cfg.noise_mode == "gaussian" else 0.0,
        N1=cfg.N1,
        N2=cfg.N2,
        p1=cfg.p1,
        p2=cfg.p2,
    )


def run_trial(cfg: RunConfig, trial: int) -> dict:
    seed = trial_seed(cfg.seed, trial)
    model = make_benchmark(cfg.name, cfg.d, cfg.T, seed=cfg.alpha_seed, r=cfg.r)
    oracle = QueryOracle(model, _noise_spec(cfg), seed=seed)
    row = {"trial": trial, "seed": seed, "completed": False, "success": False, "S1_exact": False,
           "S2_exact": False, "queries": 0, "expected_queries": 0, "n_S1_hat": 0, "n_S2_hat": 0,
           "regime": "", "error": "", "S1_hat": [], "S2_hat": [], "params": None}
    started = time.perf_counter()
    try:
        est = recover_supports(oracle, _recovery_config(cfg, model, seed))
    except Exception as exc:  # surfaced per trial, the run goes on
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["queries"] = oracle.count
        row["wall_time"] = time.perf_counter() - started
        return row
    s1_ok, s2_ok = est.S1_hat == model.S1, est.S2_hat == model.S2
    row.update(
        completed=True,
        success=bool(s1_ok and s2_ok),
        S1_exact=bool(s1_ok),
        S2_exact=bool(s2_ok),
        queries=int(est.query_total),
        expected_queries=int(expected_query_count(est.grid_size, est.params)),
        n_S1_hat=len(est.S1_hat),
        n_S2_hat=len(est.S2_hat),
        regime=f"{est.params.regime}/{est.params.stage1_regime}",
        S1_hat=sorted(est.S1_hat),
        S2_hat=[list(p) for p in sorted(est.S2_hat)],
        params=est.params.snapshot(),
        wall_time=time.perf_counter() - started,
    )
    return row


def _run_trials(cfg: RunConfig) -> list[dict]:
    if cfg.workers > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.trials)) as pool:
            rows = list(pool.map(run_trial, [cfg] * cfg.trials, range(cfg.trials)))
    else:
        rows = [run_trial(cfg, t) for t in range(cfg.trials)]
    return sorted(rows, key=lambda r: r["trial"])


def _aggregate(rows: list[dict]) -> dict:
    done = [r for r in rows if r["completed"]]
    successes = sum(r["success"] for r in rows)
    queries = [r["queries"] for r in done]
    return {
        "trials": len(rows),
        "completed": len(done),
        "successes": successes,
        "success_rate": successes / len(rows),
        "mean_queries": float(np.mean(queries)) if queries else None,
        "min_queries": min(queries) if queries else None,
        "max_queries": max(queries) if queries else None,
    }


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_recover(cfg: RunConfig, out_dir=None) -> dict:
    """Run ``cfg.trials`` trials and write report.json, trials.csv and timings.json."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _run_trials(cfg)
    timings = {str(r["trial"]): r.pop("wall_time", None) for r in rows}
    report = {"config": cfg.to_json(), "trials": rows, "aggregate": _aggregate(rows)}
    _write_json(out / "report.json", report)
    with open(out / "trials.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRIAL_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    _write_json(out / "timings.json", timings)
    return report


def _cell_config(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "ctilde":
        return replace(cfg, C_tilde=float(value))
    if axis == "d":
        return replace(cfg, d=int(value))
    if axis in ("k", "rho"):
        name = "f3" if axis == "k" else "f4"
        if cfg.name != name:
            raise ConfigError(f"axis '{axis}' sweeps the block count T of {name}; benchmark is {cfg.name}")
        return replace(cfg, T=int(value))
    level = float(value["level"])
    if level == 0:
        return replace(cfg, noise_mode="none", noise_level=0.0, N1=1, N2=1)
    return replace(cfg, noise_mode="gaussian", noise_level=level, N1=int(value.get("N1", 1)), N2=int(value.get("N2", 1)))


def run_sweep(cfg: RunConfig, axis: str, out_dir=None) -> list[dict]:
    """One aggregate row per axis value; writes sweep_<axis>.csv, sweep_<axis>.svg and a JSON report."""
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {list(AXES)}")
    values = cfg.sweep.get(axis)
    if not values:
        raise ConfigError(f"field 'sweep.{axis}': required for --axis {axis}")
    cells = [_cell_config(cfg, axis, v) for v in values]
    for cell in cells:
        # validate every cell before issuing any query
        make_benchmark(cell.name, cell.d, cell.T, seed=cell.alpha_seed, r=cell.r)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, details, timings = [], [], {}
    for value, cell in zip(values, cells):
        rows = _run_trials(cell)
        label = json.dumps(value, sort_keys=True)
        timings[label] = {str(r["trial"]): r.pop("wall_time", None) for r in rows}
        model = make_benchmark(cell.name, cell.d, cell.T, seed=cell.alpha_seed, r=cell.r)
        agg = _aggregate(rows)
        table.append({
            "axis": axis,
            "value": value["level"] if axis == "noise" else value,
            "d": cell.d,
            "k": model.k,
            "rho": model.rho_m,
            "C_tilde": cell.C_tilde,
            "noise_level": cell.noise_level,
            "N1": cell.N1,
            "N2": cell.N2,
            **{k: agg[k] for k in ("trials", "completed", "successes", "success_rate", "mean_queries",
                                   "min_queries", "max_queries")},
        })
        details.append({"value": value, "config": cell.to_json(), "trials": rows, "aggregate": agg})
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow(row)
    _write_json(out / f"sweep_{axis}.json", {"axis": axis, "cells": details})
    _write_json(out / f"sweep_{axis}_timings.json", timings)
    y_key = "success_rate" if axis == "ctilde" else "mean_queries"
    (out / f"sweep_{axis}.svg").write_text(line_chart_svg(
        [float(r["value"]) for r in table],
        [float("nan") if r[y_key] is None else float(r[y_key]) for r in table],
        x_label={"ctilde": "C_tilde", "d": "d", "k": "T (k = 5T)", "rho": "T (degree)", "noise": "noise variance"}[axis],
        y_label=y_key.replace("_", " "),
        log_x=axis == "noise",
    ))
    return table


def line_chart_svg(xs, ys, x_label="x", y_label="y", log_x=False, width=480, height=320) -> str:
    """Minimal self-contained SVG line chart with labelled axes."""
    pad_l, pad_r, pad_t, pad_b = 64, 16, 16, 48
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    xt = np.log10(np.where(xs > 0, xs, np.nan)) if log_x else xs
    ok = np.isfinite(xt) & np.isfinite(ys)
    x0, x1 = (np.min(xt[ok]), np.max(xt[ok])) if ok.any() else (0.0, 1.0)
    y0, y1 = (min(0.0, np.min(ys[ok])), np.max(ys[ok])) if ok.any() else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(v):
        return pad_l + (v - x0) / (x1 - x0) * (width - pad_l - pad_r)

    def py(v):
        return height - pad_b - (v - y0) / (y1 - y0) * (height - pad_t - pad_b)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
    ]
    pts = [(px(a), py(b)) for a, b in zip(xt[ok], ys[ok])]
    if pts:
        path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
        parts.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{path}"/>')
        for (a, b), xv, yv in zip(pts, xs[ok], ys[ok]):
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="#1f77b4"><title>{xv:g}: {yv:g}</title></circle>')
        for xv, a in zip(xs[ok], (p[0] for p in pts)):
            parts.append(f'<text x="{a:.2f}" y="{height - pad_b + 16}" font-size="10" text-anchor="middle">{xv:g}</text>')
    for frac in (0.0, 0.5, 1.0):
        v = y0 + frac * (y1 - y0)
        parts.append(f'<text x="{pad_l - 6}" y="{py(v) + 3:.2f}" font-size="10" text-anchor="end">{v:.3g}</text>')
    parts.append(f'<text x="{(width + pad_l) / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">{x_label}</text>')
    parts.append(
        f'<text x="14" y="{(height - pad_b) / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {(height - pad_b) / 2:.0f})">{y_label}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gspam", description="Structure learning for sparse additive models with pairwise interactions.")
    sub = parser.add_subparsers(dest="command", required=True)
    rec = sub.add_parser("recover", help="run Monte Carlo trials for one configuration")
    rec.add_argument("--config", required=True, help="path to the JSON run config")
    rec.add_argument("--seed", type=int, help="override the master seed")
    rec.add_argument("--out", help="output directory (overrides output_dir)")
    sw = sub.add_parser("sweep", help="repeat the trials over one axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, choices=AXES)
    sw.add_argument("--out", help="output directory (overrides output_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "recover":
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            report = run_recover(cfg, args.out)
            agg = report["aggregate"]
            print(f"success rate {agg['success_rate']:.2f} over {agg['trials']} trials; "
                  f"mean queries {agg['mean_queries']}")
            return 0 if agg["completed"] == agg["trials"] else 1
        table = run_sweep(cfg, args.axis, args.out)
        for row in table:
            print(f"{row['axis']}={row['value']}: success {row['success_rate']:.2f}, mean queries {row['mean_queries']}")
        return 0 if all(r["completed"] == r["trials"] for r in table) else 1
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
