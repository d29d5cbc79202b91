"""Command-line entry point: ``dualgap <subcommand> [options]``.

Every run resolves its configuration (defaults, then ``--config``, then
``--set``/``--seed``), writes it as ``resolved-config.json`` next to the
outputs and writes all files atomically. Exit codes: 0 success, 2 bad
configuration, 3 violated precondition, 4 numerical or verification
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import landscape as ls
from . import multibranch as mb
from .dual_lnn import GapReportLNN, duality_gap_report
from .errors import (ArgumentError, GeometryError, HypothesisViolation, InfeasibleError,
                     NumericalFailure)
from .linear_net import ProblemInstance, gaussian_instance

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ArgumentError):
    pass


# -- configuration -----------------------------------------------------------

DEFAULTS = {
    "strong-duality": {
        "instance": None, "n": 20, "d0": None, "dH": None, "H": 3, "d_min": 10, "gamma": None,
        "gamma_ratio": 0.5, "x": "identity", "seed": 0, "tol": 1e-8, "restarts": 0,
        "local_steps": 3000, "local_lr": 0.05, "dual_max_iters": 5000, "dual_tol": 1e-12,
        "cond_tol": 1e-8,
    },
    "gap-bound": {
        "instance": None, "branch": "sinusoid", "grid_size": 41, "box": None, "regularizer": "sq",
        "samples": 12, "data_seed": 0, "weighted": True, "tau": None, "K": None,
        "I": [2, 4, 8, 16, 32], "seed": 0,
    },
    "landscape": {
        "I": [10, 1000], "n": 1000, "d": 10, "hidden": 11, "data_seed": 0, "seeds": [0, 1, 2],
        "iters": 5000, "lr": 0.05, "batch": 32, "loss": "tau_hinge", "tau": 1.0,
        "resolution": 41, "pairs": 10000, "seed": 0,
    },
    "hitting-rate": {
        "widths": [10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21], "n": 1000, "d": 10,
        "hidden": 11, "data_seed": 0, "seeds": 100, "tol": 1e-4, "iters": 20000, "lr": 0.05,
        "batch": 32, "loss": "squared", "tau": 1.0, "seed": 0,
    },
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config_file(path):
    p = Path(path)
    if not p.exists():
        bundled = resources.files("dualgap") / "data" / path
        if bundled.is_file():
            return json.loads(bundled.read_text()), str(path)
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text()), str(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def resolve_config(command, config_path=None, sets=(), seed=None):
    cfg = dict(DEFAULTS[command])

    def merge(updates, origin):
        for key, value in updates.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} ({origin}); allowed: {sorted(cfg)}")
            cfg[key] = value

    if config_path:
        obj, name = _load_config_file(config_path)
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a JSON object")
        obj = dict(obj)
        if obj.pop("command", command) != command:
            raise ConfigError(f"config file {name} is for a different subcommand")
        merge(obj, name)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merge({key.strip(): _parse_value(value)}, "--set")
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def parse_sweep(text):
    """``key=a..b[:step]`` -> (key, values), inclusive of ``b``; integers stay integers."""
    if "=" not in text or ".." not in text:
        raise ConfigError(f"--sweep expects key=a..b[:step], got {text!r}")
    key, rng = text.split("=", 1)
    bounds, _, step = rng.partition(":")
    a, b = bounds.split("..", 1)
    try:
        vals = [_parse_value(a), _parse_value(b), _parse_value(step) if step else 1]
    except ValueError:
        raise ConfigError(f"bad sweep range {rng!r}") from None
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
        raise ConfigError(f"sweep bounds must be numbers: {rng!r}")
    lo, hi, st = vals
    if st <= 0 or hi < lo:
        raise ConfigError(f"sweep needs a <= b and a positive step: {rng!r}")
    if all(isinstance(v, int) for v in vals):
        return key.strip(), list(range(lo, hi + 1, st))
    count = int(np.floor((hi - lo) / st + 1e-9)) + 1
    return key.strip(), [float(lo + k * st) for k in range(count)]


def _threads():
    raw = os.environ.get("DUALGAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DUALGAP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DUALGAP_THREADS must be a positive integer, got {raw!r}")
    return n


# -- output ------------------------------------------------------------------

def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _int_list(v, name):
    out = _as_list(v)
    if not out or not all(isinstance(x, int) and not isinstance(x, bool) for x in out):
        raise ConfigError(f"{name} must be an integer or a non-empty list of integers")
    return out


# -- commands ----------------------------------------------------------------
# Each command maps a resolved config to (ok, csv_rows, csv_header, artifacts)
# where artifacts maps file names to text.

def _sd_instance(cfg):
    if cfg["instance"] is not None:
        src = cfg["instance"]
        obj = src if isinstance(src, dict) else json.loads(Path(src).read_text())
        p = ProblemInstance.from_dict(obj)
        if cfg["gamma"] is not None:
            p = p.with_gamma(float(cfg["gamma"]))
        return p
    p = gaussian_instance(n=int(cfg["n"]), d0=cfg["d0"], dH=cfg["dH"], H=int(cfg["H"]),
                          d_min=int(cfg["d_min"]), gamma_ratio=float(cfg["gamma_ratio"]),
                          seed=int(cfg["seed"]), x=cfg["x"])
    if cfg["gamma"] is not None:
        p = p.with_gamma(float(cfg["gamma"]))
    return p


def run_strong_duality(cfg):
    p = _sd_instance(cfg)
    if not p.well_posed:
        raise HypothesisViolation(
            f"instance violates the strong-duality hypotheses: gamma={p.gamma:.6g}, "
            f"sigma_min={p.sigma_min:.6g}, d_min={p.d_min}, dims={p.dims}, n={p.n}"
        )
    rep = duality_gap_report(p, restarts=int(cfg["restarts"]), local_steps=int(cfg["local_steps"]),
                             local_lr=float(cfg["local_lr"]), dual_max_iters=int(cfg["dual_max_iters"]),
                             dual_tol=float(cfg["dual_tol"]), cond_tol=float(cfg["cond_tol"]),
                             seed=int(cfg["seed"]))
    ok = rep.strong_duality_ok(float(cfg["tol"])) and rep.conditions_pass
    row = ",".join(str(v) for v in rep.csv_row()) + "\n"
    return ok, [row], ",".join(GapReportLNN.csv_header()) + "\n", {"report.json": rep.to_json() + "\n"}


def run_gap_bound(cfg):
    if cfg["instance"] is not None:
        src = cfg["instance"]
        obj = src if isinstance(src, dict) else json.loads(Path(src).read_text())
        branches, data, tau, K = mb.load_instance(obj)
        tau = cfg["tau"] if cfg["tau"] is not None else tau
        K = cfg["K"] if cfg["K"] is not None else K
        reports = [mb.verify_theorem1(branches, data, tau, K)]
    else:
        branch = mb.make_branch(cfg["branch"], int(cfg["grid_size"]), cfg["box"], cfg["regularizer"])
        data = mb.toy_dataset(int(cfg["samples"]), int(cfg["data_seed"]), bool(cfg["weighted"]))
        Is = _int_list(cfg["I"], "I")
        if min(Is) < 1:
            raise ConfigError("I must be positive")
        reports = mb.gap_sweep(branch, data, Is, cfg["tau"], cfg["K"])
    ok = all(r.passed for r in reports)
    rows = [r.csv_row() for r in reports]
    return ok, rows, mb.GapReport.csv_header(), {"gap-report.json": _dump([r.to_dict() for r in reports])}


def _teacher(cfg, classes=1):
    return ls.teacher_synthetic_data(int(cfg["n"]), int(cfg["d"]), int(cfg["hidden"]),
                                     int(cfg["data_seed"]), classes)


def run_landscape(cfg):
    data = _teacher(cfg)
    seeds = _int_list(cfg["seeds"], "seeds")
    if len(set(seeds)) != 3 or len(seeds) != 3:
        raise GeometryError(f"the projection plane needs three distinct seeds, got {seeds}")
    rows, artifacts, summary = [], {}, []
    for I in _int_list(cfg["I"], "I"):
        res = ls.landscape_experiment(int(I), data, seeds, int(cfg["iters"]), float(cfg["lr"]),
                                      int(cfg["batch"]), cfg["loss"], float(cfg["tau"]),
                                      int(cfg["resolution"]), int(cfg["seed"]), int(cfg["pairs"]))
        if not np.isfinite(res.violation) or not np.all(np.isfinite(res.grid.loss)):
            raise NumericalFailure(f"non-finite landscape at I={I}")
        artifacts[f"grid-I{I}.csv"] = res.grid.to_csv()
        rows.append(f"{I},{res.violation:.17g}\n")
        summary.append({"I": I, "violation": res.violation,
                        "anchor_losses": [float(v) for v in res.anchor_losses]})
    artifacts["landscape.json"] = _dump(summary)
    return True, rows, "I,violation\n", artifacts


def run_hitting_rate(cfg):
    seeds = cfg["seeds"]
    if not isinstance(seeds, int) or seeds < 1:
        raise ConfigError(f"seeds must be a positive integer, got {seeds!r}")
    widths = _int_list(cfg["widths"], "widths")
    data = _teacher(cfg)
    table = ls.hitting_rate_experiment(widths, data, seeds, float(cfg["tol"]), int(cfg["iters"]),
                                       float(cfg["lr"]), int(cfg["batch"]), cfg["loss"],
                                       float(cfg["tau"]), int(cfg["seed"]))
    rows = [f"{r.width},{r.hits},{r.seeds}\n" for r in table]
    return True, rows, "width,hits,seeds\n", {}


COMMANDS = {
    "strong-duality": (run_strong_duality, "strong-duality.csv"),
    "gap-bound": (run_gap_bound, "gap-report.csv"),
    "landscape": (run_landscape, "metric.csv"),
    "hitting-rate": (run_hitting_rate, "hitting-rate.csv"),
}


def _run_point(args):
    command, cfg = args
    return COMMANDS[command][0](cfg)


def execute(command, cfg, out_dir, sweep=None):
    """Run one command (optionally over a sweep) and write its outputs. Returns ``ok``."""
    out = Path(out_dir)
    points = [(None, cfg)]
    if sweep is not None:
        key, values = sweep
        if key not in cfg:
            raise ConfigError(f"unknown sweep key {key!r}; allowed: {sorted(cfg)}")
        points = [(v, {**cfg, key: v}) for v in values]
    jobs = [(command, c) for _, c in points]
    threads = _threads()
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]

    csv_name = COMMANDS[command][1]
    header = results[0][2]
    lines = []
    for (v, _), (_, rows, _, _) in zip(points, results):
        lines.extend(f"{_fmt(v)},{row}" if sweep else row for row in rows)
    if sweep:
        header = f"sweep_{sweep[0]},{header}"
    atomic_write(out / csv_name, header + "".join(lines))
    for (v, _), (_, _, _, artifacts) in zip(points, results):
        for name, text in artifacts.items():
            if sweep:
                stem, dot, ext = name.rpartition(".")
                name = f"{stem}-{sweep[0]}={_fmt(v)}.{ext}"
            atomic_write(out / name, text)
    resolved = {"command": command, **cfg}
    if sweep:
        resolved["sweep"] = {"key": sweep[0], "values": sweep[1]}
    atomic_write(out / "resolved-config.json", _dump(resolved))
    return all(r[0] for r in results)


def _fmt(v):
    return str(v) if isinstance(v, int) else format(float(v), ".17g")


def build_parser():
    parser = argparse.ArgumentParser(prog="dualgap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file or the name of a bundled config")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; VALUE is parsed as JSON when possible")
        p.add_argument("--sweep", metavar="KEY=A..B[:STEP]", help="run once per value of KEY")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.command, args.config, args.set, args.seed)
        sweep = parse_sweep(args.sweep) if args.sweep else None
        ok = execute(args.command, cfg, args.out, sweep)
    except (HypothesisViolation, InfeasibleError, GeometryError) as exc:
        print(f"dualgap: precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"dualgap: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArgumentError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"dualgap: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not ok:
        print(f"dualgap: {args.command} check failed; see {args.out}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
