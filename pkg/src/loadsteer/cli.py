"""Command-line harness: generation, runs, gradient checks, experiments.

Subcommands
-----------
``generate``    sample a neighborhood and write it to a scenario JSON file
``run``         run the coordination loop and emit the four run CSVs
``gradcheck``   compare implicit and finite-difference gradients (small N)
``experiment``  sweep a (size, seed, setting) grid and emit summary tables
``oracle``      desk-scale ground truth: grid search / estimator enumeration

All artifacts are plain CSVs with floats at 17 significant digits, written
atomically (temp file + rename).  Relative output directories resolve under
``LOADSTEER_OUTPUT_ROOT`` when that variable is set.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 wall-clock budget exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .coordinator import (
    CoordinationError,
    CoordinatorConfig,
    RunResult,
    run_coordination,
)
from .oracle import (
    FdConfig,
    brute_force_price_search,
    enumerate_batch_estimator,
    finite_difference_gradient,
    implicit_gradient,
)
from .qp import HomeQpSolver, SolverError
from .scenario import (
    NeighborhoodConfig,
    Scenario,
    ScenarioGenerationError,
    generate_neighborhood,
    load_scenario,
    save_scenario,
)
from .sensitivity import SingularSystemError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_TIME_BUDGET = 4

DEFAULT_TIME_BUDGET_S = 900.0

_NUMERICAL_ERRORS = (
    CoordinationError,
    SolverError,
    SingularSystemError,
    ScenarioGenerationError,
)


class ConfigError(Exception):
    """Bad configuration file or flag combination."""


# ---------------------------------------------------------------------------
# formatting and atomic output
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _resolve_out(out, default_name: str) -> Path:
    root = os.environ.get("LOADSTEER_OUTPUT_ROOT", "")
    p = Path(out) if out else Path(default_name)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {f.name for f in dataclasses.fields(NeighborhoodConfig)}
_COORD_KEYS = {f.name for f in dataclasses.fields(CoordinatorConfig)}

_CONFIG_TREE = {
    "scenario": {"file": None, "generate": {k: None for k in _SCENARIO_KEYS}},
    "coordinator": {k: None for k in _COORD_KEYS},
    "workers": None,
    "time_budget_s": None,
    "output_dir": None,
    "experiment": {
        "sizes": None,
        "seeds": None,
        "settings": None,
        "baseline": None,
    },
}

_SETTING_KEYS = {"optimizer", "learning_rate", "batch"}


def _check_keys(data, tree, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in tree:
            raise ConfigError(f"unknown config key {path!r}")
        subtree = tree[key]
        if isinstance(subtree, dict):
            _check_keys(value, subtree, path)


def load_config(path: str) -> dict:
    """Parse and key-validate a config file; unknown keys are named."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    _check_keys(data, _CONFIG_TREE)
    scenario = data.get("scenario", {})
    if "file" in scenario and "generate" in scenario:
        raise ConfigError("scenario: give either 'file' or 'generate', not both")
    for setting in (data.get("experiment") or {}).get("settings") or []:
        extra = set(setting) - _SETTING_KEYS
        if extra:
            raise ConfigError(
                f"experiment.settings: unknown key {sorted(extra)[0]!r}"
            )
    return data


def _build_scenario(cfg: dict, args) -> Scenario:
    scenario_cfg = cfg.get("scenario", {})
    file_path = getattr(args, "scenario", None) or scenario_cfg.get("file")
    if file_path:
        if getattr(args, "homes", None) is not None:
            raise ConfigError("--homes cannot be combined with a scenario file")
        return load_scenario(file_path)
    fields = dict(scenario_cfg.get("generate", {}))
    for name, field in (("homes", "n_homes"), ("seed", "seed")):
        value = getattr(args, name, None)
        if value is not None:
            fields[field] = value
    try:
        ncfg = NeighborhoodConfig(**{k: _retuple(k, v) for k, v in fields.items()})
        ncfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario.generate: {exc}") from exc
    return generate_neighborhood(ncfg)


def _retuple(key: str, value):
    # JSON has no tuples; range fields come back as lists
    if isinstance(value, list):
        return tuple(value)
    return value


def _coordinator_config(cfg: dict, args, n_homes: int) -> CoordinatorConfig:
    fields = dict(cfg.get("coordinator", {}))
    flag_map = {
        "batch": "batch_size",
        "optimizer": "optimizer",
        "lr": "learning_rate",
        "kmax": "k_max",
        "eps": "epsilon",
        "seed": "seed",
        "scaling": "gradient_scaling",
    }
    for flag, field in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            fields[field] = value
    batch = fields.get("batch_size", "full")
    if isinstance(batch, str):
        if batch == "full":
            fields["batch_size"] = n_homes
        else:
            try:
                fields["batch_size"] = int(batch)
            except ValueError as exc:
                raise ConfigError(f"batch must be an integer or 'full': {batch!r}") from exc
    if fields.get("optimizer") == "sgd":
        fields["optimizer"] = "scaled_sgd"
    if isinstance(fields.get("epsilon"), str):
        fields["epsilon"] = float(fields["epsilon"])
    try:
        ccfg = CoordinatorConfig(**fields)
        ccfg.validate(n_homes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"coordinator: {exc}") from exc
    return ccfg


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def _write_run_artifacts(out_dir: Path, scenario: Scenario, result: RunResult) -> None:
    """Emit iterations/prices/loads/aggregate CSVs for one finished run."""
    _write_csv(
        out_dir / "iterations.csv",
        ["k", "z", "grad_norm", "skipped_homes", "wall_ms"],
        (
            (
                rec.k,
                rec.objective,
                rec.gradient_norm,
                ";".join(str(i) for i in rec.skipped),
                rec.wall_ms,
            )
            for rec in result.trace
        ),
    )
    price = result.final_price
    _write_csv(
        out_dir / "prices.csv",
        ["t", "price"],
        ((t, price[t]) for t in range(price.shape[0])),
    )

    load_rows = []
    agg_opt = np.zeros(scenario.horizon)
    agg_des = np.zeros(scenario.horizon)
    for home in scenario.homes:
        sol = HomeQpSolver(home.polyhedron, home.weights, home.desired).solve(price)
        sched = sol.p_star.reshape(home.desired.shape)
        agg_opt += sched.sum(axis=0)
        agg_des += home.desired.sum(axis=0)
        for j, name in enumerate(home.appliances):
            for t in range(scenario.horizon):
                load_rows.append(
                    (home.index, name, t, sched[j, t], home.desired[j, t])
                )
    _write_csv(
        out_dir / "loads.csv",
        ["home", "appliance", "t", "p_star", "p_bar"],
        load_rows,
    )
    q = scenario.target.series
    _write_csv(
        out_dir / "aggregate.csv",
        ["t", "target", "desired_aggregate", "optimal_aggregate"],
        ((t, q[t], agg_des[t], agg_opt[t]) for t in range(scenario.horizon)),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    scenario = _build_scenario(cfg, args)
    out = _resolve_out(args.out, "scenario.json")
    if out.is_dir():
        out = out / "scenario.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenario(scenario, out)
    print(f"wrote {scenario.n_homes} homes, K={scenario.horizon} -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    scenario = _build_scenario(cfg, args)
    ccfg = _coordinator_config(cfg, args, scenario.n_homes)
    workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
    budget = (
        args.time_budget
        if args.time_budget is not None
        else float(cfg.get("time_budget_s", DEFAULT_TIME_BUDGET_S))
    )
    out_dir = _resolve_out(args.out or cfg.get("output_dir"), "run-out")

    t0 = time.perf_counter()
    result = run_coordination(
        scenario, ccfg, workers=workers, time_budget_s=budget
    )
    wall = time.perf_counter() - t0
    _write_run_artifacts(out_dir, scenario, result)
    print(
        f"z: {result.initial_objective:.6g} -> {result.final_objective:.6g} "
        f"in {len(result.trace)} iterations ({result.stop_reason}), "
        f"{wall:.1f}s -> {out_dir}"
    )
    if result.stop_reason == "time_budget":
        print(f"time budget of {budget:.0f}s exceeded; run truncated", file=sys.stderr)
        return EXIT_TIME_BUDGET
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    gen = dict(cfg.get("scenario", {}).get("generate", {}))
    gen.setdefault("n_homes", 3)
    gen.setdefault("horizon", 8)
    if args.homes is not None:
        gen["n_homes"] = args.homes
    if args.seed is not None:
        gen["seed"] = args.seed
    if gen["n_homes"] > 10 or gen["horizon"] > 16:
        raise ConfigError(
            f"gradcheck guard: N <= 10 and K <= 16 required, "
            f"got N={gen['n_homes']}, K={gen['horizon']}"
        )
    ncfg = NeighborhoodConfig(**{k: _retuple(k, v) for k, v in gen.items()})
    ncfg.validate()
    scenario = generate_neighborhood(ncfg)

    fd = FdConfig()
    rng = np.random.default_rng(ncfg.seed)
    price = rng.uniform(
        ncfg.price_low + 2 * fd.step,
        ncfg.price_high - 2 * fd.step,
        size=ncfg.horizon,
    )
    g_im = implicit_gradient(scenario, price)
    g_fd = finite_difference_gradient(scenario, price, fd)
    denom = max(1.0, float(np.max(np.abs(g_fd))))
    rel = np.abs(g_im - g_fd) / denom
    worst = int(np.argmax(rel))

    print(f"{'slot':>4}  {'implicit':>24}  {'finite-diff':>24}  {'rel_err':>12}")
    for t in range(ncfg.horizon):
        print(f"{t:>4}  {g_im[t]:>24.16g}  {g_fd[t]:>24.16g}  {rel[t]:>12.3e}")
    ok = float(rel[worst]) <= 1e-4
    verdict = "PASS" if ok else "FAIL"
    print(
        f"{verdict}: max relative error {rel[worst]:.3e} at slot {worst} "
        f"(threshold 1e-04)"
    )
    return EXIT_OK if ok else EXIT_NUMERICAL


_DEFAULT_SIZES = (50, 100, 250)
_DEFAULT_SETTINGS = tuple(
    {"optimizer": opt, "learning_rate": lr, "batch": batch}
    for opt, lr in (
        ("adam", 1e-1),
        ("adam", 1e0),
        ("scaled_sgd", 1e-5),
        ("scaled_sgd", 1e-6),
    )
    for batch in (25, "full")
)


def _setting_label(s: dict) -> str:
    return f"{s['optimizer']}-lr{s['learning_rate']:g}-B{s['batch']}"


def _load_baseline(path: str) -> dict:
    table = {}
    lines = Path(path).read_text().strip().splitlines()
    for line in lines[1:]:  # header: size,seed,z
        size, seed, z = line.split(",")
        table[(int(size), int(seed))] = float(z)
    return table


def cmd_experiment(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    exp = cfg.get("experiment", {}) or {}
    sizes = [int(s) for s in exp.get("sizes", _DEFAULT_SIZES)]
    n_seeds = int(exp.get("seeds", 5))
    settings = list(exp.get("settings", _DEFAULT_SETTINGS))
    baseline_path = args.baseline or exp.get("baseline")
    budget = (
        args.time_budget
        if args.time_budget is not None
        else float(cfg.get("time_budget_s", DEFAULT_TIME_BUDGET_S))
    )
    workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
    out_dir = _resolve_out(args.out or cfg.get("output_dir"), "experiment-out")
    coord_base = dict(cfg.get("coordinator", {}))

    cells = [
        (size, seed, idx)
        for size in sizes
        for seed in range(n_seeds)
        for idx in range(len(settings))
    ]
    scenarios: dict[tuple[int, int], Scenario] = {}
    for size in sizes:
        for seed in range(n_seeds):
            ncfg_fields = dict(cfg.get("scenario", {}).get("generate", {}))
            ncfg_fields.update(n_homes=size, seed=seed)
            ncfg = NeighborhoodConfig(**{k: _retuple(k, v) for k, v in ncfg_fields.items()})
            ncfg.validate()
            scenarios[(size, seed)] = generate_neighborhood(ncfg)

    def run_cell(cell):
        size, seed, idx = cell
        setting = settings[idx]
        label = _setting_label(setting)
        optimizer = setting["optimizer"]
        if optimizer == "sgd":  # same alias the run flags accept
            optimizer = "scaled_sgd"
        fields = dict(coord_base)
        fields.update(
            optimizer=optimizer,
            learning_rate=float(setting["learning_rate"]),
            seed=seed,
        )
        batch = setting["batch"]
        fields["batch_size"] = size if batch == "full" else int(batch)
        if fields["batch_size"] > size:
            return (size, seed, label, np.nan, 0.0, "error:batch>N")
        ccfg = CoordinatorConfig(**fields)
        t0 = time.perf_counter()
        try:
            result = run_coordination(
                scenarios[(size, seed)], ccfg, time_budget_s=budget
            )
        except _NUMERICAL_ERRORS as exc:
            return (size, seed, label, np.nan, time.perf_counter() - t0, f"error:{exc}")
        wall = time.perf_counter() - t0
        status = "truncated" if result.stop_reason == "time_budget" else "ok"
        return (size, seed, label, result.final_objective, wall, status)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    _write_csv(
        out_dir / "runs.csv",
        ["size", "seed", "setting", "z_final", "wall_s", "status"],
        rows,
    )

    labels = [_setting_label(s) for s in settings]
    by_cell: dict[tuple[int, int], list] = {}
    for size, seed, label, z, wall, status in rows:
        by_cell.setdefault((size, seed), []).append((label, z, wall, status))

    # win counts and average ranks over attained objectives; failed runs are
    # excluded from ranking, truncated runs keep their attained z
    wins = {lab: 0 for lab in labels}
    rank_sums = {lab: 0.0 for lab in labels}
    rank_counts = {lab: 0 for lab in labels}
    for cell, entries in sorted(by_cell.items()):
        ranked = [(lab, z) for lab, z, _, status in entries if not status.startswith("error")]
        if not ranked:
            continue
        zs = np.array([z for _, z in ranked])
        best = np.min(zs)
        for lab, z in ranked:
            if z == best:
                wins[lab] += 1
        for lab, r in zip((lab for lab, _ in ranked), rankdata(zs)):
            rank_sums[lab] += float(r)
            rank_counts[lab] += 1

    _write_csv(
        out_dir / "win_counts.csv",
        ["setting", "wins"],
        ((lab, wins[lab]) for lab in labels),
    )
    _write_csv(
        out_dir / "mean_runtime.csv",
        ["setting", "mean_wall_s"],
        (
            (
                lab,
                float(
                    np.mean(
                        [w for _, _, l2, _, w, st in rows if l2 == lab and not st.startswith("error")]
                        or [np.nan]
                    )
                ),
            )
            for lab in labels
        ),
    )
    _write_csv(
        out_dir / "ranks.csv",
        ["setting", "avg_rank"],
        (
            (lab, rank_sums[lab] / rank_counts[lab] if rank_counts[lab] else np.nan)
            for lab in labels
        ),
    )

    if baseline_path:
        base = _load_baseline(baseline_path)
        ratio_rows = []
        for lab in labels:
            ratios = [
                (base[(size, seed)] - z) / z
                for size, seed, l2, z, _, status in rows
                if l2 == lab and not status.startswith("error") and (size, seed) in base
            ]
            ratio_rows.append((lab, float(np.mean(ratios)) if ratios else np.nan))
        _write_csv(out_dir / "improvement.csv", ["setting", "mean_ratio"], ratio_rows)

    n_err = sum(1 for r in rows if r[5].startswith("error"))
    print(f"{len(rows)} runs ({n_err} failed) -> {out_dir}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    gen = dict(cfg.get("scenario", {}).get("generate", {}))
    if args.homes is not None:
        gen["n_homes"] = args.homes
    if args.seed is not None:
        gen["seed"] = args.seed
    gen.setdefault("n_homes", 1)
    ncfg = NeighborhoodConfig(**{k: _retuple(k, v) for k, v in gen.items()})
    ncfg.validate()
    scenario = generate_neighborhood(ncfg)

    if args.mode == "grid":
        price, z = brute_force_price_search(scenario, args.grid_step)
        joined = ",".join(_fmt(p) for p in price)
        print(f"grid optimum: z={_fmt(z)} at price=[{joined}]")
        return EXIT_OK

    batch = args.batch if args.batch is not None else max(1, scenario.n_homes // 2)
    if isinstance(batch, str):
        batch = scenario.n_homes if batch == "full" else int(batch)
    rng = np.random.default_rng(ncfg.seed)
    price = rng.uniform(ncfg.price_low, ncfg.price_high, size=ncfg.horizon)
    mean = enumerate_batch_estimator(scenario, price, batch)
    full = implicit_gradient(scenario, price)
    gap = float(np.max(np.abs(mean - full)))
    print(f"enumerated mean vs full gradient: max abs gap {gap:.3e}")
    return EXIT_OK if gap <= 1e-10 else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--homes", type=int, help="number of homes to generate")
    p.add_argument("--seed", type=int, help="generation / coordinator seed")
    p.add_argument("--out", help="output directory (or file for generate)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loadsteer",
        description="Neighborhood load steering through coordinated pricing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a neighborhood scenario file")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run the coordination loop")
    _add_common(p)
    p.add_argument("--scenario", help="scenario JSON file (instead of generating)")
    p.add_argument("--batch", help="batch size B or 'full'")
    p.add_argument("--optimizer", choices=["adam", "sgd", "scaled_sgd"])
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--kmax", type=int, help="iteration cap")
    p.add_argument("--eps", type=float, help="relative-improvement stop threshold")
    p.add_argument("--scaling", choices=["sum", "unbiased"])
    p.add_argument("--time-budget", type=float, help="wall-clock budget in seconds")
    p.add_argument("--workers", type=int, help="worker threads for per-home solves")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="implicit vs finite-difference gradient")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="sweep sizes x seeds x settings")
    _add_common(p)
    p.add_argument("--baseline", help="baseline objectives CSV (size,seed,z)")
    p.add_argument("--time-budget", type=float, help="per-run budget in seconds")
    p.add_argument("--workers", type=int, help="parallel grid cells")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("oracle", help="desk-scale ground-truth checks")
    p.add_argument("mode", choices=["grid", "enumerate"])
    _add_common(p)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--batch", help="batch size for the enumeration mode")
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
