"""Command-line interface: ``solve``, ``spectra`` and ``bench``.

Exit status: 0 converged, 2 stopped without converging (time budget,
iteration cap or a numerically undefined step), 1 error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import FlowState, SueProblem
from .instances import load_network
from .network import NetworkValidationError, TntpParseError, read_net, read_trips
from .operators import (
    DENSE_LIMIT, dense_K, j_norm_bound, j_norm_exact, operators_at, spectral_analysis,
    spectral_analysis_link_space,
)
from .pathset import NoPathError, PathSetError, generate_pathset, write_pathset
from .solvers import DEFAULT_THRESHOLDS, METHODS, NewtonConfig, SolverConfig, solve

log = logging.getLogger("logit_sue")

THREADS_ENV = "LOGIT_SUE_THREADS"
MILESTONES = tuple(10.0 ** -e for e in range(1, 11))
# Above this many paths the spectrum comes from the link-space matrix unless
# the dense route is requested explicitly.
AUTO_DENSE_PATHS = 2000


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    net_path: str | None = None
    trips_path: str | None = None
    network: str | None = None
    theta: float = 1.0
    demand_multiplier: float = 1.0
    k_paths: int = 20
    path_method: str = "yen"
    seed: int = 0
    method: str = "bb-newton"
    rgap_target: float = 1e-10
    time_budget_s: float | None = None
    max_iterations: int | None = None
    I_s: int = 10
    epsilon: float = 0.01
    q: int = 3
    eta_tol: float = 1e-2
    nu1: float = 1e-4
    nu2: float = 1e3
    thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    output_dir: str = "out"
    deterministic: bool = False

    def __post_init__(self):
        if not self.theta > 0:
            raise CliError("--theta must be positive")
        if not self.demand_multiplier > 0:
            raise CliError("--demand-multiplier must be positive")
        if self.k_paths < 1:
            raise CliError("--k-paths must be >= 1")
        if not 0 < self.rgap_target < 1:
            raise CliError("--rgap-target must lie in (0, 1)")
        if self.path_method not in ("yen", "penalty"):
            raise CliError("--path-method must be yen or penalty")
        if self.method not in METHODS:
            raise CliError(f"--method must be one of {', '.join(METHODS)}")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            rgap_target=self.rgap_target, time_budget_s=self.time_budget_s,
            max_iterations=self.max_iterations, I_s=self.I_s, epsilon=self.epsilon, q=self.q,
            newton=NewtonConfig(self.eta_tol, self.nu1, self.nu2), thresholds=tuple(self.thresholds),
        )


def _limit_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=max(1, n))


def _load(config: RunConfig):
    if config.network:
        net, demand = load_network(config.network)
    else:
        if not config.net_path or not config.trips_path:
            raise CliError("give --net and --trips, or --network NAME")
        for p in (config.net_path, config.trips_path):
            if not Path(p).is_file():
                raise CliError(f"no such file: {p}")
        net, demand = read_net(config.net_path), read_trips(config.trips_path)
    return net, demand


def build(config: RunConfig) -> SueProblem:
    net, demand = _load(config)
    ps = generate_pathset(net, demand, config.k_paths, config.path_method, config.seed)
    return SueProblem.build(net, demand.scaled(config.demand_multiplier), ps, config.theta)


def cmd_solve(config: RunConfig) -> int:
    problem = build(config)
    run = solve(problem, config.method, config.solver_config(), demand_multiplier=config.demand_multiplier,
                seed=config.seed)
    run.config = asdict(config)
    out = Path(config.output_dir)
    run.write(out, config.deterministic)
    write_pathset(problem.pathset, out / "paths.txt", {"network": problem.network.name})
    np.savetxt(out / "flows.csv", np.column_stack([np.arange(problem.n), run.h]),
               fmt=["%d", "%.17g"], delimiter=",", header="path,flow", comments="")
    print(json.dumps({k: run.summary()[k] for k in ("method", "status", "iterations", "final_rgap")}))
    return 0 if run.converged else 2


def read_flows(path: str | Path, n: int) -> np.ndarray:
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=_header_lines(path), ndmin=2))
    h = rows[:, -1]
    if len(h) != n:
        raise CliError(f"{path}: expected {n} path flows, found {len(h)}")
    return h


def _header_lines(path) -> int:
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(x) for x in first.split(",")]
        return 0
    except ValueError:
        return 1


def cmd_spectra(config: RunConfig, flows: str | None, method: str, dense_limit: int,
                output: str | None) -> int:
    problem = build(config)
    if flows:
        h = read_flows(flows, problem.n)
    else:
        run = solve(problem, "bb-newton", config.solver_config())
        if not run.converged:
            raise CliError(f"equilibrium solve stopped at RGAP {run.final_rgap:.3g} ({run.status})")
        h = run.h
    state = FlowState(problem, h)
    s, j = operators_at(state)
    bound = j_norm_bound(problem)
    max_d = float(problem.od_demand.max())
    if method == "auto":
        method = "dense" if problem.n <= AUTO_DENSE_PATHS else "link-space"
    if method == "dense":
        if problem.n > dense_limit:
            raise CliError(f"{problem.n} paths exceeds the dense limit of {dense_limit}")
        report = spectral_analysis(dense_K(s, j, dense_limit), config.theta, max_d, bound, j_norm_exact(j))
    else:
        report = spectral_analysis_link_space(s, j, config.theta, max_d, bound)
    text = report.to_json()
    if output:
        Path(output).write_text(text + "\n")
    print(text)
    return 0


BENCH_COLUMNS = (
    ["network", "method", "theta", "multiplier", "status", "iterations", "wall_s", "final_rgap",
     "empirical_order", "newton_accepted"]
    + [f"it_{g:.0e}" for g in MILESTONES]
    + ["error"]
)


def _bench_row(args) -> dict:
    entry, base = args
    row = {k: entry.get(k, "") for k in ("network", "method", "theta", "multiplier")}
    try:
        cfg = RunConfig(**{**base, "network": entry["network"], "net_path": None, "trips_path": None,
                           "method": entry["method"], "theta": float(entry["theta"]),
                           "demand_multiplier": float(entry["multiplier"])})
        problem = build(cfg)
        run = solve(problem, cfg.method, cfg.solver_config(), demand_multiplier=cfg.demand_multiplier)
        order = run.empirical_order()
        row.update(status=run.status, iterations=run.iterations, wall_s=f"{run.trace[-1].wall_s:.4f}",
                   final_rgap=f"{run.final_rgap:.3e}", empirical_order="" if order is None else f"{order:.3f}",
                   newton_accepted=len(run.newton_iterations), error="")
        for g in MILESTONES:
            it = run.iterations_to(g)
            row[f"it_{g:.0e}"] = "" if it is None else it
    except Exception as exc:  # noqa: BLE001 - one failed row must not stop the sweep
        row.update(status="error", error=str(exc))
    return row


def cmd_bench(grid: str, output: str | None, jobs: int, base: RunConfig) -> int:
    with open(grid, newline="") as fh:
        entries = [
            {k.strip(): (v or "").strip() for k, v in r.items()}
            for r in csv.DictReader(fh)
        ]
    missing = {"network", "method", "theta", "multiplier"} - set(entries[0] if entries else {})
    if entries and missing:
        raise CliError(f"{grid}: grid is missing columns {sorted(missing)}")
    base_dict = asdict(base)
    tasks = [(e, base_dict) for e in entries]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_bench_row, tasks))
    else:
        rows = [_bench_row(t) for t in tasks]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if output:
        Path(output).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()] if text.strip() else []


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--net", "--net-path", dest="net_path", help="TNTP network file")
    p.add_argument("--trips", "--trips-path", dest="trips_path", help="TNTP trip table")
    p.add_argument("--network", help="bundled or LOGIT_SUE_DATA network name (sioux_falls, braess, ...)")
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--demand-multiplier", type=float, default=1.0)
    p.add_argument("--k-paths", type=int, default=20)
    p.add_argument("--path-method", choices=("yen", "penalty"), default="yen")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=METHODS, default="bb-newton")
    p.add_argument("--rgap-target", type=float, default=1e-10)
    p.add_argument("--time-budget-s", "--time-budget", dest="time_budget_s", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--I-s", "--i-s", dest="I_s", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--eta-tol", type=float, default=1e-2)
    p.add_argument("--nu1", type=float, default=1e-4)
    p.add_argument("--nu2", type=float, default=1e3)
    p.add_argument("--thresholds", type=_floats, default=list(DEFAULT_THRESHOLDS),
                   help="comma-separated decreasing RGAP thresholds for Newton attempts")
    p.add_argument("--output-dir", default="out")
    p.add_argument("--deterministic", action="store_true",
                   help="byte-reproducible trace (wall times go to timings.csv)")


def _config(ns: argparse.Namespace) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    return RunConfig(**{k: v for k, v in vars(ns).items() if k in fields})


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logit-sue", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve for the logit SUE and write trace, summary and path set")
    _add_run_options(p)

    p = sub.add_parser("spectra", help="eigenvalues of the reduced Jacobian at given or equilibrium flows")
    _add_run_options(p)
    p.add_argument("--flows", help="CSV of path flows in path-set order (as written by solve)")
    p.add_argument("--spectrum-method", choices=("auto", "dense", "link-space"), default="auto")
    p.add_argument("--dense-limit", type=int, default=DENSE_LIMIT)
    p.add_argument("--output", help="also write the JSON report here")

    p = sub.add_parser("bench", help="run a grid of (network, method, theta, multiplier)")
    _add_run_options(p)
    p.add_argument("--grid", required=True, help="CSV with columns network,method,theta,multiplier")
    p.add_argument("--output", help="aggregate CSV (stdout if omitted)")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv: list[str] | None = None) -> int:
    ns = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads()
        if ns.command == "bench":
            ns.method = ns.method or "bb-newton"
            return cmd_bench(ns.grid, ns.output, ns.jobs, _config(ns))
        config = _config(ns)
        if ns.command == "solve":
            return cmd_solve(config)
        return cmd_spectra(config, ns.flows, ns.spectrum_method, ns.dense_limit, ns.output)
    except (CliError, TntpParseError, NetworkValidationError, NoPathError, PathSetError,
            FileNotFoundError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
