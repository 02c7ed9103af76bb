"""Fixed-point solvers for logit SUE: MSA with harmonic or adaptive constant
steps, Barzilai-Borwein steps (optionally with an adaptive fallback), an
inexact Newton step on the reduced system and the BB-Newton hybrid.
"""
from __future__ import annotations

import io
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import LOG_FLOOR, FlowState, SueProblem, segment_sum
from .krylov import GmresResult, gmres
from .operators import apply_I_minus_K, operators_at

METHODS = ("msa-hs", "msa-acs", "bb1", "bb2", "bb1-acs", "bb2-acs", "bb-newton")
DEFAULT_THRESHOLDS = tuple(10.0 ** -e for e in range(3, 11))
TRACE_COLUMNS = ("iter", "rgap", "residual_norm", "aec", "step_size", "phase", "wall_s")


def msa_update(h: np.ndarray, target: np.ndarray, s: float) -> np.ndarray:
    if not 0.0 < s <= 1.0:
        raise ValueError(f"step size {s} outside (0, 1]")
    return (1.0 - s) * h + s * target


@dataclass
class AcsState:
    I_s: int = 10
    epsilon: float = 0.01
    q: int = 3
    current_step: float = 1.0
    gap_queue: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.I_s < 1 or self.q < 2 or not 0.0 < self.epsilon < 1.0:
            raise ValueError("need I_s >= 1, q >= 2 and epsilon in (0, 1)")
        self.gap_queue = deque(self.gap_queue, maxlen=self.q)


def acs_step(state: AcsState, k: int, new_gap: float) -> float:
    """Adaptive constant step: harmonic for ``k <= I_s``, then held constant
    and reset to ``1/k`` whenever the gap over the last ``q`` iterations has
    dropped by a relative amount below ``epsilon``."""
    if k < 1:
        raise ValueError("iterations are counted from 1")
    state.gap_queue.append(new_gap)
    if k <= state.I_s:
        state.current_step = 1.0 / k
    elif len(state.gap_queue) == state.q:
        g0, g_last = state.gap_queue[0], state.gap_queue[-1]
        if g0 > 0 and (g0 - g_last) / g0 < state.epsilon:
            state.current_step = 1.0 / k
    return state.current_step


def bb_step(h_k, h_km1, L_k, L_km1, variant: str) -> float | None:
    """Barzilai-Borwein step clipped to [0, 1]; ``None`` when undefined."""
    dh = np.asarray(h_k) - np.asarray(h_km1)
    y = dh - (np.asarray(L_k) - np.asarray(L_km1))
    if variant.lower() == "bb1":
        num, den = float(dh @ y), float(y @ y)
    elif variant.lower() == "bb2":
        num, den = float(dh @ dh), float(dh @ y)
    else:
        raise ValueError(f"unknown BB variant {variant!r}")
    if den == 0.0:
        return None
    with np.errstate(all="ignore"):
        s = num / den
    if not math.isfinite(s):
        return None
    return min(max(s, 0.0), 1.0)


@dataclass(frozen=True)
class NewtonConfig:
    eta_tol: float = 1e-2
    nu1: float = 1e-4
    nu2: float = 1e3
    max_dim: int | None = None

    def __post_init__(self):
        if not (0 < self.eta_tol < 1 and 0 < self.nu1 < 1 and self.nu2 > 0):
            raise ValueError("need eta_tol in (0,1), nu1 in (0,1) and nu2 > 0")


@dataclass
class NewtonResult:
    accepted: bool
    state: FlowState
    reason: str
    residual_before: float
    residual_after: float | None = None
    eta: float | None = None
    gmres: GmresResult | None = None


def _snap_small_negatives(problem: SueProblem, trial: np.ndarray, fallback: np.ndarray) -> np.ndarray | None:
    """Replace rounding-level non-positive entries by ``fallback`` (the logit
    target at the current iterate, which is strictly positive) and take the
    difference from the largest flow of the same OD. Returns ``None`` if any
    entry is below ``-1e-12 * max(1, d_OD)``."""
    tol = 1e-12 * np.maximum(1.0, problem.path_demand)
    if np.any(trial < -tol):
        return None
    bad = np.flatnonzero(trial <= 0)
    if len(bad) == 0:
        return trial
    trial = trial.copy()
    off = problem.od_offsets
    for j in np.unique(problem.pathset.od_index[bad]):
        lo, hi = off[j], off[j + 1]
        block = trial[lo:hi]
        mask = block <= 0
        shift = fallback[lo:hi][mask] - block[mask]
        block[mask] = fallback[lo:hi][mask]
        block[np.argmax(block)] -= shift.sum()
    return trial


def newton_step(state: FlowState, config: NewtonConfig = NewtonConfig()) -> NewtonResult:
    """One inexact Newton step on ``(I - K) delta = F``, accepted only if the
    trial point is feasible and reduces ``||F||`` by the factor ``1 - nu1``."""
    problem = state.problem
    F = state.residual
    f_norm = float(np.linalg.norm(F))
    if f_norm == 0.0:
        return NewtonResult(True, state, "solved", 0.0, 0.0)
    eta = min(config.eta_tol, config.nu2 * f_norm)
    s, j = operators_at(state)
    sol = gmres(lambda v: apply_I_minus_K(s, j, v), F, eta, config.max_dim)
    if not sol.converged:
        return NewtonResult(False, state, "gmres", f_norm, eta=eta, gmres=sol)
    delta = sol.solution
    drift = np.abs(segment_sum(delta, problem.od_offsets))
    if np.any(drift > 1e-8 * np.maximum(1.0, problem.od_demand)):
        return NewtonResult(False, state, "demand", f_norm, eta=eta, gmres=sol)
    trial = _snap_small_negatives(problem, state.h + delta, state.target)
    if trial is None:
        return NewtonResult(False, state, "infeasible", f_norm, eta=eta, gmres=sol)
    new = FlowState(problem, trial)
    after = new.residual_norm()
    if after > (1.0 - config.nu1) * f_norm:
        return NewtonResult(False, state, "no-decrease", f_norm, after, eta, sol)
    return NewtonResult(True, new, "accepted", f_norm, after, eta, sol)


@dataclass(frozen=True)
class SolverConfig:
    rgap_target: float = 1e-10
    time_budget_s: float | None = None
    max_iterations: int | None = None
    I_s: int = 10
    epsilon: float = 0.01
    q: int = 3
    newton: NewtonConfig = NewtonConfig()
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    rate_window: int = 25
    rate_gap: float = 1e-9

    def __post_init__(self):
        if not 0 < self.rgap_target < 1:
            raise ValueError("rgap_target must lie in (0, 1)")
        th = tuple(self.thresholds)
        if any(b >= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly decreasing")
        object.__setattr__(self, "thresholds", th)


@dataclass
class TraceRow:
    iteration: int
    rgap: float
    residual_norm: float
    aec: float
    step_size: float
    phase: str
    wall_s: float


@dataclass
class SolveRun:
    method: str
    theta: float
    demand_multiplier: float
    rgap_target: float
    time_budget: float | None
    trace: list[TraceRow] = field(default_factory=list)
    status: str = "running"
    h: np.ndarray | None = None
    newton_rejections: list[tuple[int, str]] = field(default_factory=list)
    observed_rate: float | None = None
    config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def iterations(self) -> int:
        return self.trace[-1].iteration if self.trace else 0

    @property
    def final_rgap(self) -> float:
        return self.trace[-1].rgap

    @property
    def newton_iterations(self) -> list[int]:
        return [r.iteration for r in self.trace if r.phase == "newton"]

    @property
    def final_step(self) -> float | None:
        steps = [r.step_size for r in self.trace if r.iteration > 0 and r.phase != "newton"]
        return steps[-1] if steps else None

    def rgaps(self) -> list[float]:
        return [r.rgap for r in self.trace]

    def empirical_order(self) -> float | None:
        return empirical_order(self.rgaps(), self.newton_iterations)

    def iterations_to(self, gap: float) -> int | None:
        return next((r.iteration for r in self.trace if r.rgap <= gap), None)

    def trace_csv(self, deterministic: bool = False) -> str:
        buf = io.StringIO()
        buf.write(",".join(TRACE_COLUMNS) + "\n")
        for r in self.trace:
            wall = "" if deterministic else repr(r.wall_s)
            step = "" if math.isnan(r.step_size) else repr(r.step_size)
            buf.write(f"{r.iteration},{r.rgap!r},{r.residual_norm!r},{r.aec!r},{step},{r.phase},{wall}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "final_rgap": self.final_rgap,
            "final_residual_norm": self.trace[-1].residual_norm,
            "empirical_order": self.empirical_order(),
            "observed_rate": self.observed_rate,
            "final_step": self.final_step,
            "newton_accepted": len(self.newton_iterations),
            "newton_rejections": [list(x) for x in self.newton_rejections],
            "wall_s": self.trace[-1].wall_s,
            "theta": self.theta,
            "demand_multiplier": self.demand_multiplier,
            "rgap_target": self.rgap_target,
            "time_budget_s": self.time_budget,
            "seed": self.seed,
            "gap_convention": "w_i = c_i + ln(h_i)/theta",
            "config": self.config,
        }

    def write(self, output_dir: str | Path, deterministic: bool = False) -> None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(self.trace_csv(deterministic))
        summary = self.summary()
        if deterministic:
            summary["wall_s"] = None
            (out / "timings.csv").write_text(
                "iter,wall_s\n" + "".join(f"{r.iteration},{r.wall_s!r}\n" for r in self.trace)
            )
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def empirical_order(rgaps, iterations=None) -> float | None:
    """Mean of ``ln(r_k/r_{k-1}) / ln(r_{k-1}/r_{k-2})`` over ``iterations``
    (all ``k >= 2`` by default). ``None`` when no term is defined."""
    r = list(rgaps)
    ks = range(2, len(r)) if iterations is None else [k for k in iterations if k >= 2]
    terms = []
    for k in ks:
        a, b, c = r[k - 2], r[k - 1], r[k]
        if min(a, b, c) <= 0 or b == a:
            continue
        terms.append(math.log(c / b) / math.log(b / a))
    return float(np.mean(terms)) if terms else None


def observed_rate(snapshots, reference_h: np.ndarray, window: int = 25) -> float | None:
    """Mean of ``||h^k - ref|| / ||h^{k-1} - ref||`` over the last ``window``
    consecutive snapshot pairs."""
    snaps = list(snapshots)
    if len(snaps) < window + 1:
        return None
    errs = [float(np.linalg.norm(h - reference_h)) for h in snaps[-(window + 1):]]
    if min(errs[:-1]) == 0:
        return None
    return float(np.mean([b / a for a, b in zip(errs, errs[1:])]))


def solve(problem: SueProblem, method: str, config: SolverConfig = SolverConfig(),
          h0: np.ndarray | None = None, demand_multiplier: float = 1.0,
          seed: int | None = None, track_rate: bool = False) -> SolveRun:
    """Run one of ``METHODS`` from ``h0`` (free-flow logit loading by default)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    h0 = problem.initial_flows() if h0 is None else np.asarray(h0, dtype=float)
    if np.any(h0 <= 0):
        raise ValueError("initial flows must be strictly positive")
    run = SolveRun(method, problem.theta, demand_multiplier, config.rgap_target,
                   config.time_budget_s, config=_config_echo(config), seed=seed)
    state = FlowState(problem, h0)
    run.trace.append(TraceRow(0, state.rgap(LOG_FLOOR), state.residual_norm(),
                              state.aec(LOG_FLOOR), math.nan, "init", 0.0))
    if run.final_rgap <= config.rgap_target:
        run.status, run.h = "converged", state.h
        return run

    acs = AcsState(config.I_s, config.epsilon, config.q)
    variant = "bb2" if method.startswith("bb2") else "bb1"
    fallback = method.endswith("-acs") or method == "bb-newton"
    thresholds = config.thresholds if method == "bb-newton" else ()
    next_threshold = 0
    newton_mode = False
    prev: FlowState | None = None
    snaps: deque | None = deque(maxlen=config.rate_window + 1) if track_rate else None
    rate_frozen = False
    if snaps is not None:
        snaps.append(state.h)

    start = time.perf_counter()
    k = 0
    while True:
        k += 1
        new = None
        if method == "bb-newton":
            r = run.trace[-1].rgap
            crossed = False
            while next_threshold < len(thresholds) and r <= thresholds[next_threshold]:
                next_threshold += 1
                crossed = True
            if newton_mode or crossed:
                res = newton_step(state, config.newton)
                newton_mode = res.accepted
                if res.accepted:
                    new, step, phase = res.state, 1.0, "newton"
                else:
                    run.newton_rejections.append((k, res.reason))
        if new is None:
            gap = state.residual_norm()
            if method == "msa-hs":
                step, phase = 1.0 / k, "harmonic"
            else:
                step = acs_step(acs, k, gap)
                phase = "harmonic" if k <= config.I_s else "constant"
                if method != "msa-acs" and prev is not None:
                    bb = bb_step(state.h, prev.h, state.target, prev.target, variant)
                    if bb is not None and bb > 0.0:
                        step, phase = bb, variant
                    elif fallback:
                        phase = "acs_fallback"
                    else:
                        run.status = "numerical_failure"
                        break
            new = FlowState(problem, msa_update(state.h, state.target, step))
        prev, state = state, new
        wall = time.perf_counter() - start
        rg = state.rgap(LOG_FLOOR)
        run.trace.append(TraceRow(k, rg, state.residual_norm(), state.aec(LOG_FLOOR), step, phase, wall))
        if snaps is not None and not rate_frozen:
            snaps.append(state.h)
            rate_frozen = rg <= config.rate_gap
        if rg <= config.rgap_target:
            run.status = "converged"
            break
        if config.time_budget_s is not None and wall >= config.time_budget_s:
            run.status = "budget"
            break
        if config.max_iterations is not None and k >= config.max_iterations:
            run.status = "max_iterations"
            break
    run.h = state.h
    if snaps is not None and rate_frozen and run.converged:
        run.observed_rate = observed_rate(snaps, state.h, config.rate_window)
    return run


def _config_echo(config: SolverConfig) -> dict:
    out = asdict(config)
    out["thresholds"] = list(config.thresholds)
    return out


def msa_solve(problem: SueProblem, rule: str = "acs", config: SolverConfig = SolverConfig(),
              h0: np.ndarray | None = None, **kw) -> SolveRun:
    """MSA with the harmonic (``rule="hs"``) or adaptive constant (``"acs"``) step."""
    rule = rule.lower()
    if rule not in ("hs", "acs"):
        raise ValueError("rule must be 'hs' or 'acs'")
    return solve(problem, f"msa-{rule}", config, h0, **kw)


def bb_solve(problem: SueProblem, variant: str = "bb1", fallback: bool = True,
             config: SolverConfig = SolverConfig(), h0: np.ndarray | None = None, **kw) -> SolveRun:
    return solve(problem, variant.lower() + ("-acs" if fallback else ""), config, h0, **kw)


def bb_newton_solve(problem: SueProblem, config: SolverConfig = SolverConfig(),
                    h0: np.ndarray | None = None, **kw) -> SolveRun:
    return solve(problem, "bb-newton", config, h0, **kw)
