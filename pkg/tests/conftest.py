from __future__ import annotations

import functools

import pytest

from logit_sue.equilibrium import SueProblem
from logit_sue.instances import sioux_falls_pathset

_criteria: dict[int, list[tuple[str, bool, str]]] = {}


@functools.lru_cache(maxsize=None)
def _sioux(k: int = 20):
    return sioux_falls_pathset(k)


@pytest.fixture(scope="session")
def sioux_falls():
    """Factory for Sioux Falls problems sharing one Yen path set (k = 20)."""
    net, demand, ps = _sioux()

    def make(theta: float, multiplier: float = 1.0) -> SueProblem:
        return SueProblem.build(net, demand.scaled(multiplier), ps, theta)

    make.pathset = ps
    make.network = net
    make.demand = demand
    return make


def record_criterion(number: int, label: str, passed: bool | None, detail: str = "") -> None:
    """Store one acceptance result; ``passed=None`` means the case could not run."""
    _criteria.setdefault(number, []).append((label, passed, detail))
    status = "NOT RUN" if passed is None else ("PASS" if passed else "FAIL")
    print(f"criterion {number} [{label}]: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        parts = _criteria[number]
        ran = [p for _, p, _ in parts if p is not None]
        ok = bool(ran) and all(ran)
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}"
        notes = [f"{label}: {detail}" for label, p, detail in parts if p is False]
        notes += [f"{label} not run" for label, p, _ in parts if p is None]
        if notes:
            line += "  (" + "; ".join(notes) + ")"
        terminalreporter.write_line(line)
