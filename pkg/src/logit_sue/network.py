"""Road network and trip table ingestion (TNTP format) plus link cost functions.

Two link cost families are supported:

* ``bpr``: ``t0 * (1 + alpha * (a / capacity) ** beta)``
* ``affine``: ``t0 + alpha * a`` (capacity and beta unused)

TNTP files only know BPR links. An affine link is written with the token
``affine`` in the ``link_type`` column; its intercept goes in the
``free_flow_time`` column and its slope in the ``b`` column.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

BPR = "bpr"
AFFINE = "affine"

_NET_TAGS = {
    "NUMBER OF ZONES",
    "NUMBER OF NODES",
    "FIRST THRU NODE",
    "NUMBER OF LINKS",
    "ORIGINAL HEADER",
    "END OF METADATA",
}
_TRIPS_TAGS = {"NUMBER OF ZONES", "TOTAL OD FLOW", "END OF METADATA", "ORIGINAL HEADER"}
_TAG_RE = re.compile(r"^<([^>]*)>(.*)$")


class TntpParseError(ValueError):
    """Malformed TNTP content. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NetworkValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    tail: int
    head: int
    capacity: float
    free_flow_time: float
    bpr_alpha: float = 0.15
    bpr_beta: float = 4.0
    length: float = 0.0
    speed: float = 0.0
    toll: float = 0.0
    link_type: str = "1"
    cost_kind: str = BPR

    def __post_init__(self):
        if not self.capacity > 0:
            raise NetworkValidationError(f"link {self.tail}->{self.head}: capacity must be > 0")
        if self.cost_kind not in (BPR, AFFINE):
            raise NetworkValidationError(f"unknown cost family {self.cost_kind!r}")
        if self.cost_kind == BPR:
            if self.free_flow_time < 0:
                raise NetworkValidationError(
                    f"link {self.tail}->{self.head}: free_flow_time must be >= 0"
                )
            if self.bpr_beta < 0:
                raise NetworkValidationError(f"link {self.tail}->{self.head}: bpr_beta must be >= 0")
        elif self.bpr_alpha < 0:
            raise NetworkValidationError(f"link {self.tail}->{self.head}: affine slope must be >= 0")


def affine_link(tail: int, head: int, intercept: float, slope: float) -> Link:
    """Link with cost ``intercept + slope * flow``."""
    return Link(
        tail, head, capacity=1.0, free_flow_time=intercept, bpr_alpha=slope, bpr_beta=1.0,
        link_type=AFFINE, cost_kind=AFFINE,
    )


def _check_flow(flow):
    if np.any(np.asarray(flow) < 0):
        raise ValueError("link flow must be non-negative")


def link_cost(link: Link, flow: float) -> float:
    _check_flow(flow)
    if link.cost_kind == AFFINE:
        return link.free_flow_time + link.bpr_alpha * flow
    return link.free_flow_time * (1.0 + link.bpr_alpha * (flow / link.capacity) ** link.bpr_beta)


def link_cost_derivative(link: Link, flow: float) -> float:
    _check_flow(flow)
    if link.cost_kind == AFFINE:
        return link.bpr_alpha
    if link.bpr_beta == 0:
        return 0.0
    x = flow / link.capacity
    return link.free_flow_time * link.bpr_alpha * link.bpr_beta * x ** (link.bpr_beta - 1) / link.capacity


@dataclass(frozen=True, eq=False)
class Network:
    """Directed road network. Link order is fixed and is the row order of the
    link-path incidence matrix. Node ids are 0-based."""

    links: tuple[Link, ...]
    node_count: int
    first_thru_node: int = 0
    zone_count: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        for i, ln in enumerate(self.links):
            if not (0 <= ln.tail < self.node_count and 0 <= ln.head < self.node_count):
                raise NetworkValidationError(
                    f"link {i} ({ln.tail + 1}->{ln.head + 1}) references a node beyond "
                    f"the declared node count {self.node_count}"
                )
        links = self.links
        arr = lambda attr: np.array([getattr(ln, attr) for ln in links], dtype=float)  # noqa: E731
        object.__setattr__(self, "tail", np.array([ln.tail for ln in links], dtype=np.int64))
        object.__setattr__(self, "head", np.array([ln.head for ln in links], dtype=np.int64))
        object.__setattr__(self, "_t0", arr("free_flow_time"))
        object.__setattr__(self, "_alpha", arr("bpr_alpha"))
        object.__setattr__(self, "_beta", arr("bpr_beta"))
        object.__setattr__(self, "_cap", arr("capacity"))
        object.__setattr__(
            self, "_affine", np.array([ln.cost_kind == AFFINE for ln in links], dtype=bool)
        )
        for name in ("tail", "head", "_t0", "_alpha", "_beta", "_cap", "_affine"):
            getattr(self, name).setflags(write=False)

    @property
    def link_count(self) -> int:
        return len(self.links)

    def link_costs(self, flows: np.ndarray) -> np.ndarray:
        """Vectorised ``link_cost`` over all links."""
        a = np.asarray(flows, dtype=float)
        _check_flow(a)
        x = a / self._cap
        with np.errstate(invalid="ignore"):
            bpr = self._t0 * (1.0 + self._alpha * np.where(self._beta == 0, 1.0, x ** self._beta))
        return np.where(self._affine, self._t0 + self._alpha * a, bpr)

    def link_cost_derivatives(self, flows: np.ndarray) -> np.ndarray:
        a = np.asarray(flows, dtype=float)
        _check_flow(a)
        x = a / self._cap
        with np.errstate(divide="ignore", invalid="ignore"):
            bpr = self._t0 * self._alpha * self._beta * x ** (self._beta - 1.0) / self._cap
        bpr = np.where(self._beta == 0, 0.0, bpr)
        return np.where(self._affine, self._alpha, bpr)

    def free_flow_costs(self) -> np.ndarray:
        return self.link_costs(np.zeros(self.link_count))

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Outgoing ``(head, link_index)`` lists per node, in link order."""
        out: list[list[tuple[int, int]]] = [[] for _ in range(self.node_count)]
        for i, ln in enumerate(self.links):
            out[ln.tail].append((ln.head, i))
        return out


@dataclass(frozen=True, eq=False)
class DemandTable:
    """Positive-demand OD pairs. The entry order is the OD-block order."""

    entries: tuple[tuple[int, int, float], ...]
    zone_count: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        entries = tuple((int(o), int(d), float(v)) for o, d, v in self.entries)
        for o, d, v in entries:
            if not v > 0:
                raise ValueError(f"OD ({o}, {d}) has non-positive demand {v}")
            if o == d:
                raise ValueError(f"OD ({o}, {d}) has identical origin and destination")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def origins(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries], dtype=np.int64)

    @property
    def destinations(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries], dtype=np.int64)

    @property
    def demand(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=float)

    @property
    def total_demand(self) -> float:
        return math.fsum(e[2] for e in self.entries)

    def scaled(self, multiplier: float) -> "DemandTable":
        if not multiplier > 0:
            raise ValueError("demand multiplier must be positive")
        return DemandTable(
            tuple((o, d, v * multiplier) for o, d, v in self.entries), self.zone_count, self.warnings
        )


def _text(content: bytes | str) -> str:
    return content.decode("utf-8") if isinstance(content, (bytes, bytearray)) else content


def _read_metadata(lines: list[str], known: set[str]) -> tuple[dict[str, str], int]:
    """Parse the ``<TAG> value`` header. Returns tag values and the index of
    the first line after ``<END OF METADATA>``."""
    meta: dict[str, str] = {}
    for idx, raw in enumerate(lines):
        s = raw.strip()
        if not s or s.startswith("~"):
            continue
        m = _TAG_RE.match(s)
        if m is None:
            raise TntpParseError("expected a <TAG> metadata line", idx + 1)
        tag = m.group(1).strip().upper()
        if tag not in known:
            raise TntpParseError(f"malformed or unknown header tag <{m.group(1)}>", idx + 1)
        if tag == "END OF METADATA":
            return meta, idx + 1
        meta[tag] = m.group(2).strip()
    raise TntpParseError("missing <END OF METADATA>")


def _int_tag(meta: dict[str, str], tag: str, default: int | None = None) -> int:
    if tag not in meta:
        if default is None:
            raise TntpParseError(f"missing header tag <{tag}>")
        return default
    try:
        return int(float(meta[tag]))
    except ValueError:
        raise TntpParseError(f"header tag <{tag}> has non-numeric value {meta[tag]!r}") from None


def parse_tntp_net(content: bytes | str, name: str = "") -> Network:
    lines = _text(content).splitlines()
    meta, start = _read_metadata(lines, _NET_TAGS)
    node_count = _int_tag(meta, "NUMBER OF NODES")
    link_count = _int_tag(meta, "NUMBER OF LINKS")
    zones = _int_tag(meta, "NUMBER OF ZONES", 0)
    first_thru = _int_tag(meta, "FIRST THRU NODE", 1)

    links = []
    for idx in range(start, len(lines)):
        s = lines[idx].split("~", 1)[0].strip()
        if not s:
            continue
        s = s.split(";", 1)[0]
        cols = s.split()
        if len(cols) < 5:
            raise TntpParseError(f"expected at least 5 link fields, got {len(cols)}", idx + 1)
        cols += ["0"] * (10 - len(cols))
        try:
            tail, head = int(cols[0]), int(cols[1])
            cap, length, t0, b, power, speed, toll = (float(c) for c in cols[2:9])
        except ValueError as exc:
            raise TntpParseError(f"non-numeric link field ({exc})", idx + 1) from None
        link_type = cols[9]
        kind = AFFINE if link_type.lower() == AFFINE else BPR
        if tail < 1 or head < 1 or tail > node_count or head > node_count:
            raise NetworkValidationError(
                f"line {idx + 1}: link {tail}->{head} references a node beyond "
                f"<NUMBER OF NODES> {node_count}"
            )
        try:
            links.append(
                Link(tail - 1, head - 1, cap, t0, b, power, length, speed, toll, link_type, kind)
            )
        except NetworkValidationError as exc:
            raise NetworkValidationError(f"line {idx + 1}: {exc}") from None
    if len(links) != link_count:
        log.warning("<NUMBER OF LINKS> says %d but %d links were read", link_count, len(links))
    return Network(tuple(links), node_count, first_thru - 1, zones, name)


def parse_tntp_trips(content: bytes | str) -> DemandTable:
    lines = _text(content).splitlines()
    meta, start = _read_metadata(lines, _TRIPS_TAGS)
    zones = _int_tag(meta, "NUMBER OF ZONES", 0)
    declared = None
    if "TOTAL OD FLOW" in meta:
        try:
            declared = float(meta["TOTAL OD FLOW"])
        except ValueError:
            raise TntpParseError(f"<TOTAL OD FLOW> is non-numeric: {meta['TOTAL OD FLOW']!r}") from None

    raw: dict[tuple[int, int], float] = {}
    total = 0.0
    origin = None
    for idx in range(start, len(lines)):
        s = lines[idx].split("~", 1)[0].strip()
        if not s:
            continue
        if s.lower().startswith("origin"):
            try:
                origin = int(s.split()[1]) - 1
            except (IndexError, ValueError):
                raise TntpParseError("malformed Origin line", idx + 1) from None
            continue
        if origin is None:
            raise TntpParseError("destination entries before any Origin line", idx + 1)
        for chunk in s.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            parts = chunk.split(":")
            if len(parts) != 2:
                raise TntpParseError(f"malformed 'dest : flow ;' entry {chunk!r}", idx + 1)
            try:
                dest, flow = int(parts[0]) - 1, float(parts[1])
            except ValueError:
                raise TntpParseError(f"malformed 'dest : flow ;' entry {chunk!r}", idx + 1) from None
            total += flow
            if flow > 0 and dest != origin:
                raw[(origin, dest)] = raw.get((origin, dest), 0.0) + flow

    warnings = []
    if declared is not None and declared > 0 and abs(total - declared) > 0.005 * declared:
        msg = f"trip total {total:g} differs from <TOTAL OD FLOW> {declared:g} by more than 0.5%"
        log.warning(msg)
        warnings.append(msg)
    entries = tuple((o, d, raw[(o, d)]) for o, d in sorted(raw))
    return DemandTable(entries, zones, tuple(warnings))


def serialize_tntp_net(network: Network) -> str:
    out = [
        f"<NUMBER OF ZONES> {network.zone_count}",
        f"<NUMBER OF NODES> {network.node_count}",
        f"<FIRST THRU NODE> {network.first_thru_node + 1}",
        f"<NUMBER OF LINKS> {network.link_count}",
        "<END OF METADATA>",
        "",
        "~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;",
    ]
    for ln in network.links:
        nums = (ln.capacity, ln.length, ln.free_flow_time, ln.bpr_alpha, ln.bpr_beta, ln.speed, ln.toll)
        fields = "\t".join(repr(float(v)) for v in nums)
        out.append(f"\t{ln.tail + 1}\t{ln.head + 1}\t{fields}\t{ln.link_type}\t;")
    return "\n".join(out) + "\n"


def serialize_tntp_trips(demand: DemandTable) -> str:
    out = [
        f"<NUMBER OF ZONES> {demand.zone_count}",
        f"<TOTAL OD FLOW> {demand.total_demand!r}",
        "<END OF METADATA>",
        "",
    ]
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for o, d, v in demand.entries:
        by_origin.setdefault(o, []).append((d, v))
    for o in sorted(by_origin):
        out.append(f"Origin\t{o + 1}")
        out.append(" ".join(f"{d + 1} : {v!r};" for d, v in by_origin[o]))
        out.append("")
    return "\n".join(out) + "\n"


def read_net(path: str | Path) -> Network:
    path = Path(path)
    try:
        return parse_tntp_net(path.read_bytes(), name=path.stem.removesuffix("_net"))
    except TntpParseError as exc:
        raise TntpParseError(f"{path}: {exc}") from None


def read_trips(path: str | Path) -> DemandTable:
    path = Path(path)
    try:
        return parse_tntp_trips(path.read_bytes())
    except TntpParseError as exc:
        raise TntpParseError(f"{path}: {exc}") from None


def network_from_links(links: Iterable[Link], node_count: int | None = None, name: str = "") -> Network:
    links = tuple(links)
    if node_count is None:
        node_count = 1 + max(max(ln.tail, ln.head) for ln in links) if links else 0
    return Network(links, node_count, 0, 0, name)
