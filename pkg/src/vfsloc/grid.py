"""Radial low-voltage network model and argmax localization.

Voltage changes caused by a load step propagate through the impedance shared
between the slack busbar -> source path and the slack busbar -> meter path, so
a meter sees ``dI * |Z_shared|``.  Meters downstream of the source see the
same drop as the source node itself; meters on other branches see less.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import (
    CycleDetected,
    DisconnectedNode,
    EmptyProfile,
    GridError,
    NegativeImpedance,
    UnknownNode,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

DEFAULT_GRID = "grid_table1"
TIE_TOLERANCE = 0.02


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    r_mohm: float
    x_mohm: float
    name: str = ""

    @property
    def impedance(self) -> complex:
        return complex(self.r_mohm, self.x_mohm)


@dataclass(frozen=True)
class GridModel:
    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    slack: str
    source_r_mohm: float
    source_x_mohm: float
    u_nominal: float = 230.0
    names: Mapping[str, str] = field(default_factory=dict)
    # derived in build_grid: node -> (parent, edge to parent); depth in edges
    parent: Mapping[str, tuple[str, Edge]] = field(default_factory=dict, repr=False)
    depth: Mapping[str, int] = field(default_factory=dict, repr=False)

    @property
    def source_impedance(self) -> complex:
        return complex(self.source_r_mohm, self.source_x_mohm)

    def check_node(self, node: str) -> None:
        if node not in self.depth:
            raise UnknownNode(f"unknown node {node!r}")

    def path_from_slack(self, node: str) -> list[Edge]:
        """Edges from the slack busbar down to ``node``, slack side first."""
        self.check_node(node)
        path = []
        while node != self.slack:
            node, edge = self.parent[node]
            path.append(edge)
        path.reverse()
        return path

    def is_upstream(self, upper: str, lower: str) -> bool:
        """True when ``upper`` lies on the slack -> ``lower`` path (inclusive)."""
        self.check_node(upper)
        self.check_node(lower)
        node = lower
        while True:
            if node == upper:
                return True
            if node == self.slack:
                return False
            node = self.parent[node][0]


@dataclass(frozen=True)
class AmplitudeProfile:
    """Mean change amplitude per measurement point for one component."""

    entries: Mapping[str, float]
    frequency: float = float("nan")

    def __post_init__(self):
        if not self.entries:
            raise EmptyProfile("amplitude profile has no entries")
        for node, a in self.entries.items():
            if not a >= 0:
                raise ValueError(f"negative amplitude {a} at {node}")


def build_grid(config: Mapping) -> GridModel:
    """Validate a grid description and return an immutable :class:`GridModel`.

    ``config`` uses the same keys as the grid TOML file: ``nodes`` (list of ids
    or mapping id -> name), ``edges`` (``from``, ``to``, ``r_mohm``,
    ``x_mohm``, optional ``name``), ``slack``, ``source_r_mohm``,
    ``source_x_mohm`` and optionally ``u_nominal_v``.
    """
    try:
        raw_nodes = config["nodes"]
        raw_edges = config["edges"]
        slack = str(config["slack"])
        src_r = float(config.get("source_r_mohm", 0.0))
        src_x = float(config.get("source_x_mohm", 0.0))
    except KeyError as exc:
        raise GridError(f"grid description lacks {exc.args[0]!r}") from None
    u_nominal = float(config.get("u_nominal_v", 230.0))

    if isinstance(raw_nodes, Mapping):
        names = {str(k): str(v) for k, v in raw_nodes.items()}
    else:
        names = {str(n): str(n) for n in raw_nodes}
    nodes = tuple(names)
    if len(set(nodes)) != len(nodes):
        raise GridError("duplicate node ids")
    if slack not in names:
        raise UnknownNode(f"slack node {slack!r} not among nodes")
    if src_r < 0 or src_x < 0:
        raise NegativeImpedance("source impedance must be non-negative")
    if not u_nominal > 0:
        raise GridError("u_nominal_v must be positive")

    edges = []
    for e in raw_edges:
        edge = Edge(str(e["from"]), str(e["to"]), float(e["r_mohm"]),
                    float(e["x_mohm"]), str(e.get("name", "")))
        for n in (edge.src, edge.dst):
            if n not in names:
                raise UnknownNode(f"edge references unknown node {n!r}")
        if edge.r_mohm < 0 or edge.x_mohm < 0:
            raise NegativeImpedance(f"negative impedance on edge {edge.src}-{edge.dst}")
        edges.append(edge)

    # union-find catches self-loops, parallel edges and longer cycles alike
    root = {n: n for n in nodes}

    def find(n):
        while root[n] != n:
            root[n] = root[root[n]]
            n = root[n]
        return n

    adjacency: dict[str, list[tuple[str, Edge]]] = {n: [] for n in nodes}
    for edge in edges:
        a, b = find(edge.src), find(edge.dst)
        if a == b:
            raise CycleDetected(f"edge {edge.src}-{edge.dst} closes a loop")
        root[a] = b
        adjacency[edge.src].append((edge.dst, edge))
        adjacency[edge.dst].append((edge.src, edge))

    parent: dict[str, tuple[str, Edge]] = {}
    depth = {slack: 0}
    queue = deque([slack])
    while queue:
        n = queue.popleft()
        for m, edge in adjacency[n]:
            if m not in depth:
                depth[m] = depth[n] + 1
                parent[m] = (n, edge)
                queue.append(m)
    missing = [n for n in nodes if n not in depth]
    if missing:
        raise DisconnectedNode(f"nodes not reachable from {slack}: {', '.join(missing)}")

    return GridModel(nodes=nodes, edges=tuple(edges), slack=slack,
                     source_r_mohm=src_r, source_x_mohm=src_x, u_nominal=u_nominal,
                     names=names, parent=parent, depth=depth)


def load_grid(source: str | Path = DEFAULT_GRID) -> GridModel:
    """Load a grid from a TOML file, or a shipped grid by bare name."""
    path = Path(source)
    if path.suffix == "" and not path.exists():
        text = resources.files("vfsloc.data").joinpath(f"{source}.toml").read_text()
    else:
        text = path.read_text()
    return build_grid(tomllib.loads(text))


def default_grid() -> GridModel:
    return load_grid(DEFAULT_GRID)


def shared_path_impedance(grid: GridModel, source: str, meter: str) -> complex:
    """Complex impedance (milliohm) common to the supply paths of two nodes."""
    src_path = grid.path_from_slack(source)
    met_path = grid.path_from_slack(meter)
    z = grid.source_impedance
    for a, b in zip(src_path, met_path):
        if a is not b:
            break
        z += a.impedance
    return z


def coupling_coefficient(grid: GridModel, source: str, meter: str,
                         delta_current: float) -> float:
    """Voltage change (V) at ``meter`` for a current step (A) at ``source``."""
    if delta_current < 0:
        raise ValueError("delta_current must be non-negative")
    return delta_current * abs(shared_path_impedance(grid, source, meter)) * 1e-3


def localize(profile: AmplitudeProfile | Mapping[str, float], grid: GridModel,
             tie_tol: float = TIE_TOLERANCE) -> str:
    """Node at which the amplitude reaches its global maximum.

    Nodes within ``tie_tol`` (relative) of the maximum are treated as tied and
    the one closest to the slack wins; remaining ties break on node order.
    """
    entries = profile.entries if isinstance(profile, AmplitudeProfile) else profile
    if not entries:
        raise EmptyProfile("amplitude profile has no entries")
    for node in entries:
        grid.check_node(node)
    peak = max(entries.values())
    tied = [n for n, a in entries.items() if a >= peak * (1.0 - tie_tol)]
    order = {n: i for i, n in enumerate(grid.nodes)}
    return min(tied, key=lambda n: (grid.depth[n], order[n]))
