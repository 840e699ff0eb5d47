import itertools

import pytest
from hypothesis import given, settings, strategies as st

from vfsloc.errors import (CycleDetected, DisconnectedNode, EmptyProfile, NegativeImpedance,
                           UnknownNode)
from vfsloc.grid import (AmplitudeProfile, build_grid, coupling_coefficient, load_grid,
                         localize, shared_path_impedance)

# route to every node as sections, hand-copied from the network diagram
ROUTES = {
    "P1": [],
    "P2": ["I"],
    "P3": ["I", "II"],
    "P5": ["I", "III"],
    "P4": ["I", "III", "IV"],
    "P7": ["I", "II", "V"],
    "P6": ["I", "II", "V", "VI"],
}
SECTIONS = {"I": (150.0, 31.4), "II": (150.0, 31.4), "III": (100.0, 69.1),
            "IV": (50.0, 2.1), "V": (100.0, 69.1), "VI": (50.0, 2.1)}
SOURCE = complex(0.0 + 3.8, 0.9 + 10.8)


def oracle_shared(a, b):
    z = SOURCE
    for x, y in zip(ROUTES[a], ROUTES[b]):
        if x != y:
            break
        z += complex(*SECTIONS[x])
    return z


def test_table_values_loaded(grid):
    assert grid.slack == "P1"
    assert grid.source_impedance == pytest.approx(3.8 + 11.7j)
    by_name = {e.name: (e.r_mohm, e.x_mohm) for e in grid.edges}
    assert by_name == {f"Section {k}": v for k, v in SECTIONS.items()}
    assert grid.u_nominal == 230.0


@pytest.mark.parametrize("a,b", list(itertools.product(ROUTES, repeat=2)))
def test_shared_impedance_matches_route_oracle(grid, a, b):
    assert shared_path_impedance(grid, a, b) == pytest.approx(oracle_shared(a, b))


def test_shared_impedance_examples(grid):
    assert shared_path_impedance(grid, "P3", "P3") == pytest.approx(303.8 + 74.5j)
    assert shared_path_impedance(grid, "P3", "P4") == pytest.approx(153.8 + 43.1j)
    assert shared_path_impedance(grid, "P6", "P6") == pytest.approx(453.8 + 145.7j)
    assert abs(shared_path_impedance(grid, "P1", "P6")) == pytest.approx(12.30, abs=5e-3)


def test_coupling_for_3kw_at_p3(grid):
    di = 3000.0 / 230.0
    assert coupling_coefficient(grid, "P3", "P3", di) == pytest.approx(4.080, abs=1e-3)
    assert coupling_coefficient(grid, "P3", "P4", di) == pytest.approx(2.083, abs=1e-3)
    with pytest.raises(ValueError):
        coupling_coefficient(grid, "P3", "P4", -1.0)


def test_symmetry_and_upstream_monotonic(grid):
    for a, b in itertools.product(grid.nodes, repeat=2):
        assert shared_path_impedance(grid, a, b) == shared_path_impedance(grid, b, a)
    # moving a meter down the source's own path never lowers |Z|
    for s in grid.nodes:
        path = [grid.slack] + [e.dst for e in grid.path_from_slack(s)]
        mags = [abs(shared_path_impedance(grid, s, m)) for m in path]
        assert mags == sorted(mags)


def test_localize_examples(grid):
    assert localize({"P3": 2.7, "P4": 1.4, "P6": 2.7}, grid) == "P3"
    assert localize(AmplitudeProfile({"P4": 3.0, "P3": 1.0}), grid) == "P4"
    # within 2 %: the upstream node wins
    assert localize({"P3": 2.70, "P6": 2.74}, grid) == "P3"
    assert localize({"P3": 2.70, "P6": 2.80}, grid) == "P6"


def test_localize_errors(grid):
    with pytest.raises(EmptyProfile):
        localize({}, grid)
    with pytest.raises(EmptyProfile):
        AmplitudeProfile({})
    with pytest.raises(UnknownNode):
        localize({"P9": 1.0}, grid)


def _cfg(edges, nodes=("A", "B", "C")):
    return {"slack": "A", "nodes": list(nodes),
            "edges": [{"from": a, "to": b, "r_mohm": r, "x_mohm": 1.0} for a, b, r in edges]}


def test_build_errors():
    with pytest.raises(CycleDetected):
        build_grid(_cfg([("A", "B", 1), ("B", "C", 1), ("C", "A", 1)]))
    with pytest.raises(CycleDetected):
        build_grid(_cfg([("A", "B", 1), ("B", "B", 1)]))
    with pytest.raises(DisconnectedNode):
        build_grid(_cfg([("A", "B", 1)]))
    with pytest.raises(NegativeImpedance):
        build_grid(_cfg([("A", "B", -1), ("B", "C", 1)]))
    with pytest.raises(UnknownNode):
        build_grid(_cfg([("A", "B", 1), ("B", "Z", 1)]))


def test_load_grid_from_file(tmp_path, grid):
    text = (__import__("importlib").resources.files("vfsloc.data")
            .joinpath("grid_table1.toml").read_text())
    p = tmp_path / "g.toml"
    p.write_text(text)
    g = load_grid(p)
    assert g.nodes == grid.nodes
    with pytest.raises(FileNotFoundError):
        load_grid("no_such_grid")


@st.composite
def trees(draw):
    n = draw(st.integers(2, 9))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    imps = [(draw(st.floats(1.0, 300.0)), draw(st.floats(0.0, 100.0))) for _ in parents]
    nodes = [f"N{i}" for i in range(n)]
    edges = [{"from": nodes[p], "to": nodes[i + 1], "r_mohm": r, "x_mohm": x}
             for i, (p, (r, x)) in enumerate(zip(parents, imps))]
    return build_grid({"slack": "N0", "nodes": nodes, "edges": edges,
                       "source_r_mohm": 3.8, "source_x_mohm": 11.7})


@settings(max_examples=60, deadline=None)
@given(trees(), st.data())
def test_coupling_profiles_localize_to_source(g, data):
    src = data.draw(st.sampled_from(g.nodes))
    others = data.draw(st.lists(st.sampled_from(g.nodes), min_size=1, unique=True))
    meters = sorted(set(others) | {src})
    di = data.draw(st.floats(1.0, 50.0))
    profile = {m: coupling_coefficient(g, src, m, di) for m in meters}
    assert localize(profile, g, tie_tol=0.0) == src


@settings(max_examples=60, deadline=None)
@given(trees(), st.data())
def test_shared_impedance_bounded_by_own_path(g, data):
    a = data.draw(st.sampled_from(g.nodes))
    b = data.draw(st.sampled_from(g.nodes))
    z = shared_path_impedance(g, a, b)
    assert z.real <= shared_path_impedance(g, a, a).real + 1e-9
    assert z.real <= shared_path_impedance(g, b, b).real + 1e-9
    assert z.real >= g.source_r_mohm - 1e-9
