from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepm.graph import (
    AssetMeta,
    build_macro_graph,
    dirichlet_energy,
    dirichlet_energy_pairwise,
    load_universe,
    synthetic_universe,
)


def _idx(g, tk):
    return g.tickers.index(tk)


def test_bundled_universe():
    u = load_universe()
    assert len(u) == 50 and len({a.ticker for a in u}) == 50
    g = build_macro_graph(u)
    a = g.adjacency
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) == 1.0)
    assert set(np.unique(a)) <= {0.0, 1.0}
    # sample channel edges
    for x, y in [("CL", "NG"), ("ES", "HG"), ("HG", "AD"), ("CL", "TY"), ("TY", "GC"), ("JY", "GC"),
                 ("TU", "SF"), ("CL", "CD"), ("CO", "PE"), ("AD", "HG"), ("ES", "TY"), ("TY", "DX"),
                 ("NK", "JY"), ("Z", "G"), ("G", "BP"), ("CN", "CD"), ("RX", "EU"), ("VG", "RX")]:
        assert a[_idx(g, x), _idx(g, y)] == 1.0, (x, y)
    for x, y in [("C", "ES"), ("LC", "TY"), ("JO", "GC"), ("EN", "TY")]:
        assert a[_idx(g, x), _idx(g, y)] == 0.0, (x, y)


def test_group_clique():
    u = synthetic_universe(["COMM_EN", "COMM_EN"])
    g = build_macro_graph(u)
    assert g.adjacency[0, 1] == 1.0


def test_regional_triangle():
    u = [
        AssetMeta("EQ", "E", "US", {"equity-index"}),
        AssetMeta("BD", "B", "US", {"sovereign-bond"}),
        AssetMeta("FX", "F", "US", {"currency"}),
    ]
    g = build_macro_graph(u, self_loops=False)
    assert len(g.edges()) == 3


def test_no_rule_no_edge():
    u = [AssetMeta("X", "G1", "US", set()), AssetMeta("Y", "G2", "EU", set())]
    g = build_macro_graph(u)
    assert g.adjacency[0, 1] == 0.0


def test_missing_group_isolated():
    u = [AssetMeta("X", "", "US", set()), AssetMeta("Y", "G", "US", set())]
    with pytest.warns(UserWarning, match="isolated"):
        g = build_macro_graph(u)
    assert g.adjacency[0].tolist() == [1.0, 0.0]


def test_laplacian_spectrum():
    g = build_macro_graph(load_universe())
    ev = np.linalg.eigvalsh(g.laplacian)
    assert ev.min() > -1e-12 and ev.max() < 2 + 1e-12


def test_energy_constant_per_component():
    u = synthetic_universe(["A", "A", "B", "B"])
    g = build_macro_graph(u)
    z = np.array([[1.0, 2.0], [1.0, 2.0], [-3.0, 0.5], [-3.0, 0.5]])
    assert dirichlet_energy(z, g) == pytest.approx(0.0, abs=1e-12)


def test_energy_empty_graph(rng):
    u = [AssetMeta(f"X{i}", f"G{i}", "other", set()) for i in range(4)]
    g = build_macro_graph(u)
    z = rng.normal(size=(4, 3))
    assert dirichlet_energy(z, g) == pytest.approx(0.0, abs=1e-12)
    assert dirichlet_energy_pairwise(z, g) == 0.0


def test_energy_two_ways_bundled(rng):
    g = build_macro_graph(load_universe())
    for _ in range(5):
        z = rng.normal(size=(50, 8))
        e1, e2 = dirichlet_energy(z, g), dirichlet_energy_pairwise(z, g)
        assert e1 >= 0
        assert abs(e1 - e2) < 1e-10


@given(st.integers(0, 10**6))
def test_permutation_consistency(seed):
    rng = np.random.default_rng(seed)
    u = load_universe()
    perm = rng.permutation(len(u))
    g = build_macro_graph(u)
    gp = build_macro_graph([u[i] for i in perm])
    assert np.array_equal(gp.adjacency, g.adjacency[np.ix_(perm, perm)])
    z = rng.normal(size=(50, 3))
    assert dirichlet_energy(z, g) >= -1e-12


def test_edge_export(tmp_path):
    g = build_macro_graph(synthetic_universe(["A", "A", "B"]))
    p = tmp_path / "edges.csv"
    g.save_edges(p)
    assert p.read_text().splitlines() == ["i,j,weight", "A00,A01,1.0"]
