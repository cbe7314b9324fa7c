import math
import warnings

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsde.evaluation import (EmptyGraph, EmptySet, MmdReport, StatHistogram, clustering_stat,
                                 connected_4_subsets, degree_stat, emd_1d, evaluate, local_clustering,
                                 mmd_gaussian_emd, mmd_squared, node_degrees, orbit_counts, orbit_counts_naive,
                                 orbit_table)
from graphsde.graphs import Graph, generate_community_small, make_graph


def _graph(nxg: nx.Graph) -> Graph:
    return make_graph(nx.to_numpy_array(nxg, nodelist=sorted(nxg.nodes)), nxg.number_of_nodes(),
                      max(nxg.number_of_nodes(), 1))


def _er(n, p, seed):
    return _graph(nx.gnp_random_graph(n, p, seed=seed))


def test_triangle_clustering_mass_at_one():
    h = clustering_stat(_graph(nx.complete_graph(3)))
    assert h.weights[-1] == 1.0
    assert h.edges[-1] == 1.0


def test_star_degrees_and_clustering():
    g = _graph(nx.star_graph(4))
    np.testing.assert_array_equal(node_degrees(g), [4, 1, 1, 1, 1])
    np.testing.assert_array_equal(local_clustering(g), 0)


def test_cycle_degrees_and_clustering():
    g = _graph(nx.cycle_graph(5))
    np.testing.assert_array_equal(node_degrees(g), 2)
    np.testing.assert_array_equal(local_clustering(g), 0)
    h = degree_stat(g)
    np.testing.assert_array_equal(h.weights, [0, 0, 1])


def test_clustering_matches_networkx():
    nxg = nx.gnp_random_graph(12, 0.4, seed=1)
    want = [nx.clustering(nxg)[i] for i in range(12)]
    np.testing.assert_allclose(local_clustering(_graph(nxg)), want, atol=1e-12)


def test_empty_graph_rejected():
    g = Graph(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3, bool))
    with pytest.raises(EmptyGraph):
        node_degrees(g)


def test_small_graphs_have_no_orbits():
    for n in (1, 2, 3):
        assert orbit_counts(_graph(nx.complete_graph(n))).sum() == 0


def test_path_orbits():
    counts = orbit_counts(_graph(nx.path_graph(4)))
    # orbit 4 = path end, 5 = path interior
    np.testing.assert_array_equal(counts[:, 0], [1, 0, 0, 1])
    np.testing.assert_array_equal(counts[:, 1], [0, 1, 1, 0])
    assert counts.sum() == 4


def test_clique_orbits():
    counts = orbit_counts(_graph(nx.complete_graph(4)))
    np.testing.assert_array_equal(counts[:, -1], [1, 1, 1, 1])
    assert counts.sum() == 4


@pytest.mark.parametrize("nxg, orbit, nodes", [
    (nx.star_graph(3), 7, [0]),
    (nx.star_graph(3), 6, [1, 2, 3]),
    (nx.cycle_graph(4), 8, [0, 1, 2, 3]),
    (nx.Graph([(0, 1), (1, 2), (2, 0), (2, 3)]), 11, [2]),
    (nx.Graph([(0, 1), (1, 2), (2, 0), (2, 3)]), 9, [3]),
    (nx.Graph([(0, 1), (1, 2), (2, 0), (2, 3)]), 10, [0, 1]),
    (nx.Graph([(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]), 13, [0, 2]),
    (nx.Graph([(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]), 12, [1, 3]),
])
def test_single_graphlet_orbits(nxg, orbit, nodes):
    counts = orbit_counts(_graph(nxg))
    col = counts[:, orbit - 4]
    np.testing.assert_array_equal(np.flatnonzero(col), nodes)
    assert np.all(col[nodes] == 1)


def test_enumeration_matches_brute_force_on_er_graphs():
    rng = np.random.default_rng(0)
    for seed in range(50):
        n = int(rng.integers(1, 11))
        g = _er(n, float(rng.uniform(0.1, 0.9)), seed)
        np.testing.assert_array_equal(orbit_counts(g), orbit_counts_naive(g))


def test_clique_orbit_matches_networkx_cliques():
    nxg = nx.gnp_random_graph(10, 0.7, seed=3)
    k4 = [c for c in nx.enumerate_all_cliques(nxg) if len(c) == 4]
    want = np.zeros(10, int)
    for c in k4:
        want[c] += 1
    np.testing.assert_array_equal(orbit_counts(_graph(nxg))[:, -1], want)


def test_connected_subsets_unique():
    A = nx.to_numpy_array(nx.gnp_random_graph(9, 0.5, seed=2)).astype(int)
    subs = [tuple(sorted(s)) for s in connected_4_subsets(A)]
    assert len(subs) == len(set(subs))


def test_emd_examples():
    a = StatHistogram([0, 1, 2], [1, 0])
    b = StatHistogram([0, 1, 2], [0, 1])
    assert emd_1d(a, a) == 0.0
    assert emd_1d(a, b) == 1.0
    assert emd_1d(b, a) == 1.0


def test_emd_on_shifted_supports():
    a = StatHistogram([0, 1], [1])
    b = StatHistogram([3, 4], [1])
    assert emd_1d(a, b) == pytest.approx(3.0)


def test_emd_rejects_misaligned_bins():
    with pytest.raises(ValueError):
        emd_1d(StatHistogram([0, 1], [1]), StatHistogram([0.5, 1.5], [1]))


def test_mmd_identities():
    h = [StatHistogram.integer(v) for v in ([0, 1, 1], [2, 2], [1, 3])]
    assert mmd_gaussian_emd(h, list(h)) == pytest.approx(0.0, abs=1e-12)
    single = mmd_gaussian_emd([StatHistogram([0, 1, 2], [1, 0])], [StatHistogram([0, 1, 2], [0, 1])])
    assert single == pytest.approx(math.sqrt(2 - 2 * math.exp(-0.5)), abs=1e-10)
    assert single == pytest.approx(0.88710, abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=1, max_size=4),
       st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=1, max_size=4))
def test_mmd_symmetric_and_nonnegative(xs, ys):
    a = [StatHistogram.integer(v, 6) for v in xs]
    b = [StatHistogram.integer(v, 6) for v in ys]
    d = mmd_gaussian_emd(a, b)
    assert d >= 0
    assert d == pytest.approx(mmd_gaussian_emd(b, a), abs=1e-12)


def test_kernel_positive_definiteness_smoke():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = (StatHistogram.integer(rng.integers(0, 8, size=10), 8) for _ in range(2))
        assert math.exp(-emd_1d(a, a) ** 2 / 2) == 1.0
        assert mmd_squared([a], [b]) >= -1e-12


def test_mmd_empty_set():
    with pytest.raises(EmptySet):
        mmd_gaussian_emd([], [StatHistogram([0, 1], [1])])


def test_evaluate_identical_sets_is_zero():
    ds = generate_community_small(10, np.random.default_rng(0))
    r = evaluate(ds, list(ds.graphs))
    assert r.as_dict() == {"degree": 0.0, "clustering": 0.0, "orbit": 0.0, "average": 0.0}


def test_evaluate_permutation_invariant():
    ds = generate_community_small(12, np.random.default_rng(1))
    gen, ref = ds.graphs[:6], ds.graphs[6:]
    rng = np.random.default_rng(2)
    shuffled = [g.permuted(rng.permutation(g.n_max)) for g in gen]
    a, b = evaluate(gen, ref), evaluate(shuffled, ref)
    for k in ("degree", "clustering", "orbit"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), abs=1e-12)


def test_evaluate_subsamples_with_note():
    ds = generate_community_small(10, np.random.default_rng(3))
    with pytest.warns(UserWarning, match="subsampled"):
        r = evaluate(ds.graphs[:7], ds.graphs[7:])
    assert len(r.notes) == 1


def test_evaluate_distinguishes_sets():
    ds = generate_community_small(8, np.random.default_rng(4))
    er = [_er(16, 0.5, s) for s in range(8)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = evaluate(er, ds)
    assert r.degree > 0.1 and r.average > 0


def test_evaluate_empty():
    with pytest.raises(EmptySet):
        evaluate([], generate_community_small(2, np.random.default_rng(0)))


def test_report_round_trip():
    r = MmdReport(0.1, 0.2, 0.3, ["a note"])
    back = MmdReport.parse(r.to_text())
    assert back.as_dict() == pytest.approx(r.as_dict())
    assert back.notes == ["a note"]
    keys = [line.split("=")[0] for line in r.to_text().splitlines() if not line.startswith("#")]
    assert keys == ["degree", "clustering", "orbit", "average"]


def test_orbit_table_layout():
    text = orbit_table([_graph(nx.path_graph(4))])
    rows = text.strip().splitlines()
    assert rows[0].split("\t")[:3] == ["graph", "node", "o4"]
    assert len(rows) == 5
