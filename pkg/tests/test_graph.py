"""Graph structure, k-hop neighborhoods, and spectral embeddings."""

import numpy as np
import networkx as nx
import pytest

from strada import InputError, DataError, KHopSpec, RoadGraph, khop_neighborhood, laplacian_pe
from strada.graph import normalized_laplacian, component_count, read_edge_list


def random_graph(rng, n, p=0.25, weighted=False):
    mask = rng.uniform(size=(n, n)) < p
    mask = np.triu(mask, k=1)
    adj = mask.astype(np.float64)
    if weighted:
        adj *= rng.uniform(0.5, 1.5, size=(n, n))
    adj = adj + adj.T
    return RoadGraph(n, adj)


# ---------------------------------------------------------------------------
# RoadGraph construction and validation


def test_roadgraph_symmetrizes_and_caches_degrees():
    g = RoadGraph.from_edges(3, [(0, 1, 2.0), (1, 2)])
    assert np.array_equal(g.adjacency, g.adjacency.T)
    assert np.allclose(g.degrees, [2.0, 3.0, 1.0])
    assert not g.adjacency.flags.writeable
    assert not g.degrees.flags.writeable


def test_roadgraph_rejects_shape_mismatch():
    with pytest.raises(InputError, match="does not match num_nodes"):
        RoadGraph(3, np.zeros((2, 2)))


def test_roadgraph_rejects_asymmetry():
    adj = np.zeros((2, 2))
    adj[0, 1] = 1.0
    with pytest.raises(InputError, match="symmetric"):
        RoadGraph(2, adj)


def test_roadgraph_rejects_nonzero_diagonal():
    adj = np.eye(2)
    with pytest.raises(InputError, match="diagonal"):
        RoadGraph(2, adj)


def test_roadgraph_rejects_negative_weights():
    adj = np.array([[0.0, -1.0], [-1.0, 0.0]])
    with pytest.raises(InputError, match="non-negative"):
        RoadGraph(2, adj)


def test_from_edges_rejects_out_of_range_and_self_loops():
    with pytest.raises(InputError, match="out of range"):
        RoadGraph.from_edges(2, [(0, 5)])
    with pytest.raises(InputError, match="self-loop"):
        RoadGraph.from_edges(2, [(1, 1)])


def test_neighbors_sorted_positive_weight_only():
    g = RoadGraph.from_edges(5, [(2, 4), (2, 0), (2, 3, 0.5)])
    assert khop_neighborhood(g, 2, KHopSpec(k=1, max_neighbors=8)) == [2, 0, 3, 4]
    assert list(g.neighbors(2)) == [0, 3, 4]
    assert list(g.neighbors(1)) == []


def test_khop_spec_validation():
    with pytest.raises(InputError, match="hop radius"):
        KHopSpec(k=-1, max_neighbors=4)
    with pytest.raises(InputError, match="max_neighbors"):
        KHopSpec(k=2, max_neighbors=0)


# ---------------------------------------------------------------------------
# k-hop neighborhoods against a networkx BFS oracle


def nx_khop(adj, v, k, cap):
    """Independent reference: shortest-path distances, then (hop, index) sort."""
    g = nx.from_numpy_array(adj)
    dist = nx.single_source_shortest_path_length(g, v, cutoff=k)
    ranked = sorted(dist.items(), key=lambda item: (item[1], item[0]))
    return [node for node, _ in ranked[:cap]]


def test_khop_matches_networkx_on_random_graphs():
    rng = np.random.default_rng(2024)
    for trial in range(30):
        n = int(rng.integers(2, 40))
        g = random_graph(rng, n, p=0.2)
        v = int(rng.integers(0, n))
        k = int(rng.integers(0, 4))
        cap = int(rng.integers(1, n + 3))
        got = khop_neighborhood(g, v, KHopSpec(k=k, max_neighbors=cap))
        assert got == nx_khop(np.asarray(g.adjacency), v, k, cap), (
            f"trial {trial}: n={n} v={v} k={k} cap={cap}"
        )


def test_khop_center_first_and_zero_radius():
    g = RoadGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    assert khop_neighborhood(g, 2, KHopSpec(k=0, max_neighbors=8)) == [2]
    hood = khop_neighborhood(g, 2, KHopSpec(k=2, max_neighbors=8))
    assert hood[0] == 2
    assert hood == [2, 1, 3, 0]


def test_khop_truncation_keeps_nearest():
    # Star: center 0 joined to 1..6. From node 0 with cap 4 we keep the
    # center plus the three lowest-indexed leaves.
    g = RoadGraph.from_edges(7, [(0, i) for i in range(1, 7)])
    assert khop_neighborhood(g, 0, KHopSpec(k=2, max_neighbors=4)) == [0, 1, 2, 3]


def test_khop_ignores_disconnected_nodes():
    g = RoadGraph.from_edges(5, [(0, 1), (3, 4)])
    assert khop_neighborhood(g, 0, KHopSpec(k=3, max_neighbors=8)) == [0, 1]


def test_khop_out_of_range_node():
    g = RoadGraph.from_edges(2, [(0, 1)])
    with pytest.raises(InputError, match="out of range"):
        khop_neighborhood(g, 2, KHopSpec(k=1, max_neighbors=4))


# ---------------------------------------------------------------------------
# Normalized Laplacian and spectral embeddings


def test_laplacian_two_node_graph_exact():
    g = RoadGraph.from_edges(2, [(0, 1)])
    lap = normalized_laplacian(g)
    assert np.allclose(lap, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-12)
    pe = laplacian_pe(g, k_pe=1)
    # One trivial mode skipped; the remaining eigenvector is sign-fixed to
    # start with the positive entry.
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    assert np.allclose(pe.embeddings[:, 0], [inv_sqrt2, -inv_sqrt2], atol=1e-10)
    assert np.allclose(pe.eigenvalues, [2.0], atol=1e-10)


def test_laplacian_path_three_spectrum():
    g = RoadGraph.from_edges(3, [(0, 1), (1, 2)])
    evals = np.linalg.eigvalsh(normalized_laplacian(g))
    assert np.allclose(evals, [0.0, 1.0, 2.0], atol=1e-10)


def test_laplacian_isolated_nodes_zero_rows():
    g = RoadGraph.from_edges(3, [(0, 1)])
    lap = normalized_laplacian(g)
    assert np.all(lap[2, :] == 0.0)
    assert np.all(lap[:, 2] == 0.0)


def test_laplacian_spectrum_bounded_and_reconstructs():
    rng = np.random.default_rng(99)
    for trial in range(50):
        n = int(rng.integers(2, 65))
        g = random_graph(rng, n, p=0.15, weighted=True)
        lap = normalized_laplacian(g)
        evals, evecs = np.linalg.eigh(lap)
        assert evals.min() >= -1e-8, f"trial {trial}"
        assert evals.max() <= 2.0 + 1e-8, f"trial {trial}"
        recon = (evecs * evals) @ evecs.T
        assert np.abs(recon - lap).max() < 1e-8, f"trial {trial}"


def test_component_count():
    assert component_count(RoadGraph.from_edges(4, [(0, 1), (2, 3)])) == 2
    assert component_count(RoadGraph.from_edges(3, [(0, 1), (1, 2)])) == 1
    assert component_count(RoadGraph(3, np.zeros((3, 3)))) == 3


def test_pe_skips_one_trivial_mode_per_component():
    # Two disjoint edges: spectrum {0, 0, 2, 2}. Both zero modes are trivial,
    # leaving two informative columns; the third requested column is padding.
    g = RoadGraph.from_edges(4, [(0, 1), (2, 3)])
    pe = laplacian_pe(g, k_pe=3)
    assert pe.embeddings.shape == (4, 3)
    assert np.allclose(pe.eigenvalues, [2.0, 2.0, 2.0], atol=1e-10)
    assert np.all(pe.embeddings[:, 2] == 0.0)
    for j in range(2):
        assert np.linalg.norm(pe.embeddings[:, j]) > 0.9


def test_pe_pads_eigenvalues_with_last_kept():
    g = RoadGraph.from_edges(2, [(0, 1)])
    pe = laplacian_pe(g, k_pe=4)
    assert pe.embeddings.shape == (2, 4)
    assert np.all(pe.embeddings[:, 1:] == 0.0)
    assert np.allclose(pe.eigenvalues, [2.0, 2.0, 2.0, 2.0], atol=1e-10)


def test_pe_edgeless_graph_all_zero():
    pe = laplacian_pe(RoadGraph(3, np.zeros((3, 3))), k_pe=2)
    assert np.all(pe.embeddings == 0.0)
    assert np.all(pe.eigenvalues == 0.0)


def test_pe_zero_columns():
    pe = laplacian_pe(RoadGraph.from_edges(3, [(0, 1), (1, 2)]), k_pe=0)
    assert pe.embeddings.shape == (3, 0)
    assert pe.eigenvalues.shape == (0,)
    with pytest.raises(InputError, match="k_pe"):
        laplacian_pe(RoadGraph.from_edges(2, [(0, 1)]), k_pe=-1)


def test_pe_sign_fix_deterministic():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 20, p=0.3, weighted=True)
    pe1 = laplacian_pe(g, k_pe=4)
    pe2 = laplacian_pe(g, k_pe=4)
    assert np.array_equal(pe1.embeddings, pe2.embeddings)
    for j in range(4):
        col = pe1.embeddings[:, j]
        assert col[np.argmax(np.abs(col))] >= 0.0


def test_pe_permutation_equivariant():
    # Generic weights keep the spectrum simple, so relabeling nodes must
    # permute embedding rows (sign fixing anchors on the same entries).
    rng = np.random.default_rng(17)
    for trial in range(10):
        n = 12
        g = random_graph(rng, n, p=0.4, weighted=True)
        perm = rng.permutation(n)
        adj_p = np.asarray(g.adjacency)[np.ix_(perm, perm)]
        pe = laplacian_pe(g, k_pe=4)
        pe_p = laplacian_pe(RoadGraph(n, adj_p), k_pe=4)
        assert np.allclose(pe_p.eigenvalues, pe.eigenvalues, atol=1e-9), f"trial {trial}"
        assert np.allclose(pe_p.embeddings, pe.embeddings[perm], atol=1e-8), f"trial {trial}"


# ---------------------------------------------------------------------------
# Edge-list files


def test_read_edge_list_roundtrip(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("# comment\n0,1\n\n1,2,0.5\n")
    g = read_edge_list(path)
    assert g.num_nodes == 3
    assert g.adjacency[0, 1] == 1.0
    assert g.adjacency[1, 2] == 0.5


def test_read_edge_list_explicit_node_count(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("0,1\n")
    assert read_edge_list(path, num_nodes=5).num_nodes == 5
    with pytest.raises(DataError, match="out of range"):
        read_edge_list(path, num_nodes=1)


def test_read_edge_list_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,1\n0,1,2,3\n")
    with pytest.raises(DataError, match=r"bad\.csv:2"):
        read_edge_list(path)
    path.write_text("0,x\n")
    with pytest.raises(DataError, match=r"bad\.csv:1"):
        read_edge_list(path)
    path.write_text("0,1\n2,2\n")
    with pytest.raises(DataError, match=r"bad\.csv:2: self-loop"):
        read_edge_list(path)
    path.write_text("0,1\n-1,0\n")
    with pytest.raises(DataError, match=r"bad\.csv:2: negative node index"):
        read_edge_list(path)
    path.write_text("0,1,-2.0\n")
    with pytest.raises(DataError, match="negative weight"):
        read_edge_list(path)


def test_read_edge_list_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("# nothing\n")
    with pytest.raises(DataError, match="no nodes"):
        read_edge_list(path)
