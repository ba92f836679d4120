import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsr.corpus import CrossDomainSequence
from cdsr.graph import (
    GraphError,
    ItemGraphs,
    SparseAdjacency,
    build_domain_graph,
    build_mixed_graph,
    propagate,
)


def seq(items, domains):
    return CrossDomainSequence("u", list(items), list(domains))


def edges(adj):
    return {(int(r), int(c)): float(w) for r, c, w in zip(adj.rows, adj.cols, adj.weights)}


def brute_force(item_lists, n, window):
    dense = np.zeros((n, n))
    for items in item_lists:
        for i in range(len(items)):
            for j in range(len(items)):
                if i != j and abs(i - j) <= window and items[i] != items[j]:
                    dense[items[i], items[j]] += 1
    return dense


def dense_propagate(adj_dense, E, L):
    deg = adj_dense.sum(1)
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1 / np.sqrt(deg), 0.0)
    norm = inv[:, None] * adj_dense * inv[None, :]
    iso = (deg == 0)[:, None]
    layer, total = E, E.copy()
    for _ in range(L):
        layer = norm @ layer + iso * E
        total = total + layer
    return total / (L + 1)


def random_adjacency(n, rng, density=0.1):
    upper = np.triu(rng.random((n, n)) < density, 1) * rng.integers(1, 4, (n, n))
    dense = (upper + upper.T).astype(float)
    r, c = np.nonzero(dense)
    return SparseAdjacency(n, r, c, dense[r, c]), dense


def test_domain_graph_path():
    adj = build_domain_graph([seq([0, 1, 2], "XXX")], "X", 3)
    assert edges(adj) == {(0, 1): 1.0, (1, 0): 1.0, (1, 2): 1.0, (2, 1): 1.0}


def test_domain_graph_accumulates_users():
    adj = build_domain_graph([seq([0, 1], "XX"), seq([1, 0, 2], "XXX")], "X", 3)
    assert edges(adj)[(0, 1)] == 2.0 and edges(adj)[(1, 0)] == 2.0


def test_domain_graph_uses_local_indices_and_skips_foreign_items():
    # Y items at global 10, 11 with offset 10; the X item in between is ignored
    adj = build_domain_graph([seq([10, 0, 11], "YXY")], "Y", 2, offset=10)
    assert edges(adj) == {(0, 1): 1.0, (1, 0): 1.0}


def test_empty_domain_is_fatal():
    with pytest.raises(GraphError):
        build_domain_graph([], "X", 0)


def test_mixed_graph_edges():
    adj = build_mixed_graph([seq([0, 5, 1], "XYX")], 6)
    assert set(edges(adj)) == {(0, 5), (5, 0), (5, 1), (1, 5)}


def test_mixed_graph_block_diagonal_without_crossings():
    seqs = [seq([0, 1, 2], "XXX"), seq([3, 4], "YY"), seq([1, 0], "XX")]
    dense = build_mixed_graph(seqs, 5).to_dense()
    assert dense[:3, 3:].sum() == 0 and dense[3:, :3].sum() == 0


def test_mixed_graph_xx_block_differs_from_domain_graph():
    rng = np.random.default_rng(0)
    found = False
    for _ in range(50):
        doms = list(rng.choice(["X", "Y"], size=8))
        items = [int(rng.integers(4)) if d == "X" else 4 + int(rng.integers(4)) for d in doms]
        s = seq(items, doms)
        mixed = build_mixed_graph([s], 8).to_dense()[:4, :4]
        dom = build_domain_graph([s], "X", 4).to_dense()
        # mixed X-X adjacency only arises from consecutive X pairs, a subset of the domain graph
        assert np.all((mixed > 0) <= (dom > 0))
        found |= not np.array_equal(mixed, dom)
    assert found


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.lists(st.integers(0, 9), min_size=0, max_size=12), min_size=1, max_size=6),
    st.integers(1, 3),
)
def test_cooccurrence_matches_brute_force(lists, window):
    seqs = [seq(items, "X" * len(items)) for items in lists]
    adj = build_domain_graph(seqs, "X", 10, window=window)
    np.testing.assert_array_equal(adj.to_dense(), brute_force(lists, 10, window))
    assert np.array_equal(adj.to_dense(), adj.to_dense().T)


def test_entries_row_sorted():
    adj = build_mixed_graph([seq([3, 0, 2, 1], "XXXX")], 4)
    keys = list(zip(adj.rows, adj.cols))
    assert keys == sorted(keys)


def test_symmetric_normalization_values():
    adj, dense = random_adjacency(12, np.random.default_rng(1), 0.4)
    norm = adj.normalized()
    deg = dense.sum(1)
    for r, c, w in zip(norm.rows, norm.cols, norm.weights):
        assert w == pytest.approx(dense[r, c] / np.sqrt(deg[r] * deg[c]), rel=1e-14)


def test_propagate_zero_layers_identity():
    adj, _ = random_adjacency(8, np.random.default_rng(2), 0.5)
    E = torch.randn(8, 3, dtype=torch.float64)
    assert torch.equal(propagate(adj.normalized(), E, 0), E)


def test_propagate_path_graph_hand_oracle():
    adj = SparseAdjacency(3, [0, 1, 1, 2], [1, 0, 2, 1], [1.0, 1.0, 1.0, 1.0]).normalized()
    out = propagate(adj, torch.eye(3, dtype=torch.float64), 1).numpy()
    r2 = 1 / np.sqrt(2)
    np.testing.assert_allclose(out[0], 0.5 * np.array([1, r2, 0]), atol=1e-15)
    np.testing.assert_allclose(out[1], 0.5 * np.array([r2, 1, r2]), atol=1e-15)


def test_propagate_matches_dense_default_layers():
    rng = np.random.default_rng(3)
    adj, dense = random_adjacency(64, rng, 0.08)
    E = rng.standard_normal((64, 16))
    out = propagate(adj.normalized(), torch.from_numpy(E), 2).numpy()
    np.testing.assert_allclose(out, dense_propagate(dense, E, 2), atol=1e-10)


@pytest.mark.parametrize("n", [1, 5, 33, 128])
@pytest.mark.parametrize("L", [1, 3])
def test_sparse_dense_equivalence(n, L):
    rng = np.random.default_rng(n * 10 + L)
    adj, dense = random_adjacency(n, rng, 0.15)
    E = rng.standard_normal((n, 4))
    out = propagate(adj.normalized(), torch.from_numpy(E), L).numpy()
    np.testing.assert_allclose(out, dense_propagate(dense, E, L), atol=1e-12)


def test_propagation_linearity():
    rng = np.random.default_rng(4)
    adj, _ = random_adjacency(30, rng, 0.2)
    norm = adj.normalized()
    E1, E2 = (torch.from_numpy(rng.standard_normal((30, 5))) for _ in range(2))
    lhs = propagate(norm, 2.5 * E1 - 0.7 * E2, 2)
    rhs = 2.5 * propagate(norm, E1, 2) - 0.7 * propagate(norm, E2, 2)
    assert torch.allclose(lhs, rhs, atol=1e-9, rtol=0)


@pytest.mark.parametrize("L", [0, 1, 2, 5])
def test_isolated_node_fixpoint(L):
    adj = SparseAdjacency(4, [0, 1], [1, 0], [1.0, 1.0]).normalized()
    E = torch.randn(4, 3, dtype=torch.float64)
    out = propagate(adj, E, L)
    assert torch.allclose(out[2], E[2], atol=1e-15)
    assert torch.allclose(out[3], E[3], atol=1e-15)


def test_propagate_requires_normalized_and_matching_shape():
    adj = SparseAdjacency(3, [0, 1], [1, 0], [1.0, 1.0])
    with pytest.raises(GraphError):
        propagate(adj, torch.zeros(3, 2))
    with pytest.raises(GraphError):
        propagate(adj.normalized(), torch.zeros(4, 2))


def test_edge_list_round_trip(tmp_path):
    adj, _ = random_adjacency(20, np.random.default_rng(5), 0.3)
    for a in (adj, adj.normalized()):
        a.save(tmp_path / "g.tsv")
        header = (tmp_path / "g.tsv").read_text().splitlines()[0]
        assert header == f"n=20 norm={a.normalization}"
        b = SparseAdjacency.load(tmp_path / "g.tsv")
        assert b.n == a.n and b.normalization == a.normalization
        np.testing.assert_array_equal(b.weights, a.weights)
        np.testing.assert_array_equal(b.rows, a.rows)


def test_item_graphs_build_and_save(tmp_path):
    seqs = [seq([0, 3, 1, 4], "XYXY"), seq([1, 2, 4], "XXY")]
    g = ItemGraphs.build(seqs, 3, 2)
    assert g.x.n == 3 and g.y.n == 2 and g.mixed.n == 5
    assert edges(g.y) == {(0, 1): 1.0, (1, 0): 1.0}
    g.save(tmp_path)
    g2 = ItemGraphs.load(tmp_path)
    assert edges(g2.mixed) == edges(g.mixed)
