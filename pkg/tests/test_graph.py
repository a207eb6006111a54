"""Concept graph: validation, serialization round trips, propagation operator."""

import numpy as np
import numpy.testing as npt
import pytest

from _oracles import permute_graph
from conceptshot import tensor as T
from conceptshot.errors import DataError, NumericalError
from conceptshot.graph import (ConceptGraph, NodeRecord, describe, load_graph,
                               propagation_operator, save_graph, select_task_rows)


def chain3(**kw):
    """root - mid - leaf."""
    nodes = [NodeRecord(0, "root", 0), NodeRecord(1, "mid", 1),
             NodeRecord(2, "leaf", 2, "meta-train")]
    sem = kw.pop("semantics", np.arange(6, dtype=float).reshape(3, 2))
    return ConceptGraph(nodes, [(0, 1), (1, 2)], sem, 3)


def binary_tree_7():
    nodes = [NodeRecord(0, "root", 0)]
    nodes += [NodeRecord(i, f"mid{i}", 1) for i in (1, 2)]
    nodes += [NodeRecord(i, f"leaf{i}", 2, "meta-train" if i < 6 else "meta-test")
              for i in (3, 4, 5, 6)]
    edges = [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)]
    rng = np.random.default_rng(0)
    return ConceptGraph(nodes, edges, rng.standard_normal((7, 4)), 3)


# ---------------------------------------------------------------------------
# validation

def test_chain_loads_and_queries():
    g = chain3()
    assert g.num_nodes == 3 and g.entity_level == 2
    assert g.neighbors(1) == [0, 2]
    assert g.is_entity(2) and not g.is_entity(1)
    assert g.level_ids(1) == [1]
    assert g.descendants_at_entity_level(0) == [2]


def test_same_level_edge_rejected():
    nodes = [NodeRecord(0, "a", 0), NodeRecord(1, "b", 1), NodeRecord(2, "c", 1),
             NodeRecord(3, "d", 2, "none"), NodeRecord(4, "e", 2, "none")]
    with pytest.raises(DataError, match="1-2.*same level"):
        ConceptGraph(nodes, [(0, 1), (0, 2), (1, 2), (1, 3), (2, 4)], np.zeros((5, 2)), 3)


def test_skip_level_edge_rejected():
    nodes = [NodeRecord(0, "a", 0), NodeRecord(1, "b", 1), NodeRecord(2, "c", 2)]
    with pytest.raises(DataError, match="skips levels"):
        ConceptGraph(nodes, [(0, 2), (1, 2)], np.zeros((3, 2)), 3)


def test_duplicate_node_id_rejected():
    nodes = [NodeRecord(0, "a", 0), NodeRecord(0, "b", 1)]
    with pytest.raises(DataError, match="duplicate node id 0"):
        ConceptGraph(nodes, [], np.zeros((2, 2)), 2)


def test_orphan_leaf_rejected():
    nodes = [NodeRecord(0, "a", 0), NodeRecord(1, "b", 1), NodeRecord(2, "c", 1)]
    with pytest.raises(DataError, match="entity node 2 has no parent"):
        ConceptGraph(nodes, [(0, 1)], np.zeros((3, 2)), 2)


def test_cycle_rejected():
    # diamond: two parents sharing two children closes an undirected loop
    nodes = [NodeRecord(0, "a", 0), NodeRecord(1, "b", 0),
             NodeRecord(2, "x", 1), NodeRecord(3, "y", 1)]
    with pytest.raises(DataError, match="cycle"):
        ConceptGraph(nodes, [(0, 2), (0, 3), (1, 2), (1, 3)], np.zeros((4, 2)), 2)


def test_semantics_shape_mismatch_rejected():
    with pytest.raises(DataError, match="semantics shape"):
        chain3(semantics=np.zeros((4, 2)))


def test_entity_split_on_internal_node_rejected():
    nodes = [NodeRecord(0, "a", 0, "meta-train"), NodeRecord(1, "b", 1, "none")]
    with pytest.raises(DataError, match="non-leaf"):
        ConceptGraph(nodes, [(0, 1)], np.zeros((2, 2)), 2)


def test_unknown_split_rejected():
    nodes = [NodeRecord(0, "a", 0, "validation")]
    with pytest.raises(DataError, match="unknown split"):
        ConceptGraph(nodes, [], np.zeros((1, 2)), 1)


# ---------------------------------------------------------------------------
# serialization

def test_save_load_roundtrip_bit_exact(tmp_path):
    g = binary_tree_7()
    p = tmp_path / "tree.graph.json"
    save_graph(g, p)
    g2 = load_graph(p)
    assert g2 == g
    # loading and saving again is byte-stable
    save_graph(g2, tmp_path / "tree2.graph.json")
    assert (tmp_path / "tree2.graph.json").read_bytes() == p.read_bytes()


def test_sidecar_roundtrip(tmp_path):
    g = binary_tree_7()
    # float32-representable semantics survive the sidecar exactly
    g.semantics = g.semantics.astype(np.float32).astype(np.float64)
    save_graph(g, tmp_path / "g.json", semantics_sidecar="g.semb")
    g2 = load_graph(tmp_path / "g.json")
    assert g2 == g


def test_load_missing_file():
    with pytest.raises(DataError, match="not found"):
        load_graph("/nonexistent/g.json")


def test_load_rejects_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(DataError, match="not valid JSON"):
        load_graph(p)


def test_load_rejects_foreign_document(tmp_path):
    p = tmp_path / "other.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(DataError):
        load_graph(p)


def test_describe_mentions_counts():
    text = describe(binary_tree_7())
    assert "nodes: 7" in text and "level 2 (entities): 4 nodes" in text


# ---------------------------------------------------------------------------
# propagation operator

def test_propagation_middle_of_chain():
    prop = propagation_operator(chain3())
    npt.assert_allclose(prop.dense[1], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    npt.assert_allclose(prop.dense[0], [1 / 2, 1 / 2, 0.0], atol=1e-15)


def test_propagation_isolated_node_one_hot():
    # internal node with no links: with self loop its row is a one-hot on itself
    nodes = [NodeRecord(0, "a", 0), NodeRecord(1, "b", 0), NodeRecord(2, "x", 1)]
    g = ConceptGraph(nodes, [(0, 2)], np.zeros((3, 2)), 2)
    prop = propagation_operator(g)
    npt.assert_array_equal(prop.dense[1], [0.0, 1.0, 0.0])
    with pytest.raises(NumericalError, match="degree 0"):
        propagation_operator(g, self_loops=False)


def test_propagation_rows_sum_to_one():
    rng = np.random.default_rng(1)
    # random 20-node two-level hierarchy
    n_top = 6
    nodes = [NodeRecord(i, f"t{i}", 0) for i in range(n_top)]
    nodes += [NodeRecord(i, f"l{i}", 1) for i in range(n_top, 20)]
    edges = [(rng.integers(0, n_top), i) for i in range(n_top, 20)]
    g = ConceptGraph(nodes, edges, rng.standard_normal((20, 3)), 2)
    for self_loops in (True, False):
        try:
            p = propagation_operator(g, self_loops=self_loops).dense
        except NumericalError:
            assert not self_loops  # a childless top node is legal
            continue
        npt.assert_allclose(p.sum(axis=1), np.ones(20), atol=1e-12)
        assert (p >= 0).all()


def test_apply_matches_dense_matmul():
    g = binary_tree_7()
    prop = propagation_operator(g)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((7, 5))
    npt.assert_allclose(prop.apply(T.Tensor(z)).data, prop.dense @ z, atol=1e-12)


def test_bare_variant_matches_unaugmented_matrix():
    g = binary_tree_7()
    prop = propagation_operator(g, self_loops=False)
    a = np.zeros((7, 7))
    for i, j in g.edges:
        a[i, j] = a[j, i] = 1.0
    npt.assert_allclose(prop.dense, a / a.sum(axis=1, keepdims=True), atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_propagation_permutation_equivariance_exact(seed):
    rng = np.random.default_rng(seed)
    g = binary_tree_7()
    z = rng.standard_normal((7, 4))
    perm = rng.permutation(7)
    gp = permute_graph(g, perm)
    zp = np.empty_like(z)
    zp[perm] = z
    out = propagation_operator(g).apply(T.Tensor(z)).data
    outp = propagation_operator(gp).apply(T.Tensor(zp)).data
    npt.assert_array_equal(outp[perm], out)  # bitwise


# ---------------------------------------------------------------------------
# row selection

def test_select_task_rows():
    x = T.Tensor(np.arange(12, dtype=float).reshape(3, 4), requires_grad=True)
    out = select_task_rows(x, [2, 0])
    npt.assert_array_equal(out.data, x.data[[2, 0]])
    with pytest.raises(DataError, match="duplicates"):
        select_task_rows(x, [1, 1])
    with pytest.raises(DataError, match="out of range"):
        select_task_rows(x, [5])
