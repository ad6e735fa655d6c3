import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyda import numerics as nm
from hyda.errors import ConfigError, ShapeError, StructureError
from hyda.hypergraph import (HgLayer, Incidence, build_hypergraph, fuse, gconv, hgconv, hypergraph_classify,
                             knn_graph_edges, knn_hyperedges, vertex_feature_dropout)

from conftest import dense_hgconv


def layer(w, b):
    return HgLayer(nm.Tensor(w, requires_grad=True), nm.Tensor(b, requires_grad=True))


def edges_of(inc):
    return [sorted(inc.members(e).tolist()) for e in range(inc.num_hyperedges)]


def test_knn_k1_identity():
    inc = knn_hyperedges(np.random.default_rng(0).standard_normal((5, 3)), 1)
    np.testing.assert_array_equal(inc.H, np.eye(5))


def test_knn_hand_example():
    inc = knn_hyperedges(np.array([[0.0], [0.1], [5.0]]), 2)
    assert edges_of(inc) == [[0, 1], [0, 1], [1, 2]]


def test_knn_errors_and_ties():
    with pytest.raises(ConfigError):
        knn_hyperedges(np.zeros((3, 2)), 4)
    # equidistant neighbours resolve to the lower index; duplicates still keep self
    inc = knn_hyperedges(np.array([[0.0], [1.0], [-1.0], [0.0]]), 2)
    assert edges_of(inc) == [[0, 3], [0, 1], [0, 2], [0, 3]]
    assert inc.H[3, 3] == 1


def test_fuse_counts():
    rng = np.random.default_rng(1)
    single = knn_hyperedges(rng.standard_normal((7, 2)), 3)
    g = fuse([single])
    np.testing.assert_array_equal(g.incidence.H, single.H)
    embs = {m: rng.standard_normal((190, 4)) for m in ("a", "b", "c")}
    G = build_hypergraph(embs, 20)
    assert G.incidence.num_hyperedges == 570
    assert G.incidence.vertex_degrees.min() >= 3
    assert set(G.incidence.edge_degrees) == {20}
    assert G.edge_ranges == {"a": (0, 190), "b": (190, 380), "c": (380, 570)}
    assert [G.source_of(e) for e in (0, 189, 190, 569)] == ["a", "a", "b", "c"]
    for m, (lo, _) in G.edge_ranges.items():
        assert all(G.incidence.H[n, lo + n] == 1 for n in range(190))
    with pytest.raises(ShapeError):
        fuse([single, knn_hyperedges(rng.standard_normal((6, 2)), 3)])


def test_hgconv_examples():
    x = np.array([[1.5, -2.0]])
    inc = Incidence.from_edges(1, [[0]])
    out = hgconv(inc, nm.Tensor(x), layer(np.eye(2), np.zeros(2)), activate=False)
    np.testing.assert_array_equal(out.data, x)
    x = np.array([[1.0, 2.0], [3.0, -4.0]])
    inc = Incidence.from_edges(2, [[0, 1]])
    out = hgconv(inc, nm.Tensor(x), layer(np.eye(2), np.zeros(2)), activate=False)
    np.testing.assert_array_equal(out.data, [[2.0, -1.0], [2.0, -1.0]])


def test_isolated_vertex():
    inc = Incidence.from_edges(3, [[0, 1]])
    with pytest.raises(StructureError):
        hgconv(inc, nm.Tensor(np.ones((3, 2))), layer(np.eye(2), np.zeros(2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hgconv_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 11)), int(rng.integers(1, 4))
    k = int(rng.integers(1, n + 1))
    embs = {f"m{i}": rng.standard_normal((n, 3)) for i in range(m)}
    G = build_hypergraph(embs, k)
    X = rng.uniform(-1, 1, (n, 5))
    W, b = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, 4)
    out = hgconv(G, nm.Tensor(X), layer(W, b), activate=False).data
    np.testing.assert_allclose(out, dense_hgconv(G.incidence.H, X, W, b), atol=1e-10, rtol=0)


def test_hgconv_gradients():
    rng = np.random.default_rng(3)
    G = build_hypergraph({"a": rng.standard_normal((6, 3)), "b": rng.standard_normal((6, 2))}, 3)
    X = nm.Tensor(rng.uniform(-1, 1, (6, 4)), requires_grad=True)
    lay = layer(rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, 3))
    loss = lambda: nm.reduce_sum(nm.power(hgconv(G, X, lay, activate=False), 2.0))  # noqa: E731
    assert nm.finite_diff_check(loss, [("X", X), ("W", lay.weight), ("b", lay.bias)]) < 1e-4


def test_classifier_examples():
    rng = np.random.default_rng(4)
    G = build_hypergraph({"a": rng.standard_normal((5, 2))}, 2)
    f = nm.Tensor(rng.standard_normal((5, 3)))
    p = hypergraph_classify(G, f, layer(np.zeros((3, 2)), np.zeros(2))).data
    np.testing.assert_array_equal(p, np.full((5, 2), 0.5))
    lay = layer(rng.standard_normal((3, 2)), rng.standard_normal(2))
    p = hypergraph_classify(G, f, lay).data
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    one = Incidence.from_edges(1, [[0]])
    x = rng.standard_normal((1, 3))
    logits = x @ lay.weight.data + lay.bias.data
    want = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    np.testing.assert_allclose(hypergraph_classify(one, nm.Tensor(x), lay).data, want, atol=1e-15, rtol=0)


def test_dropout():
    X = nm.Tensor(np.ones((4, 3)))
    rng = np.random.default_rng(0)
    assert vertex_feature_dropout(X, 0.0, True, rng) is X
    assert vertex_feature_dropout(X, 0.5, False, rng) is X
    with pytest.raises(ConfigError):
        vertex_feature_dropout(X, 1.0, True, rng)


def test_dropout_monte_carlo():
    rng = np.random.default_rng(0)
    X = np.random.default_rng(1).uniform(0.5, 1.5, (50, 20))
    draws = np.stack([vertex_feature_dropout(nm.Tensor(X), 0.5, True, rng).data for _ in range(10_000)])
    assert abs((draws != 0).mean() - 0.5) < 0.01
    assert np.max(np.abs(draws.mean(axis=0) / X - 1)) < 0.05
    assert abs(draws.mean() / X.mean() - 1) < 0.02


def test_graph_backend():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((6, 2))
    inc = knn_graph_edges(X, 3)
    assert set(inc.edge_degrees) == {2}
    # k=1: self-loops only, so gconv is a plain linear layer
    self_loops = knn_graph_edges(X, 1)
    F = rng.standard_normal((6, 4))
    lay = layer(rng.standard_normal((4, 2)), rng.standard_normal(2))
    out = gconv(self_loops, nm.Tensor(F), lay, activate=False).data
    np.testing.assert_allclose(out, F @ lay.weight.data + lay.bias.data, atol=1e-12, rtol=0)
    # a hypergraph whose hyperedges all have two members runs the same code path
    pairs = Incidence.from_edges(6, [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 0]])
    a = hgconv(pairs, nm.Tensor(F), lay).data
    b = gconv(pairs, nm.Tensor(F), lay).data
    np.testing.assert_array_equal(a, b)


def test_line_graph_middle_vertex():
    line = Incidence.from_edges(3, [[0, 1], [1, 2]])
    x = np.array([[1.0], [4.0], [10.0]])
    out = gconv(line, nm.Tensor(x), layer(np.eye(1), np.zeros(1)), activate=False).data
    assert out[1, 0] == ((1 + 4) / 2 + (4 + 10) / 2) / 2
