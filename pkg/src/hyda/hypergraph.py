"""k-NN hypergraph construction, modality fusion and two-step hypergraph convolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError, StructureError

HYPERGRAPH, GRAPH = "hypergraph", "graph"


@dataclass
class Incidence:
    """Sparse vertex/hyperedge membership as parallel index arrays.

    A pair may repeat (a graph self-loop {n, n} lists vertex n twice); the dense
    matrix then holds the multiplicity.
    """

    num_vertices: int
    num_hyperedges: int
    vertex_idx: np.ndarray
    edge_idx: np.ndarray

    @property
    def vertex_degrees(self):
        return np.bincount(self.vertex_idx, minlength=self.num_vertices)

    @property
    def edge_degrees(self):
        return np.bincount(self.edge_idx, minlength=self.num_hyperedges)

    @property
    def H(self):
        h = np.zeros((self.num_vertices, self.num_hyperedges))
        np.add.at(h, (self.vertex_idx, self.edge_idx), 1.0)
        return h

    def members(self, e):
        return self.vertex_idx[self.edge_idx == e]

    @classmethod
    def from_edges(cls, num_vertices, edges):
        v = np.concatenate([np.asarray(e, dtype=np.int64) for e in edges]) if edges else np.zeros(0, np.int64)
        ei = np.concatenate([np.full(len(e), i, dtype=np.int64) for i, e in enumerate(edges)]) if edges \
            else np.zeros(0, np.int64)
        return cls(num_vertices, len(edges), v, ei)


@dataclass
class FusedHypergraph:
    incidence: Incidence
    edge_ranges: dict  # modality name -> (start, stop) column range
    features: nm.Tensor | None = None

    @property
    def num_vertices(self):
        return self.incidence.num_vertices

    def source_of(self, e):
        for name, (lo, hi) in self.edge_ranges.items():
            if lo <= e < hi:
                return name
        raise IndexError(e)


def _neighbor_order(X, k):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected [N, E] embeddings, got shape {X.shape}")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must lie in [1, N={n}]")
    diff = X[:, None, :] - X[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, -1.0)  # self first, even against exact duplicates
    # stable sort keeps the lower index first among equal distances
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def knn_hyperedges(X_m, k: int) -> Incidence:
    """Hyperedge n holds vertex n and its k-1 nearest neighbours (Euclidean)."""
    nbrs = _neighbor_order(X_m, k)
    n = nbrs.shape[0]
    return Incidence(n, n, nbrs.reshape(-1), np.repeat(np.arange(n), k))


def knn_graph_edges(X_m, k: int) -> Incidence:
    """Pairwise edges {n, j} for each of the k nearest j of n (j = n gives a self-loop)."""
    nbrs = _neighbor_order(X_m, k)
    n = nbrs.shape[0]
    centers = np.repeat(np.arange(n), k)
    v = np.stack([centers, nbrs.reshape(-1)], axis=1).reshape(-1)
    e = np.repeat(np.arange(n * k), 2)
    return Incidence(n, n * k, v, e)


def build_incidence(X_m, k, backend=HYPERGRAPH) -> Incidence:
    if backend == HYPERGRAPH:
        return knn_hyperedges(X_m, k)
    if backend == GRAPH:
        return knn_graph_edges(X_m, k)
    raise ConfigError(f"unknown backend {backend!r}")


def fuse(incidences, names=None, features=None) -> FusedHypergraph:
    """Concatenate modality hyperedge sets over the shared vertex set."""
    incidences = list(incidences)
    if not incidences:
        raise ConfigError("nothing to fuse")
    names = list(names) if names is not None else [f"m{i}" for i in range(len(incidences))]
    n = incidences[0].num_vertices
    vs, es, ranges, offset = [], [], {}, 0
    for name, inc in zip(names, incidences):
        if inc.num_vertices != n:
            raise ShapeError(f"modality {name!r} has {inc.num_vertices} vertices, expected {n}")
        vs.append(inc.vertex_idx)
        es.append(inc.edge_idx + offset)
        ranges[name] = (offset, offset + inc.num_hyperedges)
        offset += inc.num_hyperedges
    fused = Incidence(n, offset, np.concatenate(vs), np.concatenate(es))
    X = None
    if features is not None:
        blocks = [nm.as_tensor(f) for f in features]
        if any(b.shape[0] != n for b in blocks):
            raise ShapeError(f"feature blocks {[b.shape for b in blocks]} do not all have {n} rows")
        X = nm.concat(blocks, axis=1)
    return FusedHypergraph(fused, ranges, X)


def build_hypergraph(embeddings: dict, k: int, backend=HYPERGRAPH) -> FusedHypergraph:
    """One k-NN sub-hypergraph per modality (insertion order), fused.

    ``k`` is clipped to the number of vertices.
    """
    incs = []
    for X in embeddings.values():
        X = np.asarray(X)
        incs.append(build_incidence(X, min(k, X.shape[0]), backend))
    return fuse(incs, list(embeddings))


@dataclass
class HgLayer:
    weight: nm.Tensor  # [in, out]
    bias: nm.Tensor  # [out]


def hgconv(G, X: nm.Tensor, layer: HgLayer, activate: bool = True) -> nm.Tensor:
    """Spatial two-step convolution: vertex -> hyperedge mean -> vertex mean, then affine map.

    Equivalent to ``Dv^-1 H De^-1 H^T X W + b``.
    """
    inc = G.incidence if isinstance(G, FusedHypergraph) else G
    if X.shape[0] != inc.num_vertices:
        raise ShapeError(f"{X.shape[0]} feature rows for {inc.num_vertices} vertices")
    if X.shape[1] != layer.weight.shape[0]:
        raise ShapeError(f"input width {X.shape[1]} vs layer weight {layer.weight.shape}")
    if np.any(inc.vertex_degrees == 0):
        raise StructureError("isolated vertex in hypergraph")
    if np.any(inc.edge_degrees == 0):
        raise StructureError("empty hyperedge in hypergraph")
    h = nm.matmul(X, layer.weight)
    h = nm.scatter_mean(h, inc.vertex_idx, inc.edge_idx, inc.num_hyperedges)
    h = nm.scatter_mean(h, inc.edge_idx, inc.vertex_idx, inc.num_vertices)
    h = nm.add(h, layer.bias)
    return nm.relu(h) if activate else h


# every graph edge has exactly two slots, so plain-graph convolution is the same operator
gconv = hgconv


def hypergraph_classify(G, f: nm.Tensor, layer: HgLayer) -> nm.Tensor:
    return nm.softmax(hgconv(G, f, layer, activate=False))


def vertex_feature_dropout(X: nm.Tensor, p: float, training: bool, rng=None) -> nm.Tensor:
    """Inverted dropout on individual feature entries; identity outside training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return X
    keep = rng.random(X.shape) >= p
    return nm.mul(X, keep / (1.0 - p))
