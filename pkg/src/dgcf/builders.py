"""Graph construction from raw data, and a synthetic desk-scale dataset."""

from __future__ import annotations

import numpy as np

from .dataset import Dataset, stratified_indices
from .errors import (
    AsymmetricMatrix,
    DimensionMismatch,
    EmptyGraph,
    InvalidConfig,
    InvalidGraph,
    InvalidQ,
    InvalidThreshold,
    NegativeDistance,
    ZeroNormEmbedding,
)
from .graph import Graph, PadMode, build_neighborhood_table

# Similarities are rounded before ranking so that last-ulp noise from
# normalisation cannot reorder ties.
_SIM_DECIMALS = 12


def correlation_graph(feature_table: np.ndarray, threshold: float) -> tuple[Graph, np.ndarray]:
    """Connect variables whose absolute Pearson correlation exceeds ``threshold``.

    Constant columns are dropped first. Returns the graph over the kept
    columns and ``kept[i]`` = original column of node ``i``.
    """
    X = np.asarray(feature_table, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DimensionMismatch("feature table", "(S >= 2, P)", X.shape)
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold(f"threshold must be in (0, 1), got {threshold}")
    kept = np.flatnonzero(np.ptp(X, axis=0) > 0)
    if kept.size == 0:
        raise EmptyGraph("all variables are constant; nothing left to connect")
    Z = X[:, kept] - X[:, kept].mean(axis=0)
    std = np.sqrt((Z ** 2).mean(axis=0))
    corr = (Z.T @ Z) / X.shape[0] / np.outer(std, std)
    ii, jj = np.nonzero(np.triu(np.abs(corr) > threshold, k=1))
    return Graph.from_edges(kept.size, zip(ii.tolist(), jj.tolist())), kept


def _top_q_graph(score: np.ndarray, q: int, larger_is_closer: bool) -> list[tuple[int, int]]:
    n = score.shape[0]
    edges = []
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        key = -score[i, others] if larger_is_closer else score[i, others]
        order = np.lexsort((others, key))
        edges.extend((i, int(j)) for j in others[order[:q]])
    return edges


def cosine_similarity_graph(embeddings: np.ndarray, neighbors_per_node: int) -> Graph:
    """Link each node to its ``q`` most cosine-similar nodes, then symmetrise."""
    E = np.asarray(embeddings, dtype=np.float64)
    n = E.shape[0]
    q = neighbors_per_node
    if not 1 <= q < n:
        raise InvalidQ(f"neighbors_per_node must be in [1, {n}), got {q}")
    norms = np.linalg.norm(E, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormEmbedding(int(zero[0]))
    U = E / norms[:, None]
    sim = np.round(U @ U.T, _SIM_DECIMALS)
    return Graph.from_edges(n, _top_q_graph(sim, q, larger_is_closer=True))


def distance_matrix_graph(distances: np.ndarray, neighbors_per_node: int) -> Graph:
    """Link each node to its ``q`` closest nodes; distances kept as edge weights."""
    D = np.asarray(distances, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionMismatch("distance matrix", "square", D.shape)
    n = D.shape[0]
    q = neighbors_per_node
    if not np.array_equal(D, D.T):
        i, j = np.argwhere(D != D.T)[0]
        raise AsymmetricMatrix(f"distances[{i}][{j}]={D[i, j]} but distances[{j}][{i}]={D[j, i]}")
    if np.any(D < 0):
        i, j = np.argwhere(D < 0)[0]
        raise NegativeDistance(f"distances[{i}][{j}]={D[i, j]}")
    if np.any(np.diag(D) != 0):
        raise InvalidGraph("distance matrix must have a zero diagonal")
    if not 1 <= q < n:
        raise InvalidQ(f"neighbors_per_node must be in [1, {n}), got {q}")
    g = Graph.from_edges(n, _top_q_graph(D, q, larger_is_closer=False))
    return Graph.from_edges(n, g.edges, {e: float(D[e]) for e in g.edges})


# --- synthetic data -----------------------------------------------------------


def ring_graph(n: int) -> Graph:
    if n < 3:
        return Graph.from_edges(n, [(0, 1)] if n == 2 else [])
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def grid_graph(n: int) -> Graph:
    rows = max(r for r in range(1, int(np.sqrt(n)) + 1) if n % r == 0)
    cols = n // rows
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    return Graph.from_edges(n, edges)


def random_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    upper = np.triu(rng.random((n, n)) < p, k=1)
    ii, jj = np.nonzero(upper)
    return Graph.from_edges(n, zip(ii.tolist(), jj.tolist()))


def class_patterns(n_nodes: int, feature_dim: int, n_classes: int) -> np.ndarray:
    """Noise-free class prototypes ``(C, N, J)``.

    Class ``c`` is a cosine with ``c + 1`` periods around the node order,
    phase-shifted by ``pi * c / C``; channel ``j`` adds a further shift of
    ``pi * j / J``.
    """
    n = np.arange(n_nodes)[:, None]
    j = np.arange(feature_dim)[None, :]
    pats = np.stack([
        np.cos(2 * np.pi * (c + 1) * n / n_nodes + np.pi * j / feature_dim + np.pi * c / n_classes)
        for c in range(n_classes)
    ])
    return pats


def synthetic_dataset(
    n_nodes: int,
    feature_dim: int,
    n_classes: int,
    samples_per_class: int,
    graph_kind: str = "ring",
    noise_std: float = 0.0,
    seed: int = 0,
    *,
    k: int = 4,
    edge_prob: float = 0.1,
    test_fraction: float = 0.0,
) -> Dataset:
    """Class prototypes plus i.i.d. Gaussian noise on a ring, grid or random graph.

    With ``test_fraction > 0`` a stratified subset is flagged as the
    designated test split.
    """
    if min(n_nodes, feature_dim, n_classes, samples_per_class, k) < 1:
        raise InvalidConfig("n_nodes, feature_dim, n_classes, samples_per_class and k must be positive")
    if noise_std < 0:
        raise InvalidConfig(f"noise_std must be >= 0, got {noise_std}")
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidConfig(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    if graph_kind == "ring":
        graph = ring_graph(n_nodes)
    elif graph_kind == "grid":
        graph = grid_graph(n_nodes)
    elif graph_kind == "random":
        graph = random_graph(n_nodes, edge_prob, rng)
    else:
        raise InvalidConfig(f"unknown graph kind {graph_kind!r}")

    pats = class_patterns(n_nodes, feature_dim, n_classes)
    flat = pats.reshape(n_classes, -1)
    for a in range(n_classes):
        for b in range(a + 1, n_classes):
            if np.allclose(flat[a], flat[b]):
                raise InvalidConfig(f"classes {a} and {b} coincide for n_nodes={n_nodes}")
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, n_nodes, feature_dim))
    features = pats[labels] + noise_std * noise
    is_test = None
    if test_fraction > 0:
        _, test_idx = stratified_indices(labels, test_fraction, int(rng.integers(2**31)))
        is_test = np.zeros(labels.size, bool)
        is_test[test_idx] = True
    table = build_neighborhood_table(graph, k, PadMode.PAD_WITH_CENTER)
    return Dataset(graph, table, features, labels, n_classes, is_test)
