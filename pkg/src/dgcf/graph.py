"""Undirected graphs, hop distances and fixed-size k-nearest-neighbour tables."""

from __future__ import annotations

import csv
import enum
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DegenerateNeighborhood, InvalidGraph, InvalidK, InvalidNode, ParseError

UNREACHABLE = np.inf


@dataclass(frozen=True)
class Graph:
    """Undirected graph on nodes ``0..n_nodes-1``.

    ``edges`` is kept exactly as supplied so that :func:`validate_graph` can
    report problems; use :meth:`from_edges` to get a canonical edge list
    (``i < j``, sorted, no duplicates). ``edge_weights`` is informational only
    and is never read by the distance computation.
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    edge_weights: dict[tuple[int, int], float] | None = field(default=None, compare=True)

    @classmethod
    def from_edges(
        cls,
        n_nodes: int,
        edges: Iterable[tuple[int, int]],
        edge_weights: dict[tuple[int, int], float] | None = None,
    ) -> Graph:
        canon = sorted({(min(int(i), int(j)), max(int(i), int(j))) for i, j in edges})
        weights = None
        if edge_weights is not None:
            weights = {(min(i, j), max(i, j)): float(w) for (i, j), w in edge_weights.items()}
            weights = {e: weights[e] for e in canon if e in weights}
        return cls(int(n_nodes), tuple(canon), weights)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbour lists; requires a valid graph."""
        problems = validate_graph(self)
        if problems:
            raise InvalidGraph("; ".join(str(p) for p in problems))
        nbrs: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        return tuple(tuple(sorted(s)) for s in nbrs)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def to_json(self) -> dict:
        out: dict = {"n_nodes": self.n_nodes, "edges": [[i, j] for i, j in self.edges]}
        if self.edge_weights is not None:
            out["edge_weights"] = [[i, j, w] for (i, j), w in sorted(self.edge_weights.items())]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> Graph:
        try:
            n = int(obj["n_nodes"])
            edges = tuple((int(i), int(j)) for i, j in obj["edges"])
            weights = None
            if obj.get("edge_weights") is not None:
                weights = {(int(i), int(j)): float(w) for i, j, w in obj["edge_weights"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed graph JSON: {exc}") from exc
        return cls(n, edges, weights)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Graph:
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_json(obj)


# --- validation -----------------------------------------------------------


@dataclass(frozen=True)
class SelfLoop:
    node: int

    def __str__(self) -> str:
        return f"self-loop on node {self.node}"


@dataclass(frozen=True)
class IndexOutOfRange:
    edge: tuple[int, int]
    n_nodes: int

    def __str__(self) -> str:
        return f"edge {self.edge} references a node outside [0, {self.n_nodes})"


@dataclass(frozen=True)
class DuplicateEdge:
    edge: tuple[int, int]

    def __str__(self) -> str:
        return f"duplicate edge {self.edge}"


def validate_graph(graph: Graph) -> list[SelfLoop | IndexOutOfRange | DuplicateEdge]:
    problems: list = []
    if graph.n_nodes < 1:
        raise InvalidGraph(f"n_nodes must be positive, got {graph.n_nodes}")
    seen: set[tuple[int, int]] = set()
    for i, j in graph.edges:
        if not (0 <= i < graph.n_nodes and 0 <= j < graph.n_nodes):
            problems.append(IndexOutOfRange((i, j), graph.n_nodes))
            continue
        if i == j:
            problems.append(SelfLoop(i))
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            problems.append(DuplicateEdge(key))
        seen.add(key)
    return problems


# --- distances and neighbourhoods -----------------------------------------


def shortest_path_distances(graph: Graph, source: int) -> np.ndarray:
    """Hop counts from ``source`` by breadth-first search (``inf`` if unreachable)."""
    if not 0 <= source < graph.n_nodes:
        raise InvalidNode(f"source {source} not in [0, {graph.n_nodes})")
    adj = graph.adjacency
    dist = np.full(graph.n_nodes, UNREACHABLE)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] == UNREACHABLE:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


class PadMode(str, enum.Enum):
    PAD_WITH_CENTER = "pad_with_center"
    STRICT = "strict"


@dataclass(frozen=True)
class NeighborhoodTable:
    """``table[n, k]`` is the k-th nearest node to ``n``; ``table[n, 0] == n``."""

    n_nodes: int
    k: int
    table: np.ndarray
    pad_mode: PadMode = PadMode.PAD_WITH_CENTER

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NeighborhoodTable):
            return NotImplemented
        return (
            self.n_nodes == other.n_nodes
            and self.k == other.k
            and self.pad_mode == other.pad_mode
            and np.array_equal(self.table, other.table)
        )

    __hash__ = None  # type: ignore[assignment]

    def permuted(self, perm: np.ndarray) -> NeighborhoodTable:
        """Relabel nodes so that old node ``v`` becomes ``perm[v]``."""
        perm = np.asarray(perm)
        new = np.empty_like(self.table)
        new[perm] = perm[self.table]
        new.setflags(write=False)
        return NeighborhoodTable(self.n_nodes, self.k, new, self.pad_mode)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.table.tolist())

    @classmethod
    def from_csv(cls, path: str | Path, pad_mode: PadMode = PadMode.PAD_WITH_CENTER) -> NeighborhoodTable:
        with open(path, newline="") as fh:
            rows = [[int(v) for v in row] for row in csv.reader(fh) if row]
        table = np.array(rows, dtype=np.int64)
        table.setflags(write=False)
        return cls(table.shape[0], table.shape[1], table, pad_mode)


def build_neighborhood_table(
    graph: Graph, k: int, pad_mode: PadMode | str = PadMode.PAD_WITH_CENTER
) -> NeighborhoodTable:
    """Rows hold the ``k`` nearest nodes by hop distance, ties by node index."""
    pad_mode = PadMode(pad_mode)
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    adj = graph.adjacency
    n = graph.n_nodes
    table = np.empty((n, k), dtype=np.int64)
    for src in range(n):
        # Level-by-level BFS; each level sorted gives (distance, index) order.
        row = [src]
        seen = {src}
        frontier = [src]
        while frontier and len(row) < k:
            nxt = sorted({v for u in frontier for v in adj[u] if v not in seen})
            seen.update(nxt)
            row.extend(nxt)
            frontier = nxt
        if len(row) < k:
            if pad_mode is PadMode.STRICT:
                raise DegenerateNeighborhood(
                    f"node {src} reaches only {len(row)} node(s), k={k}"
                )
            row.extend([src] * (k - len(row)))
        table[src] = row[:k]
    table.setflags(write=False)
    return NeighborhoodTable(n, k, table, pad_mode)
