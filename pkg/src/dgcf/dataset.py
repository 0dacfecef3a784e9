"""Datasets of node-feature matrices sharing one graph, and their on-disk format.

Files in a dataset directory::

    features.csv   one sample per line, its N*J values in row-major order
    labels.txt     one integer label per line
    graph.json     graph in the JSON format of :class:`dgcf.graph.Graph`
    split.txt      optional, one 0/1 per line (1 = designated test sample)
    meta.json      n_classes, feature_dim and k
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, ParseError, TooFewSamples
from .graph import Graph, NeighborhoodTable, build_neighborhood_table


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # (N, J)
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: Graph
    table: NeighborhoodTable
    features: np.ndarray  # (S, N, J)
    labels: np.ndarray  # (S,)
    n_classes: int
    is_test: np.ndarray | None = None  # (S,) bool, designated held-out test samples

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 3:
            raise DimensionMismatch("features", "(samples, N, J)", feats.shape)
        if feats.shape[1] != self.graph.n_nodes:
            raise DimensionMismatch("nodes per sample", self.graph.n_nodes, feats.shape[1])
        if self.table.n_nodes != self.graph.n_nodes:
            raise DimensionMismatch("neighbourhood table rows", self.graph.n_nodes, self.table.n_nodes)
        if labels.shape != (feats.shape[0],):
            raise DimensionMismatch("labels", (feats.shape[0],), labels.shape)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DimensionMismatch("label range", f"[0, {self.n_classes})", f"[{labels.min()}, {labels.max()}]")
        is_test = np.zeros(len(labels), bool) if self.is_test is None else np.asarray(self.is_test, bool)
        if is_test.shape != labels.shape:
            raise DimensionMismatch("split flags", labels.shape, is_test.shape)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "is_test", is_test)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_test)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_test)

    def with_k(self, k: int) -> Dataset:
        if k == self.table.k:
            return self
        return replace(self, table=build_neighborhood_table(self.graph, k, self.table.pad_mode))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.graph == other.graph
            and self.table == other.table
            and self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.is_test, other.is_test)
        )

    __hash__ = None  # type: ignore[assignment]


def save_dataset(dataset: Dataset, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": d / "features.csv",
        "labels": d / "labels.txt",
        "graph": d / "graph.json",
        "split": d / "split.txt",
        "meta": d / "meta.json",
    }
    flat = dataset.features.reshape(len(dataset), -1)
    with open(paths["features"], "w", newline="") as fh:
        w = csv.writer(fh)
        for row in flat.tolist():
            w.writerow([repr(v) for v in row])
    paths["labels"].write_text("".join(f"{int(v)}\n" for v in dataset.labels))
    paths["split"].write_text("".join(f"{int(v)}\n" for v in dataset.is_test))
    dataset.graph.save(paths["graph"])
    meta = {
        "n_classes": dataset.n_classes,
        "feature_dim": dataset.feature_dim,
        "k": dataset.table.k,
        "pad_mode": dataset.table.pad_mode.value,
    }
    paths["meta"].write_text(json.dumps(meta, indent=1) + "\n")
    return paths


def _read_int_lines(path: Path, what: str) -> np.ndarray:
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            values.append(int(line))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad {what} {line!r}") from exc
    return np.array(values, dtype=np.int64)


def load_dataset(
    features_path: str | Path,
    labels_path: str | Path,
    graph_path: str | Path | Graph,
    *,
    n_classes: int | None = None,
    k: int | None = None,
    split_path: str | Path | None = None,
) -> Dataset:
    """Read a dataset; missing ``n_classes``/``k`` come from a sibling ``meta.json``.

    ``graph_path`` may also be an already built :class:`Graph`.
    """
    features_path = Path(features_path)
    meta_path = features_path.parent / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    n_classes = n_classes if n_classes is not None else meta.get("n_classes")
    k = k if k is not None else meta.get("k", 1)
    pad_mode = meta.get("pad_mode", "pad_with_center")
    if split_path is None and (features_path.parent / "split.txt").exists():
        split_path = features_path.parent / "split.txt"

    graph = graph_path if isinstance(graph_path, Graph) else Graph.load(graph_path)
    n = graph.n_nodes
    rows = []
    with open(features_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{features_path}:{lineno}: {exc}") from exc
    labels = _read_int_lines(Path(labels_path), "label")
    if len(rows) != len(labels):
        raise DimensionMismatch("feature rows (one per sample)", len(labels), len(rows))
    width = len(rows[0]) if rows else 0
    for lineno, row in enumerate(rows, 1):
        if len(row) != width:
            raise DimensionMismatch(f"values on features line {lineno}", width, len(row))
    if width % n:
        raise DimensionMismatch("values per feature row (N * J)", f"multiple of N={n}", width)
    J = meta.get("feature_dim", width // n)
    if width != n * J:
        raise DimensionMismatch("values per feature row (N * J)", n * J, width)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DimensionMismatch("label range", f"[0, {n_classes})", f"[{labels.min()}, {labels.max()}]")
    is_test = None
    if split_path is not None:
        is_test = _read_int_lines(Path(split_path), "split flag").astype(bool)
        if is_test.shape != labels.shape:
            raise DimensionMismatch("split flags", labels.shape, is_test.shape)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), n, J)
    table = build_neighborhood_table(graph, k, pad_mode)
    return Dataset(graph, table, features, labels, int(n_classes), is_test)


def load_dataset_dir(directory: str | Path) -> Dataset:
    d = Path(directory)
    return load_dataset(d / "features.csv", d / "labels.txt", d / "graph.json")


def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``range(len(labels))`` into (kept, held-out), class by class.

    Each class with ``n_c`` members contributes ``round(fraction * n_c)``
    members to the held-out part, clamped to ``[1, n_c - 1]``.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidConfig(f"fraction must be in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    held = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n_c = len(members)
        if n_c < 2:
            raise TooFewSamples(int(c), n_c)
        h = min(max(int(np.floor(fraction * n_c + 0.5)), 1), n_c - 1)
        held.append(rng.permutation(members)[:h])
    held_idx = np.sort(np.concatenate(held)) if held else np.zeros(0, np.int64)
    mask = np.zeros(len(labels), bool)
    mask[held_idx] = True
    return np.flatnonzero(~mask), held_idx
