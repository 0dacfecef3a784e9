"""Dynamic graph convolutional filters.

A filter-generating network (FGN) maps a sample's flattened node-feature
matrix to a ``(J, K, M)`` filter bank, which is then shared by every
neighbourhood of that same sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch
from .graph import NeighborhoodTable
from .layers import (
    Activation,
    ConvCache,
    DenseCache,
    LayerParams,
    dense_backward,
    dense_forward,
    glorot_uniform,
    graph_conv_backward,
    graph_conv_forward,
)


@dataclass
class FilterGeneratingNetwork:
    n_nodes: int
    in_channels: int
    k: int
    out_channels: int
    hidden_layers: tuple[int, ...] = (200,)
    hidden_activation: Activation = Activation.RELU
    params: LayerParams = field(default_factory=LayerParams)

    @property
    def input_dim(self) -> int:
        return self.n_nodes * self.in_channels

    @property
    def output_dim(self) -> int:
        return self.in_channels * self.k * self.out_channels

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.output_dim]

    @property
    def n_dense(self) -> int:
        return len(self.hidden_layers) + 1

    @classmethod
    def create(
        cls,
        n_nodes: int,
        in_channels: int,
        k: int,
        out_channels: int,
        hidden_layers: Sequence[int] = (200,),
        hidden_activation: Activation = Activation.RELU,
        rng: np.random.Generator | None = None,
    ) -> FilterGeneratingNetwork:
        """Glorot-uniform weights and zero biases (all zeros if ``rng`` is None)."""
        fgn = cls(n_nodes, in_channels, k, out_channels, tuple(hidden_layers), Activation(hidden_activation))
        sizes = fgn.sizes
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = glorot_uniform(rng, (a, b), a, b) if rng is not None else np.zeros((a, b))
            fgn.params[f"W{i}"] = W
            fgn.params[f"b{i}"] = np.zeros(b)
        return fgn

    @classmethod
    def constant(cls, filters: np.ndarray, n_nodes: int, hidden_layers: Sequence[int] = ()) -> FilterGeneratingNetwork:
        """Generator whose weights are all zero and whose output bias is ``filters``."""
        J, K, M = filters.shape
        fgn = cls.create(n_nodes, J, K, M, hidden_layers)
        fgn.params[f"b{fgn.n_dense - 1}"] = np.asarray(filters, dtype=np.float64).ravel().copy()
        return fgn


@dataclass
class FgnCache:
    dense: list[DenseCache]
    x_shape: tuple[int, ...]


def fgn_forward(fgn: FilterGeneratingNetwork, X: np.ndarray) -> tuple[np.ndarray, FgnCache]:
    """Filters for each sample of ``X`` (``(..., N, J) -> (..., J, K, M)``)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-2:] != (fgn.n_nodes, fgn.in_channels):
        raise ShapeMismatch(f"FGN expects (..., {fgn.n_nodes}, {fgn.in_channels}), got {X.shape}")
    h = X.reshape(X.shape[:-2] + (fgn.input_dim,))
    caches = []
    last = fgn.n_dense - 1
    for i in range(fgn.n_dense):
        act = Activation.IDENTITY if i == last else fgn.hidden_activation
        h, c = dense_forward(h, fgn.params[f"W{i}"], fgn.params[f"b{i}"], act)
        caches.append(c)
    F = h.reshape(X.shape[:-2] + (fgn.in_channels, fgn.k, fgn.out_channels))
    return F, FgnCache(caches, X.shape)


def fgn_backward(dF: np.ndarray, fgn: FilterGeneratingNetwork, cache: FgnCache) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the FGN parameters and of its input ``X``."""
    dh = np.asarray(dF).reshape(dF.shape[:-3] + (fgn.output_dim,))
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(fgn.n_dense)):
        dW, db, dh = dense_backward(dh, cache.dense[i])
        grads[f"W{i}"] = dW
        grads[f"b{i}"] = db
    return {k: grads[k] for k in fgn.params}, dh.reshape(cache.x_shape)


@dataclass
class DgcfLayer:
    fgn: FilterGeneratingNetwork
    activation: Activation = Activation.RELU

    @property
    def k(self) -> int:
        return self.fgn.k

    @property
    def in_channels(self) -> int:
        return self.fgn.in_channels

    @property
    def out_channels(self) -> int:
        return self.fgn.out_channels


@dataclass
class DgcfCache:
    filters: np.ndarray
    fgn: FgnCache
    conv: ConvCache


def dgcf_forward(layer: DgcfLayer, X: np.ndarray, table: NeighborhoodTable) -> tuple[np.ndarray, DgcfCache]:
    F, fcache = fgn_forward(layer.fgn, X)
    Y, ccache = graph_conv_forward(X, table, F, layer.activation)
    return Y, DgcfCache(F, fcache, ccache)


def dgcf_backward(dY: np.ndarray, layer: DgcfLayer, cache: DgcfCache) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate through both the convolution and the filter generator.

    ``X`` reaches the output twice, as the convolved signal and as the FGN
    input, so ``dX`` is the sum of both contributions.
    """
    dF, dX_conv = graph_conv_backward(dY, cache.conv)
    dtheta, dX_fgn = fgn_backward(dF, layer.fgn, cache.fgn)
    return dtheta, dX_conv + dX_fgn


@dataclass
class ClassFilters:
    mean: np.ndarray | None
    std: np.ndarray | None
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def class_filter_stats(filters: np.ndarray, labels: np.ndarray, correct: np.ndarray, n_classes: int) -> dict[int, ClassFilters]:
    """Per-class mean/std (population) of the filters of correctly classified samples."""
    out = {}
    for c in range(n_classes):
        sel = filters[(labels == c) & correct]
        if len(sel) == 0:
            out[c] = ClassFilters(None, None, 0)
        else:
            # shifting by the first filter keeps identical filters exactly identical
            dev = sel - sel[0]
            shift = dev.mean(axis=0)
            out[c] = ClassFilters(sel[0] + shift, np.sqrt(((dev - shift) ** 2).mean(axis=0)), len(sel))
    return out


def collect_class_filters(model, dataset, predictions: np.ndarray, indices: np.ndarray | None = None) -> dict[int, ClassFilters]:
    """Average the generated filters of correctly classified samples per class.

    ``predictions`` is aligned with ``indices`` (all samples by default).
    Classes without a correct sample map to an empty :class:`ClassFilters`.
    """
    if indices is None:
        indices = np.arange(len(dataset))
    predictions = np.asarray(predictions)
    if predictions.shape != indices.shape:
        raise ShapeMismatch(f"{predictions.shape[0]} predictions for {len(indices)} samples")
    filters = model.generated_filters(dataset.features[indices])
    labels = dataset.labels[indices]
    return class_filter_stats(filters, labels, predictions == labels, dataset.n_classes)
