"""Model assembly from the layer grammar ``L1-L2`` with ``Li in {Ct, DCt, FCn, Pooling}``.

A linear read-out to the class logits is always appended after the last
grammar layer. Node-level tensors entering a dense layer are flattened.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .dynamic import DgcfLayer, FilterGeneratingNetwork, dgcf_backward, dgcf_forward, fgn_forward
from .errors import InvalidConfig, ShapeMismatch
from .graph import NeighborhoodTable
from .layers import (
    Activation,
    LayerParams,
    dense_backward,
    dense_forward,
    glorot_uniform,
    global_mean_pool,
    global_mean_pool_backward,
    graph_conv_backward,
    graph_conv_forward,
)

_TOKEN = re.compile(r"^(?:(DC|C)(\d+)|FC(\d+)|(Pooling|AvgPool))$")


@dataclass(frozen=True)
class LayerToken:
    kind: str  # "conv", "dconv", "fc" or "pool"
    size: int = 0

    def __str__(self) -> str:
        return {"conv": f"C{self.size}", "dconv": f"DC{self.size}", "fc": f"FC{self.size}", "pool": "Pooling"}[self.kind]


def parse_layer_spec(spec: str) -> list[LayerToken]:
    """``"DC4-Pooling"`` -> ``[LayerToken("dconv", 4), LayerToken("pool")]``."""
    tokens = []
    for part in spec.split("-"):
        m = _TOKEN.match(part.strip())
        if m is None:
            raise InvalidConfig(f"bad layer token {part!r} in {spec!r}")
        if m.group(1):
            tokens.append(LayerToken("dconv" if m.group(1) == "DC" else "conv", int(m.group(2))))
        elif m.group(3):
            tokens.append(LayerToken("fc", int(m.group(3))))
        else:
            tokens.append(LayerToken("pool"))
    node_level = True
    for tok in tokens:
        if tok.kind in ("conv", "dconv"):
            if not node_level:
                raise InvalidConfig(f"{spec!r}: convolution after pooling/dense layer")
            if tok.size < 1:
                raise InvalidConfig(f"{spec!r}: filter count must be positive")
        elif tok.kind == "pool":
            if not node_level:
                raise InvalidConfig(f"{spec!r}: pooling needs node-level input")
            node_level = False
        else:
            if tok.size < 1:
                raise InvalidConfig(f"{spec!r}: dense width must be positive")
            node_level = False
    return tokens


class StaticConv:
    def __init__(self, J: int, K: int, M: int, activation: Activation, bias: bool, rng):
        self.activation = activation
        self.params = LayerParams({"F": glorot_uniform(rng, (J, K, M), J * K, M)})
        if bias:
            self.params["bias"] = np.zeros(M)

    def forward(self, x, table):
        return graph_conv_forward(x, table, self.params["F"], self.activation, self.params.get("bias"))

    def backward(self, dy, cache):
        out = graph_conv_backward(dy, cache)
        grads = {"F": out[0]}
        if len(out) == 3:
            grads["bias"] = out[2]
        return grads, out[1]


class DynamicConv:
    def __init__(self, n_nodes, J, K, M, activation, fgn_hidden, fgn_activation, rng, constant_generator):
        fgn = FilterGeneratingNetwork.create(n_nodes, J, K, M, fgn_hidden, fgn_activation, rng)
        self.frozen: set[str] = set()
        if constant_generator:
            for i in range(fgn.n_dense):
                fgn.params[f"W{i}"] = np.zeros_like(fgn.params[f"W{i}"])
                self.frozen.add(f"W{i}")
            fgn.params[f"b{fgn.n_dense - 1}"] = glorot_uniform(rng, (J, K, M), J * K, M).ravel()
        self.layer = DgcfLayer(fgn, activation)
        self.params = fgn.params

    def forward(self, x, table):
        return dgcf_forward(self.layer, x, table)

    def backward(self, dy, cache):
        grads, dx = dgcf_backward(dy, self.layer, cache)
        for name in self.frozen:
            grads[name] = np.zeros_like(grads[name])
        return grads, dx


class Dense:
    def __init__(self, n_in: int, n_out: int, activation: Activation, rng):
        self.activation = activation
        self.params = LayerParams({"W": glorot_uniform(rng, (n_in, n_out), n_in, n_out), "b": np.zeros(n_out)})

    def forward(self, x, table):
        flat = x.reshape(x.shape[0], -1)
        y, cache = dense_forward(flat, self.params["W"], self.params["b"], self.activation)
        return y, (cache, x.shape)

    def backward(self, dy, cache):
        dcache, shape = cache
        dW, db, dx = dense_backward(dy, dcache)
        return {"W": dW, "b": db}, dx.reshape(shape)


class MeanPool:
    def __init__(self):
        self.params = LayerParams()

    def forward(self, x, table):
        return global_mean_pool(x), x.shape[-2]

    def backward(self, dy, n_nodes):
        return {}, global_mean_pool_backward(dy, n_nodes)


@dataclass
class GraphClassifier:
    """Stack of grammar layers plus a linear read-out, operating on batches ``(B, N, J)``."""

    tokens: list[LayerToken]
    table: NeighborhoodTable
    layers: list = field(default_factory=list)

    @classmethod
    def build(
        cls,
        layer_spec: str,
        table: NeighborhoodTable,
        in_channels: int,
        n_classes: int,
        rng: np.random.Generator,
        *,
        activation: Activation = Activation.RELU,
        fgn_hidden_layers=(200,),
        fgn_activation: Activation = Activation.RELU,
        conv_bias: bool = False,
        constant_generator: bool = False,
    ) -> GraphClassifier:
        tokens = parse_layer_spec(layer_spec)
        model = cls(tokens, table)
        N, K = table.n_nodes, table.k
        channels, width = in_channels, None  # width is set once the tensor is a vector
        for tok in tokens:
            if tok.kind == "conv":
                model.layers.append(StaticConv(channels, K, tok.size, activation, conv_bias, rng))
                channels = tok.size
            elif tok.kind == "dconv":
                model.layers.append(DynamicConv(N, channels, K, tok.size, activation, fgn_hidden_layers,
                                                fgn_activation, rng, constant_generator))
                channels = tok.size
            elif tok.kind == "pool":
                model.layers.append(MeanPool())
                width = channels
            else:
                n_in = width if width is not None else N * channels
                model.layers.append(Dense(n_in, tok.size, activation, rng))
                width = tok.size
        n_in = width if width is not None else N * channels
        model.layers.append(Dense(n_in, n_classes, Activation.IDENTITY, rng))
        return model

    # parameters are addressed as "<layer index>.<name>"
    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer.params[name]

    def state(self) -> LayerParams:
        return LayerParams({k: v.copy() for k, v in self.named_params()})

    def load_state(self, state: LayerParams) -> None:
        for full, arr in state.items():
            i, name = full.split(".", 1)
            target = self.layers[int(i)].params
            if name not in target or target[name].shape != arr.shape:
                raise ShapeMismatch(f"checkpoint entry {full} {arr.shape} does not fit the model")
            target[name] = arr.copy()

    def set_param(self, full: str, value: np.ndarray) -> None:
        i, name = full.split(".", 1)
        self.layers[int(i)].params[name] = value

    def forward(self, X: np.ndarray):
        h = np.asarray(X, dtype=np.float64)
        caches = []
        for layer in self.layers:
            h, c = layer.forward(h, self.table)
            caches.append(c)
        return h, caches

    def backward(self, dlogits: np.ndarray, caches) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        d = dlogits
        for i in reversed(range(len(self.layers))):
            g, d = self.layers[i].backward(d, caches[i])
            for name, arr in g.items():
                grads[f"{i}.{name}"] = arr
        return {k: grads[k] for k, _ in self.named_params()}

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    @property
    def first_conv(self):
        layer = self.layers[0]
        return layer if isinstance(layer, (StaticConv, DynamicConv)) else None

    @property
    def is_dynamic(self) -> bool:
        return isinstance(self.first_conv, DynamicConv)

    def generated_filters(self, X: np.ndarray) -> np.ndarray:
        """Filter bank of the first layer for every sample: ``(B, J, K, M)``."""
        conv = self.first_conv
        if conv is None:
            raise InvalidConfig("model has no convolution as first layer")
        X = np.asarray(X, dtype=np.float64)
        if isinstance(conv, DynamicConv):
            return fgn_forward(conv.layer.fgn, X)[0]
        return np.broadcast_to(conv.params["F"], (X.shape[0],) + conv.params["F"].shape)
