"""Dense, pooling, loss and static graph-convolution layers with hand-written gradients.

All arrays are float64. Layer functions accept any number of leading batch
dimensions: node-level tensors are ``(..., N, C)``, vectors are ``(..., D)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import EmptyInput, InvalidLabel, ParseError, ShapeMismatch
from .graph import NeighborhoodTable


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        if self is Activation.TANH:
            return np.tanh(z)
        return z

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Derivative evaluated at the pre-activation ``z``."""
        if self is Activation.RELU:
            return (z > 0).astype(z.dtype)
        if self is Activation.TANH:
            return 1.0 - np.tanh(z) ** 2
        return np.ones_like(z)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --- parameters -------------------------------------------------------------


class LayerParams:
    """Ordered collection of named parameter arrays with a flat-vector view."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def get(self, name: str, default=None):
        return self._arrays.get(name, default)

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def keys(self):
        return self._arrays.keys()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeMismatch(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        pos = 0
        for name, arr in self._arrays.items():
            self._arrays[name] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size

    def copy(self) -> LayerParams:
        return LayerParams({k: v.copy() for k, v in self._arrays.items()})

    def to_json(self) -> dict:
        return {
            "layers": [
                {"name": k, "shape": list(v.shape), "values": [repr(float(x)) for x in v.ravel()]}
                for k, v in self._arrays.items()
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> LayerParams:
        try:
            return cls({
                e["name"]: np.array([float(x) for x in e["values"]]).reshape(e["shape"])
                for e in obj["layers"]
            })
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed checkpoint: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> LayerParams:
        return cls.from_json(json.loads(Path(path).read_text()))


# --- graph convolution --------------------------------------------------------


@dataclass
class ConvCache:
    gathered: np.ndarray  # (..., N, K*J), k-outer j-inner
    filters: np.ndarray  # (K*J, M) or (..., K*J, M)
    pre: np.ndarray  # (..., N, M)
    table: NeighborhoodTable
    activation: Activation
    batched_filters: bool
    x_shape: tuple[int, ...]
    has_bias: bool


def _filters_to_matrix(F: np.ndarray) -> np.ndarray:
    # (..., J, K, M) -> (..., K*J, M) so that row index = k*J + j
    J, K, M = F.shape[-3:]
    return np.swapaxes(F, -3, -2).reshape(F.shape[:-3] + (K * J, M))


def _matrix_to_filters(mat: np.ndarray, J: int, K: int) -> np.ndarray:
    M = mat.shape[-1]
    return np.swapaxes(mat.reshape(mat.shape[:-2] + (K, J, M)), -3, -2)


def scatter_matrix(table: NeighborhoodTable) -> np.ndarray:
    """0/1 matrix ``S`` (N, N*K) with ``S[v, n*K+k] = 1`` iff ``s(n, k) = v``."""
    cached = getattr(table, "_scatter", None)
    if cached is None:
        n, k = table.table.shape
        cached = np.zeros((n, n * k))
        cached[table.table.ravel(), np.arange(n * k)] = 1.0
        object.__setattr__(table, "_scatter", cached)
    return cached


def graph_conv_forward(
    X: np.ndarray,
    table: NeighborhoodTable,
    F: np.ndarray,
    activation: Activation = Activation.RELU,
    bias: np.ndarray | None = None,
) -> tuple[np.ndarray, ConvCache]:
    """``Y[n, m] = f(sum_k sum_j F[j, k, m] * X[s(n, k), j] (+ bias[m]))``.

    ``F`` is either one filter bank ``(J, K, M)`` shared by the whole batch or
    one bank per sample with the same leading dimensions as ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    activation = Activation(activation)
    if F.ndim < 3:
        raise ShapeMismatch(f"filter bank must be (J, K, M), got shape {F.shape}")
    J, K, M = F.shape[-3:]
    if X.ndim < 2 or X.shape[-1] != J:
        raise ShapeMismatch(f"X has shape {X.shape}, filters expect {J} input channels")
    if X.shape[-2] != table.n_nodes:
        raise ShapeMismatch(f"X has {X.shape[-2]} nodes, table has {table.n_nodes}")
    if table.k != K:
        raise ShapeMismatch(f"table k={table.k} but filter size K={K}")
    batched = F.ndim > 3
    if batched and F.shape[:-3] != X.shape[:-2]:
        raise ShapeMismatch(f"per-sample filters {F.shape} do not match batch of X {X.shape}")

    N = table.n_nodes
    nbr = X[..., table.table, :]  # (..., N, K, J)
    fb = F[..., None, :, :, :] if batched else F  # broadcast over nodes
    # Accumulate k-outer, j-inner with elementwise ops only, so each output
    # entry is summed in the same order whatever its row (no BLAS blocking).
    pre = np.zeros(X.shape[:-2] + (N, M))
    for k in range(K):
        for j in range(J):
            pre += nbr[..., k, j, None] * fb[..., j, k, :]
    gathered = nbr.reshape(X.shape[:-2] + (N, K * J))
    fmat = _filters_to_matrix(F)
    if bias is not None:
        pre = pre + bias
    cache = ConvCache(gathered, fmat, pre, table, activation, batched, X.shape, bias is not None)
    return activation(pre), cache


def graph_conv_backward(dY: np.ndarray, cache: ConvCache):
    """Return ``(dF, dX)``, or ``(dF, dX, dbias)`` when the forward used a bias.

    ``dF`` is summed over the batch for a shared bank and per-sample otherwise.
    ``dX`` scatter-adds every occurrence of a node in the table, padded slots included.
    """
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != cache.pre.shape:
        raise ShapeMismatch(f"dY has shape {dY.shape}, expected {cache.pre.shape}")
    g = dY * cache.activation.derivative(cache.pre)
    J = cache.x_shape[-1]
    K = cache.table.k
    N = cache.table.n_nodes
    if cache.batched_filters:
        dfmat = np.swapaxes(cache.gathered, -1, -2) @ g
    else:
        kj = cache.gathered.shape[-1]
        dfmat = cache.gathered.reshape(-1, kj).T @ g.reshape(-1, g.shape[-1])
    dF = _matrix_to_filters(dfmat, J, K)

    dgathered = g @ np.swapaxes(cache.filters, -1, -2)  # (..., N, K*J)
    dgathered = dgathered.reshape(cache.x_shape[:-2] + (N * K, J))
    dX = scatter_matrix(cache.table) @ dgathered
    if cache.has_bias:
        db = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return dF, dX, db
    return dF, dX


# --- dense ------------------------------------------------------------------


@dataclass
class DenseCache:
    x: np.ndarray
    W: np.ndarray
    pre: np.ndarray
    activation: Activation


def dense_forward(x, W, b, activation: Activation = Activation.RELU) -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    activation = Activation(activation)
    pre = x @ W + b
    return activation(pre), DenseCache(x, W, pre, activation)


def dense_backward(dy, cache: DenseCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.pre.shape:
        raise ShapeMismatch(f"dy has shape {dy.shape}, expected {cache.pre.shape}")
    g = dy * cache.activation.derivative(cache.pre)
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dW = x2.T @ g2
    db = g2.sum(axis=0)
    dx = g @ cache.W.T
    return dW, db, dx


# --- pooling and loss -------------------------------------------------------


def global_mean_pool(Y: np.ndarray) -> np.ndarray:
    """Mean over the node axis: ``(..., N, M) -> (..., M)``."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim < 2 or Y.shape[-2] == 0:
        raise EmptyInput(f"cannot pool over shape {Y.shape}")
    return Y.mean(axis=-2)


def global_mean_pool_backward(dout: np.ndarray, n_nodes: int) -> np.ndarray:
    dout = np.asarray(dout, dtype=np.float64)
    return np.repeat((dout / n_nodes)[..., None, :], n_nodes, axis=-2)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``label`` under ``softmax(logits)``.

    With a batch ``(B, C)`` of logits and ``B`` labels the loss is the batch
    mean and the gradient is scaled accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    C = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise InvalidLabel(f"label(s) {labels.tolist()} outside [0, {C})")
    z = np.atleast_2d(logits)
    if z.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{z.shape[0]} logit rows for {labels.shape[0]} labels")
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(z.shape[0])
    losses = logsum - z[rows, labels]
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    B = z.shape[0]
    if logits.ndim == 1:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / B
