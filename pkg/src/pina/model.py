"""Desk-scale client model: frozen random-feature backbone, low-rank adapter, linear head.

The forward pass is

    x -> act(W0 x + b0) -> tanh((Wv + B A) .) -> head

with ``act`` either tanh or ReLU.

Only the head and the adapter factors live in the trainable
:class:`~pina.numeric.ParamVector`; ``W0`` and ``Wv`` are shared, frozen
and identical for every client and the server.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numeric import Layout, ParamVector, RngStream, check_same_layout

STAGE1_SEGMENTS = ("adapter.B0", "adapter.A0")

_ACTIVATIONS = {"tanh": np.tanh, "relu": lambda u: np.maximum(u, 0.0)}


@dataclass(frozen=True)
class FrozenBackbone:
    W0: np.ndarray  # h x d
    Wv: np.ndarray  # h x h
    b0: np.ndarray | None = None  # h, random-feature offset
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.b0 is None:
            object.__setattr__(self, "b0", np.zeros(self.W0.shape[0]))
        for arr in (self.W0, self.Wv, self.b0):
            arr.flags.writeable = False

    @property
    def hidden(self) -> int:
        return self.Wv.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W0.shape[1]

    @classmethod
    def sample(cls, d: int, h: int, stream: RngStream, bias_scale: float = 1.0,
               activation: str = "tanh") -> "FrozenBackbone":
        rng = stream.generator()
        W0 = rng.standard_normal((h, d)) / np.sqrt(d)
        Wv = rng.standard_normal((h, h)) / np.sqrt(h)
        b0 = rng.standard_normal(h) * bias_scale
        return cls(W0, Wv, b0, activation)

    def features(self, X: np.ndarray) -> np.ndarray:
        return _ACTIVATIONS[self.activation](X @ self.W0.T + self.b0)


@dataclass
class ClientDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    cluster: int = -1  # ground truth, simulation metadata only
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("features must be an (n, d) array matching the labels")
        if len(self.y) == 0:
            raise ValueError("client dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 50
    lr: float = 0.01

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def param_layout(hidden: int, n_classes: int, rank: int) -> Layout:
    if rank < 1:
        raise ValueError("adapter rank must be at least 1")
    sizes = [
        ("head.weight", n_classes * hidden),
        ("head.bias", n_classes),
        ("adapter.B0", hidden),
        ("adapter.A0", hidden),
    ]
    if rank > 1:
        sizes += [("adapter.B_rest", (rank - 1) * hidden), ("adapter.A_rest", (rank - 1) * hidden)]
    return Layout.from_sizes(sizes)


def layout_dims(layout: Layout) -> tuple[int, int, int]:
    """(hidden, n_classes, rank) recovered from a parameter layout."""
    hidden = layout.segment("adapter.B0").length
    n_classes = layout.segment("head.bias").length
    rank = 1
    if any(s.name == "adapter.B_rest" for s in layout):
        rank += layout.segment("adapter.B_rest").length // hidden
    return hidden, n_classes, rank


def init_params(backbone: FrozenBackbone, n_classes: int, rank: int, stream: RngStream,
                head_scale: float = 1.0) -> ParamVector:
    """Head ~ N(0, head_scale^2/h); adapter B = 0 and A ~ N(0, 1/h) so that BA = 0."""
    h = backbone.hidden
    layout = param_layout(h, n_classes, rank)
    rng = stream.generator()
    head = rng.standard_normal(n_classes * h) * head_scale / np.sqrt(h)
    A = rng.standard_normal(rank * h) / np.sqrt(h)
    values = np.zeros(layout.size)
    values[layout.index(["head.weight"])] = head
    values[layout.index(["adapter.A0"])] = A[:h]
    if rank > 1:
        values[layout.index(["adapter.A_rest"])] = A[h:]
    return ParamVector(values, layout)


def _unpack(params: ParamVector):
    h, L, r = layout_dims(params.layout)
    Wh = params.get("head.weight").reshape(L, h)
    bh = params.get("head.bias")
    Bt = params.get("adapter.B0").reshape(1, h)
    A = params.get("adapter.A0").reshape(1, h)
    if r > 1:
        Bt = np.vstack([Bt, params.get("adapter.B_rest").reshape(r - 1, h)])
        A = np.vstack([A, params.get("adapter.A_rest").reshape(r - 1, h)])
    return Wh, bh, Bt.T, A


def _check_dims(backbone: FrozenBackbone, params: ParamVector, X: np.ndarray) -> None:
    h, _, _ = layout_dims(params.layout)
    if h != backbone.hidden:
        raise ValueError(f"parameter hidden size {h} does not match backbone {backbone.hidden}")
    if X.shape[-1] != backbone.in_dim:
        raise ValueError(f"feature dim {X.shape[-1]} does not match backbone {backbone.in_dim}")


def logits(backbone: FrozenBackbone, params: ParamVector, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_dims(backbone, params, X)
    Wh, bh, B, A = _unpack(params)
    H1 = backbone.features(X)
    H2 = np.tanh(H1 @ (backbone.Wv + B @ A).T)
    return H2 @ Wh.T + bh


def cross_entropy(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row softmax cross-entropy, computed with a shifted log-sum-exp."""
    z = np.atleast_2d(z)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - z[np.arange(len(z)), y]


def forward_loss(backbone: FrozenBackbone, params: ParamVector, sample) -> float:
    x, y = sample
    z = logits(backbone, params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(max(cross_entropy(z, np.array([int(y)]))[0], 0.0))


def empirical_loss(backbone: FrozenBackbone, params: ParamVector, data: ClientDataset) -> float:
    """Mean per-sample cross-entropy over the client's training samples."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(cross_entropy(logits(backbone, params, data.X), data.y)))


def loss_and_grad(backbone: FrozenBackbone, params: ParamVector, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over (X, y) and its gradient with respect to every parameter."""
    _check_dims(backbone, params, X)
    h, L, r = layout_dims(params.layout)
    Wh, bh, B, A = _unpack(params)
    n = len(y)
    H1 = backbone.features(X)
    H2 = np.tanh(H1 @ (backbone.Wv + B @ A).T)
    Z = H2 @ Wh.T + bh
    loss = float(np.mean(cross_entropy(Z, y)))

    P = np.exp(Z - Z.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(n), y] -= 1.0
    dZ = P / n
    dWh = dZ.T @ H2
    dbh = dZ.sum(axis=0)
    dPre2 = (dZ @ Wh) * (1.0 - H2 * H2)
    dM = dPre2.T @ H1  # gradient of the effective h x h matrix
    dB = dM @ A.T  # h x r
    dA = B.T @ dM  # r x h

    grad = np.empty(params.layout.size)
    grad[params.layout.index(["head.weight"])] = dWh.ravel()
    grad[params.layout.index(["head.bias"])] = dbh
    grad[params.layout.index(["adapter.B0"])] = dB[:, 0]
    grad[params.layout.index(["adapter.A0"])] = dA[0]
    if r > 1:
        grad[params.layout.index(["adapter.B_rest"])] = dB[:, 1:].T.ravel()
        grad[params.layout.index(["adapter.A_rest"])] = dA[1:].ravel()
    return loss, grad


def accuracy(backbone: FrozenBackbone, params: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits(backbone, params, X), axis=1) == y))


def local_train(backbone: FrozenBackbone, params: ParamVector, trainable: Iterable[str],
                data: ClientDataset, cfg: TrainConfig, stream: RngStream) -> ParamVector:
    """Mini-batch SGD on the trainable segments; other coordinates are returned untouched."""
    idx = params.layout.index(trainable)
    if idx.size == 0:
        raise ValueError("trainable mask selects no parameters")
    rng = stream.generator()
    n = len(data)
    values = params.values.copy()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, grad = loss_and_grad(backbone, ParamVector(values, params.layout), data.X[batch], data.y[batch])
            values[idx] -= cfg.lr * grad[idx]
    return ParamVector(values, params.layout)


def model_delta(before: ParamVector, after: ParamVector) -> ParamVector:
    check_same_layout(before, after)
    return after - before
