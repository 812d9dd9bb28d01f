"""Bias-free deep ReLU networks and their (rho, V) normalization.

A network is a list of weight matrices ``W_1 ... W_L`` applied as
``W_L relu(W_{L-1} ... relu(W_1 x))``. The last layer has one row, so the
network returns a scalar. ``decompose`` splits the weights into a scale
``rho`` and unit-norm matrices ``V_k``; by positive homogeneity of the ReLU
the network output equals ``rho * f(x)`` where ``f`` runs on the ``V_k``.

Most functions have a single-input form (used by tests and the oracle
checks) and a batched form over the rows of an ``(N, d)`` input matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import TAU_NORM, as_matrix, as_vector, frobenius_norm

NORM_MODES = ("matrix", "row")


def _check_chain(layers: Sequence[np.ndarray]) -> None:
    if len(layers) < 1:
        raise ValueError("a network needs at least one layer")
    for k in range(1, len(layers)):
        if layers[k].shape[1] != layers[k - 1].shape[0]:
            raise ValueError(
                f"layer {k + 1} has {layers[k].shape[1]} columns but layer {k} "
                f"has {layers[k - 1].shape[0]} rows"
            )
    if layers[-1].shape[0] != 1:
        raise ValueError(f"output layer must have one row, got shape {layers[-1].shape}")


@dataclass
class NetworkParams:
    """Unnormalized weights ``W_1 ... W_L`` (layer k has shape ``(width_k, width_{k-1})``)."""

    layers: list

    def __post_init__(self):
        self.layers = [as_matrix(W, f"layer {k + 1}") for k, W in enumerate(self.layers)]
        _check_chain(self.layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def rho(self) -> float:
        return float(np.prod([frobenius_norm(W) for W in self.layers]))

    def copy(self) -> "NetworkParams":
        return NetworkParams([W.copy() for W in self.layers])


@dataclass
class NormalizedNet:
    """Scale ``rho`` plus normalized matrices ``V``.

    In ``matrix`` mode every ``V_k`` has unit Frobenius norm. In ``row`` mode
    every row of every ``V_k`` has unit Euclidean norm and ``row_scales``
    keeps the original row norms, so the unnormalized weights can be rebuilt;
    ``rho`` is then the product of Frobenius norms, kept for reporting.
    """

    rho: float
    V: list
    mode: str = "matrix"
    row_scales: list | None = None

    def __post_init__(self):
        if self.mode not in NORM_MODES:
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        self.rho = float(self.rho)
        if not np.isfinite(self.rho) or self.rho < 0:
            raise ValueError(f"rho must be finite and non-negative, got {self.rho!r}")
        self.V = [as_matrix(V, f"V_{k + 1}") for k, V in enumerate(self.V)]
        _check_chain(self.V)
        for k, V in enumerate(self.V):
            if self.mode == "matrix":
                nv = frobenius_norm(V)
                if abs(nv - 1.0) > TAU_NORM:
                    raise ValueError(f"V_{k + 1} has Frobenius norm {nv!r}, expected 1")
            else:
                rn = np.linalg.norm(V, axis=1)
                if np.any(np.abs(rn - 1.0) > TAU_NORM):
                    raise ValueError(f"V_{k + 1} has rows that are not unit norm")

    @property
    def depth(self) -> int:
        return len(self.V)

    @property
    def input_dim(self) -> int:
        return self.V[0].shape[1]

    @property
    def widths(self) -> list:
        return [self.V[0].shape[1]] + [V.shape[0] for V in self.V]


@dataclass
class ActivationPattern:
    """Diagonals of ``D_1(x) ... D_{L-1}(x)``; entry is 1 where the unit is on."""

    diag: list


@dataclass
class Dataset:
    """Unit-norm inputs (bias coordinate already appended) with labels in {-1, +1}.

    `raw` holds the features before the bias/normalization pipeline when
    known, so the dataset can be written back out as CSV. `meta` carries
    generator facts such as a known separating direction.
    """

    X: np.ndarray
    y: np.ndarray
    raw: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"inputs must be a 2-D array, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(f"{self.X.shape[0]} inputs but labels have shape {self.y.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("inputs contain non-finite values")
        if np.any((self.y != 1.0) & (self.y != -1.0)):
            raise ValueError("labels must be -1 or +1")
        norms = np.linalg.norm(self.X, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > TAU_NORM)
        if bad.size:
            raise ValueError(f"input {bad[0]} has norm {norms[bad[0]]!r}, expected 1")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _check_input(layers, x) -> np.ndarray:
    x = as_vector(x, "x")
    if x.shape[0] != layers[0].shape[1]:
        raise ValueError(f"input has dimension {x.shape[0]}, network expects {layers[0].shape[1]}")
    return x


def _forward_layers(layers: Sequence[np.ndarray], X: np.ndarray):
    """Batched pass; returns (output per row, pre-activations of hidden layers, layer inputs)."""
    A = X
    inputs, pre = [], []
    for W in layers[:-1]:
        inputs.append(A)
        Z = A @ W.T
        pre.append(Z)
        A = relu(Z)
    inputs.append(A)
    out = (A @ layers[-1].T)[:, 0]
    return out, pre, inputs


def forward(net: NetworkParams, x) -> float:
    x = _check_input(net.layers, x)
    return float(_forward_layers(net.layers, x[None, :])[0][0])


def forward_batch(net: NetworkParams, X: np.ndarray) -> np.ndarray:
    return _forward_layers(net.layers, np.asarray(X, dtype=np.float64))[0]


def normalized_forward(nnet: NormalizedNet, x) -> float:
    """f(x): the output of the network built from the normalized matrices."""
    x = _check_input(nnet.V, x)
    return float(_forward_layers(nnet.V, x[None, :])[0][0])


def normalized_forward_batch(nnet: NormalizedNet, X: np.ndarray) -> np.ndarray:
    return _forward_layers(nnet.V, np.asarray(X, dtype=np.float64))[0]


def decompose(net: NetworkParams, mode: str = "matrix") -> NormalizedNet:
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    V, scales = [], []
    rho = 1.0
    for k, W in enumerate(net.layers):
        nw = frobenius_norm(W)
        if nw == 0.0:
            raise ValueError(f"layer {k + 1} is the zero matrix and cannot be normalized")
        rho *= nw
        if mode == "matrix":
            V.append(W / nw)
        else:
            rn = np.linalg.norm(W, axis=1)
            zero = np.flatnonzero(rn == 0.0)
            if zero.size:
                raise ValueError(f"layer {k + 1} has a zero row ({zero[0]}) and cannot be row-normalized")
            V.append(W / rn[:, None])
            scales.append(rn)
    return NormalizedNet(rho=rho, V=V, mode=mode, row_scales=scales if mode == "row" else None)


def recompose(nnet: NormalizedNet) -> NetworkParams:
    """Rebuild unnormalized weights; matrix mode puts all of rho on the last layer."""
    if nnet.mode == "row":
        if nnet.row_scales is None:
            raise ValueError("row-mode network carries no row scales")
        return NetworkParams([V * s[:, None] for V, s in zip(nnet.V, nnet.row_scales)])
    layers = [V.copy() for V in nnet.V]
    layers[-1] = nnet.rho * layers[-1]
    return NetworkParams(layers)


def activation_pattern(nnet: NormalizedNet, x) -> ActivationPattern:
    x = _check_input(nnet.V, x)
    _, pre, _ = _forward_layers(nnet.V, x[None, :])
    return ActivationPattern([(Z[0] > 0).astype(np.float64) for Z in pre])


def forward_product(nnet: NormalizedNet, pattern: ActivationPattern, x) -> float:
    """f(x) as the plain product ``V_L D_{L-1} V_{L-1} ... D_1 V_1 x``."""
    x = _check_input(nnet.V, x)
    if len(pattern.diag) != nnet.depth - 1:
        raise ValueError(f"pattern has {len(pattern.diag)} layers, network needs {nnet.depth - 1}")
    M = nnet.V[0]
    for D, V in zip(pattern.diag, nnet.V[1:]):
        M = V @ (D[:, None] * M)
    return float((M @ x)[0])


def backprop_batch(V: Sequence[np.ndarray], X: np.ndarray):
    """Per-sample f values, layer inputs ``a_{k-1}`` and output sensitivities ``delta_k``.

    For sample n, ``df_n/dV_k = outer(deltas[k][n], inputs[k][n])``.
    """
    f, pre, inputs = _forward_layers(V, X)
    deltas = [None] * len(V)
    d = np.ones((X.shape[0], 1))
    deltas[-1] = d
    for k in range(len(V) - 1, 0, -1):
        d = (d @ V[k]) * (pre[k - 1] > 0)
        deltas[k - 1] = d
    return f, inputs, deltas


def grad_f_V(nnet: NormalizedNet, x) -> list:
    x = _check_input(nnet.V, x)
    _, inputs, deltas = backprop_batch(nnet.V, x[None, :])
    return [np.outer(d[0], a[0]) for d, a in zip(deltas, inputs)]


def margins(nnet: NormalizedNet, data: Dataset) -> np.ndarray:
    return data.y * normalized_forward_batch(nnet, data.X)


def euler_characterization_check(nnet: NormalizedNet, x) -> list:
    """Per layer, ``||V_k f(x) - df/dV_k(x)||_F``."""
    x = _check_input(nnet.V, x)
    f = normalized_forward(nnet, x)
    grads = grad_f_V(nnet, x)
    return [frobenius_norm(V * f - G) for V, G in zip(nnet.V, grads)]


def sample_constraint_norms(nnet: NormalizedNet, X: np.ndarray) -> np.ndarray:
    """``||V_k f_n - df_n/dV_k||_F`` for every sample (rows) and layer (columns)."""
    f, inputs, deltas = backprop_batch(nnet.V, X)
    out = np.empty((X.shape[0], nnet.depth))
    for k, (V, a, d) in enumerate(zip(nnet.V, inputs, deltas)):
        R = f[:, None, None] * V[None, :, :] - d[:, :, None] * a[:, None, :]
        out[:, k] = np.sqrt(np.sum(R * R, axis=(1, 2)))
    return out
