"""Minibatch heavy-ball SGD on the square loss, with BN emulated as weight normalization.

Three regimes are covered by `normalize` and `weight_decay`:
normalized hidden layers with weight decay, normalized hidden layers alone,
and neither. When normalizing, every layer but the last is projected back
onto its constraint set after each optimizer step; the last layer is left
free and carries the scale rho.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import MetricTrace, record
from .net_core import Dataset, NetworkParams, backprop_batch

NORMALIZE = ("none", "matrix", "row")


class TrainingDivergence(RuntimeError):
    def __init__(self, message, trace=None, state=None):
        super().__init__(message)
        self.trace = trace
        self.state = state


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 100
    weight_decay: float = 0.0
    normalize: str = "none"
    init_frobenius: float | list = 1.0
    seed: int = 0
    trace_stride: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.trace_stride < 1:
            raise ValueError("batch_size and trace_stride must be >= 1, epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.normalize not in NORMALIZE:
            raise ValueError(f"normalize must be one of {NORMALIZE}, got {self.normalize!r}")
        inits = self.init_frobenius if isinstance(self.init_frobenius, (list, tuple)) else [self.init_frobenius]
        if any(s <= 0 for s in inits):
            raise ValueError("init_frobenius must be positive")


@dataclass
class TrainState:
    net: NetworkParams
    velocity: list
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator | None = None


def init_network(widths, init_frobenius, seed: int) -> NetworkParams:
    """Gaussian weights rescaled so each ``||W_k||_F`` equals its target exactly.

    `widths` runs from the input dimension to the output (which must be 1).
    """
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError("widths needs an input and an output size")
    n_layers = len(widths) - 1
    scales = list(init_frobenius) if isinstance(init_frobenius, (list, tuple)) else [init_frobenius] * n_layers
    if len(scales) != n_layers:
        raise ValueError(f"{len(scales)} init norms for {n_layers} layers")
    if any(s <= 0 for s in scales):
        raise ValueError("init_frobenius must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for (n_in, n_out), s in zip(zip(widths[:-1], widths[1:]), scales):
        W = rng.standard_normal((n_out, n_in))
        layers.append(W * (s / np.linalg.norm(W)))
    return NetworkParams(layers)


def effective_lambda(cfg: TrainConfig, n_train: int) -> float:
    """Weight-decay coefficient seen by the full-data loss: one decay term per minibatch."""
    return cfg.weight_decay * math.ceil(n_train / cfg.batch_size)


def loss_and_grads(net: NetworkParams, X: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    """``sum_n (g(x_n) - y_n)^2 + wd sum_k ||W_k||^2`` and its gradient per layer."""
    g, inputs, deltas = backprop_batch(net.layers, X)
    r = g - y
    loss = float(r @ r) + weight_decay * sum(float(np.sum(W * W)) for W in net.layers)
    grads = [
        2.0 * (r[:, None] * d).T @ a + 2.0 * weight_decay * W
        for W, a, d in zip(net.layers, inputs, deltas)
    ]
    return loss, grads


def project_hidden(layers: list, mode: str) -> list:
    if mode == "none":
        return layers
    out = []
    for k, W in enumerate(layers):
        if k == len(layers) - 1:
            out.append(W)
        elif mode == "matrix":
            out.append(W / np.linalg.norm(W))
        else:
            rn = np.linalg.norm(W, axis=1)
            if np.any(rn == 0):
                raise TrainingDivergence(f"layer {k + 1} has a zero row; cannot row-normalize")
            out.append(W / rn[:, None])
    return out


def sgd_step(state: TrainState, batch: Dataset, cfg: TrainConfig) -> TrainState:
    if len(batch) == 0:
        raise ValueError("empty batch")
    # overflow is detected below and reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        _, grads = loss_and_grads(state.net, batch.X, batch.y, cfg.weight_decay)
    if not all(np.all(np.isfinite(G)) for G in grads):
        raise TrainingDivergence(f"non-finite gradient at step {state.step}", state=state)
    with np.errstate(over="ignore", invalid="ignore"):
        vel = [cfg.momentum * v + G for v, G in zip(state.velocity, grads)]
        layers = [W - cfg.lr * v for W, v in zip(state.net.layers, vel)]
    if not all(np.all(np.isfinite(W)) for W in layers):
        raise TrainingDivergence(f"non-finite weights after step {state.step}", state=state)
    layers = project_hidden(layers, cfg.normalize)
    return TrainState(NetworkParams(layers), vel, state.epoch, state.step + 1, state.rng)


def train(data: Dataset, cfg: TrainConfig, hidden, val: Dataset | None = None):
    """Run ``epochs * ceil(N / batch_size)`` steps; returns (final state, trace).

    The trace has one row every `trace_stride` steps plus the first and last
    step; its ``t`` column counts optimizer steps.
    """
    widths = [data.dim] + list(hidden) + [1]
    net = init_network(widths, cfg.init_frobenius, cfg.seed)
    state = TrainState(net, [np.zeros_like(W) for W in net.layers], 0, 0, np.random.default_rng([cfg.seed, 1]))
    trace = MetricTrace.for_depth(net.depth)
    lam = effective_lambda(cfg, len(data))
    trace.append(record(state.net, data, t=0, lam=lam, val=val))
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = state.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            try:
                state = sgd_step(state, Dataset(data.X[idx], data.y[idx]), cfg)
            except TrainingDivergence as exc:
                exc.trace = trace
                raise
            if state.step % cfg.trace_stride == 0:
                row = record(state.net, data, t=state.step, lam=lam, val=val)
                if not math.isfinite(row["loss"]):
                    raise TrainingDivergence(f"non-finite training loss at step {state.step}", trace, state)
                trace.append(row)
        state.epoch = epoch + 1
    if trace.last["t"] != state.step:
        trace.append(record(state.net, data, t=state.step, lam=lam, val=val))
    trace.final = state
    trace.steps = state.step
    return state, trace
