"""Builders shared by the test modules."""

import numpy as np

from sqlossflow.net_core import Dataset, NormalizedNet, backprop_batch


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def unit_matrix(rng, rows, cols):
    W = rng.standard_normal((rows, cols))
    return W / np.linalg.norm(W)


def random_nnet(rng, widths, rho=1.0):
    return NormalizedNet(rho, [unit_matrix(rng, b, a) for a, b in zip(widths[:-1], widths[1:])])


def kink_gap(V, x):
    """Smallest |pre-activation| relative to the largest one, over all hidden layers."""
    A = np.asarray(x, dtype=float)
    gap = np.inf
    for W in V[:-1]:
        z = W @ A
        scale = np.max(np.abs(z))
        if scale == 0.0:
            return 0.0
        gap = min(gap, np.min(np.abs(z)) / scale)
        A = np.maximum(z, 0.0)
    return gap


def balanced_labels(n):
    return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)


def interpolating_net(rng, n, d, hidden):
    """A matrix-mode net with rho f_n = y_n for every sample, up to roundoff.

    The hidden layers are random; the last layer is the minimum-norm solution
    of ``H v = y`` on the penultimate features, so n must not exceed the last
    hidden width.
    """
    X = unit_rows(rng, n, d)
    y = balanced_labels(n)
    widths = [d] + list(hidden)
    V = [unit_matrix(rng, b, a) for a, b in zip(widths[:-1], widths[1:])]
    H = backprop_batch(V + [np.ones((1, widths[-1]))], X)[1][-1]
    v = np.linalg.lstsq(H, y, rcond=None)[0]
    rho = float(np.linalg.norm(v))
    return NormalizedNet(rho, V + [(v / rho)[None, :]]), Dataset(X, y)
