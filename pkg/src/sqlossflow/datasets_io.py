"""Synthetic binary tasks, CSV ingestion and JSON checkpoints.

Every input goes through the same pipeline: append a constant bias
coordinate (value 1), then scale the augmented vector to unit norm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .net_core import Dataset, NetworkParams, NormalizedNet

KINDS = ("gaussian_blobs", "margin_separable", "xor_like")


@dataclass
class SyntheticSpec:
    n_samples: int
    raw_dim: int
    kind: str = "margin_separable"
    gap: float = 0.1
    seed: int = 0
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.raw_dim < 1:
            raise ValueError("raw_dim must be at least 1")
        if self.gap < 0:
            raise ValueError("gap must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


def preprocess(raw: np.ndarray) -> np.ndarray:
    """Append the bias coordinate and normalize each row to unit length."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    aug = np.hstack([raw, np.ones((raw.shape[0], 1))])
    return aug / np.linalg.norm(aug, axis=1, keepdims=True)


def make_dataset(raw: np.ndarray, y: np.ndarray, meta: dict | None = None) -> Dataset:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw.reshape(len(y), -1)
    X = preprocess(raw) if len(y) else np.zeros((0, raw.shape[1] + 1))
    return Dataset(X, y, raw=raw, meta=meta or {})


def _balanced_labels(rng, n):
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return y[rng.permutation(n)]


def _sample(spec: SyntheticSpec, rng):
    n, d = spec.n_samples, spec.raw_dim
    meta = {}
    if spec.kind == "gaussian_blobs":
        y = _balanced_labels(rng, n)
        sep = spec.gap if spec.gap > 0 else 1.0
        center = np.zeros(d)
        center[0] = sep
        raw = rng.standard_normal((n, d)) + y[:, None] * center
    elif spec.kind == "margin_separable":
        if spec.gap <= 0:
            raise ValueError("margin_separable needs gap > 0, otherwise the classes may touch")
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        y = _balanced_labels(rng, n)
        raw = rng.standard_normal((n, d))
        along = raw @ u
        raw += ((spec.gap + np.abs(along)) * y - along)[:, None] * u[None, :]
        sep = np.append(u, 0.0)
        meta = {"separator": sep.tolist(), "raw_margin": float(np.min(y * (raw @ u)))}
    else:
        if d < 2:
            raise ValueError("xor_like needs raw_dim >= 2")
        raw = rng.uniform(-1.0, 1.0, size=(n, d))
        raw[:, :2] = np.sign(raw[:, :2]) * (spec.gap + np.abs(raw[:, :2]))
        y = np.sign(raw[:, 0] * raw[:, 1])
        if spec.gap == 0:
            y[y == 0] = 1.0
    return raw, y, meta


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Sample a task and split it into (train, validation) by a seeded permutation."""
    rng = np.random.default_rng(spec.seed)
    raw, y, meta = _sample(spec, rng)
    n_val = int(round(spec.val_fraction * spec.n_samples))
    if spec.n_samples - n_val < 1:
        raise ValueError("validation split leaves no training data")
    perm = rng.permutation(spec.n_samples)
    tr, va = perm[n_val:], perm[:n_val]
    train = make_dataset(raw[tr], y[tr], dict(meta))
    if "separator" in meta:
        train.meta["margin"] = float(np.min(train.y * (train.X @ np.asarray(meta["separator"]))))
    return train, make_dataset(raw[va], y[va])


def save_csv(data: Dataset, path) -> None:
    """Write `data.raw` as ``label, features...`` rows."""
    if data.raw is None:
        raise ValueError("dataset has no raw features to save")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for lab, row in zip(data.y, data.raw):
            w.writerow([str(int(lab))] + [format(float(v), ".17g") for v in row])


def load_csv(path) -> Dataset:
    labels, rows = [], []
    width = None
    alphabet = set()
    with open(path, newline="") as fh:
        for lineno, line in enumerate(csv.reader(fh), start=1):
            if not line or all(not c.strip() for c in line):
                continue
            try:
                vals = [float(c) for c in line]
            except ValueError:
                raise ValueError(f"{path}: row {lineno} is not numeric: {line!r}") from None
            if len(vals) < 2:
                raise ValueError(f"{path}: row {lineno} needs a label and at least one feature")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ValueError(f"{path}: row {lineno} has {len(vals)} fields, expected {width}")
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}: row {lineno} has non-finite values")
            lab = vals[0]
            if lab not in (-1.0, 0.0, 1.0):
                raise ValueError(f"{path}: row {lineno} has label {lab!r}; expected -1/+1 or 0/1")
            alphabet.add(lab)
            labels.append(lab)
            rows.append(vals[1:])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if {0.0, -1.0} <= alphabet:
        raise ValueError(f"{path}: labels mix the -1/+1 and 0/1 conventions")
    y = np.array([-1.0 if v == 0.0 else v for v in labels])
    return make_dataset(np.array(rows), y)


def _layers_json(mats) -> str:
    parts = []
    for M in mats:
        entries = ", ".join(format(float(v), ".17g") for v in np.ravel(M))
        parts.append(f'{{"rows": {M.shape[0]}, "cols": {M.shape[1]}, "entries": [{entries}]}}')
    return "[\n    " + ",\n    ".join(parts) + "\n  ]"


def save_checkpoint(net, path) -> None:
    """Write a network as ``{mode, rho, layers: [{rows, cols, entries}]}`` JSON.

    Unnormalized weights are stored with mode ``"raw"``; row-mode networks
    also store their row scales so the weights can be rebuilt.
    """
    if isinstance(net, NetworkParams):
        mode, rho, mats, extra = "raw", net.rho, net.layers, ""
    elif isinstance(net, NormalizedNet):
        mode, rho, mats, extra = net.mode, net.rho, net.V, ""
        if net.mode == "row":
            scales = ", ".join(
                "[" + ", ".join(format(float(v), ".17g") for v in s) + "]" for s in net.row_scales
            )
            extra = f',\n  "row_scales": [{scales}]'
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    for M in mats:
        if not np.all(np.isfinite(M)):
            raise ValueError("refusing to checkpoint non-finite weights")
    text = (
        "{\n"
        f'  "mode": {json.dumps(mode)},\n'
        f'  "rho": {format(float(rho), ".17g")},\n'
        f'  "layers": {_layers_json(mats)}{extra}\n'
        "}\n"
    )
    Path(path).write_text(text)


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    mode = doc.get("mode")
    layers = []
    for k, L in enumerate(doc["layers"]):
        r, c, e = L["rows"], L["cols"], L["entries"]
        if len(e) != r * c:
            raise ValueError(f"layer {k + 1}: {len(e)} entries for shape {r}x{c}")
        layers.append(np.array(e, dtype=np.float64).reshape(r, c))
    for k in range(1, len(layers)):
        if layers[k].shape[1] != layers[k - 1].shape[0]:
            raise ValueError(
                f"layer {k + 1}: {layers[k].shape[1]} columns do not match "
                f"{layers[k - 1].shape[0]} rows of layer {k}"
            )
    if mode == "raw":
        return NetworkParams(layers)
    if mode in ("matrix", "row"):
        scales = None
        if mode == "row":
            scales = [np.array(s, dtype=np.float64) for s in doc["row_scales"]]
        return NormalizedNet(rho=doc["rho"], V=layers, mode=mode, row_scales=scales)
    raise ValueError(f"unknown checkpoint mode {mode!r}")
