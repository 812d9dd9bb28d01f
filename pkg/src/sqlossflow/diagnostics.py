"""Measurements along trajectories and at solutions.

Covers metric traces (CSV), constraint residuals, projection/orthogonality
probes, Neural Collapse statistics for binary problems, and the cross-run
comparison of norm, margin and validation error.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .flow_dynamics import lagrange_nu
from .net_core import (
    Dataset,
    NetworkParams,
    NormalizedNet,
    backprop_batch,
    decompose,
    recompose,
    sample_constraint_norms,
)
from .numerics import frobenius_norm

BASE_COLUMNS = [
    "t",
    "rho",
    "nu",
    "loss",
    "train_accuracy",
    "mean_abs_f",
    "min_margin",
    "mean_margin",
    "max_margin",
    "max_interp_residual",
]
VAL_COLUMNS = ["val_loss", "val_accuracy"]


def format_float(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".17g")


@dataclass
class MetricTrace:
    columns: list
    rows: list = field(default_factory=list)
    converged: bool = False
    events: list = field(default_factory=list)
    final: object = None
    steps: int = 0

    @classmethod
    def for_depth(cls, depth: int) -> "MetricTrace":
        cols = list(BASE_COLUMNS)
        cols += [f"resid_agg_{k + 1}" for k in range(depth)]
        cols += [f"resid_sample_{k + 1}" for k in range(depth)]
        return cls(columns=cols + VAL_COLUMNS)

    def append(self, row: dict) -> None:
        if self.rows and row["t"] < self.rows[-1]["t"]:
            raise ValueError("trace rows must be time-ordered")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=float)

    @property
    def last(self) -> dict:
        return self.rows[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([format_float(r.get(c)) for c in self.columns])

    @classmethod
    def from_csv(cls, path) -> "MetricTrace":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            cols = next(rd)
            rows = [{c: (float(v) if v != "" else None) for c, v in zip(cols, line)} for line in rd]
        return cls(columns=cols, rows=rows)


def as_normalized(net) -> NormalizedNet:
    """Matrix-mode decomposition of whatever network representation is given."""
    if isinstance(net, NormalizedNet):
        return net if net.mode == "matrix" else decompose(recompose(net), "matrix")
    if isinstance(net, NetworkParams):
        return decompose(net, "matrix")
    raise TypeError(f"expected a network, got {type(net).__name__}")


@dataclass
class ConstraintResiduals:
    aggregate: list
    per_sample: list


def _constraint_parts(nnet: NormalizedNet, data: Dataset):
    f, inputs, deltas = backprop_batch(nnet.V, data.X)
    c = nnet.rho * f - data.y
    cf = float(c @ f)
    agg = []
    for Vk, a, d in zip(nnet.V, inputs, deltas):
        G = (c[:, None] * d).T @ a
        agg.append(frobenius_norm(G - cf * Vk))
    per = sample_constraint_norms(nnet, data.X)
    per = (per / (1.0 + np.abs(f))[:, None]).mean(axis=0)
    return f, agg, per.tolist()


def constraint_residuals(nnet, data: Dataset) -> ConstraintResiduals:
    """Per layer: ``||sum_n c_n (df_n/dV_k - V_k f_n)||_F`` and the mean normalized per-sample residual."""
    nnet = as_normalized(nnet)
    _, agg, per = _constraint_parts(nnet, data)
    return ConstraintResiduals(aggregate=agg, per_sample=per)


def _loss_acc(rho, f, y):
    # a blown-up run reports inf rather than warning
    with np.errstate(over="ignore"):
        r = rho * f - y
        loss = float(r @ r)
    # f == 0 counts as a miss
    return loss, float(np.mean(np.where(f > 0, 1.0, -1.0) == y))


def record(net, data: Dataset, *, t: float, lam: float = 0.0, val: Dataset | None = None) -> dict:
    nnet = as_normalized(net)
    rho = nnet.rho
    f, agg, per = _constraint_parts(nnet, data)
    m = data.y * f
    loss, acc = _loss_acc(rho, f, data.y)
    row = {
        "t": float(t),
        "rho": rho,
        "nu": lagrange_nu(rho, f, data.y),
        "loss": loss,
        "train_accuracy": acc,
        "mean_abs_f": float(np.mean(np.abs(f))),
        "min_margin": float(m.min()),
        "mean_margin": float(m.mean()),
        "max_margin": float(m.max()),
        "max_interp_residual": float(np.max(np.abs(rho * f - data.y))),
        "val_loss": None,
        "val_accuracy": None,
    }
    for k in range(nnet.depth):
        row[f"resid_agg_{k + 1}"] = agg[k]
        row[f"resid_sample_{k + 1}"] = per[k]
    if val is not None and len(val):
        fv = backprop_batch(nnet.V, val.X)[0]
        row["val_loss"], row["val_accuracy"] = _loss_acc(rho, fv, val.y)
    return row


def projection_orthogonality_probe(nnet) -> list:
    """Per layer: ``||V V^T V - V||_F`` and the distance of the smaller Gram matrix from ``I / n``."""
    out = []
    for Vk in nnet.V:
        r, c = Vk.shape
        G = Vk @ Vk.T if r <= c else Vk.T @ Vk
        n = min(r, c)
        out.append(
            {
                "shape": [r, c],
                "partial_isometry_defect": frobenius_norm(Vk @ Vk.T @ Vk - Vk),
                "scaled_orthogonality_defect": frobenius_norm(G - np.eye(n) / n),
            }
        )
    return out


@dataclass
class NCReport:
    nc1: float
    nc2_angle_dev: float
    nc2_norm_dev: float
    nc3: float
    nc4: float

    def to_dict(self) -> dict:
        return asdict(self)


def _cos(a, b) -> float:
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return 0.0
    return float(a @ b) / den


def penultimate_features(net, X: np.ndarray):
    """Inputs to the last layer of the normalized network, plus the last-layer row."""
    nnet = as_normalized(net)
    _, inputs, _ = backprop_batch(nnet.V, np.asarray(X, dtype=float))
    return inputs[-1], nnet.V[-1][0]


def nc_metrics(features, labels, classifier) -> NCReport:
    """Neural Collapse statistics for two classes (labels +1 / -1).

    NC1 is tr(S_within) / tr(S_between) with equal class weights; NC2 checks
    that the centered class means are antipodal with equal norms; NC3 is
    ``1 - cos`` between the classifier and the +1 class mean direction; NC4
    is the rate at which ``sign(w . h)`` disagrees with the nearest class mean.
    """
    H = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    w = np.asarray(classifier, dtype=float).reshape(-1)
    if H.ndim != 2 or H.shape[0] != y.shape[0] or H.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: features {H.shape}, labels {y.shape}, classifier {w.shape}")
    pos, neg = y == 1.0, y == -1.0
    if not pos.any() or not neg.any():
        raise ValueError("both classes (+1 and -1) must be present")
    mu_p, mu_n = H[pos].mean(axis=0), H[neg].mean(axis=0)
    mu_g = 0.5 * (mu_p + mu_n)
    means = np.where(pos[:, None], mu_p, mu_n)
    within = float(np.mean(np.sum((H - means) ** 2, axis=1)))
    Mp, Mn = mu_p - mu_g, mu_n - mu_g
    between = 0.5 * (float(Mp @ Mp) + float(Mn @ Mn))
    nc1 = within / between if between > 0 else math.inf
    nc2_angle = abs(_cos(Mp, Mn) + 1.0)
    norms = np.array([math.sqrt(float(Mp @ Mp)), math.sqrt(float(Mn @ Mn))])
    nc2_norm = float(np.max(np.abs(norms - norms.mean())) / norms.mean()) if norms.mean() > 0 else 0.0
    nc3 = 1.0 - _cos(w, Mp)
    net_dec = np.where(H @ w > 0, 1.0, -1.0)
    d_p = np.sum((H - mu_p) ** 2, axis=1)
    d_n = np.sum((H - mu_n) ** 2, axis=1)
    ncc_dec = np.where(d_p <= d_n, 1.0, -1.0)
    nc4 = float(np.mean(net_dec != ncc_dec))
    return NCReport(nc1, nc2_angle, nc2_norm, nc3, nc4)


@dataclass
class RunRecord:
    run_id: str
    lam: float
    init: float
    rho: float
    min_margin: float
    mean_margin: float
    max_interp_residual: float
    val_error: float | None = None
    error: str | None = None


def run_record(run_id: str, trace: MetricTrace, lam: float, init: float) -> RunRecord:
    r = trace.last
    va = r.get("val_accuracy")
    return RunRecord(
        run_id=run_id,
        lam=float(lam),
        init=float(init),
        rho=r["rho"],
        min_margin=r["min_margin"],
        mean_margin=r["mean_margin"],
        max_interp_residual=r["max_interp_residual"],
        val_error=None if va is None else 1.0 - va,
    )


@dataclass
class SweepReport:
    records: list
    near_interpolating: list = field(default_factory=list)
    max_duality_error: float | None = None
    duality_holds: bool | None = None
    rho_decreasing_in_lambda: bool | None = None
    margin_order_matches_inverse_rho: bool | None = None
    rho_val_error_spearman: float | None = None
    bound_order: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["records"] = [asdict(r) for r in self.records]
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def sweep_compare(
    records: Sequence[RunRecord],
    interp_tol: float = 1e-6,
    duality_tol: float = 1e-5,
    order_tol: float = 0.1,
) -> SweepReport:
    """Tabulate norm, margin and validation error across runs.

    Runs with ``max_interp_residual < interp_tol`` are checked for
    ``min_margin == 1/rho`` within `duality_tol`. The looser `order_tol`
    selects the runs whose min margins are compared against the ordering of
    ``1/rho``. `bound_order` lists run ids from smallest to largest rho,
    i.e. from tightest to loosest norm-based error bound.
    """
    ok = [r for r in records if r.error is None]
    rep = SweepReport(records=list(records), failed=[r.run_id for r in records if r.error])
    near = [r for r in ok if r.max_interp_residual < interp_tol and r.rho > 0]
    rep.near_interpolating = [r.run_id for r in near]
    if near:
        errs = [max(abs(r.min_margin - 1 / r.rho), abs(r.mean_margin - 1 / r.rho)) for r in near]
        rep.max_duality_error = float(max(errs))
        rep.duality_holds = rep.max_duality_error < duality_tol
    rep.bound_order = [r.run_id for r in sorted(ok, key=lambda r: r.rho)]

    groups = {}
    for r in ok:
        groups.setdefault(r.init, []).append(r)
    verdicts = []
    for grp in groups.values():
        lams = sorted({r.lam for r in grp})
        if len(lams) < 2 or len(lams) != len(grp):
            continue
        rhos = [r.rho for r in sorted(grp, key=lambda r: r.lam)]
        verdicts.append(all(b < a for a, b in zip(rhos, rhos[1:])))
    if verdicts:
        rep.rho_decreasing_in_lambda = all(verdicts)

    loose = [r for r in ok if r.max_interp_residual < order_tol and r.rho > 0]
    if len(loose) >= 2:
        by_rho = [r.run_id for r in sorted(loose, key=lambda r: 1 / r.rho)]
        by_margin = [r.run_id for r in sorted(loose, key=lambda r: r.min_margin)]
        rep.margin_order_matches_inverse_rho = by_rho == by_margin

    pairs = [(r.rho, r.val_error) for r in ok if r.val_error is not None]
    if len(pairs) >= 3:
        a, b = np.array(pairs).T
        if np.ptp(a) > 0 and np.ptp(b) > 0:
            rep.rho_val_error_spearman = float(stats.spearmanr(a, b)[0])
    return rep
