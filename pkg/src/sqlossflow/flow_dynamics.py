"""Gradient flow of the normalized square loss on ``{rho} x (unit spheres)``.

State is ``(rho, V_1 ... V_L)`` with every ``V_k`` on the unit Frobenius
sphere. With ``c_n = rho f_n - y_n`` the vector field is

    rho_dot = -2 (rho sum f_n^2 - sum f_n y_n) - 2 lam rho
    V_k_dot = 2 rho sum_n c_n (V_k f_n - df_n/dV_k)

which is the negative gradient of ``sum_n c_n^2 + lam rho^2`` with the unit
norm constraint enforced by the multiplier
``nu = -sum_n (rho^2 f_n^2 - rho y_n f_n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .net_core import (
    Dataset,
    NormalizedNet,
    backprop_batch,
    normalized_forward_batch,
    sample_constraint_norms,
)
from .numerics import frobenius_norm, tangent_project

INTEGRATORS = ("euler_project", "rk4_project")


class FlowDivergence(RuntimeError):
    """Raised when the trajectory produces a non-finite value; `trace` holds the rows so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class FlowConfig:
    lam: float = 0.0
    dt: float = 1e-2
    integrator: str = "euler_project"
    t_max: float = 100.0
    tol_equilibrium: float = 1e-7
    tol_interpolation: float = 1e-4
    trace_stride: int = 100

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.tol_equilibrium <= 0 or self.tol_interpolation <= 0:
            raise ValueError("tolerances must be positive")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")
        if self.trace_stride < 1:
            raise ValueError("trace_stride must be >= 1")


@dataclass
class FlowState:
    t: float
    net: NormalizedNet
    f: np.ndarray
    nu: float
    loss: float

    @property
    def rho(self) -> float:
        return self.net.rho


def flow_state(nnet: NormalizedNet, data: Dataset, t: float = 0.0) -> FlowState:
    if nnet.mode != "matrix":
        raise ValueError("the flow runs on matrix-normalized networks")
    f = normalized_forward_batch(nnet, data.X)
    r = nnet.rho * f - data.y
    return FlowState(t=t, net=nnet, f=f, nu=lagrange_nu(nnet.rho, f, data.y), loss=float(r @ r))


def lagrange_nu(rho: float, f, y) -> float:
    f, y = np.asarray(f, dtype=float), np.asarray(y, dtype=float)
    if f.shape != y.shape:
        raise ValueError(f"f has shape {f.shape} but y has shape {y.shape}")
    return float(-np.sum(rho * rho * f * f - rho * y * f))


def rho_dot(rho: float, f, y, lam: float) -> float:
    f, y = np.asarray(f, dtype=float), np.asarray(y, dtype=float)
    if f.shape != y.shape:
        raise ValueError(f"f has shape {f.shape} but y has shape {y.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return float(-2.0 * (rho * np.sum(f * f) - np.sum(f * y)) - 2.0 * lam * rho)


def rho_equilibrium(f, y, lam: float) -> float:
    f, y = np.asarray(f, dtype=float), np.asarray(y, dtype=float)
    den = lam + float(np.sum(f * f))
    if den == 0.0:
        raise ZeroDivisionError("rho_eq undefined: lambda = 0 and every f_n = 0")
    return float(np.sum(y * f)) / den


def objective(state: FlowState, lam: float) -> float:
    """Square loss plus weight decay, i.e. the Lagrangian restricted to the spheres."""
    return state.loss + lam * state.rho**2


def lagrangian(state: FlowState, lam: float, nu: float | None = None) -> float:
    nu = state.nu if nu is None else nu
    return objective(state, lam) + nu * sum(frobenius_norm(V) ** 2 for V in state.net.V)


def _field(rho: float, V: Sequence[np.ndarray], data: Dataset, lam: float):
    f, inputs, deltas = backprop_batch(V, data.X)
    c = rho * f - data.y
    rd = rho_dot(rho, f, data.y, lam)
    cf = float(c @ f)
    vds = []
    for Vk, a, d in zip(V, inputs, deltas):
        G = (c[:, None] * d).T @ a
        D = 2.0 * rho * (cf * Vk - G)
        # stage points of rk4 sit slightly off the sphere
        vds.append(tangent_project(D, Vk / frobenius_norm(Vk)))
    return rd, vds


def v_dot(state: FlowState, data: Dataset) -> list:
    # lambda only enters rho_dot
    return _field(state.rho, state.net.V, data, 0.0)[1]


def flow_field(state: FlowState, data: Dataset, lam: float):
    """(rho_dot, [V_k_dot]) at `state`; rho_dot is clipped to 0 on the rho = 0 boundary."""
    rd, vds = _field(state.rho, state.net.V, data, lam)
    if state.rho == 0.0 and rd < 0.0:
        rd = 0.0
    return rd, vds


def field_norm(rd: float, vds) -> float:
    return math.sqrt(rd * rd + sum(float(np.sum(D * D)) for D in vds))


def _advance(state, data, cfg, rd, vds, events):
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        rho1, V1 = _increment(state, data, cfg, rd, vds)
    if not math.isfinite(rho1) or not all(np.all(np.isfinite(Vk)) for Vk in V1):
        raise FlowDivergence(f"non-finite state at t={state.t + cfg.dt!r}")
    if rho1 < 0.0:
        if events is not None:
            events.append({"t": state.t + cfg.dt, "event": "rho_clamped", "value": rho1})
        rho1 = 0.0
    V1 = [Vk / frobenius_norm(Vk) for Vk in V1]
    return flow_state(NormalizedNet(rho1, V1), data, state.t + cfg.dt)


def _increment(state, data, cfg, rd, vds):
    rho, V, dt = state.rho, state.net.V, cfg.dt
    if cfg.integrator == "euler_project":
        rho1 = rho + dt * rd
        V1 = [Vk + dt * D for Vk, D in zip(V, vds)]
    else:
        def shift(h, kr, kv):
            return rho + h * kr, [Vk + h * D for Vk, D in zip(V, kv)]

        r2, v2 = _field(*shift(dt / 2, rd, vds), data, cfg.lam)
        r3, v3 = _field(*shift(dt / 2, r2, v2), data, cfg.lam)
        r4, v4 = _field(*shift(dt, r3, v3), data, cfg.lam)
        rho1 = rho + dt / 6 * (rd + 2 * r2 + 2 * r3 + r4)
        V1 = [
            Vk + dt / 6 * (a + 2 * b + 2 * c + e)
            for Vk, a, b, c, e in zip(V, vds, v2, v3, v4)
        ]
    return rho1, V1


def step(state: FlowState, data: Dataset, cfg: FlowConfig, events: list | None = None) -> FlowState:
    """Advance by one `cfg.dt`, then re-project every V_k onto its sphere."""
    rd, vds = flow_field(state, data, cfg.lam)
    return _advance(state, data, cfg, rd, vds, events)


def integrate(state0: FlowState, data: Dataset, cfg: FlowConfig, val: Dataset | None = None):
    """Run the flow until the field norm drops below `tol_equilibrium` or `t_max` passes.

    Returns a `MetricTrace`; its `final` attribute holds the last state.
    """
    from .diagnostics import MetricTrace, record

    trace = MetricTrace.for_depth(state0.net.depth)
    state = state0
    trace.append(record(state.net, data, t=state.t, lam=cfg.lam, val=val))
    n_max = int(math.ceil(cfg.t_max / cfg.dt * (1.0 - 1e-12)))
    n = 0
    last_recorded = 0
    while True:
        rd, vds = flow_field(state, data, cfg.lam)
        if field_norm(rd, vds) < cfg.tol_equilibrium:
            trace.converged = True
            break
        if n >= n_max:
            break
        try:
            state = _advance(state, data, cfg, rd, vds, trace.events)
        except FlowDivergence as exc:
            exc.trace = trace
            raise
        n += 1
        if n % cfg.trace_stride == 0:
            trace.append(record(state.net, data, t=state.t, lam=cfg.lam, val=val))
            last_recorded = n
    if last_recorded != n:
        trace.append(record(state.net, data, t=state.t, lam=cfg.lam, val=val))
    trace.final = state
    trace.steps = n
    return trace


def frozen_profile(nnet: NormalizedNet, data: Dataset) -> Callable[[float], np.ndarray]:
    """f-values as a function of rho with the V_k held fixed (constant in rho)."""
    f = normalized_forward_batch(nnet, data.X)
    return lambda rho: f


def first_critical_rho(
    f_profile: Callable[[float], np.ndarray],
    y,
    lam: float,
    rho_grid: Sequence[float],
    xtol: float = 1e-12,
) -> float | None:
    """Smallest rho where ``sum y f - rho (lam + sum f^2)`` changes sign along the grid.

    A sign change needs nonzero balances of opposite sign on either side;
    grid points where the balance is exactly zero between them are returned
    as is, otherwise the bracketing interval is refined by bisection.
    Returns None when the balance never changes sign on the grid.
    """
    grid = np.asarray(rho_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("rho_grid must be a strictly increasing sequence of at least two values")
    y = np.asarray(y, dtype=float)

    def balance(rho):
        f = np.asarray(f_profile(rho), dtype=float)
        return float(y @ f) - rho * (lam + float(f @ f))

    last = None  # index and value of the last nonzero balance
    for j, rho in enumerate(grid):
        b = balance(rho)
        if b == 0.0:
            continue
        if last is not None and (last[1] > 0) != (b > 0):
            i, b_lo = last
            if j > i + 1:
                return float(grid[i + 1])
            lo, hi = grid[i], rho
            while hi - lo > xtol * max(1.0, abs(hi)):
                mid = 0.5 * (lo + hi)
                bm = balance(mid)
                if bm == 0.0:
                    return float(mid)
                if (bm > 0) == (b_lo > 0):
                    lo, b_lo = mid, bm
                else:
                    hi = mid
            return float(0.5 * (lo + hi))
        last = (j, b)
    return None


@dataclass
class SingularityReport:
    interpolating: bool
    max_interp_residual: float
    constraint_residuals: list = field(default_factory=list)
    singular: bool = False
    message: str = ""


def singularity_probe(
    state: FlowState, data: Dataset, tol_interpolation: float = 1e-4, tol_constraint: float = 1e-3
) -> SingularityReport:
    """Check whether a state interpolates and, if so, whether the V-constraints actually hold.

    A state that interpolates while ``max_n ||V_k f_n - df_n/dV_k||`` stays
    above `tol_constraint` is a singular equilibrium: the flow vanishes only
    because every residual ``rho f_n - y_n`` does.
    """
    resid = float(np.max(np.abs(state.rho * state.f - data.y))) if len(data) else 0.0
    per_layer = sample_constraint_norms(state.net, data.X).max(axis=0).tolist()
    interp = resid < tol_interpolation
    if not interp:
        return SingularityReport(False, resid, per_layer, False, "not at interpolation")
    if max(per_layer) > tol_constraint:
        return SingularityReport(True, resid, per_layer, True, "singular equilibrium")
    return SingularityReport(True, resid, per_layer, False, "interpolating, constraints satisfied")
