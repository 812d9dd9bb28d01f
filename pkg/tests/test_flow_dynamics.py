import math

import numpy as np
import pytest

from helpers import balanced_labels, interpolating_net, random_nnet, unit_rows
from sqlossflow.net_core import Dataset, NormalizedNet, normalized_forward_batch
from sqlossflow.numerics import finite_diff_grad, frobenius_inner, frobenius_norm
from sqlossflow.flow_dynamics import (
    FlowConfig,
    FlowDivergence,
    field_norm,
    first_critical_rho,
    flow_field,
    flow_state,
    frozen_profile,
    integrate,
    lagrange_nu,
    lagrangian,
    objective,
    rho_dot,
    rho_equilibrium,
    singularity_probe,
    step,
    v_dot,
)


def small_problem(seed=0, n=6, d=4, hidden=(5,), rho=0.5):
    """Random net and data with sum y f > 0."""
    rng = np.random.default_rng(seed)
    nn = random_nnet(rng, [d, *hidden, 1], rho)
    X = unit_rows(rng, n, d)
    y = balanced_labels(n)
    if float(normalized_forward_batch(nn, X) @ y) < 0:
        y = -y
    return nn, Dataset(X, y)


# --- closed-form pieces -----------------------------------------------------------

def test_lagrange_nu_examples():
    y = np.array([1.0, -1.0, 1.0])
    assert lagrange_nu(2.0, y / 2.0, y) == 0.0
    assert lagrange_nu(0.0, [0.3, -0.1], [1, -1]) == 0.0
    assert lagrange_nu(2.0, [0.3], [1.0]) == pytest.approx(0.24)
    with pytest.raises(ValueError):
        lagrange_nu(1.0, [1.0], [1.0, 1.0])


def test_rho_dot_examples():
    f, y = np.array([0.5, -0.5]), np.array([1.0, -1.0])
    assert rho_dot(0.0, f, y, 0.3) == pytest.approx(2 * float(f @ y))
    assert rho_dot(2.0, f, y, 0.5) == pytest.approx(-2.0)
    eq = rho_equilibrium(f, y, 0.5)
    assert rho_dot(eq, f, y, 0.5) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        rho_dot(1.0, f, y, -0.1)


def test_rho_equilibrium_examples():
    y = np.array([1.0, -1.0, 1.0, -1.0])
    assert rho_equilibrium(y / 3.0, y, 0.0) == pytest.approx(3.0)
    assert rho_equilibrium([0.5, -0.5], [1, -1], 0.5) == pytest.approx(1.0)
    f = np.array([0.2, -0.4, 0.1])
    yy = np.array([1.0, -1.0, 1.0])
    assert rho_equilibrium(f, yy, 0.2) < rho_equilibrium(f, yy, 0.1)
    with pytest.raises(ZeroDivisionError):
        rho_equilibrium([0.0, 0.0], [1, -1], 0.0)


# --- vector field -----------------------------------------------------------------

def test_v_dot_vanishes_at_zero_rho():
    nn, data = small_problem(rho=0.0)
    for D in v_dot(flow_state(nn, data), data):
        assert np.all(D == 0.0)


def test_v_dot_vanishes_at_exact_interpolation():
    nn, data = interpolating_net(np.random.default_rng(1), 4, 3, [8])
    st = flow_state(nn, data)
    assert max(singularity_probe(st, data).constraint_residuals) > 0.1
    for D in v_dot(st, data):
        assert frobenius_norm(D) < 1e-12


def test_v_dot_is_tangent():
    nn, data = small_problem(2, n=10, hidden=(6, 5), rho=1.3)
    st = flow_state(nn, data)
    for V, D in zip(nn.V, v_dot(st, data)):
        assert abs(frobenius_inner(V, D)) < 1e-8


def sphere_loss(nn, data, k):
    """Square loss as a function of an unnormalized V_k (rescaled back onto the sphere)."""

    def loss(M):
        V = list(nn.V)
        V[k] = M / frobenius_norm(M)
        r = nn.rho * normalized_forward_batch(NormalizedNet(nn.rho, V), data.X) - data.y
        return float(r @ r)

    return loss


@pytest.mark.parametrize("hidden,n", [((), 1), ((), 5), ((6,), 8), ((5, 4), 8)])
def test_v_dot_is_negative_constrained_gradient(hidden, n):
    nn, data = small_problem(3, n=n, hidden=hidden, rho=1.7)
    st = flow_state(nn, data)
    for k, D in enumerate(v_dot(st, data)):
        G = finite_diff_grad(sphere_loss(nn, data, k), nn.V[k], h=1e-6)
        np.testing.assert_allclose(D, -G, atol=1e-7 * max(1.0, np.max(np.abs(G))))


def test_flow_field_clips_rho_dot_at_boundary():
    nn, data = small_problem(4, rho=0.0)
    flipped = Dataset(data.X, -data.y)
    rd, vds = flow_field(flow_state(nn, flipped), flipped, 0.1)
    assert rd == 0.0
    assert field_norm(rd, vds) == 0.0


def test_lambda_enters_only_rho_dot():
    nn, data = small_problem(5, rho=0.8)
    st = flow_state(nn, data)
    r0, v0 = flow_field(st, data, 0.0)
    r1, v1 = flow_field(st, data, 0.5)
    assert r1 == pytest.approx(r0 - 2 * 0.5 * 0.8)
    for a, b in zip(v0, v1):
        np.testing.assert_array_equal(a, b)


# --- stepping ---------------------------------------------------------------------

def test_step_zero_field_only_advances_time():
    nn, data = small_problem(6, rho=0.0)
    flipped = Dataset(data.X, -data.y)
    st = flow_state(nn, flipped)
    nxt = step(st, flipped, FlowConfig(dt=0.1))
    assert nxt.t == pytest.approx(0.1)
    assert nxt.rho == 0.0
    for a, b in zip(st.net.V, nxt.net.V):
        np.testing.assert_array_equal(a, b)


def test_one_euler_step_from_zero():
    nn, data = small_problem(7, rho=0.0)
    st = flow_state(nn, data)
    dt = 0.01
    nxt = step(st, data, FlowConfig(dt=dt, lam=0.3))
    assert nxt.rho == pytest.approx(2 * dt * float(st.f @ data.y), rel=1e-14)
    assert nxt.rho > 0


def test_step_clamps_negative_rho_and_records_event():
    nn, data = small_problem(8, rho=1e-3)
    flipped = Dataset(data.X, -data.y)
    events = []
    nxt = step(flow_state(nn, flipped), flipped, FlowConfig(dt=10.0, lam=1.0), events)
    assert nxt.rho == 0.0
    assert events and events[0]["event"] == "rho_clamped"


def test_step_non_finite_aborts():
    nn, data = small_problem(9, rho=1.0)
    with pytest.raises(FlowDivergence):
        step(flow_state(nn, data), data, FlowConfig(dt=1e308, lam=1.0))


@pytest.mark.parametrize("integrator", ["euler_project", "rk4_project"])
def test_sphere_is_preserved(integrator):
    nn, data = small_problem(10, n=8, hidden=(6, 4), rho=0.2)
    st = flow_state(nn, data)
    cfg = FlowConfig(dt=0.05, lam=0.05, integrator=integrator)
    for _ in range(200):
        st = step(st, data, cfg)
        for V in st.net.V:
            assert abs(frobenius_norm(V) - 1.0) < 1e-8
        assert st.rho >= 0.0


def run_to(nn, data, cfg, t_end):
    st = flow_state(nn, data)
    for _ in range(int(round(t_end / cfg.dt))):
        st = step(st, data, cfg)
    return st


def state_distance(a, b):
    return math.sqrt((a.rho - b.rho) ** 2 + sum(frobenius_norm(x - y) ** 2 for x, y in zip(a.net.V, b.net.V)))


# Deep ReLU trajectories cross activation kinks, where the field is only
# piecewise smooth; the high-order check therefore uses a linear net.
@pytest.mark.parametrize("integrator,dts,order,hidden", [
    ("euler_project", (0.02, 0.01, 0.005), 1, (5,)),
    ("euler_project", (0.02, 0.01, 0.005), 1, ()),
    ("rk4_project", (0.1, 0.05, 0.025), 4, ()),
])
def test_convergence_order(integrator, dts, order, hidden):
    nn, data = small_problem(11, n=6, hidden=hidden, rho=0.5)
    t_end = 0.4
    ref = run_to(nn, data, FlowConfig(dt=1e-3, lam=0.1, integrator="rk4_project"), t_end)
    errs = [state_distance(run_to(nn, data, FlowConfig(dt=h, lam=0.1, integrator=integrator), t_end), ref) for h in dts]
    for coarse, fine in zip(errs, errs[1:]):
        assert coarse / fine == pytest.approx(2.0**order, rel=0.25)


def min_preactivation(state, data):
    gaps = [np.inf]
    A = data.X
    for V in state.net.V[:-1]:
        Z = A @ V.T
        gaps.append(float(np.min(np.abs(Z))))
        A = np.maximum(Z, 0.0)
    return min(gaps)


@pytest.mark.parametrize("hidden,steps", [((), 300), ((6, 4), 100)])
def test_objective_descends_with_dt_halving(hidden, steps):
    nn, data = small_problem(12, n=10, hidden=hidden, rho=0.3)
    lam = 0.05
    st = flow_state(nn, data)
    for _ in range(steps):
        # the field is discontinuous on activation kinks; stop before one is reached
        if min_preactivation(st, data) < 1e-4:
            break
        dt = 0.05
        while True:
            nxt = step(st, data, FlowConfig(dt=dt, lam=lam))
            # nu is held at its value from the start of the step
            if lagrangian(nxt, lam, st.nu) <= lagrangian(st, lam, st.nu) + 1e-14:
                break
            dt /= 2
            assert dt > 1e-8, "no descent even for tiny steps"
        st = nxt
    assert st.t > 1.0
    assert objective(st, lam) < objective(flow_state(nn, data), lam)


# --- integration ------------------------------------------------------------------

def test_integrate_linear_net_reaches_equilibrium():
    nn, data = small_problem(13, n=12, d=5, hidden=(), rho=0.01)
    cfg = FlowConfig(lam=0.1, dt=0.01, integrator="rk4_project", t_max=200, trace_stride=50)
    trace = integrate(flow_state(nn, data), data, cfg)
    assert trace.converged
    fin = trace.final
    assert abs(fin.rho - rho_equilibrium(fin.f, data.y, 0.1)) / fin.rho < 1e-6
    # ridge solution on the unit sphere x scale
    w = np.linalg.solve(data.X.T @ data.X + 0.1 * np.eye(5), data.X.T @ data.y)
    assert fin.rho == pytest.approx(np.linalg.norm(w), rel=1e-6)
    t = trace.column("t")
    assert np.all(np.diff(t) > 0)
    assert trace.rows[0]["t"] == 0.0 and trace.last["t"] == pytest.approx(fin.t)


def test_integrate_from_interpolation_is_immediate():
    nn, data = interpolating_net(np.random.default_rng(14), 3, 5, [6])
    trace = integrate(flow_state(nn, data), data, FlowConfig(lam=0.0))
    assert trace.converged and trace.steps == 0
    assert len(trace.rows) == 1


def test_integrate_from_large_rho_decreases():
    nn, data = small_problem(15, n=8, d=5, hidden=(), rho=20.0)
    cfg = FlowConfig(lam=0.1, dt=0.01, t_max=5, trace_stride=10)
    trace = integrate(flow_state(nn, data), data, cfg)
    rho = trace.column("rho")
    fin = trace.final
    target = rho_equilibrium(fin.f, data.y, 0.1)
    assert rho[0] == 20.0
    # strictly decreasing while well above the equilibrium it is heading for
    above = np.flatnonzero(rho > 1.5 * target)
    assert above.size > 3
    assert np.all(np.diff(rho[: above[-1] + 2]) < 0)
    assert rho[-1] < 0.2 * rho[0]


def test_integrate_reports_non_convergence():
    nn, data = small_problem(16, rho=0.01)
    trace = integrate(flow_state(nn, data), data, FlowConfig(lam=0.1, dt=0.01, t_max=0.05, trace_stride=2))
    assert not trace.converged
    assert trace.steps == 5
    assert trace.last["t"] == pytest.approx(0.05)


def test_integrate_divergence_carries_trace():
    nn, data = small_problem(17, rho=1.0)
    with pytest.raises(FlowDivergence) as exc:
        integrate(flow_state(nn, data), data, FlowConfig(lam=1.0, dt=1e308))
    assert exc.value.trace is not None and len(exc.value.trace.rows) == 1


def test_flow_state_requires_matrix_mode():
    nn = NormalizedNet(1.0, [np.array([[1.0, 0.0]])], mode="row", row_scales=[np.array([1.0])])
    with pytest.raises(ValueError):
        flow_state(nn, Dataset(np.array([[1.0, 0.0]]), [1]))


# --- critical rho -----------------------------------------------------------------

def test_first_critical_rho_linear_net():
    nn, data = small_problem(18, hidden=(), rho=1.0)
    prof = frozen_profile(nn, data)
    grid = np.linspace(0.0, 50.0, 101)
    found = first_critical_rho(prof, data.y, 0.2, grid)
    assert found == pytest.approx(rho_equilibrium(prof(1.0), data.y, 0.2), rel=1e-10)


def test_first_critical_rho_none_when_f_vanishes():
    y = np.array([1.0, -1.0])
    assert first_critical_rho(lambda r: np.zeros(2), y, 0.1, np.linspace(0, 5, 11)) is None
    assert first_critical_rho(lambda r: np.zeros(2), y, 0.0, np.linspace(0, 5, 11)) is None


def test_first_critical_rho_deep_net_sign_change():
    nn, data = small_problem(19, n=10, hidden=(6, 5), rho=1.0)
    prof = frozen_profile(nn, data)
    grid = np.geomspace(1e-3, 1e3, 61)
    r = first_critical_rho(prof, data.y, 0.01, grid)
    assert r is not None
    f = prof(r)
    assert rho_dot(r * 0.999, f, data.y, 0.01) > 0 > rho_dot(r * 1.001, f, data.y, 0.01)


def test_first_critical_rho_bad_grid():
    with pytest.raises(ValueError):
        first_critical_rho(lambda r: np.ones(1), [1.0], 0.1, [1.0, 1.0])


# --- singularity probe ------------------------------------------------------------

def test_probe_linear_aligned_is_regular():
    x = np.array([0.6, 0.8])
    nn = NormalizedNet(1.0, [x[None, :]])
    data = Dataset(x[None, :], [1.0])
    rep = singularity_probe(flow_state(nn, data), data)
    assert rep.interpolating and not rep.singular
    assert rep.constraint_residuals[0] < 1e-15


def test_probe_flags_deep_interpolating_net():
    nn, data = interpolating_net(np.random.default_rng(20), 4, 5, [16, 16])
    rep = singularity_probe(flow_state(nn, data), data)
    assert rep.interpolating and rep.singular
    assert rep.message == "singular equilibrium"


def test_probe_not_interpolating():
    nn, data = small_problem(21, rho=0.5)
    rep = singularity_probe(flow_state(nn, data), data)
    assert not rep.interpolating and not rep.singular
    assert rep.message == "not at interpolation"
