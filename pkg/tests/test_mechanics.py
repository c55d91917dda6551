"""Flow and Legendre-transform tests: closed-form oracles, dual-pair
equivalence, conservation, and the error paths."""

import io

import numpy as np
import pytest

from starquant import mechanics as mech
from starquant.errors import DegenerateHessian, NewtonDivergence
from starquant.expr import parse
from starquant.jets import PhasePoint

OSC_H = parse("0.5*(p1^2 + x1^2)", 1)
OSC_L = parse("0.5*(y1^2 - x1^2)", 1, bundle="tangent")
EXP_H = parse("0.5 * exp(2*x1) * p1^2", 1)
EXP_L = parse("0.5 * exp(0 - 2*x1) * y1^2", 1, bundle="tangent")


def xs(state):
    return np.asarray(state.x)


def ps(state):
    return np.asarray(state.p)


# ---------------------------------------------------------------------------
# Legendre transforms


def test_legendre_to_hamiltonian_quadratic():
    L = parse("0.5*(y1^2 + y2^2)", 2, bundle="tangent")
    p, H = mech.legendre_to_hamiltonian(L, PhasePoint([0.0, 0.0], [2.0, 3.0]))
    assert np.allclose(p, [2.0, 3.0])
    assert H == pytest.approx(6.5)


def test_legendre_to_hamiltonian_scaled():
    L = parse("0.5*4*y1^2", 1, bundle="tangent")
    p, H = mech.legendre_to_hamiltonian(L, PhasePoint([0.0], [1.0]))
    assert p[0] == pytest.approx(4.0)
    assert H == pytest.approx(2.0)  # p^2 / (2a) with a = 4


def test_legendre_to_lagrangian_quadratic():
    H = parse("0.5*(p1^2 + p2^2)", 2)
    y, L = mech.legendre_to_lagrangian(H, PhasePoint([0.0, 0.0], [1.0, 0.0]))
    assert np.allclose(y, [1.0, 0.0])
    assert L == pytest.approx(0.5)


def test_legendre_to_lagrangian_scaled():
    H = parse("0.5*p1^2/4", 1)
    y, L = mech.legendre_to_lagrangian(H, PhasePoint([0.0], [4.0]))
    assert y[0] == pytest.approx(1.0)
    assert L == pytest.approx(2.0)


def test_legendre_degenerate_rejection():
    H = parse("x1^2 + p1", 1)
    with pytest.raises(DegenerateHessian):
        mech.legendre_to_lagrangian(H, PhasePoint([0.5], [0.5]))


def test_legendre_round_trip():
    x0, y0 = np.array([0.3]), np.array([0.7])
    p0, H0 = mech.legendre_to_hamiltonian(EXP_L, PhasePoint(x0, y0))
    assert p0[0] == pytest.approx(np.exp(-0.6) * 0.7)
    y1, L1 = mech.legendre_to_lagrangian(EXP_H, PhasePoint(x0, p0))
    assert abs(y1 - y0).max() <= 1e-10
    # the two generators take the same value at Legendre-matched points
    assert H0 == pytest.approx(
        0.5 * np.exp(0.6) * p0[0] ** 2
    )
    assert L1 == pytest.approx(0.5 * np.exp(-0.6) * 0.7**2)


def test_momentum_from_velocity_matches_transform():
    x0, y0 = np.array([0.3]), np.array([0.7])
    p_newton = mech.momentum_from_velocity(EXP_H, x0, y0)
    p_direct, _ = mech.legendre_to_hamiltonian(EXP_L, PhasePoint(x0, y0))
    assert abs(p_newton - p_direct).max() <= 1e-10


def test_momentum_from_velocity_unreachable():
    # dH/dp of sqrt(1+p^2) never exceeds 1 in magnitude
    H = parse("sqrt(1 + p1^2)", 1)
    with pytest.raises(NewtonDivergence):
        mech.momentum_from_velocity(H, np.array([0.0]), np.array([1.5]))


def test_momentum_from_velocity_iteration_cap():
    with pytest.raises(NewtonDivergence):
        mech.momentum_from_velocity(
            EXP_H, np.array([0.3]), np.array([0.7]), max_iter=1
        )


# ---------------------------------------------------------------------------
# Hamilton flow


def test_oscillator_period_return():
    traj = mech.hamilton_flow(OSC_H, PhasePoint([1.0], [0.0]), 2 * np.pi, 1e-3)
    final = np.concatenate([xs(traj.states[-1]), ps(traj.states[-1])])
    assert abs(final - np.array([1.0, 0.0])).max() <= 1e-6
    assert traj.times[-1] == pytest.approx(2 * np.pi, abs=1e-12)


def test_free_flow_linear():
    H = parse("0.5*(p1^2 + p2^2)", 2)
    traj = mech.hamilton_flow(H, PhasePoint([0.1, -0.2], [0.4, 0.8]), 1.0, 1e-2)
    assert abs(xs(traj.states[-1]) - np.array([0.5, 0.6])).max() <= 1e-12
    assert abs(ps(traj.states[-1]) - np.array([0.4, 0.8])).max() <= 1e-12


def test_energy_conservation_long_run():
    traj = mech.hamilton_flow(OSC_H, PhasePoint([1.0], [0.0]), 10.0, 1e-3)
    drift = max(abs(e - traj.energy[0]) for e in traj.energy)
    assert drift <= 1e-8


# ---------------------------------------------------------------------------
# Lagrange flow and the dual-pair equivalence


def test_lagrange_free_line():
    L = parse("0.5*(y1^2 + y2^2)", 2, bundle="tangent")
    traj = mech.lagrange_flow(L, PhasePoint([0.0, 1.0], [0.5, -0.25]), 2.0, 1e-2)
    assert abs(xs(traj.states[-1]) - np.array([1.0, 0.5])).max() <= 1e-12


def test_lagrange_oscillator_closed_form():
    traj = mech.lagrange_flow(OSC_L, PhasePoint([1.0], [0.0]), 1.0, 1e-3)
    for t, st in zip(traj.times[::200], traj.states[::200]):
        assert xs(st)[0] == pytest.approx(np.cos(t), abs=1e-6)
        assert ps(st)[0] == pytest.approx(-np.sin(t), abs=1e-6)


@pytest.mark.parametrize(
    "L,H,x0,y0",
    [
        (OSC_L, OSC_H, [1.0], [0.0]),
        (EXP_L, EXP_H, [0.3], [-0.7]),  # contracting branch stays regular
    ],
)
def test_flow_equivalence(L, H, x0, y0):
    p0, _ = mech.legendre_to_hamiltonian(L, PhasePoint(x0, y0))
    tl = mech.lagrange_flow(L, PhasePoint(x0, y0), 2.0, 1e-3)
    th = mech.hamilton_flow(H, PhasePoint(x0, p0), 2.0, 1e-3)
    sup = 0.0
    for sL, sH in zip(tl.states, th.states):
        pL, _ = mech.legendre_to_hamiltonian(L, sL)
        sup = max(sup, abs(xs(sL) - xs(sH)).max(), abs(pL - ps(sH)).max())
    assert sup <= 1e-5


def test_lagrange_energy_conserved():
    traj = mech.lagrange_flow(EXP_L, PhasePoint([0.3], [-0.7]), 2.0, 1e-3)
    drift = max(abs(e - traj.energy[0]) for e in traj.energy)
    assert drift <= 1e-10


# ---------------------------------------------------------------------------
# bracket check along trajectories


def test_poisson_check_conserved_generator():
    traj = mech.hamilton_flow(OSC_H, PhasePoint([1.0], [0.0]), 1.0, 1e-3)
    assert mech.poisson_flow_check(OSC_H, OSC_H, traj) <= 1e-8


def test_poisson_check_coordinate_free_flow():
    H = parse("0.5*(p1^2 + p2^2)", 2)
    traj = mech.hamilton_flow(H, PhasePoint([0.1, -0.2], [0.4, 0.8]), 1.0, 1e-2)
    assert mech.poisson_flow_check(H, parse("x1", 2), traj) <= 1e-6


def test_poisson_check_quadratic_observable():
    traj = mech.hamilton_flow(OSC_H, PhasePoint([1.0], [0.0]), 1.0, 1e-3)
    assert mech.poisson_flow_check(OSC_H, parse("x1*p1", 1), traj) <= 1e-5


# ---------------------------------------------------------------------------
# trajectory container and serialization


def test_trajectory_validation():
    s = PhasePoint([0.0], [0.0])
    with pytest.raises(ValueError):
        mech.Trajectory([0.0, 1.0], [s], [0.0])
    with pytest.raises(ValueError):
        mech.Trajectory([0.0, 0.0], [s, s], [0.0, 0.0])


def test_step_sizes_remainder():
    sizes = mech._step_sizes(0.0095, 1e-3)
    assert len(sizes) == 10
    assert sizes[-1] == pytest.approx(5e-4)
    assert sum(sizes) == pytest.approx(0.0095, abs=1e-15)
    with pytest.raises(ValueError):
        mech._step_sizes(1.0, 0.0)


def test_write_csv():
    traj = mech.hamilton_flow(OSC_H, PhasePoint([1.0], [0.0]), 0.01, 1e-3)
    buf = io.StringIO()
    traj.write_csv(buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "t,x1,p1,H"
    assert len(lines) == len(traj.times) + 1
    first = lines[1].split(",")
    assert float(first[0]) == 0.0
    assert float(first[1]) == 1.0
    assert float(first[3]) == pytest.approx(0.5)
    buf2 = io.StringIO()
    traj.write_csv(buf2, fiber_label="y")
    assert buf2.getvalue().splitlines()[0] == "t,x1,y1,H"
