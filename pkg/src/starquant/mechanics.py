"""Legendre transforms, Hamilton and Lagrange flows, and the bracket
check that cross-validates them.

The two flows integrate the same dynamics in dual coordinates:

    dx/dt =  dH/dp,   dp/dt = -dH/dx        (cotangent side)
    dx/dt =  y,       dy/dt = -2 G(x, y)    (tangent side)

and the Legendre transform maps one onto the other.  All derivatives
come from one low-order jet evaluation of the generator per integrator
stage; only values are kept, so a flow step costs a handful of numpy
operations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateHessian, NewtonDivergence
from .geometry import as_generator
from .jets import PhasePoint

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50


@dataclass
class Trajectory:
    """Sampled flow: times, phase-space states and generator values,
    all the same length, times strictly increasing."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    energy: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.energy)):
            raise ValueError("trajectory fields must have equal length")
        ts = np.asarray(self.times)
        if ts.size > 1 and not (np.diff(ts) > 0).all():
            raise ValueError("trajectory times must be strictly increasing")

    def write_csv(self, fileobj, fiber_label="p"):
        n = self.states[0].n
        writer = csv.writer(fileobj)
        header = (
            ["t"]
            + [f"x{i + 1}" for i in range(n)]
            + [f"{fiber_label}{i + 1}" for i in range(n)]
            + ["H"]
        )
        writer.writerow(header)
        for t, st, en in zip(self.times, self.states, self.energy):
            row = [f"{t:.17g}"]
            row += [f"{v:.17g}" for v in st.x]
            row += [f"{v:.17g}" for v in st.p]
            row.append(f"{en:.17g}")
            writer.writerow(row)


def _hessian_values(jet, n, tol, what):
    """Fiber-fiber Hessian values of a phase-space jet, with the same
    degeneracy guard as the jet matrix inverse."""
    firsts = [jet.partial(n + a) for a in range(n)]
    hess = np.empty((n, n), dtype=np.complex128)
    for a in range(n):
        for b in range(n):
            hess[a, b] = firsts[a].partial(n + b).value
    scale = max(np.abs(hess).max(), 1e-300)
    det = np.linalg.det(hess)
    if abs(det) <= tol * scale**n:
        raise DegenerateHessian(
            f"{what} fiber Hessian is singular: |det| = {abs(det):.3e}"
        )
    return firsts, hess


def legendre_to_hamiltonian(L, pt_tm, hessian_tol=1e-10):
    """Pointwise transform (x, y) -> p = dL/dy and H = p.y - L."""
    fn = as_generator(L)
    n = pt_tm.n
    _, xs, ys = pt_tm.jets(2)
    Lj = fn(xs, ys)
    firsts, _ = _hessian_values(Lj, n, hessian_tol, "Lagrangian")
    p = np.array([f.value.real for f in firsts])
    H_value = float(p @ pt_tm.p - Lj.value.real)
    return p, H_value


def legendre_to_lagrangian(H, pt_ctm, hessian_tol=1e-10):
    """Pointwise transform (x, p) -> y = dH/dp and L = p.y - H."""
    fn = as_generator(H)
    n = pt_ctm.n
    _, xs, ps = pt_ctm.jets(2)
    Hj = fn(xs, ps)
    firsts, _ = _hessian_values(Hj, n, hessian_tol, "Hamiltonian")
    y = np.array([f.value.real for f in firsts])
    L_value = float(pt_ctm.p @ y - Hj.value.real)
    return y, L_value


def momentum_from_velocity(H, x, y, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Newton solve of dH/dp(x, p) = y for p, seeded at p = y.

    The fiber Hessian is the Jacobian; no line search, regularity along
    the iteration is a precondition.
    """
    fn = as_generator(H)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    p = y.copy()
    for it in range(max_iter):
        if not np.isfinite(p).all():
            raise NewtonDivergence("velocity inversion iterates went non-finite")
        _, xs, ps = PhasePoint(x, p).jets(2)
        Hj = fn(xs, ps)
        try:
            firsts, hess = _hessian_values(Hj, n, 1e-10, "Hamiltonian")
        except DegenerateHessian:
            if it == 0:
                raise
            # the generator is regular at the seed; losing regularity
            # mid-iteration means the iteration ran away
            raise NewtonDivergence(
                "velocity inversion left the regular region"
            ) from None
        resid = np.array([f.value.real for f in firsts]) - y
        if np.abs(resid).max() <= tol:
            return p
        p = p - np.linalg.solve(hess.real, resid)
    raise NewtonDivergence(
        f"velocity inversion did not reach {tol:g} in {max_iter} iterations"
    )


def _step_sizes(t_end, dt):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    full = int(np.floor(t_end / dt + 1e-9))
    rem = t_end - full * dt
    sizes = [dt] * full
    if rem > 1e-12 * max(1.0, t_end):
        sizes.append(rem)
    return sizes


def _integrate(deriv, state, t_end, dt):
    """Classical RK4 with a fixed step (plus one remainder step to land
    exactly on t_end).  deriv(state) -> (velocity, energy); the energy
    of the k1 evaluation is recorded for the current sample."""
    times = [0.0]
    states = [state]
    energy = []
    t = 0.0
    for h in _step_sizes(t_end, dt):
        k1, en = deriv(state)
        energy.append(en)
        k2, _ = deriv(state + 0.5 * h * k1)
        k3, _ = deriv(state + 0.5 * h * k2)
        k4, _ = deriv(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
        times.append(t)
        states.append(state)
    _, en = deriv(state)
    energy.append(en)
    return times, states, energy


def hamilton_flow(H, start, t_end, dt):
    """RK4 trajectory of dx/dt = dH/dp, dp/dt = -dH/dx."""
    fn = as_generator(H)
    n = start.n

    def deriv(state):
        _, xs, ps = PhasePoint(state[:n], state[n:]).jets(1)
        Hj = fn(xs, ps)
        vel = np.empty(2 * n)
        for i in range(n):
            vel[i] = Hj.partial(n + i).value.real
            vel[n + i] = -Hj.partial(i).value.real
        return vel, float(Hj.value.real)

    times, raw, energy = _integrate(deriv, start.as_array(), t_end, dt)
    states = [PhasePoint.from_array(s) for s in raw]
    return Trajectory(times, states, energy)


def _spray_values(fn, x, y, n, hessian_tol):
    """Values of the spray coefficients G^i and of the energy y.dL/dy - L
    from one second-order jet evaluation of the Lagrangian."""
    _, xs, ys = PhasePoint(x, y).jets(2)
    Lj = fn(xs, ys)
    firsts, hess = _hessian_values(Lj, n, hessian_tol, "Lagrangian")
    upper = np.linalg.inv(hess.real)
    mixed = np.empty((n, n))  # mixed[j, k] = d2L/dy^j dx^k
    lx = np.empty(n)
    for j in range(n):
        lx[j] = Lj.partial(j).value.real
        for k in range(n):
            mixed[j, k] = firsts[j].partial(k).value.real
    G = 0.5 * upper @ (mixed @ y - lx)
    p = np.array([f.value.real for f in firsts])
    return G, float(p @ y - Lj.value.real)


def lagrange_flow(L, start, t_end, dt, hessian_tol=1e-10):
    """RK4 trajectory of dx/dt = y, dy/dt = -2 G(x, y); records the
    energy y.dL/dy - L, which the flow conserves."""
    fn = as_generator(L)
    n = start.n

    def deriv(state):
        x, y = state[:n], state[n:]
        G, en = _spray_values(fn, x, y, n, hessian_tol)
        return np.concatenate([y, -2.0 * G]), en

    times, raw, energy = _integrate(deriv, start.as_array(), t_end, dt)
    states = [PhasePoint.from_array(s) for s in raw]
    return Trajectory(times, states, energy)


def poisson_flow_check(H, f, traj):
    """Max deviation between the finite-difference rate of f along the
    trajectory and the bracket {H, f} evaluated pointwise."""
    H_fn = as_generator(H)
    f_fn = as_generator(f)
    n = traj.states[0].n

    fvals = []
    brackets = []
    for st in traj.states:
        _, xs, ps = st.jets(1)
        Hj = H_fn(xs, ps)
        fj = f_fn(xs, ps)
        fvals.append(fj.value.real)
        br = 0.0
        for k in range(n):
            br += Hj.partial(n + k).value.real * fj.partial(k).value.real
            br -= Hj.partial(k).value.real * fj.partial(n + k).value.real
        brackets.append(br)

    worst = 0.0
    times = traj.times
    for k in range(1, len(times) - 1):
        fd = (fvals[k + 1] - fvals[k - 1]) / (times[k + 1] - times[k - 1])
        worst = max(worst, abs(fd - brackets[k]))
    return worst
