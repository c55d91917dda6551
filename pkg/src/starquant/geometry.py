"""Pointwise geometry of regular Hamiltonians and Lagrangians.

Builds, at one phase-space point and through jet arithmetic, the whole
tower: fundamental tensor, nonlinear connection, adapted frames (plain
and oblique), metric and symplectic lifts, almost complex/product
structures, the two canonical linear connections, and their torsion and
curvature, up to the contracted field-equation residual.

Conventions fixed here once and used everywhere:

* the symplectic form is theta = dp_i ^ dx^i and Hamiltonian fields obey
  i_X theta = -df, which gives {f,g} = dp f . dx g - dx f . dp g and in
  particular {x1, p1} = -1;
* the fundamental tensor on the cotangent side is the plain momentum
  Hessian of H, no factor 1/2;
* frame matrices store one frame vector per row in coordinate
  components, coframes likewise, so frame @ coframe.T = I;
* connection coefficient arrays are indexed [output][direction][source],
  and the mixed blocks are the transpose-minus duals forced by metric
  compatibility of the opposite index type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientJetOrder
from .expr import jet_function
from .jets import PhasePoint, align, jet_const, jet_matrix_inverse, jet_space

COTANGENT = "cotangent"
TANGENT = "tangent"


def as_generator(obj):
    """Accept either an AST or a callable (base_jets, fiber_jets) -> Jet."""
    return obj if callable(obj) else jet_function(obj)


# ---------------------------------------------------------------------------
# jet-combination helpers with explicit order alignment


def jsum(terms):
    terms = align(*terms)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def jsub(a, b):
    a, b = align(a, b)
    return a - b


def jmul(*factors):
    factors = align(*factors)
    out = factors[0]
    for f in factors[1:]:
        out = out * f
    return out


def _mm(A, B):
    n, m = A.shape
    _, k = B.shape
    out = np.empty((n, k), dtype=object)
    for i in range(n):
        for j in range(k):
            out[i, j] = jsum([jmul(A[i, t], B[t, j]) for t in range(m)])
    return out


def _transpose(A):
    return A.T.copy()


def values(mat):
    """Constant terms of a nested array of jets, as a complex ndarray."""
    arr = np.asarray(mat, dtype=object)
    out = np.empty(arr.shape, dtype=np.complex128)
    for idx in np.ndindex(arr.shape):
        out[idx] = arr[idx].value
    return out


def real_values(mat):
    return values(mat).real


def frame_deriv(f, row):
    """Directional derivative of a jet along a frame vector (row of jets)."""
    return jsum([jmul(row[a], f.partial(a)) for a in range(len(row))])


def vector_bracket(U, V):
    """Lie bracket of two vector fields given by coordinate-component jets."""
    dim = len(U)
    out = []
    for b in range(dim):
        plus = jsum([jmul(U[a], V[b].partial(a)) for a in range(dim)])
        minus = jsum([jmul(V[a], U[b].partial(a)) for a in range(dim)])
        out.append(jsub(plus, minus))
    return out


def bracket_jets(f, g, n):
    """Poisson bracket of two jets on a 2n-dimensional cotangent chart."""
    plus = jsum([jmul(f.partial(n + k), g.partial(k)) for k in range(n)])
    minus = jsum([jmul(f.partial(k), g.partial(n + k)) for k in range(n)])
    return jsub(plus, minus)


# ---------------------------------------------------------------------------
# result containers


@dataclass
class FundamentalTensor:
    """Fiber Hessian metric; `upper` and `lower` are mutually inverse
    n x n jet matrices.  On the cotangent side the Hessian sits in
    `upper` (indices up), on the tangent side in `lower`."""

    upper: np.ndarray
    lower: np.ndarray
    bundle: str


@dataclass
class NConnection:
    """Nonlinear connection coefficients: N_ij on the cotangent side
    (symmetric for Hamiltonian input), N_i^a on the tangent side."""

    bundle: str
    coeffs: np.ndarray


@dataclass
class AdaptedFrame:
    """Frame and coframe value matrices at the point; one frame vector
    per row in coordinate components, frame @ coframe.T = I."""

    frame_matrix: np.ndarray
    coframe_matrix: np.ndarray
    variant: str


@dataclass
class DConnectionCoeffs:
    """Coefficients of a linear connection adapted to the splitting.

    hL[i][j][k]: horizontal-direction coefficient (output i, source j,
    direction k).  vC[i][j][c]: fiber-direction coefficient (output i,
    source j, direction c).  kind is "canonical_d" or "phi_pair"; the
    remaining blocks of the full connection are the transpose-minus
    duals of these two.
    """

    hL: np.ndarray
    vC: np.ndarray
    kind: str


@dataclass
class CurvatureTorsion:
    """Torsion and curvature component blocks (plain complex arrays)
    plus the anholonomy coefficients of the frame that was used."""

    Omega: np.ndarray  # [i][j][a]  nonlinear-connection curvature
    T_hij: np.ndarray  # [k][i][j]  horizontal torsion
    S_abc: np.ndarray  # [a][b][c]  fiber torsion
    P_aic: np.ndarray  # [a][i][c]  mixed torsion
    R_ijkm: np.ndarray  # [i][j][k][m]
    P_ijkc: np.ndarray  # [i][j][k][c]  mixed curvature
    S_ijbc: np.ndarray  # [i][j][b][c]  fiber curvature
    anholonomy: np.ndarray  # W[gamma][alpha][beta], full frame size


@dataclass
class AlmostStructures:
    """Almost complex / product / symplectic package in the coordinate
    basis, plus Nijenhuis components sampled on frame pairs."""

    J: np.ndarray
    P: np.ndarray
    Jtangent: np.ndarray
    theta: np.ndarray
    nijenhuis: np.ndarray


# ---------------------------------------------------------------------------
# frame construction and first-principles frame calculus (jet matrices)


def _frame_jets(N, variant, g_upper=None):
    """Frame/coframe jet matrices for one adapted-frame variant.

    N is the n x n jet matrix of nonlinear-connection coefficients;
    g_upper is required for the oblique variant.
    """
    n = N.shape[0]
    ref = N[0, 0]
    one = jet_const(ref.space, 1.0)
    zero = jet_const(ref.space, 0.0)
    F = np.full((2 * n, 2 * n), zero, dtype=object)
    C = np.full((2 * n, 2 * n), zero, dtype=object)
    if variant in ("n_adapted_tangent", "n_adapted_cotangent"):
        sign = -1.0 if variant == "n_adapted_tangent" else 1.0
        for i in range(n):
            F[i, i] = one
            C[i, i] = one
            F[n + i, n + i] = one
            C[n + i, n + i] = one
            for a in range(n):
                F[i, n + a] = N[i, a] * sign
                C[n + a, i] = N[i, a] * (-sign)
    elif variant == "phi_adapted":
        if g_upper is None:
            raise ValueError("phi_adapted frames need the fiber metric")
        gu = g_upper
        for i in range(n):
            F[i, i] = one
            for a in range(n):
                F[i, n + a] = N[i, a]
        for b in range(n):
            for j in range(n):
                F[n + b, j] = -gu[b, j]
            for a in range(n):
                diag = one if a == b else zero
                F[n + b, n + a] = jsub(
                    diag, jsum([jmul(gu[b, i], N[i, a]) for i in range(n)])
                )
        for i in range(n):
            for j in range(n):
                diag = one if i == j else zero
                C[i, j] = jsub(
                    diag, jsum([jmul(gu[b, i], N[j, b]) for b in range(n)])
                )
            for b in range(n):
                C[i, n + b] = gu[b, i]
        for c in range(n):
            for j in range(n):
                C[n + c, j] = -N[j, c]
            C[n + c, n + c] = one
    else:
        raise ValueError(f"unknown frame variant {variant!r}")
    return F, C


def _theta_on_frames(F, n):
    """theta = dp_k ^ dx^k evaluated on all frame pairs, as jets."""
    n2 = 2 * n
    out = np.empty((n2, n2), dtype=object)
    for a in range(n2):
        for b in range(n2):
            out[a, b] = jsub(
                jsum([jmul(F[a, n + k], F[b, k]) for k in range(n)]),
                jsum([jmul(F[b, n + k], F[a, k]) for k in range(n)]),
            )
    return out


def _anholonomy(F, C):
    """W[gamma][alpha][beta] from jet brackets of the frame fields."""
    n2 = F.shape[0]
    W = np.empty((n2, n2, n2), dtype=object)
    min_order = None
    for a in range(n2):
        for b in range(a + 1, n2):
            br = vector_bracket(list(F[a]), list(F[b]))
            for g in range(n2):
                w = jsum([jmul(C[g, B], br[B]) for B in range(n2)])
                W[g, a, b] = w
                W[g, b, a] = -w
                min_order = w.order if min_order is None else min(min_order, w.order)
    zero = jet_const(jet_space(n2, min_order if min_order is not None else 0), 0.0)
    for g in range(n2):
        for a in range(n2):
            W[g, a, a] = zero
    return W


def _koszul_block(rows, m, minv, w_low):
    """Metric compatibility plus vanishing torsion on one index block.

    2 Gamma_{s,jk} = e_j(m_ks) + e_k(m_js) - e_s(m_jk)
                     + W_{s,jk} - W_{k,js} - W_{j,ks}
    with j the direction and k the source; w_low[s][j][k] = W_{s,jk} are
    the frame-metric-lowered anholonomy coefficients of the block (None
    when the block is holonomic up to components outside the block).
    Returns Gamma[out][dir][src].
    """
    n = len(rows)
    dm = [
        [[frame_deriv(m[k, s], rows[j]) for s in range(n)] for k in range(n)]
        for j in range(n)
    ]
    out = np.empty((n, n, n), dtype=object)
    low = np.empty((n, n, n), dtype=object)
    for s in range(n):
        for j in range(n):
            for k in range(n):
                terms = [dm[j][k][s], dm[k][j][s], -dm[s][j][k]]
                if w_low is not None:
                    terms += [w_low[s][j][k], -w_low[k][j][s], -w_low[j][k][s]]
                low[s, j, k] = jsum(terms) * 0.5
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out[i, j, k] = jsum([jmul(minv[i, s], low[s, j, k]) for s in range(n)])
    return out


def _full_connection(hhh, vvv):
    """Assemble the 2n-frame coefficient array from the two Koszul blocks,
    filling the mixed blocks with their transpose-minus duals."""
    n = hhh.shape[0]
    n2 = 2 * n
    zero = jet_const(hhh[0, 0, 0].space, 0.0)
    G = np.full((n2, n2, n2), zero, dtype=object)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                G[i, j, k] = hhh[i, j, k]
                G[n + i, n + j, n + k] = vvv[i, j, k]
                G[n + i, j, n + k] = -hhh[k, j, i]
                G[i, n + j, k] = -vvv[k, j, i]
    return G


def _full_from_coeffs(coeffs):
    """Rebuild the full [output][direction][source] array from the two
    stored coefficient blocks of a DConnectionCoeffs."""
    hL, vC = coeffs.hL, coeffs.vC
    n = hL.shape[0]
    hhh = np.empty((n, n, n), dtype=object)
    vvv = np.empty((n, n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                hhh[i, k, j] = hL[i, j, k]
                vvv[i, k, j] = -vC[j, i, k]
    return _full_connection(hhh, vvv)


def _torsion_full(G, W):
    n2 = G.shape[0]
    T = np.empty((n2, n2, n2), dtype=object)
    for g in range(n2):
        for a in range(n2):
            for b in range(n2):
                T[g, a, b] = jsub(jsub(G[g, a, b], G[g, b, a]), W[g, a, b])
    return T


def _curvature_full(G, W, F):
    n2 = G.shape[0]
    R = np.empty((n2, n2, n2, n2), dtype=object)
    min_order = None
    for g in range(n2):
        for ph in range(n2):
            for a in range(n2):
                for b in range(a + 1, n2):
                    terms = [
                        frame_deriv(G[g, b, ph], F[a]),
                        -frame_deriv(G[g, a, ph], F[b]),
                    ]
                    for d in range(n2):
                        terms.append(jmul(G[d, b, ph], G[g, a, d]))
                        terms.append(-jmul(G[d, a, ph], G[g, b, d]))
                        terms.append(-jmul(W[d, a, b], G[g, d, ph]))
                    r = jsum(terms)
                    R[g, ph, a, b] = r
                    R[g, ph, b, a] = -r
                    min_order = (
                        r.order if min_order is None else min(min_order, r.order)
                    )
    zero = jet_const(jet_space(n2, min_order if min_order is not None else 0), 0.0)
    for g in range(n2):
        for ph in range(n2):
            for a in range(n2):
                R[g, ph, a, a] = zero
    return R


def _omega_jets(N, F_phi):
    """Omega_ija = e_i(N_ja) - e_j(N_ia) along the oblique horizontal frame."""
    n = N.shape[0]
    out = np.empty((n, n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            for a in range(n):
                out[i, j, a] = jsub(
                    frame_deriv(N[j, a], F_phi[i]), frame_deriv(N[i, a], F_phi[j])
                )
    return out


def _nijenhuis_values(F, C, J_coord):
    """Nijenhuis tensor of the operator J_coord sampled on frame pairs,
    expressed back in frame components (complex values)."""
    n2 = F.shape[0]

    def apply_J(vec):
        return [
            jsum([jmul(J_coord[A, B], vec[B]) for B in range(n2)]) for A in range(n2)
        ]

    out = np.zeros((n2, n2, n2), dtype=np.complex128)
    for a in range(n2):
        X = list(F[a])
        JX = apply_J(X)
        for b in range(a + 1, n2):
            Y = list(F[b])
            JY = apply_J(Y)
            t1 = vector_bracket(JX, JY)
            t2 = apply_J(vector_bracket(JX, Y))
            t3 = apply_J(vector_bracket(X, JY))
            t4 = vector_bracket(X, Y)
            comp = [jsub(jsub(jsub(t1[B], t2[B]), t3[B]), t4[B]) for B in range(n2)]
            for g in range(n2):
                val = jsum([jmul(C[g, B], comp[B]) for B in range(n2)]).value
                out[g, a, b] = val
                out[g, b, a] = -val
    return out


# ---------------------------------------------------------------------------
# the per-point evaluation cache


class GeometryAtPoint:
    """Lazy evaluation cache for the cotangent-side tower at one point.

    `order` is the seed jet order; each derived object consumes
    derivatives, and the documented minimum orders are enforced up front
    so callers get a clear error instead of silently truncated junk.
    """

    DEPTH = {
        "g": 2,
        "nconnection": 3,
        "frames": 3,
        "lifts": 3,
        "canonical_d": 3,
        "anholonomy": 4,
        "omega": 4,
        "torsion": 4,
        "curvature_d": 4,
        "phi_pair": 4,
        "nijenhuis": 4,
        "curvature_phi": 5,
        "ricci": 5,
    }

    def __init__(self, generator, point, order, hessian_tol=1e-10):
        self.fn = as_generator(generator)
        self.point = point
        self.order = order
        self.hessian_tol = hessian_tol
        self.n = point.n
        self.space, self.base_jets, self.fiber_jets = point.jets(order)
        self._cache = {}

    def _memo(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def _need(self, stage):
        depth = self.DEPTH[stage]
        if self.order < depth:
            raise InsufficientJetOrder(
                f"{stage} needs jet order >= {depth}, have {self.order}"
            )

    # -- scalar and metric ---------------------------------------------------

    @property
    def H(self):
        return self._memo("H", lambda: self.fn(self.base_jets, self.fiber_jets))

    @property
    def g_upper(self):
        def build():
            self._need("g")
            n = self.n
            out = np.empty((n, n), dtype=object)
            for a in range(n):
                da = self.H.partial(n + a)
                for b in range(n):
                    out[a, b] = da.partial(n + b)
            return out

        return self._memo("g_upper", build)

    @property
    def g_lower(self):
        return self._memo(
            "g_lower",
            lambda: jet_matrix_inverse(self.g_upper, rel_tol=self.hessian_tol),
        )

    # -- nonlinear connection ------------------------------------------------

    @property
    def nconnection(self):
        def build():
            self._need("nconnection")
            n = self.n
            mixed = np.empty((n, n), dtype=object)
            for k in range(n):
                dk = self.H.partial(n + k)
                for i in range(n):
                    mixed[k, i] = dk.partial(i)
            out = np.empty((n, n), dtype=object)
            for i in range(n):
                for j in range(n):
                    br = bracket_jets(self.g_lower[i, j], self.H, n)
                    sym = jsum(
                        [jmul(mixed[k, i], self.g_lower[j, k]) for k in range(n)]
                        + [jmul(mixed[k, j], self.g_lower[i, k]) for k in range(n)]
                    )
                    out[i, j] = jsub(br, sym) * 0.5
            return out

        return self._memo("nconnection", build)

    # -- frames and frame-basis structures -----------------------------------

    def frames(self, kind):
        """(frame, coframe) jet matrices for the frame family used by the
        requested connection kind."""

        def build():
            self._need("frames")
            if kind == "canonical_d":
                return _frame_jets(self.nconnection, "n_adapted_cotangent")
            return _frame_jets(self.nconnection, "phi_adapted", self.g_upper)

        return self._memo(("frames", kind), build)

    @property
    def frames_n(self):
        return self.frames("canonical_d")

    @property
    def frames_phi(self):
        return self.frames("phi_pair")

    def theta_frame(self, kind):
        return self._memo(
            ("theta_frame", kind),
            lambda: _theta_on_frames(self.frames(kind)[0], self.n),
        )

    def metric_frame(self, kind):
        """Lift metric on frame pairs: diag(g_ij, g^{ab}) for the plain
        frame, the bordered form for the oblique frame."""

        def build():
            n = self.n
            gl, gu = self.g_lower, self.g_upper
            ref = self.nconnection[0, 0]
            zero = jet_const(ref.space, 0.0)
            G = np.full((2 * n, 2 * n), zero, dtype=object)
            for i in range(n):
                for j in range(n):
                    G[i, j] = gl[i, j]
                    G[n + i, n + j] = (
                        gu[i, j] if kind == "canonical_d" else gu[i, j] * 2.0
                    )
            if kind == "phi_pair":
                minus_one = jet_const(ref.space, -1.0)
                for i in range(n):
                    G[i, n + i] = minus_one
                    G[n + i, i] = minus_one
            return G

        return self._memo(("metric_frame", kind), build)

    def metric_frame_inverse(self, kind):
        def build():
            n = self.n
            gl, gu = self.g_lower, self.g_upper
            ref = self.nconnection[0, 0]
            zero = jet_const(ref.space, 0.0)
            G = np.full((2 * n, 2 * n), zero, dtype=object)
            for i in range(n):
                for j in range(n):
                    G[i, j] = gu[i, j] if kind == "canonical_d" else gu[i, j] * 2.0
                    G[n + i, n + j] = gl[i, j]
            if kind == "phi_pair":
                one = jet_const(ref.space, 1.0)
                for i in range(n):
                    G[i, n + i] = one
                    G[n + i, i] = one
            return G

        return self._memo(("metric_frame_inv", kind), build)

    def complex_structure_frame(self, kind):
        """Almost complex operator on frame components (acts on column
        vectors of frame components)."""

        def build():
            n = self.n
            gl, gu = self.g_lower, self.g_upper
            ref = self.nconnection[0, 0]
            zero = jet_const(ref.space, 0.0)
            J = np.full((2 * n, 2 * n), zero, dtype=object)
            if kind == "canonical_d":
                for i in range(n):
                    for a in range(n):
                        J[i, n + a] = gu[a, i]
                        J[n + a, i] = -gl[i, a]
            else:
                one = jet_const(ref.space, 1.0)
                for i in range(n):
                    J[i, i] = -one
                    J[n + i, n + i] = one
                    for a in range(n):
                        J[i, n + a] = gu[a, i] * 2.0
                        J[n + a, i] = -gl[i, a]
            return J

        return self._memo(("J_frame", kind), build)

    def operator_to_coord(self, O_frame, kind):
        F, C = self.frames(kind)
        return _mm(_mm(_transpose(F), O_frame), C)

    @property
    def theta_coord(self):
        def build():
            self._need("lifts")
            _, C = self.frames_n
            return _mm(_mm(_transpose(C), self.theta_frame("canonical_d")), C)

        return self._memo("theta_coord", build)

    @property
    def lift_metric_coord(self):
        def build():
            self._need("lifts")
            _, C = self.frames_n
            return _mm(_mm(_transpose(C), self.metric_frame("canonical_d")), C)

        return self._memo("lift_metric_coord", build)

    # -- anholonomy, connections, torsion, curvature --------------------------

    def anholonomy(self, kind):
        def build():
            self._need("anholonomy")
            F, C = self.frames(kind)
            return _anholonomy(F, C)

        return self._memo(("anholonomy", kind), build)

    def connection(self, kind):
        """Full coefficient array Gamma[output][direction][source]."""

        def build():
            self._need(kind)
            n = self.n
            F, _ = self.frames(kind)
            gl, gu = self.g_lower, self.g_upper
            h_rows = [F[i] for i in range(n)]
            v_rows = [F[n + a] for a in range(n)]
            if kind == "canonical_d":
                # plain adapted frame: the h-h bracket is purely vertical
                # and the v-v bracket vanishes, so no corrections enter
                w_h = w_v = None
            else:
                W = self.anholonomy(kind)
                w_h = [
                    [
                        [
                            jsum([jmul(gl[s, m], W[m, j, k]) for m in range(n)])
                            for k in range(n)
                        ]
                        for j in range(n)
                    ]
                    for s in range(n)
                ]
                w_v = [
                    [
                        [
                            jsum(
                                [
                                    jmul(gu[c, m], W[n + m, n + a, n + b])
                                    for m in range(n)
                                ]
                            )
                            for b in range(n)
                        ]
                        for a in range(n)
                    ]
                    for c in range(n)
                ]
            hhh = _koszul_block(h_rows, gl, gu, w_h)
            vvv = _koszul_block(v_rows, gu, gl, w_v)
            return _full_connection(hhh, vvv)

        return self._memo(("connection", kind), build)

    def torsion(self, kind):
        def build():
            self._need("torsion")
            return _torsion_full(self.connection(kind), self.anholonomy(kind))

        return self._memo(("torsion", kind), build)

    def curvature(self, kind):
        def build():
            self._need("curvature_d" if kind == "canonical_d" else "curvature_phi")
            return _curvature_full(
                self.connection(kind), self.anholonomy(kind), self.frames(kind)[0]
            )

        return self._memo(("curvature", kind), build)

    @property
    def omega(self):
        def build():
            self._need("omega")
            return _omega_jets(self.nconnection, self.frames_phi[0])

        return self._memo("omega", build)

    @property
    def ricci_phi(self):
        def build():
            self._need("ricci")
            R = self.curvature("phi_pair")
            n2 = 2 * self.n
            ric = np.empty((n2, n2), dtype=object)
            for b in range(n2):
                for g in range(n2):
                    ric[b, g] = jsum([R[a, b, g, a] for a in range(n2)])
            return ric

        return self._memo("ricci_phi", build)

    @property
    def scalar_phi(self):
        def build():
            ric = self.ricci_phi
            ginv = self.metric_frame_inverse("phi_pair")
            n2 = 2 * self.n
            return jsum(
                [jmul(ginv[a, b], ric[a, b]) for a in range(n2) for b in range(n2)]
            )

        return self._memo("scalar_phi", build)

    @property
    def nijenhuis(self):
        def build():
            self._need("nijenhuis")
            F, C = self.frames_n
            Jc = self.operator_to_coord(
                self.complex_structure_frame("canonical_d"), "canonical_d"
            )
            return _nijenhuis_values(F, C, Jc)

        return self._memo("nijenhuis", build)


# ---------------------------------------------------------------------------
# public operations


def fundamental_tensor_hamilton(H, pt, order=2, hessian_tol=1e-10):
    """Momentum Hessian of H and its inverse, as jet matrices."""
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    return FundamentalTensor(geo.g_upper, geo.g_lower, COTANGENT)


def _velocity_hessian(L, pt, order, hessian_tol):
    fn = as_generator(L)
    _, xs, ys = pt.jets(order)
    Lj = fn(xs, ys)
    n = pt.n
    lower = np.empty((n, n), dtype=object)
    for a in range(n):
        da = Lj.partial(n + a)
        for b in range(n):
            lower[a, b] = da.partial(n + b)
    upper = jet_matrix_inverse(lower, rel_tol=hessian_tol)
    return Lj, lower, upper


def fundamental_tensor_lagrange(L, pt, order=2, hessian_tol=1e-10):
    """Velocity Hessian of L (lower indices) and its inverse."""
    _, lower, upper = _velocity_hessian(L, pt, order, hessian_tol)
    return FundamentalTensor(upper, lower, TANGENT)


def vielbein_lift(g_base, vielbein, pt, order=2, hessian_tol=1e-10):
    """Fiber metric g^{ij}(x,p) = e^i_k e^j_l g^{kl}(x) built from a base
    metric given with lower indices (x only) and vielbein entries (x, p)."""
    n = pt.n
    _, xs, ps = pt.jets(order)

    def entry_jet(entry):
        return as_generator(entry)(xs, ps)

    base_lo = np.empty((n, n), dtype=object)
    E = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            base_lo[i, j] = entry_jet(g_base[i][j])
            E[i, j] = entry_jet(vielbein[i][j])
    base_up = jet_matrix_inverse(base_lo, rel_tol=hessian_tol)
    upper = _mm(_mm(E, base_up), _transpose(E))
    lower = jet_matrix_inverse(upper, rel_tol=hessian_tol)
    return FundamentalTensor(upper, lower, COTANGENT)


def induced_hamiltonian(g_base, vielbein):
    """Kinetic generator (1/2) g^{ab}(x,p) p_a p_b for a vielbein lift,
    as a callable on jets."""
    base_fns = [[as_generator(e) for e in row] for row in g_base]
    viel_fns = [[as_generator(e) for e in row] for row in vielbein]

    def fn(xs, ps):
        n = len(xs)
        base_lo = np.empty((n, n), dtype=object)
        E = np.empty((n, n), dtype=object)
        for i in range(n):
            for j in range(n):
                base_lo[i, j] = base_fns[i][j](xs, ps)
                E[i, j] = viel_fns[i][j](xs, ps)
        base_up = jet_matrix_inverse(base_lo)
        upper = _mm(_mm(E, base_up), _transpose(E))
        quad = jsum(
            [jmul(upper[a, b], ps[a], ps[b]) for a in range(n) for b in range(n)]
        )
        return quad * 0.5

    return fn


def semi_spray(L, pt, order=2, hessian_tol=1e-10):
    """Spray coefficients G^i = (1/2) g^{ij} (d2L/dy^j dx^k y^k - dL/dx^j)."""
    n = pt.n
    _, xs, ys = pt.jets(order)
    Lj, _, upper = _velocity_hessian(L, pt, order, hessian_tol)
    out = []
    for i in range(n):
        inner = []
        for j in range(n):
            dj = Lj.partial(n + j)
            mixed = jsum([jmul(dj.partial(k), ys[k]) for k in range(n)])
            inner.append(jmul(upper[i, j], jsub(mixed, Lj.partial(j))))
        out.append(jsum(inner) * 0.5)
    return out


def nconnection_tangent(L, pt, order=3, hessian_tol=1e-10):
    """N_i^a = dG^a/dy^i for the Lagrange semi-spray."""
    n = pt.n
    G = semi_spray(L, pt, order, hessian_tol)
    coeffs = np.empty((n, n), dtype=object)
    for i in range(n):
        for a in range(n):
            coeffs[i, a] = G[a].partial(n + i)
    return NConnection(TANGENT, coeffs)


def nconnection_cotangent(H, pt, order=3, hessian_tol=1e-10):
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    return NConnection(COTANGENT, geo.nconnection)


def poisson_bracket(f, g, pt, order=1):
    """Poisson bracket jet of two generators at a cotangent point."""
    _, xs, ps = pt.jets(order)
    fj = as_generator(f)(xs, ps)
    gj = as_generator(g)(xs, ps)
    return bracket_jets(fj, gj, pt.n)


def adapted_frames(nconn, gtensor, variant):
    """Frame and coframe value matrices for the requested variant."""
    F, C = _frame_jets(nconn.coeffs, variant, gtensor.upper)
    return AdaptedFrame(real_values(F), real_values(C), variant)


def metric_lift(gtensor, nconn):
    """Lift metric in the coordinate basis, as a jet matrix."""
    n = nconn.coeffs.shape[0]
    variant = (
        "n_adapted_tangent" if nconn.bundle == TANGENT else "n_adapted_cotangent"
    )
    _, C = _frame_jets(nconn.coeffs, variant)
    zero = jet_const(nconn.coeffs[0, 0].space, 0.0)
    G = np.full((2 * n, 2 * n), zero, dtype=object)
    for i in range(n):
        for j in range(n):
            G[i, j] = gtensor.lower[i, j]
            G[n + i, n + j] = gtensor.upper[i, j]
    return _mm(_mm(_transpose(C), G), C)


def almost_structures(gtensor, nconn, with_nijenhuis=True):
    """Almost complex/product/symplectic package in the coordinate basis.

    The Nijenhuis samples need one spare jet order in the inputs; pass
    with_nijenhuis=False when only the pointwise operators are wanted.
    """
    n = nconn.coeffs.shape[0]
    N = nconn.coeffs
    F, C = _frame_jets(N, "n_adapted_cotangent")
    ref = N[0, 0]
    zero = jet_const(ref.space, 0.0)
    one = jet_const(ref.space, 1.0)
    Jf = np.full((2 * n, 2 * n), zero, dtype=object)
    Pf = np.full((2 * n, 2 * n), zero, dtype=object)
    Jt = np.full((2 * n, 2 * n), zero, dtype=object)
    for i in range(n):
        Pf[i, i] = one
        Pf[n + i, n + i] = -one
        Jt[i, n + i] = one
        Jt[n + i, i] = -one
        for a in range(n):
            Jf[i, n + a] = gtensor.upper[a, i]
            Jf[n + a, i] = -gtensor.lower[i, a]
    thetaf = _theta_on_frames(F, n)
    Ft = _transpose(F)

    def to_coord(O):
        return _mm(_mm(Ft, O), C)

    J_coord = to_coord(Jf)
    theta_coord = _mm(_mm(_transpose(C), thetaf), C)
    if with_nijenhuis:
        nij = _nijenhuis_values(F, C, J_coord)
    else:
        nij = np.zeros((2 * n, 2 * n, 2 * n), dtype=np.complex128)
    return AlmostStructures(
        real_values(J_coord),
        real_values(to_coord(Pf)),
        real_values(to_coord(Jt)),
        real_values(theta_coord),
        nij,
    )


def dtheta_check(H, pt, step=1e-4):
    """Max exterior-derivative component of the assembled symplectic form,
    by central finite differences of its coordinate components."""

    def theta_at(arr):
        geo = GeometryAtPoint(H, PhasePoint.from_array(arr), 3)
        return real_values(geo.theta_coord)

    base = pt.as_array()
    n2 = 2 * pt.n
    grad = np.empty((n2, n2, n2))
    for A in range(n2):
        plus = base.copy()
        plus[A] += step
        minus = base.copy()
        minus[A] -= step
        grad[A] = (theta_at(plus) - theta_at(minus)) / (2 * step)
    worst = 0.0
    for A in range(n2):
        for B in range(A + 1, n2):
            for Cc in range(B + 1, n2):
                val = grad[A][B, Cc] + grad[B][Cc, A] + grad[Cc][A, B]
                worst = max(worst, abs(val))
    return worst


def _coeffs_from(geo, kind):
    G = geo.connection(kind)
    n = geo.n
    hL = np.empty((n, n, n), dtype=object)
    vC = np.empty((n, n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                hL[i, j, k] = G[i, k, j]
                vC[i, j, k] = G[i, n + k, j]
    return DConnectionCoeffs(hL, vC, kind)


def canonical_dconnection(H, pt, order=3, hessian_tol=1e-10):
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    return _coeffs_from(geo, "canonical_d")


def phi_connection(H, pt, order=4, hessian_tol=1e-10):
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    return _coeffs_from(geo, "phi_pair")


def torsion_curvature(coeffs, nconn, gtensor, pt=None):
    """Torsion and curvature blocks of a stored connection.

    Everything is rebuilt from the jet matrices, which already carry the
    point; `pt` is accepted for signature symmetry and not consulted.
    The inputs must have been built with enough spare jet order (seed 4
    for torsion values, 5 for oblique curvature values).
    """
    del pt
    N = nconn.coeffs
    n = N.shape[0]
    if N[0, 0].order < 1:
        raise InsufficientJetOrder(
            "torsion_curvature needs nonlinear-connection jets of order >= 1; "
            "rebuild the inputs with a higher seed order"
        )
    variant = "n_adapted_cotangent" if coeffs.kind == "canonical_d" else "phi_adapted"
    F, C = _frame_jets(N, variant, gtensor.upper)
    W = _anholonomy(F, C)
    G = _full_from_coeffs(coeffs)
    T = _torsion_full(G, W)
    R = _curvature_full(G, W, F)
    if variant == "phi_adapted":
        F_phi = F
    else:
        F_phi, _ = _frame_jets(N, "phi_adapted", gtensor.upper)
    omega = values(_omega_jets(N, F_phi))
    T_hij = values(T[:n, :n, :n])
    S_abc = values(T[n:, n:, n:])
    if coeffs.kind == "canonical_d":
        # vanishing of these two blocks is a theorem for the canonical
        # connection; a violation means corrupted inputs
        assert abs(T_hij).max() <= 1e-10 and abs(S_abc).max() <= 1e-10
    # mixed torsion reported as L^c_{ai} - d^c(N_ia): minus the (v out,
    # h direction, v source) block of the structure equations
    P_aic = np.empty((n, n, n), dtype=np.complex128)
    for a in range(n):
        for i in range(n):
            for c in range(n):
                P_aic[a, i, c] = -T[n + a, i, n + c].value
    R_ijkm = values(R[:n, :n, :n, :n])
    P_ijkc = values(R[:n, :n, :n, n:])
    S_ijbc = values(R[:n, :n, n:, n:])
    return CurvatureTorsion(
        omega, T_hij, S_abc, P_aic, R_ijkm, P_ijkc, S_ijbc, values(W)
    )


def ricci_scalar_phi(H, pt, order=5, hessian_tol=1e-10):
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    return values(geo.ricci_phi), geo.scalar_phi.value.real


def einstein_residual(H, pt, lam=0.0, order=5, hessian_tol=1e-10):
    """Left side of the contracted field equations with zero source: the
    raised Ricci block minus (1/2)(scalar + lambda) times the identity,
    with the coordinate leg restored through the oblique coframe."""
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    ric = values(geo.ricci_phi)
    scalar = geo.scalar_phi.value
    ginv = values(geo.metric_frame_inverse("phi_pair"))
    Cv = values(geo.frames_phi[1])
    resid = ginv @ ric @ Cv - 0.5 * (scalar + lam) * Cv
    return resid.real


def nijenhuis_sample(H, pt, order=4, hessian_tol=1e-10):
    geo = GeometryAtPoint(H, pt, order, hessian_tol)
    return geo.nijenhuis


# ---------------------------------------------------------------------------
# residual suites shared by the tests and the CLI checker


def frame_identity_residuals(geo):
    """Max residuals of the defining frame and almost-structure identities."""
    out = {}
    n2 = 2 * geo.n
    eye = np.eye(n2)
    for kind, label in (("canonical_d", "plain"), ("phi_pair", "oblique")):
        F, C = geo.frames(kind)
        Fv, Cv = values(F), values(C)
        out[f"{label}_frame_pairing"] = float(np.abs(Fv @ Cv.T - eye).max())
        Jf = values(geo.complex_structure_frame(kind))
        out[f"{label}_J_squared"] = float(np.abs(Jf @ Jf + eye).max())
        th = values(geo.theta_frame(kind))
        gf = values(geo.metric_frame(kind))
        out[f"{label}_theta_vs_gJ"] = float(np.abs(Jf.T @ gf - th).max())
    P = np.diag([1.0] * geo.n + [-1.0] * geo.n)
    out["product_squared"] = float(np.abs(P @ P - eye).max())
    return out


def anholonomy_closed_form_residual(geo):
    """Compare the jet-bracket anholonomy of the plain frame against its
    closed form: the vertical part of [e_i, e_j] must match the
    nonlinear-connection curvature taken along the plain frame, the
    mixed part must match -d^c(N_ia), and every other block must vanish.
    """
    n = geo.n
    W = values(geo.anholonomy("canonical_d"))
    N = geo.nconnection
    Fn, _ = geo.frames_n
    worst = 0.0
    for i in range(n):
        for j in range(n):
            for a in range(n):
                closed = jsub(
                    frame_deriv(N[j, a], Fn[i]), frame_deriv(N[i, a], Fn[j])
                ).value
                worst = max(worst, abs(W[n + a, i, j] - closed))
            for g in range(n):
                worst = max(worst, abs(W[g, i, j]))
    for i in range(n):
        for c in range(n):
            for a in range(n):
                dn = N[i, a].partial(n + c).value
                worst = max(worst, abs(W[n + a, i, n + c] + dn))
            for g in range(n):
                worst = max(worst, abs(W[g, i, n + c]))
    for b in range(n):
        for c in range(n):
            for g in range(2 * n):
                worst = max(worst, abs(W[g, n + b, n + c]))
    return float(worst)


def metric_compat_residual(geo, kind):
    """Max component of the covariant derivative of the frame metric."""
    return _compat_residual(geo, kind, geo.metric_frame(kind))


def theta_compat_residual(geo, kind):
    """Max component of the covariant derivative of the symplectic form."""
    return _compat_residual(geo, kind, geo.theta_frame(kind))


def _compat_residual(geo, kind, form):
    G = geo.connection(kind)
    F, _ = geo.frames(kind)
    n2 = 2 * geo.n
    worst = 0.0
    for a in range(n2):
        for b in range(n2):
            for c in range(n2):
                terms = [frame_deriv(form[b, c], F[a])]
                for d in range(n2):
                    terms.append(-jmul(G[d, a, b], form[d, c]))
                    terms.append(-jmul(G[d, a, c], form[b, d]))
                worst = max(worst, abs(jsum(terms).value))
    return float(worst)
