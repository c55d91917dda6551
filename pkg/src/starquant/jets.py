"""Dense truncated multivariate Taylor (jet) arithmetic.

A jet of order K in d variables stores one complex coefficient per monomial
of total degree <= K.  The coefficient at exponent alpha equals the partial
derivative d^alpha f / alpha! at the expansion point, so jets propagate
exact derivatives through arithmetic, composition with elementary
functions, and matrix inversion.

Monomials are listed degree first (graded lexicographic), which makes
truncation to a lower order a prefix slice of the coefficient vector and
keeps multiplication tables reusable across orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .errors import DegenerateHessian, InsufficientJetOrder, JetDomainError

_SCALARS = (int, float, complex, np.integer, np.floating, np.complexfloating)

# Tolerance for treating a nominally complex value as real when checking
# domains of log/sqrt/fractional powers.
_TINY_IMAG = 1e-12


def _monomials(dim, order):
    monos = []
    for deg in range(order + 1):
        batch = []
        for combo in combinations_with_replacement(range(dim), deg):
            exp = [0] * dim
            for var in combo:
                exp[var] += 1
            batch.append(tuple(exp))
        batch.sort()
        monos.extend(batch)
    return monos


class JetSpace:
    """Shared description of one truncation (dim, order).

    Obtain instances through :func:`jet_space`; the factory caches them so
    the index tables are built once per (dim, order) and jets can share
    them.
    """

    def __init__(self, dim, order):
        if dim < 1 or order < 0:
            raise ValueError(f"need dim >= 1 and order >= 0, got ({dim}, {order})")
        self.dim = int(dim)
        self.order = int(order)
        self.monos = _monomials(self.dim, self.order)
        self.size = len(self.monos)
        self.index = {m: i for i, m in enumerate(self.monos)}
        self.degrees = np.array([sum(m) for m in self.monos], dtype=np.int64)
        # prefix[d] = number of monomials of degree <= d; relies on the
        # graded ordering.
        self.prefix = np.searchsorted(self.degrees, np.arange(self.order + 1), side="right")
        self._mul_table = None
        self._partial_tables = {}

    def __repr__(self):
        return f"JetSpace(dim={self.dim}, order={self.order})"

    def variables(self, values):
        """Seed one first-order-identity jet per variable at the point."""
        vals = np.asarray(values, dtype=np.complex128).ravel()
        if vals.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} values, got {vals.shape}")
        return [jet_var(self, i, vals[i]) for i in range(self.dim)]

    def _mul(self):
        # ii, jj -> kk index triples for the truncated product; built once.
        if self._mul_table is None:
            expmat = np.array(self.monos, dtype=np.int64)
            # Digit encoding is additive because exponent sums stay <= order.
            pows = (self.order + 1) ** np.arange(self.dim, dtype=np.int64)
            keys = expmat @ pows
            sortidx = np.argsort(keys)
            sorted_keys = keys[sortidx]
            ii, jj, kk = [], [], []
            for i in range(self.size):
                room = self.order - int(self.degrees[i])
                stop = int(self.prefix[room])
                pos = np.searchsorted(sorted_keys, keys[:stop] + keys[i])
                kk.append(sortidx[pos])
                ii.append(np.full(stop, i, dtype=np.int64))
                jj.append(np.arange(stop, dtype=np.int64))
            self._mul_table = (
                np.concatenate(ii),
                np.concatenate(jj),
                np.concatenate(kk),
            )
        return self._mul_table

    def _partial(self, var):
        tab = self._partial_tables.get(var)
        if tab is None:
            lower = jet_space(self.dim, self.order - 1)
            src, dst, fac = [], [], []
            for s, m in enumerate(self.monos):
                if m[var]:
                    shifted = m[:var] + (m[var] - 1,) + m[var + 1 :]
                    src.append(s)
                    dst.append(lower.index[shifted])
                    fac.append(m[var])
            tab = (
                np.array(src, dtype=np.int64),
                np.array(dst, dtype=np.int64),
                np.array(fac, dtype=np.float64),
            )
            self._partial_tables[var] = tab
        return tab


@lru_cache(maxsize=None)
def jet_space(dim, order):
    return JetSpace(dim, order)


class Jet:
    """One truncated Taylor expansion.  Treat instances as immutable."""

    __slots__ = ("space", "coeffs")

    # Keep numpy scalars from hijacking the reflected operators.
    __array_ufunc__ = None

    def __init__(self, space, coeffs):
        arr = np.asarray(coeffs, dtype=np.complex128)
        if arr.shape != (space.size,):
            raise ValueError(f"expected {space.size} coefficients, got {arr.shape}")
        self.space = space
        self.coeffs = arr

    @property
    def value(self):
        return complex(self.coeffs[0])

    @property
    def dim(self):
        return self.space.dim

    @property
    def order(self):
        return self.space.order

    def __repr__(self):
        return f"Jet(dim={self.dim}, order={self.order}, value={self.value:.6g})"

    def _compat(self, other):
        if self.space.dim != other.space.dim or self.space.order != other.space.order:
            raise ValueError(
                f"jet mismatch: {self.space!r} vs {other.space!r}; "
                "truncate explicitly before combining"
            )

    def __add__(self, other):
        if isinstance(other, Jet):
            self._compat(other)
            return Jet(self.space, self.coeffs + other.coeffs)
        if isinstance(other, _SCALARS):
            out = self.coeffs.copy()
            out[0] += other
            return Jet(self.space, out)
        return NotImplemented

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            self._compat(other)
            return Jet(self.space, self.coeffs - other.coeffs)
        if isinstance(other, _SCALARS):
            out = self.coeffs.copy()
            out[0] -= other
            return Jet(self.space, out)
        return NotImplemented

    def __rsub__(self, other):
        if isinstance(other, _SCALARS):
            out = -self.coeffs
            out[0] += other
            return Jet(self.space, out)
        return NotImplemented

    def __neg__(self):
        return Jet(self.space, -self.coeffs)

    def __mul__(self, other):
        if isinstance(other, Jet):
            self._compat(other)
            ii, jj, kk = self.space._mul()
            prod = self.coeffs[ii] * other.coeffs[jj]
            out = np.bincount(kk, weights=prod.real, minlength=self.space.size).astype(
                np.complex128
            )
            out += 1j * np.bincount(kk, weights=prod.imag, minlength=self.space.size)
            return Jet(self.space, out)
        if isinstance(other, _SCALARS):
            return Jet(self.space, self.coeffs * other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * pow_const(other, -1)
        if isinstance(other, _SCALARS):
            return Jet(self.space, self.coeffs / other)
        return NotImplemented

    def __rtruediv__(self, other):
        if isinstance(other, _SCALARS):
            return pow_const(self, -1) * other
        return NotImplemented

    def __pow__(self, power):
        if isinstance(power, (float, np.floating)) and float(power).is_integer():
            power = int(power)
        if isinstance(power, (int, np.integer)):
            if power >= 0:
                return _int_pow(self, int(power))
            return pow_const(self, int(power))
        if isinstance(power, (float, np.floating)):
            return pow_const(self, float(power))
        return NotImplemented

    def partial(self, var):
        """Derivative with respect to variable `var`; drops one order."""
        if not 0 <= var < self.dim:
            raise ValueError(f"variable index {var} out of range for dim {self.dim}")
        if self.order == 0:
            raise InsufficientJetOrder("cannot differentiate an order-0 jet")
        src, dst, fac = self.space._partial(var)
        lower = jet_space(self.dim, self.order - 1)
        out = np.zeros(lower.size, dtype=np.complex128)
        out[dst] = self.coeffs[src] * fac
        return Jet(lower, out)

    def truncate(self, order):
        if order == self.order:
            return self
        if order > self.order:
            raise InsufficientJetOrder(
                f"cannot extend an order-{self.order} jet to order {order}"
            )
        tgt = jet_space(self.dim, order)
        return Jet(tgt, self.coeffs[: tgt.size].copy())

    def coefficient(self, mono):
        mono = tuple(int(a) for a in mono)
        if len(mono) != self.dim or any(a < 0 for a in mono):
            raise ValueError(f"bad exponent tuple {mono} for dim {self.dim}")
        if sum(mono) > self.order:
            raise InsufficientJetOrder(
                f"degree {sum(mono)} exceeds jet order {self.order}"
            )
        return complex(self.coeffs[self.space.index[mono]])

    def derivative(self, mono):
        """Partial derivative value d^mono f at the point (coefficient times mono!)."""
        fact = 1
        for a in mono:
            fact *= math.factorial(int(a))
        return self.coefficient(mono) * fact


def jet_const(space, value):
    out = np.zeros(space.size, dtype=np.complex128)
    out[0] = value
    return Jet(space, out)


def jet_var(space, var, value):
    if not 0 <= var < space.dim:
        raise ValueError(f"variable index {var} out of range for dim {space.dim}")
    out = np.zeros(space.size, dtype=np.complex128)
    out[0] = value
    if space.order >= 1:
        unit = tuple(1 if t == var else 0 for t in range(space.dim))
        out[space.index[unit]] = 1.0
    return Jet(space, out)


def align(*jets):
    """Truncate all jets to the smallest order present among them."""
    k = min(j.order for j in jets)
    return tuple(j.truncate(k) for j in jets)


def _int_pow(jet, n):
    # Exact on polynomials: repeated squaring, no series expansion.
    out = jet_const(jet.space, 1.0)
    base = jet
    while n:
        if n & 1:
            out = out * base
        n >>= 1
        if n:
            base = base * base
    return out


def _horner(jet, series):
    # Compose the univariate series with the nilpotent part of the jet.
    u = jet - jet.value
    out = jet_const(jet.space, series[-1])
    for m in range(len(series) - 2, -1, -1):
        out = out * u + series[m]
    return out


def _require_positive_real(fn, c):
    if abs(c.imag) > _TINY_IMAG * max(1.0, abs(c.real)) or c.real <= 0.0:
        raise JetDomainError(f"{fn} needs a positive real value, got {c}")
    return c.real


def pow_const(jet, exponent):
    """Raise a jet to a constant real power via the binomial series.

    Non-negative integer exponents take the exact polynomial route and
    work for any jet; everything else needs a nonzero value, and
    fractional exponents additionally need the value off the negative
    real axis.
    """
    if isinstance(exponent, (int, np.integer)) and exponent >= 0:
        return _int_pow(jet, int(exponent))
    c = jet.value
    if abs(c) == 0.0:
        raise JetDomainError(f"power {exponent} of a jet whose value vanishes")
    is_int = float(exponent).is_integer()
    if not is_int and c.real < 0.0 and abs(c.imag) <= _TINY_IMAG * max(1.0, abs(c.real)):
        raise JetDomainError(
            f"fractional power {exponent} at a negative real value {c}"
        )
    r = float(exponent)
    term = c**r if not is_int else c ** int(r)
    series = [term]
    for m in range(1, jet.order + 1):
        term = term * (r - m + 1) / (m * c)
        series.append(term)
    return _horner(jet, series)


def apply_unary(jet, fn):
    """Compose a named scalar function with a jet.

    Supported names: sin, cos, exp, log, sqrt.  log and sqrt require a
    positive real value at the expansion point.
    """
    c = jet.value
    K = jet.order
    if fn == "exp":
        base = np.exp(c)
        series = [base / math.factorial(m) for m in range(K + 1)]
    elif fn == "sin" or fn == "cos":
        s, co = np.sin(c), np.cos(c)
        cycle = (s, co, -s, -co) if fn == "sin" else (co, -s, -co, s)
        series = [cycle[m % 4] / math.factorial(m) for m in range(K + 1)]
    elif fn == "log":
        c = _require_positive_real("log", c)
        series = [np.log(c)]
        for m in range(1, K + 1):
            series.append((-1.0) ** (m - 1) / (m * c**m))
    elif fn == "sqrt":
        _require_positive_real("sqrt", c)
        return pow_const(jet, 0.5)
    else:
        raise ValueError(f"unknown function {fn!r}")
    return _horner(jet, series)


def _obj_matmul(A, B):
    n, m = A.shape
    m2, k = B.shape
    out = np.empty((n, k), dtype=object)
    for i in range(n):
        for j in range(k):
            acc = A[i, 0] * B[0, j]
            for t in range(1, m):
                acc = acc + A[i, t] * B[t, j]
            out[i, j] = acc
    return out


def jet_matrix_inverse(matrix, rel_tol=1e-10):
    """Invert a square matrix of jets sharing one space.

    Splits M = M0 + Delta with M0 the value part.  When |det M0| falls at
    or below rel_tol * scale^n (scale = largest entry magnitude) the
    matrix is declared degenerate.  Otherwise the truncation-exact
    iteration X <- X0 - (X0 Delta) X runs `order` times, which is enough
    because Delta is nilpotent in the truncated algebra.
    """
    mat = np.asarray(matrix, dtype=object)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    n = mat.shape[0]
    space = mat[0, 0].space
    M0 = np.array([[mat[a, b].value for b in range(n)] for a in range(n)])
    scale = max(float(np.abs(M0).max()), 1e-300)
    det = np.linalg.det(M0)
    if abs(det) <= rel_tol * scale**n:
        raise DegenerateHessian(
            f"matrix value part is singular: |det| = {abs(det):.3e} "
            f"against scale^{n} = {scale**n:.3e}"
        )
    X0v = np.linalg.inv(M0)
    X0 = np.array(
        [[jet_const(space, X0v[a, b]) for b in range(n)] for a in range(n)],
        dtype=object,
    )
    delta = np.array(
        [[mat[a, b] - M0[a, b] for b in range(n)] for a in range(n)], dtype=object
    )
    X = X0
    for _ in range(space.order):
        X = X0 - _obj_matmul(_obj_matmul(X0, delta), X)
    return X


@dataclass(frozen=True)
class PhasePoint:
    """Point of the bundle: base coordinates x plus fiber coordinates.

    The fiber slot is momenta for cotangent work and velocities for
    tangent work; `p` and `y` name the same data.
    """

    x: tuple
    p: tuple

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        if len(self.x) != len(self.p):
            raise ValueError("base and fiber must have the same dimension")
        if not self.x:
            raise ValueError("need at least one dimension")

    @property
    def n(self):
        return len(self.x)

    @property
    def y(self):
        return self.p

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float).ravel()
        if arr.size % 2:
            raise ValueError(f"need an even number of coordinates, got {arr.size}")
        n = arr.size // 2
        return cls(tuple(arr[:n]), tuple(arr[n:]))

    def as_array(self):
        return np.array(self.x + self.p, dtype=float)

    def jets(self, order):
        """Seed coordinate jets at this point.

        Returns (space, base_jets, fiber_jets); base variables occupy
        slots 0..n-1, fiber variables slots n..2n-1.
        """
        space = jet_space(2 * self.n, order)
        seeded = space.variables(self.as_array())
        return space, seeded[: self.n], seeded[self.n :]
