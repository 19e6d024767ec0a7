r"""Cylinder propagators of the free-fermion Ising representation.

The partition function of the nearest-neighbor Ising model on the cylinder
``Z_L x [1, M]`` factorizes into two Gaussian Grassmann integrals with
antisymmetric coefficient matrices ``A_c`` (critical sector, field phi) and
``A_m`` (massive sector, field xi).  This module builds:

* the coefficient matrices themselves (mixed momentum/row representation,
  mapped to real space) and their dense inverses -- the *direct* oracle;
* the explicit Fourier representation of the critical propagator on the
  critical line ``t1 t2 + t1 + t2 = 1``, as a sum over the horizontal
  antiperiodic momenta and the vertical roots of the quantization condition
  ``sin k2(M+1) = B(k1) sin(k2 M)``;
* the massive propagator from the explicit ``s_+/-`` convolution kernels;
* the infinite-volume propagator (momentum integral, evaluated on a large
  torus with adaptive doubling), with optional multiplicative momentum
  cutoff -- the building block of the multiscale bulk part;
* the continuum scaling-limit propagator as an image sum.

All tables are stored in complex arithmetic; physical realness is asserted
by callers, never assumed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .lattice import CylinderGeometry


def critical_t2(t1):
    """The critical vertical coupling ``(1 - t1)/(1 + t1)``."""
    return (1.0 - t1) / (1.0 + t1)


@dataclass(frozen=True)
class ModelParams:
    """Couplings ``t_j = tanh(beta J_j)`` and their dressed counterparts.

    For the free theory (lambda = 0), the dressed values equal the bare
    ones; they are carried separately because every scaling/multiscale
    object is evaluated at the dressed parameters.
    """

    t1: float
    t2: float
    t1_star: float = None
    t2_star: float = None
    lam: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.t1 < 1.0 or not 0.0 < self.t2 < 1.0:
            raise ValueError("couplings t1, t2 must lie in (0, 1)")
        if self.t1_star is None:
            object.__setattr__(self, "t1_star", self.t1)
        if self.t2_star is None:
            object.__setattr__(self, "t2_star", self.t2)

    @classmethod
    def critical(cls, t1, lam=0.0):
        return cls(t1=t1, t2=critical_t2(t1), lam=lam)

    @classmethod
    def from_beta(cls, beta, J1=1.0, J2=1.0, lam=0.0):
        return cls(t1=math.tanh(beta * J1), t2=math.tanh(beta * J2), lam=lam)

    @property
    def is_critical(self):
        return abs(self.t1 * self.t2 + self.t1 + self.t2 - 1.0) < 1e-14

    @property
    def starred(self):
        """The dressed parameter pair as a bare ModelParams."""
        return ModelParams(t1=self.t1_star, t2=self.t2_star)


# ---------------------------------------------------------------------------
# Coefficient functions of the quadratic actions.
# ---------------------------------------------------------------------------


def coeff_b(k1, params):
    """b(k1) = (1 - t1^2)/|1 + t1 e^{i k1}|^2."""
    t1 = params.t1
    return (1.0 - t1 ** 2) / np.abs(1.0 + t1 * np.exp(1j * np.asarray(k1))) ** 2


def coeff_Delta(k1, params):
    """Delta(k1) = 2 t1 sin(k1)/|1 + t1 e^{i k1}|^2."""
    t1 = params.t1
    return 2.0 * t1 * np.sin(k1) / np.abs(1.0 + t1 * np.exp(1j * np.asarray(k1))) ** 2


def coeff_B(k1, params):
    """B(k1) = t2 |1 + t1 e^{i k1}|^2/(1 - t1^2)."""
    t1, t2 = params.t1, params.t2
    return t2 * np.abs(1.0 + t1 * np.exp(1j * np.asarray(k1))) ** 2 / (1.0 - t1 ** 2)


def coeff_D(k1, k2, params):
    """D(k1,k2) = 2(1-t2)^2 (1-cos k1) + 2(1-t1)^2 (1-cos k2)."""
    t1, t2 = params.t1, params.t2
    return (2.0 * (1.0 - t2) ** 2 * (1.0 - np.cos(k1))
            + 2.0 * (1.0 - t1) ** 2 * (1.0 - np.cos(k2)))


def coeff_record(k1, k2, params):
    """All four scalar coefficients at (k1, k2), as a dict."""
    return {
        "b": float(coeff_b(k1, params)),
        "Delta": float(coeff_Delta(k1, params)),
        "B": float(coeff_B(k1, params)),
        "D": float(coeff_D(k1, k2, params)),
    }


def horizontal_momenta(L):
    """The L antiperiodic momenta pi(2m-1)/L, m = -L/2+1 .. L/2."""
    ms = np.arange(-L // 2 + 1, L // 2 + 1)
    return np.pi * (2 * ms - 1) / L


def ghat_matrix(k1, k2, params):
    """The 2x2 momentum-space critical propagator density ghat(k1, k2).

    Vectorized: k1, k2 may be arrays of a common shape S; the result has
    shape S + (2, 2).
    """
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    t1 = params.t1
    B = coeff_B(k1, params)
    D = coeff_D(k1, k2, params)
    out = np.empty(np.broadcast(k1, k2).shape + (2, 2), dtype=complex)
    out[..., 0, 0] = -2j * t1 * np.sin(k1)
    out[..., 0, 1] = -(1.0 - t1 ** 2) * (1.0 - B * np.exp(-1j * k2))
    out[..., 1, 0] = (1.0 - t1 ** 2) * (1.0 - B * np.exp(1j * k2))
    out[..., 1, 1] = 2j * t1 * np.sin(k1)
    out /= D[..., None, None]
    return out


def normalization_N(k1, k2, params, M):
    """N_M(k1, k2): derivative-over-difference normalization factor."""
    B = coeff_B(k1, params)
    num = B * M * np.cos(np.asarray(k2) * M) - (M + 1) * np.cos(np.asarray(k2) * (M + 1))
    den = B * np.cos(np.asarray(k2) * M) - np.cos(np.asarray(k2) * (M + 1))
    return num / den


# ---------------------------------------------------------------------------
# Quantization-condition roots.
# ---------------------------------------------------------------------------


class RootCountError(RuntimeError):
    """Raised when the root counter cannot stabilize the root set."""


def solve_k2_roots(k1, M, params, *, include_zero=True, grid_factor=16):
    """Roots of ``sin k2(M+1) = B(k1) sin(k2 M)`` in (-pi, pi).

    Returns a sorted array.  The set is symmetric under k2 -> -k2; k2 = 0
    (always a solution) is included by default -- the choice that
    reproduces the direct inversion of A_c, see the critical-propagator
    tests.  Nonzero roots are bracketed on a grid of ``grid_factor*(M+1)``
    points in (0, pi) and refined to 1e-13.
    """
    B = float(coeff_B(k1, params))
    if B > 1.0 + 1e-9:
        # Off the critical line the condition may develop complex roots;
        # the Fourier representation is only used on the critical line.
        raise ValueError(f"B(k1) = {B} > 1: not on the critical line")

    def f(k2):
        return math.sin(k2 * (M + 1)) - B * math.sin(k2 * M)

    for factor in (grid_factor, 4 * grid_factor):
        n = factor * (M + 1)
        grid = np.linspace(0.0, np.pi, n + 1)
        vals = np.sin(grid * (M + 1)) - B * np.sin(grid * M)
        # k2 = 0 and k2 = pi are exact analytic zeros of the condition but
        # not quantized momenta; pin them so roundoff cannot fabricate a
        # sign change in the end cells
        vals[0] = 0.0
        vals[-1] = 0.0
        roots = []
        # skip the exact zero at k2 = 0 (handled separately below)
        for j in range(1, n):
            a, b = grid[j], grid[j + 1]
            fa, fb = vals[j], vals[j + 1]
            if fa == 0.0:
                if a > 1e-12:
                    roots.append(a)
                continue
            if fa * fb < 0.0:
                roots.append(brentq(f, a, b, xtol=1e-13))
        # the first cell may also bracket a root away from 0
        if vals[1] * vals[0] < 0.0:  # pragma: no cover - f(0)=0 exactly
            roots.append(brentq(f, grid[0] + 1e-14, grid[1], xtol=1e-13))
        if len(roots) == M:
            break
    else:
        raise RootCountError(
            f"found {len(roots)} positive roots, expected {M} "
            f"(k1={k1}, M={M}, B={B}); refine the bracketing grid")

    roots = np.asarray(sorted(roots))
    # polish to machine precision: brentq stops at xtol, which leaves the
    # quantization identity satisfied only to ~1e-12
    for _ in range(3):
        fr = np.sin(roots * (M + 1)) - B * np.sin(roots * M)
        dfr = (M + 1) * np.cos(roots * (M + 1)) - B * M * np.cos(roots * M)
        step = np.where(np.abs(dfr) > 1e-8, fr / np.where(dfr == 0, 1, dfr),
                        0.0)
        roots = roots - step
    # the condition's slope is O(M+1), so the attainable residual scales
    # with it
    if np.any(np.abs(np.sin(roots * (M + 1)) - B * np.sin(roots * M))
              > 1e-12 * (M + 1)):
        raise RootCountError("root residual above 1e-12 after refinement")
    full = np.concatenate([-roots[::-1], [0.0] if include_zero else [], roots])
    return full


@dataclass(frozen=True)
class MomentumGrid:
    """All (k1, k2) pairs of the critical Fourier sum, flattened."""

    geom: CylinderGeometry
    k1_values: np.ndarray
    k2_roots: tuple  # tuple of arrays, one per k1

    @property
    def pairs(self):
        """(k1_flat, k2_flat) arrays over all momentum pairs."""
        k1s = np.concatenate([np.full(len(r), k1) for k1, r
                              in zip(self.k1_values, self.k2_roots)])
        k2s = np.concatenate(self.k2_roots)
        return k1s, k2s


@lru_cache(maxsize=16)
def _momentum_grid_cached(L, M, t1, t2):
    geom = CylinderGeometry(L, M)
    params = ModelParams(t1=t1, t2=t2)
    k1v = horizontal_momenta(L)
    roots = tuple(solve_k2_roots(k1, M, params) for k1 in k1v)
    return MomentumGrid(geom=geom, k1_values=k1v, k2_roots=roots)


def momentum_grid(geom, params):
    return _momentum_grid_cached(geom.L, geom.M, params.t1, params.t2)


# ---------------------------------------------------------------------------
# Propagator tables.
# ---------------------------------------------------------------------------


class PropagatorTable:
    """Base interface: 2x2 block two-point functions g_{ww'}(z, z')."""

    variant = "abstract"

    def block(self, z, zp):
        raise NotImplementedError

    def entry(self, z, zp, w, wp):
        return self.block(z, zp)[w, wp]


class TranslationInvariantTable(PropagatorTable):
    """Table of the form ``g(z, z') = s * data[d1 mod L, z2, z'2]``.

    ``d1 = z1 - z'1`` enters only through the stored residue, with the
    antiperiodic sign ``s = (-1)^q`` for a wrap of ``q`` periods; rows run
    over 0..M+1 (the closure) unless restricted.
    """

    def __init__(self, geom, variant, data, row_offset=0):
        self.geom = geom
        self.variant = variant
        self.data = np.asarray(data, dtype=complex)
        self.row_offset = row_offset

    def block(self, z, zp):
        L = self.geom.L
        d = z[0] - zp[0]
        m = d % L
        sign = 1.0 if (d - m) // L % 2 == 0 else -1.0
        return sign * self.data[m, z[1] - self.row_offset,
                                zp[1] - self.row_offset]

    def __add__(self, other):
        assert isinstance(other, TranslationInvariantTable)
        assert self.geom == other.geom and self.row_offset == other.row_offset
        return TranslationInvariantTable(
            self.geom, f"{self.variant}+{other.variant}",
            self.data + other.data, self.row_offset)

    def __sub__(self, other):
        assert isinstance(other, TranslationInvariantTable)
        assert self.geom == other.geom and self.row_offset == other.row_offset
        return TranslationInvariantTable(
            self.geom, f"{self.variant}-{other.variant}",
            self.data - other.data, self.row_offset)


class DenseTable(PropagatorTable):
    """Full (2LM)x(2LM) table from a dense inversion; rows 1..M only."""

    def __init__(self, geom, variant, matrix):
        self.geom = geom
        self.variant = variant
        self.matrix = np.asarray(matrix, dtype=complex)

    def _idx(self, z, w):
        return 2 * self.geom.site_index(z) + w

    def block(self, z, zp):
        out = np.empty((2, 2), dtype=complex)
        for w in (0, 1):
            for wp in (0, 1):
                out[w, wp] = self.matrix[self._idx(z, w), self._idx(zp, wp)]
        return out


def max_block_difference(ta, tb, sites):
    """Max entrywise |ta - tb| over all ordered pairs from ``sites``."""
    worst = 0.0
    for z in sites:
        for zp in sites:
            d = np.max(np.abs(ta.block(z, zp) - tb.block(z, zp)))
            worst = max(worst, float(d))
    return worst


# ---------------------------------------------------------------------------
# Massive propagator.
# ---------------------------------------------------------------------------


def s_weights(geom, params):
    """The convolution kernels s_+(y), s_-(y) for y = 0..L-1.

    ``s_pm(y) = (1/L) sum_{k1} e^{-i k1 y}/(1 + t1 e^{+- i k1})`` over the
    antiperiodic momenta; antiperiodic in y with period L.
    """
    L, t1 = geom.L, params.t1
    k1 = horizontal_momenta(L)
    y = np.arange(L)
    ph = np.exp(-1j * np.outer(y, k1))
    sp = ph @ (1.0 / (1.0 + t1 * np.exp(1j * k1))) / L
    sm = ph @ (1.0 / (1.0 + t1 * np.exp(-1j * k1))) / L
    return sp, sm


def s_eval(s_arr, y, L):
    """Evaluate an antiperiodic kernel array at arbitrary integer y."""
    m = y % L
    sign = 1.0 if (y - m) // L % 2 == 0 else -1.0
    return sign * s_arr[m]


def massive_propagator(geom, params):
    """The xi-sector propagator: row-diagonal, built from s_+ and s_-."""
    L, M = geom.L, geom.M
    sp, sm = s_weights(geom, params)
    data = np.zeros((L, M + 2, M + 2, 2, 2), dtype=complex)
    rows = np.arange(M + 2)
    for d1 in range(L):
        blk = np.array([[0.0, sp[d1]], [-sm[d1], 0.0]])
        data[d1, rows, rows] = blk
    return TranslationInvariantTable(geom, "massive", data)


def s_infinite(y, t1):
    """Infinite-volume limits of s_+ and s_- at integer separation y.

    Geometric series of the generating function: s_+(y) = (-t1)^y for
    y >= 0, s_-(y) = (-t1)^(-y) for y <= 0, zero otherwise.
    """
    sp = (-t1) ** y if y >= 0 else 0.0
    sm = (-t1) ** (-y) if y <= 0 else 0.0
    return sp, sm


# ---------------------------------------------------------------------------
# Critical propagator: Fourier representation.
# ---------------------------------------------------------------------------


def critical_propagator_fourier(geom, params, weight=None, variant="critical"):
    """The critical cylinder propagator from the explicit momentum sum.

    ``weight``, if given, is a vectorized function of flat (k1, k2) arrays
    multiplying each momentum summand -- the hook used by the multiscale
    decomposition.  Rows cover the closure 0..M+1, where the formula
    extends and exhibits its boundary cancellations.
    """
    if not params.is_critical:
        raise ValueError("Fourier representation requires critical parameters")
    L, M = geom.L, geom.M
    grid = momentum_grid(geom, params)
    k1s, k2s = grid.pairs
    c = 1.0 / (2.0 * L * normalization_N(k1s, k2s, params, M))
    if weight is not None:
        c = c * weight(k1s, k2s)

    G = ghat_matrix(k1s, k2s, params)
    # reflection matrix: (+,-) entry at -k2, (-,-) entry carries the extra
    # phase e^{2 i k2 (M+1)}
    Gneg = ghat_matrix(k1s, -k2s, params)
    R = G.copy()
    R[:, 0, 1] = Gneg[:, 0, 1]
    R[:, 1, 1] = np.exp(2j * k2s * (M + 1)) * G[:, 1, 1]

    d1 = np.arange(L)
    d2 = np.arange(-(M + 1), M + 2)
    s2 = np.arange(0, 2 * M + 3)
    E1 = np.exp(-1j * np.outer(k1s, d1))
    E2d = np.exp(-1j * np.outer(k2s, d2))
    E2s = np.exp(-1j * np.outer(k2s, s2))

    T1 = np.einsum("p,pl,pd,pab->ldab", c, E1, E2d, G, optimize=True)
    T2 = np.einsum("p,pl,ps,pab->lsab", c, E1, E2s, R, optimize=True)

    rows = np.arange(M + 2)
    dd = rows[:, None] - rows[None, :] + (M + 1)   # index into d2
    ss = rows[:, None] + rows[None, :]             # index into s2
    data = T1[:, dd] - T2[:, ss]
    return TranslationInvariantTable(geom, variant, data)


class LazyCriticalTable(PropagatorTable):
    """Pointwise critical propagator: the same momentum sum as
    :func:`critical_propagator_fourier`, evaluated entry by entry.

    The full table costs O(L M^2 * #modes) to assemble; on large cylinders
    only a handful of blocks is ever needed, and each one is a plain
    O(#modes) reduction.  Blocks are cached by (d1 mod L, z2, z'2).
    """

    def __init__(self, geom, params, weight=None, variant="critical-lazy"):
        if not params.is_critical:
            raise ValueError("Fourier representation requires critical parameters")
        self.geom = geom
        self.variant = variant
        grid = momentum_grid(geom, params)
        k1s, k2s = grid.pairs
        self._k1s, self._k2s = k1s, k2s
        c = 1.0 / (2.0 * geom.L * normalization_N(k1s, k2s, params, geom.M))
        if weight is not None:
            c = c * weight(k1s, k2s)
        G = ghat_matrix(k1s, k2s, params)
        Gneg = ghat_matrix(k1s, -k2s, params)
        R = G.copy()
        R[:, 0, 1] = Gneg[:, 0, 1]
        R[:, 1, 1] = np.exp(2j * k2s * (geom.M + 1)) * G[:, 1, 1]
        self._cG = c[:, None, None] * G
        self._cR = c[:, None, None] * R
        self._cache = {}

    def block(self, z, zp):
        L = self.geom.L
        d = z[0] - zp[0]
        m = d % L
        sign = 1.0 if (d - m) // L % 2 == 0 else -1.0
        key = (m, z[1], zp[1])
        blk = self._cache.get(key)
        if blk is None:
            ph1 = np.exp(-1j * self._k1s * m)
            d2 = z[1] - zp[1]
            s2 = z[1] + zp[1]
            blk = (np.tensordot(ph1 * np.exp(-1j * self._k2s * d2),
                                self._cG, axes=(0, 0))
                   - np.tensordot(ph1 * np.exp(-1j * self._k2s * s2),
                                  self._cR, axes=(0, 0)))
            self._cache[key] = blk
        return sign * blk


# ---------------------------------------------------------------------------
# Critical and massive quadratic forms; direct inversion oracle.
# ---------------------------------------------------------------------------


def _conv_kernels(geom, params):
    """Real-space convolution kernels of b and Delta over raw offsets."""
    L = geom.L
    k1 = horizontal_momenta(L)
    d = np.arange(-(L - 1), L)
    ph = np.exp(1j * np.outer(d, k1))
    cb = ph @ coeff_b(k1, params) / L
    cD = ph @ coeff_Delta(k1, params) / L
    return d, cb, cD


def build_A_critical(geom, params):
    """The antisymmetric matrix A_c with S_c = (1/2)(phi, A_c phi).

    Basis order: index 2*site + omega with omega in {0: '+', 1: '-'} and
    sites row-major (rows 1..M).  The row M+1 field phi_- is identically
    zero, so the t2 coupling stops at row M-1.
    """
    L, M = geom.L, geom.M
    t2 = params.t2
    n = 2 * L * M
    d, cb, cD = _conv_kernels(geom, params)
    off = L - 1  # index of offset 0 in the kernel arrays
    C = np.zeros((n, n), dtype=complex)

    def idx(x1, m, w):
        return 2 * ((m - 1) * L + (x1 - 1)) + w

    for m in range(1, M + 1):
        for x in range(1, L + 1):
            for xp in range(1, L + 1):
                dd = xp - x
                C[idx(x, m, 0), idx(xp, m, 1)] += -cb[off + dd]
                C[idx(x, m, 0), idx(xp, m, 0)] += -0.5j * cD[off + dd]
                C[idx(x, m, 1), idx(xp, m, 1)] += +0.5j * cD[off + dd]
            if m < M:
                C[idx(x, m, 0), idx(x, m + 1, 1)] += t2
    A = C - C.T
    assert np.max(np.abs(A.imag)) < 1e-12
    return A.real


def build_A_massive(geom, params):
    """The antisymmetric matrix A_m with S_m = (1/2)(xi, A_m xi)."""
    L, M = geom.L, geom.M
    t1 = params.t1
    n = 2 * L * M
    C = np.zeros((n, n))

    def idx(x1, m, w):
        return 2 * ((m - 1) * L + (x1 - 1)) + w

    for m in range(1, M + 1):
        for x in range(1, L + 1):
            C[idx(x, m, 0), idx(x, m, 1)] += 1.0
            xp = x + 1
            sign = 1.0
            if xp > L:
                xp -= L
                sign = -1.0  # antiperiodic wrap of the momentum sum
            C[idx(x, m, 0), idx(xp, m, 1)] += sign * t1
    return C - C.T


DIRECT_INVERSION_CAP = 8192


def _direct_table(geom, params, builder, variant):
    n = 2 * geom.L * geom.M
    if n > DIRECT_INVERSION_CAP:
        raise ValueError(f"dense inversion dimension {n} exceeds cap "
                         f"{DIRECT_INVERSION_CAP}")
    A = builder(geom, params)
    try:
        G = -np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular quadratic form for {variant}") from exc
    return DenseTable(geom, variant, G)


def critical_propagator_direct(geom, params):
    """-A_c^{-1} as a dense table: the oracle for the Fourier formula."""
    return _direct_table(geom, params, build_A_critical, "critical-direct")


def massive_propagator_direct(geom, params):
    """-A_m^{-1} as a dense table: the oracle for the s_+/- formula."""
    return _direct_table(geom, params, build_A_massive, "massive-direct")


# ---------------------------------------------------------------------------
# Infinite-volume propagator.
# ---------------------------------------------------------------------------


class DoublingError(RuntimeError):
    def __init__(self, msg, last, prev):
        super().__init__(msg)
        self.last, self.prev = last, prev


@lru_cache(maxsize=8)
def _infinite_grid_cached(t1, t2, weight_key, N):
    params = ModelParams(t1=t1, t2=t2)
    weight = _WEIGHT_REGISTRY.get(weight_key)
    m = np.arange(N)
    k = -np.pi + 2.0 * np.pi * (m + 0.5) / N
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    vals = ghat_matrix(K1, K2, params)
    if weight is not None:
        vals = vals * weight(K1, K2)[..., None, None]
    g = np.fft.fft2(vals, axes=(0, 1)) / N ** 2
    z = np.arange(N)
    phase = np.exp(1j * np.pi * z * (1.0 - 1.0 / N))
    g *= phase[:, None, None, None]
    g *= phase[None, :, None, None]
    return g


_WEIGHT_REGISTRY = {}


def register_cutoff_weight(key, fn):
    """Register a picklable/cacheable momentum weight under a hashable key."""
    _WEIGHT_REGISTRY[key] = fn
    return key


def _grid_lookup(g, z):
    N = g.shape[0]
    out = g
    sign = 1.0
    for axis, comp in enumerate(z):
        m = comp % N
        if (comp - m) // N % 2 != 0:
            sign = -sign
        out = out[m]
    return sign * out


def infinite_propagator(zs, params, weight_key=None, *, tol=1e-10, N0=64,
                        max_doublings=5):
    """The infinite-volume propagator at the integer offsets ``zs``.

    Evaluates the momentum integral of ghat (times the registered cutoff
    weight, if any) by a discrete torus sum, doubling the grid and
    Richardson-extrapolating the O(N^-2) and O(N^-4) error terms (the
    massless integrand makes the raw sums converge only algebraically).
    Stops once the extrapolated entries change by less than ``tol``.
    Returns a dict ``z -> 2x2 block``.
    """
    zs = [tuple(z) for z in zs]
    raw, r1, r2 = [], [], []
    prev_best, cur_best = None, None
    N = N0
    for _ in range(max_doublings + 1):
        g = _infinite_grid_cached(params.t1, params.t2, weight_key, N)
        raw.append({z: _grid_lookup(g, z) for z in zs})
        if len(raw) >= 2:
            r1.append({z: (4.0 * raw[-1][z] - raw[-2][z]) / 3.0 for z in zs})
        if len(r1) >= 2:
            r2.append({z: (16.0 * r1[-1][z] - r1[-2][z]) / 15.0 for z in zs})
        prev_best = cur_best
        cur_best = (r2 or r1 or raw)[-1]
        if prev_best is not None:
            delta = max(np.max(np.abs(cur_best[z] - prev_best[z]))
                        for z in zs)
            if delta < tol:
                return cur_best
        N *= 2
    raise DoublingError(
        f"torus sum did not converge to {tol} at N = {N // 2}",
        cur_best, prev_best)


def infinite_propagator_grid(params, weight_key=None, N=256):
    """Raw N x N grid of the infinite-volume propagator (bulk splitting)."""
    return _infinite_grid_cached(params.t1, params.t2, weight_key, N)


# ---------------------------------------------------------------------------
# Scaling-limit propagator.
# ---------------------------------------------------------------------------


def gscal_scalar(x, y, t2s):
    """g^scal(x, y) = -(1/(2 pi t2 (1 - t2))) * x/(x^2 + y^2)."""
    return -x / (2.0 * np.pi * t2s * (1.0 - t2s) * (x * x + y * y))


def _g1(x, y, params):
    return gscal_scalar(x / (1.0 - params.t2_star), y / (1.0 - params.t1_star),
                        params.t2_star)


def _g2(x, y, params):
    return gscal_scalar(y / (1.0 - params.t1_star), x / (1.0 - params.t2_star),
                        params.t2_star)


def g_infinite_scaling(x, y, params):
    """The 2x2 infinite-plane scaling propagator [[g1, g2], [g2, -g1]]."""
    a, b = _g1(x, y, params), _g2(x, y, params)
    return np.array([[a, b], [b, -a]])


def _alternating_sum(term_fn, nmax=64, sweeps=12):
    """Euler-accelerated evaluation of ``sum_{n in Z} (-1)^n T(n)``.

    ``T`` must be array-valued with a smooth O(1/|n|) tail; repeated
    averaging of the folded partial sums then converges far below 1e-12.
    """
    terms = [term_fn(0)]
    for m in range(1, nmax + 1):
        terms.append((-1.0) ** m * (term_fn(m) + term_fn(-m)))
    partial = np.cumsum(np.asarray(terms), axis=0)
    x = partial
    for _ in range(sweeps):
        x = 0.5 * (x[:-1] + x[1:])
    return x[-1]


def scaling_propagator(z, zp, ell1, ell2, params):
    """The continuum cylinder propagator as an alternating image sum.

    ``z``, ``zp`` are distinct points of the open cylinder of circumference
    ``ell1`` and height ``ell2``.  Images carry the alternating sign
    ``(-1)^(n1 + n2)``; both lattice directions are summed with Euler
    acceleration, so the conditionally convergent 1/r tails are resummed
    to machine precision.
    """
    z = np.asarray(z, dtype=float)
    zp = np.asarray(zp, dtype=float)
    if np.allclose(z, zp):
        raise ValueError("scaling propagator requires distinct points")
    dx, dy = z - zp
    sy = (z + zp)[1]

    def term(n1, n2):
        x = dx + n1 * ell1
        out = g_infinite_scaling(x, dy + 2 * n2 * ell2, params)
        ry = sy + 2 * n2 * ell2
        refl = np.array([
            [-_g1(x, ry, params), _g2(x, ry, params)],
            [-_g2(x, ry, params),
             _g1(x, sy + 2 * (n2 - 1) * ell2, params)],
        ])
        return out + refl

    return _alternating_sum(
        lambda n2: _alternating_sum(lambda n1: term(n1, n2)))
