r"""Free-fermion partition function and multipoint energy correlations.

At lambda = 0 the cylinder Ising model is an exactly solvable pair of
Gaussian Grassmann integrals (critical phi sector + massive xi sector).
This module evaluates

* the partition function through the Pfaffian identity
  ``Z = 2^{LM} (cosh bJ1)^{LM} (cosh bJ2)^{L(M-1)} Pf(A_c) Pf(A_m)``;
* multipoint energy correlations: each energy observable (the product of
  the two spins adjacent to an edge) equals ``t_j + (1 - t_j^2) E_x`` in
  fermionic variables, with ``E_x`` a field bilinear, so moments reduce to
  Pfaffians of pairwise covariance matrices and cumulants follow by
  set-partition inversion;
* the explicit continuum scaling limit of the energy correlations;
* the exhaustive Gibbs enumeration oracle that every Pfaffian-route value
  is cross-checked against in the tests.

Horizontal bilinears involve the mixed field
``H_{w,z} = xi_{w,z} + sum_y s_w(z1 - y) (phi_{+,(y,z2)} - w phi_{-,(y,z2)})``;
phi and xi are independent Gaussians, so their cross covariance vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .lattice import CylinderGeometry, Edge
from .propagators import (
    DIRECT_INVERSION_CAP, LazyCriticalTable, ModelParams, build_A_critical,
    build_A_massive, critical_propagator_direct, critical_propagator_fourier,
    massive_propagator, s_eval, s_weights,
)
from .skewlinalg import moments_to_cumulants, pfaffian

ENUMERATION_CAP = 24
_ENUM_CHUNK = 1 << 16

# above this lattice size the full critical table is replaced by the lazy
# pointwise evaluator (full-table assembly is O(L M^2 #modes))
_FULL_TABLE_CAP = 32


@dataclass(frozen=True)
class ObservableField:
    """One Grassmann field occurrence inside an energy bilinear."""

    kind: str   # "phi" or "xi"
    omega: int  # 0 -> '+', 1 -> '-'
    site: tuple

    def __post_init__(self):
        if self.kind not in ("phi", "xi"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.omega not in (0, 1):
            raise ValueError(f"omega must be 0 or 1, got {self.omega}")


@dataclass(frozen=True)
class CorrelationRequest:
    """An m-point energy correlation to evaluate at lambda = 0."""

    geom: CylinderGeometry
    edges: tuple
    mode: str  # "moment" or "truncated"
    params: ModelParams

    def __post_init__(self):
        if self.mode not in ("moment", "truncated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.edges:
            raise ValueError("at least one edge is required")
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("edges must be pairwise distinct")
        for e in self.edges:
            e.validate(self.geom)


# ---------------------------------------------------------------------------
# Exhaustive Gibbs enumeration (the oracle).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GibbsRecord:
    Z: float
    means: dict      # Edge -> <sigma sigma>
    moments: dict    # frozenset of observable positions -> moment


def enumerate_gibbs(geom, beta, J1=1.0, J2=1.0, observables=()):
    """Exact sums over all 2^(LM) spin configurations.

    Horizontal bonds are periodic, the rows above M and below 1 carry no
    spins (free vertical boundaries).  ``observables`` is a tuple of edges;
    the record carries Z, the mean of each observable, and the moments of
    every nonempty sub-tuple of observables (keyed by position sets).
    Configuration chunks are reduced in a fixed order, so results are
    bit-stable.
    """
    n = geom.L * geom.M
    if n > ENUMERATION_CAP:
        raise ValueError(f"enumeration capped at {ENUMERATION_CAP} spins, got {n}")

    bonds = []
    for e in geom.edges():
        a, b = e.endpoints(geom)
        bonds.append((geom.site_index(a), geom.site_index(b),
                      J1 if e.direction == "h" else J2))
    obs_pairs = []
    for e in observables:
        e.validate(geom)
        a, b = e.endpoints(geom)
        obs_pairs.append((geom.site_index(a), geom.site_index(b)))

    subsets = [frozenset(s) for r in range(1, len(observables) + 1)
               for s in combinations(range(len(observables)), r)]
    z_total = 0.0
    sums = {s: 0.0 for s in subsets}
    bit = np.arange(n, dtype=np.int64)
    for start in range(0, 1 << n, _ENUM_CHUNK):
        idx = np.arange(start, min(start + _ENUM_CHUNK, 1 << n), dtype=np.int64)
        spins = 1 - 2 * ((idx[:, None] >> bit) & 1)
        energy = np.zeros(len(idx))
        for ia, ib, J in bonds:
            energy += J * (spins[:, ia] * spins[:, ib])
        w = np.exp(beta * energy)
        z_total += float(w.sum())
        if obs_pairs:
            eps = [spins[:, ia] * spins[:, ib] for ia, ib in obs_pairs]
            for s in subsets:
                prod = w
                for i in s:
                    prod = prod * eps[i]
                sums[s] += float(prod.sum())

    moments = {s: sums[s] / z_total for s in subsets}
    means = {observables[i]: moments[frozenset([i])]
             for i in range(len(observables))}
    return GibbsRecord(Z=z_total, means=means, moments=moments)


def enumerate_cumulant(geom, beta, J1, J2, observables):
    """Order-m joint cumulant of the observables from the enumeration."""
    rec = enumerate_gibbs(geom, beta, J1, J2, observables)
    cums = moments_to_cumulants(rec.moments)
    return cums[frozenset(range(len(observables)))]


# ---------------------------------------------------------------------------
# Partition function.
# ---------------------------------------------------------------------------


def partition_function_free(geom, beta, J1=1.0, J2=1.0):
    """The partition function through the two-Pfaffian identity.

    Valid on and off the critical line (it is an identity of the
    nearest-neighbor model); the coefficient matrices are built at
    ``t_j = tanh(beta J_j)``.
    """
    if 2 * geom.L * geom.M > DIRECT_INVERSION_CAP:
        raise ValueError("geometry too large for the Pfaffian route")
    params = ModelParams.from_beta(beta, J1, J2)
    L, M = geom.L, geom.M
    pref = (2.0 ** (L * M) * np.cosh(beta * J1) ** (L * M)
            * np.cosh(beta * J2) ** (L * (M - 1)))
    pf_c = pfaffian(build_A_critical(geom, params))
    pf_m = pfaffian(build_A_massive(geom, params))
    val = pref * pf_c * pf_m
    assert abs(np.imag(val)) < 1e-9 * max(1.0, abs(val))
    return float(np.real(val))


# ---------------------------------------------------------------------------
# Constituent fields of the energy bilinears and their covariances.
# ---------------------------------------------------------------------------


def _h_composite(w, z, geom, sp, sm):
    """The mixed field H_{w,z} as a list of (coefficient, base field)."""
    terms = [(1.0 + 0.0j, ObservableField("xi", w, z))]
    s_arr = sp if w == 0 else sm
    omega_sign = 1.0 if w == 0 else -1.0
    row = z[1]
    for y in range(1, geom.L + 1):
        c = s_eval(s_arr, z[0] - y, geom.L)
        terms.append((c, ObservableField("phi", 0, (y, row))))
        terms.append((-omega_sign * c, ObservableField("phi", 1, (y, row))))
    return terms


def bilinear_fields(edge, geom, params):
    """The two constituent (composite) fields of E_x, in product order.

    Vertical edge at z: (phi_{+,z}, phi_{-,z+e2}).  Horizontal edge at z:
    (H_{+,z}, H_{-,z+e1}); the second site keeps its raw first coordinate
    (antiperiodicity is handled by the tables and s-kernels).
    """
    z = edge.base
    if edge.direction == "v":
        return ([(1.0 + 0.0j, ObservableField("phi", 0, z))],
                [(1.0 + 0.0j, ObservableField("phi", 1, (z[0], z[1] + 1)))])
    sp, sm = s_weights(geom, params)
    return (_h_composite(0, z, geom, sp, sm),
            _h_composite(1, (z[0] + 1, z[1]), geom, sp, sm))


class FreeCorrelator:
    """Evaluator of lambda = 0 energy moments and cumulants.

    Builds the critical (phi) and massive (xi) propagator tables once; on
    the critical line the Fourier representation is used (full table for
    small cylinders, lazy pointwise sums for large ones), otherwise the
    dense inversion of A_c.
    """

    def __init__(self, geom, params):
        self.geom = geom
        self.params = params
        if params.is_critical:
            if max(geom.L, geom.M) <= _FULL_TABLE_CAP:
                self.gc = critical_propagator_fourier(geom, params)
            else:
                self.gc = LazyCriticalTable(geom, params)
        else:
            self.gc = critical_propagator_direct(geom, params)
        self.gm = massive_propagator(geom, params)
        self._swt = s_weights(geom, params)

    def _base_cov(self, f1, f2):
        if f1.kind != f2.kind:
            return 0.0 + 0.0j  # independent Gaussians
        table = self.gc if f1.kind == "phi" else self.gm
        return table.block(f1.site, f2.site)[f1.omega, f2.omega]

    def _cov(self, F1, F2):
        total = 0.0 + 0.0j
        for c1, f1 in F1:
            if c1 == 0.0:
                continue
            for c2, f2 in F2:
                if c2 == 0.0:
                    continue
                total += c1 * c2 * self._base_cov(f1, f2)
        return total

    def bilinear_moment(self, edges):
        """<prod_x E_x>: Pfaffian of the constituent-field covariances.

        Includes the intra-bilinear entries; the empty product is 1.
        """
        if not edges:
            return 1.0
        fields = []
        for e in edges:
            fields.extend(bilinear_fields(e, self.geom, self.params))
        n = len(fields)
        G = np.zeros((n, n), dtype=complex)
        for i in range(n):
            for j in range(i + 1, n):
                G[i, j] = self._cov(fields[i], fields[j])
                G[j, i] = -G[i, j]
        val = pfaffian(G)
        assert abs(val.imag) < 1e-9 * max(1.0, abs(val))
        return float(val.real)

    def _edge_t(self, edge):
        return self.params.t1 if edge.direction == "h" else self.params.t2

    def energy_moment(self, edges):
        """<prod_x eps_x> with eps_x = t_j + (1 - t_j^2) E_x.

        Expanded over subsets Y of the edges:
        sum_Y prod_{x not in Y} t_j prod_{x in Y} (1 - t_j^2) * <prod_Y E>.
        """
        if len(set(edges)) != len(edges):
            raise ValueError("edges must be pairwise distinct")
        total = 0.0
        m = len(edges)
        for r in range(m + 1):
            for sub in combinations(range(m), r):
                term = self.bilinear_moment([edges[i] for i in sub])
                for i in range(m):
                    t = self._edge_t(edges[i])
                    term *= (1.0 - t * t) if i in sub else t
                total += term
        return total

    def energy_cumulant(self, edges):
        """Order-m joint cumulant of the energy observables."""
        moments = {}
        for r in range(1, len(edges) + 1):
            for sub in combinations(range(len(edges)), r):
                moments[frozenset(sub)] = self.energy_moment(
                    [edges[i] for i in sub])
        cums = moments_to_cumulants(moments)
        return cums[frozenset(range(len(edges)))]


def energy_moment_free(request):
    """<eps_{x_1} ... eps_{x_m}> at lambda = 0 (Pfaffian route)."""
    corr = FreeCorrelator(request.geom, request.params)
    return corr.energy_moment(request.edges)


def energy_cumulants_free(request):
    """The order-m truncated energy correlation at lambda = 0."""
    if len(request.edges) < 2:
        raise ValueError("cumulants need at least two edges")
    corr = FreeCorrelator(request.geom, request.params)
    return corr.energy_cumulant(request.edges)


def evaluate_request(request):
    if request.mode == "moment":
        return energy_moment_free(request)
    return energy_cumulants_free(request)


# ---------------------------------------------------------------------------
# Continuum scaling limit.
# ---------------------------------------------------------------------------


def scaling_correlation(points, labels, ell1, ell2, params):
    """The scaling limit of the m-point energy correlation on the cylinder.

    ``points`` are pairwise distinct continuum points with 0 < y < ell2;
    ``labels`` are edge directions (1 horizontal, 2 vertical).  Returns
    ``(2 t2*)^{m1} (1 - t2*^2)^{m2} Pf(M)`` where M is the 2m x 2m matrix
    with zero diagonal blocks and the continuum propagator off-diagonal.
    """
    from .propagators import scaling_propagator

    points = [np.asarray(p, dtype=float) for p in points]
    m = len(points)
    if len(labels) != m:
        raise ValueError("one direction label per point is required")
    if any(l not in (1, 2) for l in labels):
        raise ValueError("direction labels must be 1 or 2")
    for p in points:
        if not 0.0 < p[1] < ell2:
            raise ValueError(f"point {tuple(p)} outside the open cylinder")
    for i in range(m):
        for j in range(i + 1, m):
            if np.allclose(points[i], points[j]):
                raise ValueError("points must be pairwise distinct")

    m1 = sum(1 for l in labels if l == 1)
    m2 = m - m1
    t2s = params.t2_star
    pref = (2.0 * t2s) ** m1 * (1.0 - t2s ** 2) ** m2

    M = np.zeros((2 * m, 2 * m))
    for i in range(m):
        for j in range(i + 1, m):
            blk = scaling_propagator(points[i], points[j], ell1, ell2, params)
            M[2 * i:2 * i + 2, 2 * j:2 * j + 2] = blk
            M[2 * j:2 * j + 2, 2 * i:2 * i + 2] = -blk.T
    val = pfaffian(M)
    assert abs(np.imag(val)) < 1e-9 * max(1.0, abs(val))
    return pref * float(np.real(val))
