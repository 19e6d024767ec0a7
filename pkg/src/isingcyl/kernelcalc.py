r"""Kernel calculus for fermionic effective potentials on the cylinder.

A potential is represented by sparse kernels ``W(Psi, x)``: ``Psi`` is an
ordered tuple of field labels ``(omega, D, z)`` -- the Grassmann field
``phi_{omega,z}`` carrying a finite-difference multi-order ``D`` -- and
``x`` a tuple of probe edges.  The module provides

* expansion of derivative labels into plain-field polynomials (the
  canonical form under which kernels are compared for equivalence),
* the localization / renormalization operator pairs, in bulk, edge and
  source flavors: each splits a kernel into a local part plus a remainder
  interpolated along lattice paths at the price of one extra derivative,
* the antisymmetrization / reflection-symmetrization operator,
* the bulk/edge splitting of a cylinder kernel against its
  infinite-volume counterpart,
* weighted kernel norms with tree-distance weights,
* truncated expectations of field monomials against a propagator table
  and a one-step (truncated) renormalization-group map,
* extraction of the running couplings (nu, zeta, eta) and of the vertex
  renormalizations (Z1, Z2), with the free-theory source kernels as the
  reference input.

Sites follow the lattice conventions: ``x1`` in 1..L (antiperiodic wrap
for fields), rows 0..M+1 on the closure.  Infinite-volume kernels use
plain integer coordinates and ``geom=None``.  All coefficient arithmetic
is complex; physical (symmetrized) kernels have real coefficients.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .lattice import (
    CylinderGeometry, Edge, alpha_sign, edge_tree_distance, per_L,
    tree_distance,
)
from .skewlinalg import moments_to_cumulants, pfaffian

_UNITS = ((1, 0), (0, 1))


class FieldLabel(NamedTuple):
    """One Grassmann field slot: species omega = +-1, difference order
    D = (d1, d2) with entries in 0..2, site z = (x1, x2)."""

    omega: int
    D: tuple
    z: tuple

    def validate(self, geom=None, strict=False):
        if self.omega not in (1, -1):
            raise ValueError(f"omega must be +-1, got {self.omega}")
        d1, d2 = self.D
        if not (0 <= d1 <= 2 and 0 <= d2 <= 2 and d1 + d2 <= 2):
            raise ValueError(f"invalid difference order {self.D}")
        if geom is not None:
            # with strict=False the window [z2, z2 + d2] may overhang the
            # closure rows 0..M+1 on either side: the difference expansion
            # zero-extends the fields there (reflections of an overhanging
            # label overhang on the opposite side)
            lo, hi = self.z[1], self.z[1] + d2
            ok = (0 <= lo and hi <= geom.M + 1) if strict else (
                hi >= 0 and lo <= geom.M + 1)
            if not (ok and 1 <= self.z[0] <= geom.L):
                raise ValueError(f"label {self} outside the closure")

    def order(self):
        return self.D[0] + self.D[1]

    def in_interior(self, geom):
        """Whether z and z + D lie strictly inside the lattice rows."""
        return (1 <= self.z[1] and self.z[1] + self.D[1] <= geom.M
                and geom.in_lattice(self.z))


def _edge_sort_key(e):
    return (e.base[1], e.base[0], e.direction)


@dataclass
class Kernel:
    """A sparse kernel of fixed sector (n fields, total difference order p,
    m probe edges).

    ``coeffs`` maps ``(labels, edges)`` -- a tuple of ``n`` FieldLabels and
    a tuple of ``m`` Edges -- to a complex coefficient.  ``geom=None``
    marks an infinite-volume kernel on plain integer coordinates.
    """

    geom: object
    n: int
    p: int
    m: int
    coeffs: dict
    antisymmetrized: bool = False
    reflection_symmetrized: bool = False
    tag: str = ""

    def __post_init__(self):
        if self.n <= 0 or self.n % 2 != 0:
            raise ValueError(f"n must be even and positive, got {self.n}")
        for (labels, edges), _ in self.coeffs.items():
            if len(labels) != self.n or len(edges) != self.m:
                raise ValueError(
                    f"key arity mismatch in sector ({self.n},{self.p},{self.m})")
            if sum(l.order() for l in labels) != self.p:
                raise ValueError(
                    f"difference order of {labels} != sector p={self.p}")
            for l in labels:
                l.validate(self.geom)
            if self.geom is not None:
                for e in edges:
                    e.validate(self.geom)

    @property
    def sector(self):
        return (self.n, self.p, self.m)

    def items(self):
        return self.coeffs.items()

    def scaled(self, c):
        return Kernel(self.geom, self.n, self.p, self.m,
                      {k: c * v for k, v in self.coeffs.items()},
                      self.antisymmetrized, self.reflection_symmetrized,
                      self.tag)

    def __add__(self, other):
        assert self.sector == other.sector and self.geom == other.geom
        acc = dict(self.coeffs)
        for k, v in other.coeffs.items():
            acc[k] = acc.get(k, 0.0) + v
        return Kernel(self.geom, self.n, self.p, self.m, _prune(acc))

    def __sub__(self, other):
        return self + other.scaled(-1.0)


def _prune(acc, tol=0.0):
    return {k: v for k, v in acc.items() if abs(v) > tol}


def kernel_sum(kernels):
    out = kernels[0]
    for k in kernels[1:]:
        out = out + k
    return out


def kernel_to_json(kernel):
    """JSON-serializable dict (sector header + coefficient list)."""
    geom = kernel.geom
    return {
        "L": geom.L if geom else None,
        "M": geom.M if geom else None,
        "n": kernel.n, "p": kernel.p, "m": kernel.m,
        "antisymmetrized": kernel.antisymmetrized,
        "reflection_symmetrized": kernel.reflection_symmetrized,
        "tag": kernel.tag,
        "coeffs": [
            {"labels": [[l.omega, list(l.D), list(l.z)] for l in labels],
             "edges": [[list(e.base), e.direction] for e in edges],
             "re": float(c.real), "im": float(c.imag)}
            for (labels, edges), c in sorted(
                kernel.coeffs.items(), key=lambda kv: repr(kv[0]))],
    }


def kernel_from_json(doc):
    geom = (CylinderGeometry(doc["L"], doc["M"])
            if doc["L"] is not None else None)
    coeffs = {}
    for rec in doc["coeffs"]:
        labels = tuple(FieldLabel(o, tuple(D), tuple(z))
                       for o, D, z in rec["labels"])
        edges = tuple(Edge(tuple(b), d) for b, d in rec["edges"])
        coeffs[(labels, edges)] = rec["re"] + 1j * rec["im"]
    return Kernel(geom, doc["n"], doc["p"], doc["m"], coeffs,
                  doc.get("antisymmetrized", False),
                  doc.get("reflection_symmetrized", False),
                  doc.get("tag", ""))


# ---------------------------------------------------------------------------
# Expansion to plain fields and kernel equivalence.
# ---------------------------------------------------------------------------


@lru_cache(maxsize=200000)
def _expand_label_cached(omega, D, z, L, M):
    """Derivative-expanded field as ((coeff, (omega, site)), ...).

    Horizontal shifts wrap antiperiodically at the seam; vertical shifts
    leaving the closure drop their term (fields vanish outside it), and the
    boundary-null combinations (omega=+ at row 0, omega=- at row M+1) are
    removed.
    """
    terms = [(1.0, z)]
    for _ in range(D[0]):
        new = []
        for c, (x1, x2) in terms:
            if L is None:
                new.append((c, (x1 + 1, x2)))
            elif x1 == L:
                new.append((-c, (1, x2)))
            else:
                new.append((c, (x1 + 1, x2)))
            new.append((-c, (x1, x2)))
        terms = new
    for _ in range(D[1]):
        new = []
        for c, (x1, x2) in terms:
            if L is None or x2 + 1 <= M + 1:
                new.append((c, (x1, x2 + 1)))
            new.append((-c, (x1, x2)))
        terms = new
    out = []
    for c, (x1, x2) in terms:
        if L is not None:
            if not 0 <= x2 <= M + 1:
                continue
            if omega > 0 and x2 == 0:
                continue
            if omega < 0 and x2 == M + 1:
                continue
        out.append((c, (omega, (x1, x2))))
    return tuple(out)


def _expand_label(label, geom):
    if geom is None:
        return _expand_label_cached(label.omega, label.D, label.z, None, None)
    return _expand_label_cached(label.omega, label.D, label.z,
                                geom.L, geom.M)


def _canonical_monomial(fields):
    """Sort plain fields with the permutation sign; None if a field repeats
    (the monomial vanishes)."""
    fields = list(fields)
    sign = 1
    for i in range(1, len(fields)):
        j = i
        while j > 0 and fields[j] < fields[j - 1]:
            fields[j], fields[j - 1] = fields[j - 1], fields[j]
            sign = -sign
            j -= 1
    for a, b in zip(fields, fields[1:]):
        if a == b:
            return None, 0
    return tuple(fields), sign


def expand_to_plain_fields(kernel):
    """Canonical polynomial form: {(sorted plain fields, sorted edges):
    coefficient}, with boundary-null monomials dropped."""
    out = defaultdict(complex)
    geom = kernel.geom
    for (labels, edges), c in kernel.coeffs.items():
        expansions = [_expand_label(l, geom) for l in labels]
        ekey = tuple(sorted(edges, key=_edge_sort_key))
        for combo in itertools.product(*expansions):
            mono, sign = _canonical_monomial(f for _, f in combo)
            if mono is None:
                continue
            w = c * sign
            for s, _ in combo:
                w *= s
            out[(mono, ekey)] += w
    return dict(out)


def expand_family(obj):
    """Expanded polynomial of a Kernel, a dict of sector Kernels, or None."""
    if obj is None:
        return {}
    if isinstance(obj, Kernel):
        return expand_to_plain_fields(obj)
    out = defaultdict(complex)
    for k in obj.values():
        for key, v in expand_to_plain_fields(k).items():
            out[key] += v
    return dict(out)


def kernels_equivalent(a, b, tol=1e-12):
    """Whether two kernels (or sector families) expand to the same
    potential within ``tol``."""
    return polynomial_distance(a, b) <= tol


def polynomial_distance(a, b):
    ea, eb = expand_family(a), expand_family(b)
    keys = set(ea) | set(eb)
    return max((abs(ea.get(k, 0.0) - eb.get(k, 0.0)) for k in keys),
               default=0.0)


# ---------------------------------------------------------------------------
# Symmetrization: antisymmetrize field slots, average over reflections.
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _perm_signs(n):
    out = []
    for perm in itertools.permutations(range(n)):
        sign = 1
        for i in range(n):
            for j in range(i + 1, n):
                if perm[i] > perm[j]:
                    sign = -sign
        out.append((perm, sign))
    return tuple(out)


def antisymmetrize(kernel):
    """Average over signed permutations of the field slots."""
    perms = _perm_signs(kernel.n)
    fact = math.factorial(kernel.n)
    acc = defaultdict(complex)
    for (labels, edges), c in kernel.coeffs.items():
        ekey = tuple(sorted(edges, key=_edge_sort_key))
        for perm, sign in perms:
            acc[(tuple(labels[i] for i in perm), ekey)] += sign * c / fact
    return Kernel(kernel.geom, kernel.n, kernel.p, kernel.m, _prune(acc),
                  antisymmetrized=True,
                  reflection_symmetrized=kernel.reflection_symmetrized)


def _wrap_label_x1(x1, L):
    q, r = divmod(x1 - 1, L)
    return r + 1, (-1.0 if q % 2 else 1.0)


def _reflect_label(label, axis, geom):
    """Image of a field label under the horizontal (axis=1) or vertical
    (axis=2) reflection, with its phase."""
    d1, d2 = label.D
    x1, x2 = label.z
    if axis == 1:
        nx1, s = _wrap_label_x1(geom.L + 1 - x1 - d1, geom.L)
        phase = 1j * label.omega * (-1.0) ** d1 * s
        return phase, FieldLabel(label.omega, label.D, (nx1, x2))
    phase = 1j * (-1.0) ** d2
    return phase, FieldLabel(-label.omega, label.D,
                             (x1, geom.M + 1 - x2 - d2))


def reflect_edge(edge, axis, geom):
    b1, b2 = edge.base
    if axis == 1:
        if edge.direction == "h":
            return Edge((geom.wrap_x1(geom.L - b1), b2), "h")
        return Edge((geom.wrap_x1(geom.L + 1 - b1), b2), "v")
    if edge.direction == "h":
        return Edge((b1, geom.M + 1 - b2), "h")
    return Edge((b1, geom.M - b2), "v")


def reflect_kernel(kernel, axis):
    geom = kernel.geom
    if geom is None:
        raise ValueError("reflections require a finite geometry")
    acc = defaultdict(complex)
    for (labels, edges), c in kernel.coeffs.items():
        phase = 1.0 + 0.0j
        new = []
        for l in labels:
            ph, nl = _reflect_label(l, axis, geom)
            phase *= ph
            new.append(nl)
        ekey = tuple(sorted((reflect_edge(e, axis, geom) for e in edges),
                            key=_edge_sort_key))
        acc[(tuple(new), ekey)] += phase * c
    return Kernel(geom, kernel.n, kernel.p, kernel.m, _prune(acc),
                  kernel.antisymmetrized, kernel.reflection_symmetrized)


def symmetrize(kernel):
    """Antisymmetrize the field slots and average over the two reflections
    (with their field phases)."""
    base = antisymmetrize(kernel)
    r1 = reflect_kernel(base, 1)
    r2 = reflect_kernel(base, 2)
    r12 = reflect_kernel(r1, 2)
    out = kernel_sum([base, r1, r2, r12]).scaled(0.25)
    out.antisymmetrized = True
    out.reflection_symmetrized = True
    return out


def horizontal_translate(kernel, a):
    """Translate by ``a`` columns: antiperiodic on fields, periodic on
    edges."""
    geom = kernel.geom
    acc = defaultdict(complex)
    for (labels, edges), c in kernel.coeffs.items():
        sign = 1.0
        new = []
        for l in labels:
            nx1, s = _wrap_label_x1(l.z[0] + a, geom.L)
            sign *= s
            new.append(FieldLabel(l.omega, l.D, (nx1, l.z[1])))
        ekey = tuple(sorted(
            (Edge((geom.wrap_x1(e.base[0] + a), e.base[1]), e.direction)
             for e in edges), key=_edge_sort_key))
        acc[(tuple(new), ekey)] += sign * c
    return Kernel(geom, kernel.n, kernel.p, kernel.m, _prune(acc),
                  kernel.antisymmetrized, kernel.reflection_symmetrized)


# ---------------------------------------------------------------------------
# Interpolation paths.
# ---------------------------------------------------------------------------


def gamma_steps(z, zp, geom):
    """Telescoping steps of the canonical path from z to z'.

    Returns a list of ``(sigma, site, unit)`` such that, for any function f
    on the path (with the seam handled by the callers' sign bookkeeping),
    ``f(z') - f(z) = sum sigma * (f(site + unit) - f(site))``.  The path
    runs first vertically, then horizontally the short way round; at the
    half-circumference tie it stays inside the raw coordinate interval.
    """
    steps = []
    x1, y = z
    xp1, yp = zp
    cur = y
    while cur < yp:
        steps.append((1, (x1, cur), (0, 1)))
        cur += 1
    while cur > yp:
        cur -= 1
        steps.append((-1, (x1, cur), (0, 1)))
    d = per_L(xp1 - x1, geom.L)
    if 2 * abs(d) == geom.L:
        direction = 1 if xp1 > x1 else -1
    else:
        direction = 1 if d > 0 else -1
    cur = x1
    for _ in range(abs(d)):
        if direction > 0:
            steps.append((1, (cur, yp), (1, 0)))
            cur = geom.wrap_x1(cur + 1)
        else:
            nxt = geom.wrap_x1(cur - 1)
            steps.append((-1, (nxt, yp), (1, 0)))
            cur = nxt
    return steps


def _alpha(sites, geom):
    return alpha_sign(sites, geom)


def _sector_check(kernel, allowed, m):
    if (kernel.n, kernel.p) not in allowed or kernel.m != m:
        raise ValueError(
            f"sector {kernel.sector} not supported here (allowed "
            f"{sorted(allowed)} with m={m})")


# ---------------------------------------------------------------------------
# Point localization and path remainders (bulk flavor).
# ---------------------------------------------------------------------------


def tilde_L(kernel):
    """Localize all field slots onto the first site, with the
    seam-crossing sign of the source tuple."""
    _sector_check(kernel, {(2, 0), (2, 1), (4, 0)}, 0)
    geom = kernel.geom
    acc = defaultdict(complex)
    for (labels, _), c in kernel.coeffs.items():
        sites = [l.z for l in labels]
        sign = (-1.0) ** _alpha(sites, geom)
        new = tuple(FieldLabel(l.omega, l.D, sites[0]) for l in labels)
        acc[(new, ())] += sign * c
    return Kernel(geom, kernel.n, kernel.p, 0, _prune(acc))


def _interp_terms(anchor_sites, moving_index, path_from, path_to, labels,
                  coeff, geom, acc):
    """Accumulate the interpolation terms for one field moving along the
    path ``path_from -> path_to`` while the others sit at
    ``anchor_sites``; adds one derivative unit to the moving slot."""
    a_in = _alpha([l.z for l in labels], geom)
    mv = labels[moving_index]
    for sigma, site, unit in gamma_steps(path_from, path_to, geom):
        new = []
        sites = []
        for i, l in enumerate(labels):
            if i == moving_index:
                nd = (mv.D[0] + unit[0], mv.D[1] + unit[1])
                new.append(FieldLabel(mv.omega, nd, site))
                sites.append(site)
            else:
                new.append(FieldLabel(l.omega, l.D, anchor_sites[i]))
                sites.append(anchor_sites[i])
        sign = (-1.0) ** (a_in + _alpha(sites, geom)) * sigma
        acc[(tuple(new), ())] += sign * coeff


def tilde_R(kernel):
    """Path-interpolated remainder: raises the difference order by one.

    Two-field kernels interpolate the second slot along the path from the
    first site; four-field kernels telescope slots 2, 3, 4 onto the first
    site one at a time.
    """
    _sector_check(kernel, {(2, 0), (2, 1), (4, 0)}, 0)
    geom = kernel.geom
    acc = defaultdict(complex)
    n = kernel.n
    for (labels, _), c in kernel.coeffs.items():
        z = [l.z for l in labels]
        if n == 2:
            _interp_terms([z[0], None], 1, z[0], z[1], labels, c, geom, acc)
        else:
            _interp_terms([z[0], None, z[2], z[3]], 1, z[0], z[1],
                          labels, c, geom, acc)
            _interp_terms([z[0], z[0], None, z[3]], 2, z[0], z[2],
                          labels, c, geom, acc)
            _interp_terms([z[0], z[0], z[0], None], 3, z[0], z[3],
                          labels, c, geom, acc)
    return Kernel(geom, n, kernel.p + 1, 0, _prune(acc))


def localize_bulk(family):
    """Bulk local part: symmetrized point localization of the quadratic
    sectors (plus the localized remainder of the (2,0) sector feeding the
    (2,1) slot); all other sectors vanish."""
    out = {}
    v20 = family.get((2, 0))
    v21 = family.get((2, 1))
    if v20 is not None:
        out[(2, 0)] = symmetrize(tilde_L(v20))
    parts = []
    if v21 is not None:
        parts.append(tilde_L(v21))
    if v20 is not None:
        parts.append(tilde_L(tilde_R(v20)))
    if parts:
        out[(2, 1)] = symmetrize(kernel_sum(parts))
    v40 = family.get((4, 0))
    if v40 is not None:
        out[(4, 0)] = symmetrize(tilde_L(v40))
    return out


def renormalize_bulk(family):
    """Bulk remainder: interpolated complements in the (2,2) and (4,1)
    slots, zero on the localized sectors, identity elsewhere."""
    out = {}
    parts22 = []
    if (2, 2) in family:
        parts22.append(family[(2, 2)])
    if (2, 1) in family:
        parts22.append(tilde_R(family[(2, 1)]))
    if (2, 0) in family:
        parts22.append(tilde_R(tilde_R(family[(2, 0)])))
    if parts22:
        out[(2, 2)] = symmetrize(kernel_sum(parts22))
    parts41 = []
    if (4, 1) in family:
        parts41.append(family[(4, 1)])
    if (4, 0) in family:
        parts41.append(tilde_R(family[(4, 0)]))
    if parts41:
        out[(4, 1)] = symmetrize(kernel_sum(parts41))
    for key, k in family.items():
        if key not in {(2, 0), (2, 1), (2, 2), (4, 0), (4, 1)}:
            out[key] = k
    return out


# ---------------------------------------------------------------------------
# Edge flavor: localization onto the nearest open boundary.
# ---------------------------------------------------------------------------


def z_boundary(z, geom):
    """Vertical projection of a site onto the nearest closure row."""
    return (z[0], 0) if z[1] <= geom.M // 2 else (z[0], geom.M + 1)


def tilde_L_edge(kernel):
    """Localize a (2,0) kernel onto the boundary projection of its first
    site (both slots)."""
    _sector_check(kernel, {(2, 0)}, 0)
    geom = kernel.geom
    acc = defaultdict(complex)
    for (labels, _), c in kernel.coeffs.items():
        zb = z_boundary(labels[0].z, geom)
        sign = (-1.0) ** _alpha([l.z for l in labels], geom)
        new = tuple(FieldLabel(l.omega, l.D, zb) for l in labels)
        acc[(new, ())] += sign * c
    return Kernel(geom, 2, 0, 0, _prune(acc))


def tilde_R_edge(kernel):
    """Interpolated remainder of the boundary localization: the second
    slot telescopes from the boundary point to its site (first slot kept),
    then the first slot telescopes with the second pinned at the
    boundary."""
    _sector_check(kernel, {(2, 0)}, 0)
    geom = kernel.geom
    acc = defaultdict(complex)
    for (labels, _), c in kernel.coeffs.items():
        z1, z2 = labels[0].z, labels[1].z
        zb = z_boundary(z1, geom)
        _interp_terms([z1, None], 1, zb, z2, labels, c, geom, acc)
        _interp_terms([None, zb], 0, zb, z1, labels, c, geom, acc)
    return Kernel(geom, 2, 1, 0, _prune(acc))


def localize_edge(family):
    out = {}
    if (2, 0) in family:
        out[(2, 0)] = symmetrize(tilde_L_edge(family[(2, 0)]))
    return out


def renormalize_edge(family):
    out = {}
    parts = []
    if (2, 1) in family:
        parts.append(family[(2, 1)])
    if (2, 0) in family:
        parts.append(tilde_R_edge(family[(2, 0)]))
    if parts:
        out[(2, 1)] = symmetrize(kernel_sum(parts))
    for key, k in family.items():
        if key not in {(2, 0), (2, 1)}:
            out[key] = k
    return out


# ---------------------------------------------------------------------------
# Source flavor: localization onto the probe edge's base vertex.
# ---------------------------------------------------------------------------


def _source_check(family):
    for (n, p), k in family.items():
        if k.m < 1:
            raise ValueError("source operators need kernels with probe "
                             "edges; found a sourceless sector")


def tilde_L_source(kernel):
    """Localize a (2,0,1) source kernel onto the base vertex of its probe
    edge."""
    _sector_check(kernel, {(2, 0)}, 1)
    geom = kernel.geom
    acc = defaultdict(complex)
    for (labels, edges), c in kernel.coeffs.items():
        zx = edges[0].base
        sign = (-1.0) ** _alpha([l.z for l in labels], geom)
        new = tuple(FieldLabel(l.omega, l.D, zx) for l in labels)
        acc[(new, edges)] += sign * c
    return Kernel(geom, 2, 0, 1, _prune(acc))


def tilde_R_source(kernel):
    """Interpolated remainder of the source localization: the second slot
    telescopes from the edge base with the first pinned there, then the
    first slot telescopes with the second kept at its site."""
    _sector_check(kernel, {(2, 0)}, 1)
    geom = kernel.geom
    acc = defaultdict(complex)
    for (labels, edges), c in kernel.coeffs.items():
        z1, z2 = labels[0].z, labels[1].z
        zx = edges[0].base
        a_in = _alpha([z1, z2], geom)
        for sigma, site, unit in gamma_steps(zx, z2, geom):
            new = (FieldLabel(labels[0].omega, labels[0].D, zx),
                   FieldLabel(labels[1].omega,
                              (labels[1].D[0] + unit[0],
                               labels[1].D[1] + unit[1]), site))
            sign = (-1.0) ** (a_in + _alpha([zx, site], geom)) * sigma
            acc[(new, edges)] += sign * c
        for sigma, site, unit in gamma_steps(zx, z1, geom):
            new = (FieldLabel(labels[0].omega,
                              (labels[0].D[0] + unit[0],
                               labels[0].D[1] + unit[1]), site),
                   FieldLabel(labels[1].omega, labels[1].D, z2))
            sign = (-1.0) ** (a_in + _alpha([site, z2], geom)) * sigma
            acc[(new, edges)] += sign * c
    return Kernel(geom, 2, 1, 1, _prune(acc))


def localize_source(family):
    _source_check(family)
    out = {}
    if (2, 0) in family:
        out[(2, 0)] = symmetrize(tilde_L_source(family[(2, 0)]))
    return out


def renormalize_source(family):
    _source_check(family)
    out = {}
    parts = []
    if (2, 1) in family:
        parts.append(family[(2, 1)])
    if (2, 0) in family:
        parts.append(tilde_R_source(family[(2, 0)]))
    if parts:
        out[(2, 1)] = symmetrize(kernel_sum(parts))
    for key, k in family.items():
        if key not in {(2, 0), (2, 1)}:
            out[key] = k
    return out


# ---------------------------------------------------------------------------
# Bulk/edge splitting of a cylinder kernel.
# ---------------------------------------------------------------------------


def _key_columns(labels, edges, geom):
    xs = [l.z[0] for l in labels]
    for e in edges:
        xs.append(e.base[0])
        if e.direction == "h":
            xs.append(e.base[0] + 1 if geom is None
                      else geom.wrap_x1(e.base[0] + 1))
    return xs


def horizontal_diameter(labels, edges, geom):
    """Smallest arc of the cylinder containing all columns of the key."""
    xs = sorted({x % geom.L for x in _key_columns(labels, edges, geom)})
    if len(xs) <= 1:
        return 0
    gaps = [b - a for a, b in zip(xs, xs[1:])]
    gaps.append(xs[0] + geom.L - xs[-1])
    return geom.L - max(gaps)


def infinite_representative(labels, edges, geom):
    """Translate a narrow key to plain coordinates with leftmost column 0;
    None when the key spans more than L/3."""
    cols = sorted({x % geom.L for x in _key_columns(labels, edges, geom)})
    if len(cols) == 1:
        start = cols[0]
    else:
        gaps = [(b - a, a) for a, b in zip(cols, cols[1:])]
        gaps.append((cols[0] + geom.L - cols[-1], cols[-1]))
        width, at = max(gaps)
        if geom.L - width > geom.L / 3:
            return None
        start = (at + width) % geom.L
    new_labels = tuple(
        FieldLabel(l.omega, l.D, ((l.z[0] - start) % geom.L, l.z[1]))
        for l in labels)
    new_edges = tuple(sorted(
        (Edge(((e.base[0] - start) % geom.L, e.base[1]), e.direction)
         for e in edges), key=_edge_sort_key))
    return new_labels, new_edges


def bulk_edge_kernel_split(kernel, kernel_inf):
    """Split a cylinder kernel into a bulk part -- the sign-corrected
    periodization of the infinite-volume kernel, restricted to interior,
    narrow keys -- and the edge remainder.

    ``kernel_inf`` has ``geom=None``; its keys are taken as canonical
    representatives (any horizontal anchor works, every translate is
    placed).  Returns ``{"bulk": ..., "edge": ...}``.
    """
    geom = kernel.geom
    L, M = geom.L, geom.M
    acc = defaultdict(complex)
    for (labels0, edges0), w in kernel_inf.coeffs.items():
        cols = _key_columns(labels0, edges0, None)
        if max(cols) - min(cols) > L / 3:
            continue
        for a in range(L):
            new_labels = tuple(
                FieldLabel(l.omega, l.D, (geom.wrap_x1(l.z[0] + a), l.z[1]))
                for l in labels0)
            if not all(l.in_interior(geom) for l in new_labels):
                continue
            new_edges = []
            ok = True
            for e in edges0:
                ne = Edge((geom.wrap_x1(e.base[0] + a), e.base[1]),
                          e.direction)
                try:
                    ne.validate(geom)
                except ValueError:
                    ok = False
                    break
                new_edges.append(ne)
            if not ok:
                continue
            sign = (-1.0) ** _alpha([l.z for l in new_labels], geom)
            key = (new_labels,
                   tuple(sorted(new_edges, key=_edge_sort_key)))
            acc[key] += sign * w
    bulk = Kernel(geom, kernel.n, kernel.p, kernel.m, _prune(acc),
                  tag="bulk")
    edge = kernel - bulk
    edge.tag = "edge"
    return {"bulk": bulk, "edge": edge}


# ---------------------------------------------------------------------------
# Weighted norms.
# ---------------------------------------------------------------------------

NORM_FLAVORS = ("bulk", "edge", "source-bulk", "source-edge")


def weighted_norm(kernel, flavor, kappa):
    """Sup-sum norm with tree-distance weights.

    ``bulk``: sup over (species, first site) of the weighted sum over the
    remaining sites; ``edge``: the first site's row is summed too (only
    its column is pinned) and the boundary-seeking tree distance weights
    the terms; the ``source-*`` variants pin the probe edges instead and
    measure distances to them.  Keys whose labels vanish identically or
    leave the closure do not contribute.
    """
    if flavor not in NORM_FLAVORS:
        raise ValueError(f"unknown norm flavor {flavor!r}")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    geom = kernel.geom
    groups = {}
    for (labels, edges), c in kernel.coeffs.items():
        if any(len(_expand_label(l, geom)) == 0 for l in labels):
            continue
        if any(l.z[1] + l.D[1] > geom.M + 1 for l in labels):
            continue
        key = (tuple(l.omega for l in labels),
               tuple(l.z for l in labels), edges)
        groups[key] = max(groups.get(key, 0.0), abs(c))
    buckets = defaultdict(float)
    for (omegas, zs, edges), v in groups.items():
        if flavor == "bulk":
            d = tree_distance(zs, (), geom)
            anchor = (omegas, zs[0])
        elif flavor == "edge":
            d = edge_tree_distance(zs, (), geom)
            anchor = (omegas, zs[0][0])
        elif flavor == "source-bulk":
            d = tree_distance(zs, edges, geom)
            anchor = (omegas, edges)
        else:
            d = edge_tree_distance(zs, edges, geom)
            anchor = (omegas, edges)
        buckets[anchor] += math.exp(kappa * float(d)) * v
    return max(buckets.values(), default=0.0)


# ---------------------------------------------------------------------------
# Truncated expectations and the one-step RG map.
# ---------------------------------------------------------------------------


def label_covariance(l1, l2, table):
    """Covariance of two derivative field labels against a propagator
    table."""
    geom = table.geom
    tot = 0.0 + 0.0j
    for c1, (w1, s1) in _expand_label(l1, geom):
        i1 = 0 if w1 > 0 else 1
        for c2, (w2, s2) in _expand_label(l2, geom):
            i2 = 0 if w2 > 0 else 1
            tot += c1 * c2 * table.block(s1, s2)[i1, i2]
    return tot


def monomial_moment(labels, table):
    """Expectation of an even product of fields: the Pfaffian of its
    covariance matrix."""
    k = len(labels)
    if k == 0:
        return 1.0 + 0.0j
    if k % 2 != 0:
        return 0.0 + 0.0j
    G = np.zeros((k, k), dtype=complex)
    for i in range(k):
        for j in range(i + 1, k):
            G[i, j] = label_covariance(labels[i], labels[j], table)
            G[j, i] = -G[i, j]
    return pfaffian(G)


def truncated_expectation(monomials, table):
    """Joint cumulant of ``s`` even field monomials at the given
    propagator.

    Computed by Pfaffian moments of every sub-collection followed by
    moment-cumulant inversion.  Conventions: a single empty monomial gives
    1; any empty monomial among several gives 0.
    """
    monomials = [tuple(q) for q in monomials]
    s = len(monomials)
    if s < 1:
        raise ValueError("need at least one monomial")
    for q in monomials:
        if len(q) % 2 != 0:
            raise ValueError("monomials must have even length")
    if s == 1:
        return monomial_moment(monomials[0], table)
    if any(len(q) == 0 for q in monomials):
        return 0.0 + 0.0j
    moments = {}
    for r in range(1, s + 1):
        for sub in itertools.combinations(range(s), r):
            joined = tuple(itertools.chain.from_iterable(
                monomials[i] for i in sub))
            moments[frozenset(sub)] = monomial_moment(joined, table)
    return moments_to_cumulants(moments)[frozenset(range(s))]


def _parity(order):
    sign = 1
    for i in range(len(order)):
        for j in range(i + 1, len(order)):
            if order[i] > order[j]:
                sign = -sign
    return sign


def _even_subsets(n):
    out = []
    for mask in range(1 << n):
        if bin(mask).count("1") % 2 == 0:
            out.append(tuple(i for i in range(n) if mask >> i & 1))
    return out


def rg_step(family, table, s_max=2, *, term_budget=500000, drop_tol=0.0):
    """One truncated step of the renormalization-group map.

    For every way of picking ``s <= s_max`` kernel entries (with the 1/s!
    symmetry factor), splitting each entry's fields into external and
    contracted parts (even parts only) and taking the truncated
    expectation of the contracted monomials at the given scale, the
    external fields and the probe edges are reassembled into the next-
    scale kernel with the sign of the interleaving permutation.  Purely
    constant contributions (no external field) are dropped.

    ``family`` is a dict of sector Kernels (or a single Kernel); returns a
    dict keyed by (n, p, m).
    """
    if isinstance(family, Kernel):
        family = {family.sector: family}
    entries = []
    geom = None
    for k in family.values():
        geom = k.geom
        for (labels, edges), c in k.coeffs.items():
            entries.append((labels, tuple(edges), c))
    acc = defaultdict(complex)
    count = 0
    for s in range(1, s_max + 1):
        fact = math.factorial(s)
        for combo in itertools.product(entries, repeat=s):
            split_choices = [
                _even_subsets(len(labels)) for labels, _, _ in combo]
            for ext_sets in itertools.product(*split_choices):
                count += 1
                if count > term_budget:
                    raise RuntimeError(
                        f"term budget {term_budget} exceeded in rg_step")
                internals = []
                ok = True
                for (labels, _, _), ext in zip(combo, ext_sets):
                    q = tuple(l for i, l in enumerate(labels)
                              if i not in ext)
                    if s > 1 and not q:
                        ok = False
                        break
                    internals.append(q)
                if not ok:
                    continue
                ext_labels = []
                order = []
                offset = 0
                int_order = []
                for (labels, _, _), ext in zip(combo, ext_sets):
                    for i in range(len(labels)):
                        if i in ext:
                            order.append(offset + i)
                        else:
                            int_order.append(offset + i)
                    ext_labels.extend(labels[i] for i in ext)
                    offset += len(labels)
                if not ext_labels:
                    continue
                val = truncated_expectation(internals, table)
                if val == 0.0:
                    continue
                sign = _parity(order + int_order)
                coeff = sign * val / fact
                for _, _, c in combo:
                    coeff *= c
                edges = tuple(sorted(
                    itertools.chain.from_iterable(e for _, e, _ in combo),
                    key=_edge_sort_key))
                acc[(tuple(ext_labels), edges)] += coeff
    out = {}
    sector_acc = defaultdict(dict)
    for (labels, edges), c in acc.items():
        if abs(c) <= drop_tol:
            continue
        sec = (len(labels), sum(l.order() for l in labels), len(edges))
        sector_acc[sec][(labels, edges)] = c
    for sec, coeffs in sector_acc.items():
        out[sec] = Kernel(geom, sec[0], sec[1], sec[2], coeffs)
    return out


# ---------------------------------------------------------------------------
# Running couplings and vertex renormalizations.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunningCouplings:
    nu: float
    zeta: float
    eta: float
    h: int
    residual: float = 0.0

    def __post_init__(self):
        for v in (self.nu, self.zeta, self.eta):
            if not math.isfinite(v):
                raise ValueError("couplings must be finite")


@dataclass(frozen=True)
class VertexRenorm:
    Z1: float
    Z2: float
    h: int

    def __post_init__(self):
        if not (math.isfinite(self.Z1) and math.isfinite(self.Z2)):
            raise ValueError("vertex renormalizations must be finite")


def coupling_basis(geom):
    """The three symmetrized local kernels spanning the localized
    quadratic potentials: a mass term, a horizontal-derivative term (with
    the symmetric two-sided difference) and a vertical-derivative term."""
    nu_acc = {}
    for z in geom.sites():
        key = ((FieldLabel(1, (0, 0), z), FieldLabel(-1, (0, 0), z)), ())
        nu_acc[key] = 1.0 + 0.0j
    f_nu = symmetrize(Kernel(geom, 2, 0, 0, nu_acc))

    zeta_acc = defaultdict(complex)
    for z in geom.sites():
        for omega in (1, -1):
            base = FieldLabel(omega, (0, 0), z)
            zeta_acc[((base, FieldLabel(omega, (1, 0), z)), ())] += \
                0.5 * omega
            xm, s = _wrap_label_x1(z[0] - 1, geom.L)
            zeta_acc[((base, FieldLabel(omega, (1, 0), (xm, z[1]))),
                      ())] += 0.5 * omega * s
    f_zeta = symmetrize(Kernel(geom, 2, 1, 0, dict(zeta_acc)))

    eta_acc = defaultdict(complex)
    for z in geom.sites():
        for omega in (1, -1):
            base = FieldLabel(omega, (0, 0), z)
            if z[1] + 1 <= geom.M:
                eta_acc[((base, FieldLabel(-omega, (0, 1), z)), ())] += 0.5
            if z[1] - 1 >= 1:
                eta_acc[((base, FieldLabel(-omega, (0, 1),
                                           (z[0], z[1] - 1))), ())] += 0.5
    f_eta = symmetrize(Kernel(geom, 2, 1, 0, dict(eta_acc)))
    return {"nu": f_nu, "zeta": f_zeta, "eta": f_eta}


def extract_running_couplings(family, h, geom):
    """Read off (nu, zeta, eta) of a localized sourceless kernel against
    the expanded coupling basis; the scale enters through the 2^h weight
    of the mass term.  The least-squares residual is reported."""
    basis = coupling_basis(geom)
    e_in = expand_family(family)
    exps = [expand_family(basis[name]) for name in ("nu", "zeta", "eta")]
    keys = sorted(set(e_in) | set().union(*[set(e) for e in exps]),
                  key=repr)
    if not keys:
        return RunningCouplings(0.0, 0.0, 0.0, h, 0.0)
    A = np.zeros((len(keys), 3), dtype=complex)
    b = np.zeros(len(keys), dtype=complex)
    for i, k in enumerate(keys):
        b[i] = e_in.get(k, 0.0)
        for j, e in enumerate(exps):
            A[i, j] = e.get(k, 0.0)
    Ar = np.vstack([A.real, A.imag])
    br = np.concatenate([b.real, b.imag])
    x, *_ = np.linalg.lstsq(Ar, br, rcond=None)
    residual = float(np.max(np.abs(br - Ar @ x)))
    return RunningCouplings(nu=float(x[0]) / 2.0 ** h, zeta=float(x[1]),
                            eta=float(x[2]), h=h, residual=residual)


def extract_vertex_renorm(source_kernel, h=0):
    """Vertex renormalizations of an infinite-volume (2,0,1) source
    kernel: twice the total weight of the (+,-) slot at each unit probe
    edge."""
    if source_kernel.sector != (2, 0, 1):
        raise ValueError("expected an infinite-volume (2,0,1) kernel")
    targets = {"h": Edge((0, 0), "h"), "v": Edge((0, 0), "v")}
    sums = {"h": 0.0 + 0.0j, "v": 0.0 + 0.0j}
    for (labels, edges), c in source_kernel.coeffs.items():
        if labels[0].omega == 1 and labels[1].omega == -1:
            for key, target in targets.items():
                if edges[0] == target:
                    sums[key] += c
    return VertexRenorm(Z1=2.0 * sums["h"].real, Z2=2.0 * sums["v"].real,
                        h=h)


def free_source_kernels(params, cutoff=1e-16):
    """The free-theory infinite-volume source kernel in the (2,0,1)
    sector: the vertical probe couples to the local bilinear with weight
    (1 - t2^2), the horizontal one to the convolution of the two
    exponential edge kernels with weight (1 - t1^2)."""
    t1, t2 = params.t1, params.t2
    acc = defaultdict(complex)
    v_edge = (Edge((0, 0), "v"),)
    acc[((FieldLabel(1, (0, 0), (0, 0)), FieldLabel(-1, (0, 0), (0, 1))),
         v_edge)] += 1.0 - t2 ** 2
    h_edge = (Edge((0, 0), "h"),)
    reach = max(1, int(math.log(cutoff) / math.log(abs(t1))) + 1) \
        if 0 < abs(t1) < 1 else 1
    for y1 in range(-reach, 1):
        w1 = (-t1) ** (-y1)
        if abs(w1) < cutoff:
            continue
        for y2 in range(1, reach + 2):
            w2 = (-t1) ** (y2 - 1)
            if abs(w2) < cutoff:
                continue
            for om1, c1 in ((1, 1.0), (-1, -1.0)):
                for om2 in (1, -1):
                    key = ((FieldLabel(om1, (0, 0), (y1, 0)),
                            FieldLabel(om2, (0, 0), (y2, 0))), h_edge)
                    acc[key] += (1.0 - t1 ** 2) * w1 * c1 * w2
    return antisymmetrize(Kernel(None, 2, 0, 1, dict(acc)))
