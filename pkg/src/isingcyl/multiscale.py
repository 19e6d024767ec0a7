r"""Multiscale decomposition of the critical propagator.

The critical cylinder propagator is split with a Littlewood-Paley partition
of unity in the dispersion ``E(k) = sqrt(D(k1, k2))``:

    1 = chi(2^{-h*} E) + sum_{h = h*+1}^{0} [chi(2^{-h} E) - chi(2^{-h+1} E)]
        + [1 - chi(E)],

with ``h* = -floor(log2 min(L, M))``.  The last bracket lives at unit
momenta and is bookkept with the massive sector; everything else defines
the single-scale propagators g^(h) and the deepest block g^(<= h*), which
telescope back to the smooth sector of g_c exactly.

Each scale is further split into a *bulk* part -- the sign-corrected
restriction of the infinite-volume scale-h propagator -- and an *edge*
remainder localized near the open boundaries:

    g_B^(h)(z, z') = s_L((z - z')_1) g_inf^(h)(per_L((z - z')_1), (z - z')_2),
    g_E^(h) = g^(h) - g_B^(h).

The module also provides discrete derivatives of propagator tables and the
log-linear decay-fit helpers used by the empirical checks (the sharp decay
constants are not asserted, only fitted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import CylinderGeometry, d_edge_pair, per_L
from .propagators import (
    ModelParams, TranslationInvariantTable, coeff_D,
    critical_propagator_fourier, infinite_propagator_grid,
    register_cutoff_weight,
)

LEQ = "leq"


def chi_profile(x):
    """The cutoff profile: 1 below 1/2, 0 above 1, a smooth polynomial
    step 1 - s^2 (3 - 2s) with s = 2x - 1 in between."""
    x = np.asarray(x, dtype=float)
    s = np.clip(2.0 * x - 1.0, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class ScaleCutoff:
    """The scale decomposition bookkeeping for one geometry."""

    h_star: int

    @classmethod
    def for_geometry(cls, geom):
        return cls(h_star=-int(math.floor(math.log2(min(geom.L, geom.M)))))

    @property
    def scales(self):
        """The single-scale labels, deepest first."""
        return tuple(range(self.h_star + 1, 1))

    def dispersion(self, k1, k2, params):
        return np.sqrt(coeff_D(k1, k2, params))

    def weight(self, h, params):
        """The momentum weight of scale ``h`` (an int) or of LEQ."""
        if h == LEQ:
            def w(k1, k2):
                return chi_profile(2.0 ** (-self.h_star)
                                   * self.dispersion(k1, k2, params))
            return w
        if h not in self.scales:
            raise ValueError(
                f"scale {h} outside {self.h_star + 1}..0 (or {LEQ!r})")

        def w(k1, k2):
            E = self.dispersion(k1, k2, params)
            return (chi_profile(2.0 ** (-h) * E)
                    - chi_profile(2.0 ** (-h + 1) * E))
        return w

    def smooth_weight(self, params):
        """chi(E): everything except the unit-momentum massive complement."""
        def w(k1, k2):
            return chi_profile(self.dispersion(k1, k2, params))
        return w

    def partition_values(self, k1, k2, params):
        """All bracket values at (k1, k2); they must sum to 1."""
        vals = [self.weight(LEQ, params)(k1, k2)]
        for h in self.scales:
            vals.append(self.weight(h, params)(k1, k2))
        E = self.dispersion(k1, k2, params)
        vals.append(1.0 - chi_profile(E))
        return vals


def scale_propagator(h, geom, params, cutoff=None):
    """The scale-h critical propagator table (h an int, or LEQ)."""
    cutoff = cutoff or ScaleCutoff.for_geometry(geom)
    return critical_propagator_fourier(
        geom, params, weight=cutoff.weight(h, params),
        variant=f"critical-scale-{h}")


def smooth_sector_propagator(geom, params, cutoff=None):
    """g_c with the unit-momentum complement removed: the telescoping sum
    of all scale tables."""
    cutoff = cutoff or ScaleCutoff.for_geometry(geom)
    return critical_propagator_fourier(
        geom, params, weight=cutoff.smooth_weight(params),
        variant="critical-smooth")


# ---------------------------------------------------------------------------
# Bulk / edge splitting.
# ---------------------------------------------------------------------------


def _scale_weight_key(h, cutoff, params):
    key = ("scale", h, cutoff.h_star, params.t1, params.t2)
    register_cutoff_weight(key, cutoff.weight(h, params))
    return key


def bulk_edge_split(h, geom, params, cutoff=None, N=None):
    """Split g^(h) into its bulk restriction and the edge remainder.

    Returns a dict with the ``bulk``, ``edge`` and ``full`` tables; the
    first two sum to the third by construction.  The bulk entry at raw
    horizontal difference d1 carries the sign s_L(d1) (+1, 0, -1 for
    |d1| <, =, > L/2), which reproduces exactly the antiperiodic wrap
    convention of the finite-cylinder tables.
    """
    cutoff = cutoff or ScaleCutoff.for_geometry(geom)
    L, M = geom.L, geom.M
    if N is None:
        N = max(256, 1 << (4 * max(L, M) - 1).bit_length())
    key = _scale_weight_key(h, cutoff, params)
    ginf = infinite_propagator_grid(params, key, N=N)

    full = scale_propagator(h, geom, params, cutoff)
    data = np.zeros_like(full.data)
    rows = np.arange(M + 2)
    d2 = rows[:, None] - rows[None, :]
    # the torus grid stores negative offsets at wrapped indices with the
    # antiperiodic sign, matching _grid_lookup
    sign2 = np.where(d2 < 0, -1.0, 1.0)[..., None, None]
    for m in range(L):
        s = 1.0 if m < L / 2 else (0.0 if m == L / 2 else -1.0)
        if s == 0.0:
            continue
        p1 = per_L(m, L)
        sign1 = -1.0 if p1 < 0 else 1.0
        data[m] = s * sign1 * sign2 * ginf[p1 % N, d2 % N]
    bulk = TranslationInvariantTable(geom, f"bulk-scale-{h}", data)
    edge = TranslationInvariantTable(geom, f"edge-scale-{h}",
                                     full.data - data)
    return {"bulk": bulk, "edge": edge, "full": full}


# ---------------------------------------------------------------------------
# Discrete derivatives.
# ---------------------------------------------------------------------------


def _shift_d1(data, L, step):
    """Shift the horizontal-difference axis by ``step`` with the
    antiperiodic seam sign."""
    out = np.roll(data, -step, axis=0)
    if step > 0:
        out[L - step:] *= -1.0
    elif step < 0:
        out[:-step] *= -1.0
    return out


def discrete_derivative(table, r):
    """Mixed finite differences of a translation-invariant table.

    ``r = (r1, r2, r1', r2')`` gives the forward-difference orders in the
    first and second components of z and z'; each must be <= 2.  Vertical
    differences shrink the set of rows on which the result is meaningful;
    the rows that would reference sites above the closure are left at 0.
    """
    if len(r) != 4 or any(not 0 <= ri <= 2 for ri in r):
        raise ValueError("r must be four orders, each between 0 and 2")
    geom = table.geom
    L = geom.L
    data = table.data.copy()
    for _ in range(r[0]):          # z1: d1 -> d1 + 1
        data = _shift_d1(data, L, 1) - data
    for _ in range(r[2]):          # z'1: d1 -> d1 - 1
        data = _shift_d1(data, L, -1) - data
    for _ in range(r[1]):          # z2
        shifted = np.zeros_like(data)
        shifted[:, :-1] = data[:, 1:]
        data = shifted - data
        data[:, -1] = 0.0
    for _ in range(r[3]):          # z'2
        shifted = np.zeros_like(data)
        shifted[:, :, :-1] = data[:, :, 1:]
        data = shifted - data
        data[:, :, -1] = 0.0
    return TranslationInvariantTable(
        geom, f"{table.variant}-d{''.join(map(str, r))}", data,
        table.row_offset)


# ---------------------------------------------------------------------------
# Decay fits.
# ---------------------------------------------------------------------------


def fit_exponential_decay(distances, norms, floor=1e-13):
    """Least-squares fit of log(norm) = a - rate * distance.

    Values at or below ``floor`` are dropped.  Returns a dict with the
    fitted positive-decay ``rate``, the intercept ``log_amplitude`` and the
    coefficient of determination ``r_squared``.
    """
    d = np.asarray(distances, dtype=float)
    n = np.asarray(norms, dtype=float)
    keep = n > floor
    d, n = d[keep], np.log(n[keep])
    if len(d) < 3 or np.ptp(d) == 0:
        raise ValueError("not enough usable points for a decay fit")
    slope, intercept = np.polyfit(d, n, 1)
    resid = n - (slope * d + intercept)
    ss_tot = np.sum((n - n.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 0.0
    return {"rate": -slope, "log_amplitude": intercept, "r_squared": r2}


def edge_decay_profile(h, geom, params, cutoff=None, split=None):
    """(d_E, max-norm) samples of the scale-h edge propagator.

    Sweeps horizontally adjacent pairs from the boundary toward the middle
    of the cylinder at a few horizontal positions; along this sweep the
    boundary-weighted distance d_E grows linearly.
    """
    if split is None:
        split = bulk_edge_split(h, geom, params, cutoff)
    edge = split["edge"]
    dists, norms = [], []
    for x in (geom.L // 8 + 1, geom.L // 4 + 1, geom.L // 2 - 1):
        for row in range(1, geom.M // 2 + 1):
            z, zp = (x, row), (geom.wrap_x1(x + 1), row)
            dists.append(d_edge_pair(z, zp, geom))
            norms.append(float(np.max(np.abs(edge.block(z, zp)))))
    return np.asarray(dists), np.asarray(norms)


def envelope_decay_fit(distances, norms, bin_width=12, floor=1e-13):
    """Exponential fit of the oscillation envelope: norms are binned by
    distance and each bin contributes its maximum."""
    d = np.asarray(distances, dtype=float)
    n = np.asarray(norms, dtype=float)
    bd, bn = [], []
    for b in np.unique(d // bin_width):
        sel = d // bin_width == b
        bd.append(d[sel].mean())
        bn.append(n[sel].max())
    return fit_exponential_decay(bd, bn, floor=floor)


def scale_norm_profile(geom, params, cutoff=None):
    """Max-norm of each single-scale table, keyed by h."""
    cutoff = cutoff or ScaleCutoff.for_geometry(geom)
    return {h: float(np.max(np.abs(
        scale_propagator(h, geom, params, cutoff).data)))
        for h in cutoff.scales}
