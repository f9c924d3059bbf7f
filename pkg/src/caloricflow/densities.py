"""Covariant energy densities and the quantitative diagnostics built on them.

The k-th density is the squared pullback-metric norm of the iterated spatial
covariant derivative of order k of the map; its integral over the box is
E_k(s).  The plain energy is half of E_1.  Discretely the first derivative is
the tangent-projected central difference (embedded backends) or the raw
central difference of chart coordinates, and higher entries apply the pullback
connection recursively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientHistory, InsufficientSpan, NonTangentSection
from .grid import Grid2, gradient, integrate, laplacian, sup_norm

EPS_SQRT = 1e-12  # regularization in sqrt(e_k), per the eps^2 + e_k device


def _grad_nodes(grid: Grid2, arr):
    """Central-difference gradient over the node axes of (..., n, n, d)."""
    inv = 1.0 / (2.0 * grid.dx)
    d1 = (np.roll(arr, -1, axis=-3) - np.roll(arr, 1, axis=-3)) * inv
    d2 = (np.roll(arr, -1, axis=-2) - np.roll(arr, 1, axis=-2)) * inv
    return np.stack([d1, d2])


def partial_map(phi):
    """Raw central-difference derivatives of the map, shaped (2, n, n, pd)."""
    return _grad_nodes(phi.grid, phi.values)


def jet_entry_1(phi):
    """First jet entry d_x phi as a section of the pullback bundle."""
    dphi = partial_map(phi)
    if phi.target.is_embedded:
        return phi.target.backend.project(phi.values, dphi)
    return dphi


def covariant_derivative(phi, section, check=True):
    """Pullback covariant derivative of a tangent section, per direction.

    Embedded: tangent-projected central difference.  Chart: ``d_j s^c +
    Gamma^c_ab d_j phi^a s^b``.  The result stacks the two directions on a
    new leading axis.
    """
    target = phi.target
    section = np.asarray(section, float)
    if check and target.is_embedded:
        if not target.backend.is_tangent(phi.values, section):
            raise NonTangentSection("section is not tangent along the map")
    ds = _grad_nodes(phi.grid, section)
    if target.is_embedded:
        return target.backend.project(phi.values, ds)
    gam = target.backend.christoffel(phi.values)
    dphi = partial_map(phi)
    corr = np.einsum("...cab,j...a,...b->j...c", gam, dphi, section)
    return ds + corr


@dataclass
class CovariantJet:
    """Iterated covariant derivatives; entries[k] has k leading index axes."""

    order: int
    entries: dict


def covariant_jet(phi, order) -> CovariantJet:
    entries = {1: jet_entry_1(phi)}
    for k in range(1, order):
        entries[k + 1] = covariant_derivative(phi, entries[k], check=False)
    return CovariantJet(order=order, entries=entries)


def _squared_norm(phi, arr):
    """Pullback-metric squared norm, summed over all leading index axes."""
    if phi.target.is_embedded:
        sq = np.sum(arr * arr, axis=-1)
    else:
        h = phi.target.backend.metric(phi.values)
        sq = np.einsum("...ab,...a,...b->...", h, arr, arr)
    extra = sq.ndim - 2
    return sq.sum(axis=tuple(range(extra))) if extra else sq


@dataclass
class DensityStack:
    s: float
    e: list
    E: list


def density_stack(phi, k_max=3, s=0.0) -> DensityStack:
    """Densities e_1..e_K and their integrals E_k for the given map."""
    jet = covariant_jet(phi, k_max)
    e = [_squared_norm(phi, jet.entries[k]) for k in range(1, k_max + 1)]
    E = [integrate(phi.grid, ek) for ek in e]
    return DensityStack(s=s, e=e, E=E)


def e1_field(phi):
    return _squared_norm(phi, jet_entry_1(phi))


def energy(phi):
    """Dirichlet energy: half the integral of e_1."""
    return 0.5 * integrate(phi.grid, e1_field(phi))


def _simpson(y, x):
    """Composite Simpson on a uniformly spaced series, trapezoid tail."""
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    if len(x) < 3:
        return float(np.trapz(y, x))
    h = np.diff(x)
    if np.max(h) - np.min(h) > 1e-9 * np.max(h):
        return float(np.trapz(y, x))
    n_pairs = (len(x) - 1) // 2
    end = 2 * n_pairs
    hh = h[0]
    total = float(np.sum(y[0:end - 1:2] + 4.0 * y[1:end:2] + y[2:end + 1:2]) * hh / 3.0)
    if end < len(x) - 1:
        total += 0.5 * hh * (y[-2] + y[-1])
    return total


@dataclass
class EnergySeries:
    """Per-run scalar series: dense dissipation, strided stats, sample table."""

    E0: float
    k_max: int = 3
    s_dense: list = field(default_factory=list)
    diss_dense: list = field(default_factory=list)   # int |d_s phi|^2 dx
    s_stats: list = field(default_factory=list)
    E1_stats: list = field(default_factory=list)
    e1sq_stats: list = field(default_factory=list)   # int e_1^2 dx
    sup_e1_stats: list = field(default_factory=list)
    s_samples: list = field(default_factory=list)
    E_samples: list = field(default_factory=list)
    sup_e_samples: list = field(default_factory=list)

    def append_diss(self, s, diss):
        self.s_dense.append(s)
        self.diss_dense.append(diss)

    def append_stats(self, s, E1, e1sq, sup_e1):
        self.s_stats.append(s)
        self.E1_stats.append(E1)
        self.e1sq_stats.append(e1sq)
        self.sup_e1_stats.append(sup_e1)

    def append_sample(self, s, stack: DensityStack):
        if self.s_samples and s <= self.s_samples[-1]:
            raise ValueError("sample times must be strictly increasing")
        self.s_samples.append(s)
        self.E_samples.append(tuple(stack.E))
        self.sup_e_samples.append(tuple(sup_norm(ek) for ek in stack.e))

    # -- dense integrals ----------------------------------------------------

    def dissipation_integral(self, s_hi=None):
        s = np.asarray(self.s_dense)
        d = np.asarray(self.diss_dense)
        if s_hi is not None:
            keep = s <= s_hi + 1e-12
            s, d = s[keep], d[keep]
        return _simpson(d, s)

    def e_norm_partial(self):
        return float(np.trapz(np.asarray(self.e1sq_stats),
                              np.asarray(self.s_stats))) ** 0.25

    def psi_s_sq_series(self):
        return np.asarray(self.s_dense), np.asarray(self.diss_dense)

    # -- sampled tables -----------------------------------------------------

    def sample_E(self, k):
        return np.array([row[k - 1] for row in self.E_samples])

    def sample_sup_e(self, k):
        return np.array([row[k - 1] for row in self.sup_e_samples])

    def max_energy_uptick(self):
        """Largest increase of E_1 between consecutive samples (>= 0)."""
        E1 = self.sample_E(1)
        return float(np.max(np.diff(E1), initial=0.0))


def e_norm(series: EnergySeries):
    """Space-time L^4 accumulation of sqrt(e_1) over the recorded span."""
    return series.e_norm_partial()


def bochner_residual_k1(phi_prev, phi, phi_next, ds):
    """Residual of the k = 1 parabolic identity for e_1.

    Computes ``d_s e_1 - Lap e_1 + 2 e_2 - <R(d_i, d_j) d_j, d_i>`` with a
    centered s-stencil over three consecutive stored slices; expected size
    O(ds^2 + dx^2) on smooth flows.
    """
    if phi_prev is None or phi_next is None:
        raise InsufficientHistory("need slices at s - ds and s + ds")
    grid = phi.grid
    e1m = e1_field(phi_prev)
    e1p = e1_field(phi_next)
    stack = density_stack(phi, k_max=2)
    e1c, e2 = stack.e
    dphi = jet_entry_1(phi)
    backend = phi.target.backend
    curv = 0.0
    for i in range(2):
        for j in range(2):
            rz = backend.curvature(phi.values, dphi[i], dphi[j], dphi[j])
            curv = curv + backend.inner(phi.values, rz, dphi[i])
    return (e1p - e1m) / (2.0 * ds) - laplacian(grid, e1c) + 2.0 * e2 - curv


def diamagnetic_violation(phi, stack: DensityStack = None, k=1, eps=EPS_SQRT):
    """Max over nodes of |d_x sqrt(e_k)| - sqrt(e_{k+1}).

    Nonpositive in the continuum; the square root is regularized through
    sqrt(eps^2 + e_k) so the bound is meaningful across the zero set.
    """
    if stack is None:
        stack = density_stack(phi, k_max=k + 1)
    if len(stack.e) < k + 1:
        raise InsufficientHistory(f"stack order {len(stack.e)} < {k + 1}")
    g = np.sqrt(eps * eps + stack.e[k - 1])
    dg = gradient(phi.grid, g)
    mag = np.sqrt(dg[0] ** 2 + dg[1] ** 2)
    return float(np.max(mag - np.sqrt(stack.e[k])))


def local_energy(phi, x0, R, e1=None):
    """Energy restricted to the periodic ball B(x0, R): half int_B e_1."""
    if e1 is None:
        e1 = e1_field(phi)
    mask = phi.grid.periodic_distance(np.asarray(x0, float)) < R
    return 0.5 * phi.grid.dx ** 2 * float(np.sum(e1[mask]))


def concentration_check(history, template, x0, R, s):
    """Terms of the energy concentration bound at (x0, R, s).

    Returns ``(lhs, rhs0, rhs_scale)`` where the bound reads
    ``lhs <= rhs0 + C * rhs_scale`` for the calibrated constant C:
    lhs = E(phi(s) on B(x0, R)), rhs0 = E(phi(0) on B(x0, 2R)), and
    rhs_scale = s * E0 / R^2.
    """
    phi_s = history.map_at(s, template)
    phi_0 = history.map_at(0.0, template)
    s_actual = history.sample_at(s).s
    lhs = local_energy(phi_s, x0, R)
    rhs0 = local_energy(phi_0, x0, 2.0 * R)
    return lhs, rhs0, s_actual * history.E0 / R ** 2


def fit_loglog_slope(s, q, floor=1e-300):
    s = np.asarray(s, float)
    q = np.maximum(np.asarray(q, float), floor)
    coef = np.polyfit(np.log(s), np.log(q), 1)
    return float(coef[0])


def decay_report(series: EnergySeries, window=(1.0, 10.0), k_max=None):
    """Fitted log-log decay exponents and weighted accumulations.

    For each k up to the recorded order: the slope of sup_x e_k(s) over the
    window (compare -k), the slope of E_k(s) (compare -(k-1)), and the
    partial sums of ``int s^{k-1} E_{k+1} ds`` and ``int s^{k-1} sup e_k ds``
    together with the fraction contributed beyond the window, as convergence
    evidence for the integrated bounds.
    """
    k_max = k_max or series.k_max
    s = np.asarray(series.s_samples)
    if len(s) < 6 or s.max() < window[1] * 0.999 or s.min() > window[0]:
        raise InsufficientSpan(
            f"samples cover [{s.min():.3g}, {s.max():.3g}], need {window}")
    inw = (s >= window[0] * 0.999) & (s <= window[1] * 1.001)
    if int(np.sum(inw)) < 4:
        raise InsufficientSpan("fewer than 4 samples inside the fit window")
    pos = s > 0
    report = {}
    for k in range(1, k_max + 1):
        sup_e = series.sample_sup_e(k)
        E_k = series.sample_E(k)
        row = {
            "sup_e_slope": fit_loglog_slope(s[inw], sup_e[inw]),
            "E_slope": fit_loglog_slope(s[inw], E_k[inw]),
        }
        if k < k_max:
            E_next = series.sample_E(k + 1)
            w = s[pos] ** (k - 1) * E_next[pos]
            total = np.trapz(w, s[pos])
            head = np.trapz(w[s[pos] <= window[1]], s[pos][s[pos] <= window[1]])
            row["int_sE_next"] = float(total)
            row["int_sE_next_tail_fraction"] = float(0.0 if total == 0 else 1 - head / total)
        w4 = s[pos] ** (k - 1) * sup_e[pos]
        total4 = np.trapz(w4, s[pos])
        head4 = np.trapz(w4[s[pos] <= window[1]], s[pos][s[pos] <= window[1]])
        row["int_sup_e"] = float(total4)
        row["int_sup_e_tail_fraction"] = float(0.0 if total4 == 0 else 1 - head4 / total4)
        report[k] = row
    return report
