"""Energy-space quantities built on the caloric gauge.

The resolution map sends initial data to the pair (psi_s along the whole
flow, psi_x at s = 0), up to a global frame rotation; the quadratic
functional on such pairs reproduces the Dirichlet energy of the data, and the
rotation-quotient distance compares two runs.  The psi_x slice entering the
functional is the initial one: that is the choice under which integrating the
dissipation from 0 to infinity makes the identity exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .densities import _simpson
from .errors import NotConverged, ScheduleMismatch
from .gauge import GaugeHistory, special_orthogonal_align
from .grid import integrate


@dataclass
class ResolutionData:
    """Representative of the rotation class of (psi_s history, psi_x slice)."""

    grid: object
    m: int
    s_samples: np.ndarray
    psi_s: list                 # one (n, n, m) field per sample
    psi_x0: np.ndarray          # (2, n, n, m) at s = 0
    s_dense: np.ndarray         # per-step times for the dissipation series
    diss_dense: np.ndarray      # int |psi_s|^2 dx at those times

    def sample_weights(self):
        """Trapezoid weights over the sample schedule."""
        s = self.s_samples
        w = np.zeros_like(s)
        w[:-1] += 0.5 * np.diff(s)
        w[1:] += 0.5 * np.diff(s)
        return w


@dataclass
class LValue:
    value: float


def resolution_map(history: GaugeHistory, series=None) -> ResolutionData:
    """Extract the resolution data from a normalized gauge history."""
    if not history.normalized:
        raise NotConverged("gauge history must be caloric-normalized first")
    series = series if series is not None else history.series
    s_dense, diss = series.psi_s_sq_series()
    return ResolutionData(
        grid=history.grid, m=history.m,
        s_samples=history.sample_s(),
        psi_s=[rec.psi_s for rec in history.samples],
        psi_x0=history.psi_x0,
        s_dense=np.asarray(s_dense), diss_dense=np.asarray(diss))


def l_norm(data: ResolutionData) -> LValue:
    """Half the space-time square integral of psi_s plus a quarter of the
    space integral of the initial |psi_x|^2 (trapezoid in s).

    Uses the dense per-step dissipation series when present (it agrees with
    |psi_s|^2 by frame isometry); falls back to the sampled schedule.
    """
    if len(data.s_dense):
        first = 0.5 * _simpson(data.diss_dense, data.s_dense)
    else:
        vals = [integrate(data.grid, np.sum(p * p, axis=-1)) for p in data.psi_s]
        first = 0.5 * float(np.trapz(vals, data.s_samples))
    second = 0.25 * integrate(data.grid, np.sum(data.psi_x0 ** 2, axis=(0, -1)))
    return LValue(value=first + second)


@dataclass
class IdentityReport:
    E0: float
    E_end: float
    dissipation: float
    finite_horizon_gap: float
    l_value: float
    identity_gap: float

    def to_dict(self):
        return {
            "E0": self.E0, "E_smax": self.E_end,
            "dissipation_integral": self.dissipation,
            "finite_horizon_gap": self.finite_horizon_gap,
            "l_norm": self.l_value, "identity_gap": self.identity_gap,
        }


def energy_identity_check(series, E0, E_end, data: ResolutionData = None) -> IdentityReport:
    """Dissipation bookkeeping against the energy drop.

    The exact finite-horizon identity is ``int_0^S int |psi_s|^2 dx ds =
    E(0) - E(S)`` (integrating the pointwise rate d/ds (1/2)int|psi_x|^2 =
    -int|psi_s|^2); when the flow has terminated by the energy criterion the
    quadratic functional of the resolution data reproduces E(0) to the same
    accuracy.
    """
    diss = series.dissipation_integral()
    fh_gap = abs(diss - (E0 - E_end)) / max(E0, 1e-300)
    if data is not None:
        lv = l_norm(data).value
        id_gap = abs(lv - E0) / max(E0, 1e-300)
    else:
        lv = math.nan
        id_gap = math.nan
    return IdentityReport(E0=E0, E_end=E_end, dissipation=diss,
                          finite_horizon_gap=fh_gap, l_value=lv,
                          identity_gap=id_gap)


def _check_compatible(d1: ResolutionData, d2: ResolutionData):
    if d1.grid != d2.grid or d1.m != d2.m:
        raise ScheduleMismatch("resolution data on different grids")
    if len(d1.s_samples) != len(d2.s_samples) or \
            np.max(np.abs(d1.s_samples - d2.s_samples)) > 1e-12:
        raise ScheduleMismatch("resolution data on different s-schedules")


def _pair_gram(d1: ResolutionData, d2: ResolutionData):
    """Weighted cross-Gram M_ab = (1/2) int int psi2_a psi1_b + (1/4) int ..."""
    w = d1.sample_weights()
    m = d1.m
    M = np.zeros((m, m))
    dx2 = d1.grid.dx ** 2
    for wi, p1, p2 in zip(w, d1.psi_s, d2.psi_s):
        M += 0.5 * wi * dx2 * np.einsum("xya,xyb->ab", p2, p1)
    M += 0.25 * dx2 * np.einsum("jxya,jxyb->ab", d2.psi_x0, d1.psi_x0)
    return M


def _quad_norm(d: ResolutionData):
    w = d.sample_weights()
    dx2 = d.grid.dx ** 2
    total = sum(0.5 * wi * dx2 * float(np.sum(p * p)) for wi, p in zip(w, d.psi_s))
    return total + 0.25 * dx2 * float(np.sum(d.psi_x0 ** 2))


def so_distance(d1: ResolutionData, d2: ResolutionData) -> float:
    """Rotation-quotient distance between two resolution data sets.

    Minimizes the weighted Hilbert distance over one global rotation acting
    on the frame components (constant in s and x), via Procrustes on the
    stacked cross-Gram; returns the square root so the triangle inequality
    holds on sampled data.  The optimal rotation is applied and the distance
    accumulated from explicit field differences, so coinciding classes give
    zero to rounding rather than sqrt-of-cancellation noise.
    """
    _check_compatible(d1, d2)
    M = _pair_gram(d1, d2)
    q = special_orthogonal_align(M).T  # argmax of tr(M Q) over SO(m)
    w = d1.sample_weights()
    dx2 = d1.grid.dx ** 2
    dist_sq = 0.0
    for wi, p1, p2 in zip(w, d1.psi_s, d2.psi_s):
        diff = p1 @ q - p2
        dist_sq += 0.5 * wi * dx2 * float(np.sum(diff * diff))
    diffx = d1.psi_x0 @ q - d2.psi_x0
    dist_sq += 0.25 * dx2 * float(np.sum(diffx * diffx))
    return math.sqrt(dist_sq)


def rotate_resolution_data(d: ResolutionData, q) -> ResolutionData:
    """Apply a global frame rotation Q to every field (components -> Q^T comp)."""
    q = np.asarray(q, float)
    return ResolutionData(
        grid=d.grid, m=d.m, s_samples=d.s_samples.copy(),
        psi_s=[p @ q for p in d.psi_s],
        psi_x0=d.psi_x0 @ q,
        s_dense=d.s_dense.copy(), diss_dense=d.diss_dense.copy())
