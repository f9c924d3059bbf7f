"""Harmonic map heat flow solver.

State is a manifold-valued field on a periodic grid, advanced by classical
RK4 on the tension field with a retraction onto the target after every step.
The tension is evaluated as the tangent projection of the discrete Laplacian
(embedded backends) or as ``Lap u^c + Gamma^c_ab du^a du^b`` (chart backends).

The internal Laplacian is the divergence-of-gradient composition built from
the same central stencils as the energy density: with that pairing the
semi-discrete flow is the exact gradient flow of the discrete Dirichlet
energy, so energy monotonicity and the dissipation identity hold to rounding
plus O(ds^4) time-integration error instead of O(dx^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _kernels, densities
from .errors import (BlowupSuspected, BumpTooWide, ChartOverflow, ConfigError,
                     IncommensurateScale, RetractFailure, ScaleOutOfRange,
                     StepDiverged)
from .geometry import TargetManifold, sphere_target
from .grid import Grid2, check_field, laplacian_div_grad, gradient, integrate, sup_norm

BOUNDARY_TOL = 1e-9
CONSTRAINT_TOL = 1e-10


@dataclass
class MapField:
    """Discretized map from the grid into the target manifold.

    ``values`` holds one storage-space point per node (ambient coordinates
    for embedded targets, chart coordinates otherwise); ``base_point`` is the
    constant value the map takes at spatial infinity, realized on the outer
    boundary band of the box.
    """

    grid: Grid2
    target: TargetManifold
    values: np.ndarray
    base_point: np.ndarray

    def copy(self):
        return MapField(self.grid, self.target, self.values.copy(), self.base_point.copy())

    def constraint_violation(self):
        if self.target.is_embedded:
            return float(np.max(np.abs(self.target.backend.point_constraint(self.values))))
        inside = self.target.backend.chart_domain(self.values)
        return 0.0 if bool(np.all(inside)) else math.inf

    def band_deviation(self):
        """Max storage-space distance to the base point on the boundary band."""
        mask = self.grid.boundary_band_mask()
        dev = np.linalg.norm(self.values - self.base_point, axis=-1)
        return float(np.max(dev[mask]))

    def validate(self, boundary=True):
        check_field(self.grid, self.values)
        if self.constraint_violation() > CONSTRAINT_TOL:
            raise ConfigError("map values violate the target point constraint")
        if boundary and self.band_deviation() > BOUNDARY_TOL:
            raise ConfigError("map is not constant on the outer boundary band")
        return self


@dataclass(frozen=True)
class StepControl:
    """Explicit-scheme step control: ds = cfl_fraction * dx^2."""

    cfl_fraction: float = 0.2
    s_max: float = 50.0
    stop_energy_fraction: float = 1e-4
    blowup_factor: float = 1e3

    def __post_init__(self):
        if not (0.0 < self.cfl_fraction <= 0.25):
            raise ConfigError("cfl_fraction must lie in (0, 0.25]")
        if self.s_max <= 0:
            raise ConfigError("s_max must be positive")

    def ds(self, grid: Grid2):
        return self.cfl_fraction * grid.dx ** 2


@dataclass
class FlowState:
    s: float
    phi: MapField
    ds: float


@dataclass
class FlowSample:
    """Snapshot taken on the s-schedule (values are copies, safe to keep)."""

    s: float
    values: np.ndarray
    E: tuple
    sup_e: tuple
    e_norm_partial: float
    band_dev: float


@dataclass
class FlowHistory:
    series: "densities.EnergySeries"
    samples: list
    termination: str
    state: FlowState
    E0: float

    def sample_at(self, s):
        """Sample whose time is closest to s."""
        idx = int(np.argmin([abs(rec.s - s) for rec in self.samples]))
        return self.samples[idx]

    def map_at(self, s, template: MapField):
        rec = self.sample_at(s)
        return MapField(template.grid, template.target, rec.values.copy(),
                        template.base_point.copy())


def tension(phi: MapField):
    """Tension field (phi* grad)_j d_j phi, tangent at every node.

    Embedded backends return the tangent projection of the componentwise
    Laplacian, which agrees with Lap phi + Pi(phi)(dphi, dphi) and is tangent
    to rounding.  Chart backends return Lap u^c + Gamma^c_ab du_j^a du_j^b.
    """
    grid, target = phi.grid, phi.target
    lap = laplacian_div_grad(grid, phi.values)
    if target.is_embedded:
        return target.backend.project(phi.values, lap)
    gam = target.backend.christoffel(phi.values)
    du = gradient(grid, phi.values)
    quad = np.einsum("...cab,j...a,j...b->...c", gam, du, du)
    return lap + quad


def _rhs(grid, target, values):
    lap = laplacian_div_grad(grid, values)
    if target.is_embedded:
        norms2 = np.sum(values * values, axis=-1)
        dot = np.sum(lap * values, axis=-1) / norms2
        return lap - dot[..., None] * values
    gam = target.backend.christoffel(values)
    du = gradient(grid, values)
    return lap + np.einsum("...cab,j...a,j...b->...c", gam, du, du)


def _advance_numpy(grid, target, values, ds):
    k1 = _rhs(grid, target, values)
    k2 = _rhs(grid, target, values + 0.5 * ds * k1)
    k3 = _rhs(grid, target, values + 0.5 * ds * k2)
    k4 = _rhs(grid, target, values + ds * k3)
    nxt = values + (ds / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return target.retract(nxt), k1


def _advance(grid, target, values, ds):
    """RK4 + retraction; returns (new_values, tension_at_input)."""
    if target.is_embedded and _kernels.HAVE_NUMBA:
        return _kernels.rk4_sphere_step(values, ds, grid.dx)
    return _advance_numpy(grid, target, values, ds)


def step(state: FlowState, ctrl: StepControl) -> FlowState:
    """One classical RK4 update of the tension flow followed by retraction."""
    phi = state.phi
    grid, target = phi.grid, phi.target
    ds = state.ds
    try:
        nxt, _ = _advance(grid, target, phi.values, ds)
    except RetractFailure as exc:
        raise StepDiverged(f"retraction failed at s = {state.s:.6g}") from exc
    if not np.all(np.isfinite(nxt)):
        raise StepDiverged(f"non-finite state at s = {state.s:.6g}")
    new_phi = MapField(grid, target, nxt, phi.base_point)
    return FlowState(s=state.s + ds, phi=new_phi, ds=ds)


@dataclass
class SampleContext:
    """Slices handed to schedule callbacks: the sampled state plus its
    immediate step neighbours for centered s-stencils."""

    s: float
    phi: MapField
    phi_prev: MapField | None
    phi_next: MapField | None
    ds: float
    step_index: int
    E0: float


def make_schedule(s_max, lin_end=0.1, lin_points=10, log_points_per_decade=24):
    """Sampling times: linear up to ``lin_end`` then log-spaced to s_max."""
    if s_max <= lin_end:
        return np.linspace(0.0, s_max, lin_points + 1)
    lin = np.linspace(0.0, lin_end, lin_points + 1)
    decades = math.log10(s_max / lin_end)
    n_log = max(4, int(math.ceil(log_points_per_decade * decades)))
    log = np.geomspace(lin_end, s_max, n_log + 1)[1:]
    return np.concatenate([lin, log])


def evolve(state: FlowState, ctrl: StepControl, callbacks=(), schedule=None,
           k_max=3, stats_stride=4) -> FlowHistory:
    """Run the flow until s_max or until the energy stop criterion.

    Per step the driver records the dissipation integrand
    ``int |d_s phi|^2 dx`` (dense, for the dissipation identity); the energy,
    ``int e_1^2 dx`` and ``sup e_1`` are recorded every ``stats_stride``
    steps.  Callbacks are invoked on the sampling schedule with a
    :class:`SampleContext`; objects exposing ``on_step(phi, phi_next, ds)``
    are also advanced once per step (used by the frame transporter).

    Raises BlowupSuspected when ``sup |d_x phi|`` exceeds ``blowup_factor``
    times its initial value: the continuation criterion as a monitor.
    """
    phi = state.phi
    grid, target = phi.grid, phi.target
    ds = state.ds
    E0 = densities.energy(phi)
    sup_grad0 = math.sqrt(sup_norm(densities.e1_field(phi)))
    ceiling = ctrl.blowup_factor * max(sup_grad0, 1e-12)

    if schedule is None:
        schedule = make_schedule(ctrl.s_max)
    schedule = np.asarray(schedule, float)

    steppers = [cb for cb in callbacks if hasattr(cb, "on_step")]
    samplers = [cb if hasattr(cb, "on_sample") else _FunctionSampler(cb) for cb in callbacks]

    series = densities.EnergySeries(E0=E0, k_max=k_max)
    samples = []

    def record_sample(s, ph, prev, nxt, idx):
        stack = densities.density_stack(ph, k_max, s=s)
        series.append_sample(s, stack)
        samples.append(FlowSample(
            s=s, values=ph.values.copy(),
            E=tuple(stack.E), sup_e=tuple(sup_norm(e) for e in stack.e),
            e_norm_partial=series.e_norm_partial(), band_dev=ph.band_deviation()))
        ctx = SampleContext(s=s, phi=ph, phi_prev=prev, phi_next=nxt, ds=ds,
                            step_index=idx, E0=E0)
        for cb in samplers:
            cb.on_sample(ctx)

    def record_stats(s, ph):
        e1 = densities.e1_field(ph)
        series.append_stats(s, integrate(grid, e1), integrate(grid, e1 * e1),
                            sup_norm(e1))
        return math.sqrt(series.sup_e1_stats[-1])

    record_stats(state.s, phi)
    if E0 <= 0.0:
        tau0 = tension(phi)
        series.append_diss(state.s, integrate(grid, target.inner(phi.values, tau0, tau0)))
        record_sample(state.s, phi, None, None, 0)
        return FlowHistory(series=series, samples=samples, termination="energy",
                           state=state, E0=E0)

    # step indices at which samples fire, deduplicated after snapping to ds
    n_steps_max = int(math.ceil(ctrl.s_max / ds))
    pending = sorted(set(min(int(round(t / ds)), n_steps_max) for t in schedule))
    want = pending.pop(0) if pending else None  # usually index 0

    def advance(st):
        try:
            new_vals, k1 = _advance(grid, target, st.phi.values, ds)
        except RetractFailure as exc:
            raise StepDiverged(f"retraction failed at s = {st.s:.6g}") from exc
        if not np.all(np.isfinite(new_vals)):
            raise StepDiverged(f"non-finite state at s = {st.s:.6g}")
        series.append_diss(st.s, integrate(grid, target.inner(st.phi.values, k1, k1)))
        new_phi = MapField(grid, target, new_vals, st.phi.base_point)
        new_state = FlowState(s=st.s + ds, phi=new_phi, ds=ds)
        for cb in steppers:
            cb.on_step(st.phi, new_phi, ds)
        return new_state

    prev = None
    cur = state
    termination = None
    k = 0

    while True:
        nxt = advance(cur)
        k += 1
        sample_now = want is not None and want == k - 1
        check_now = sample_now or k % stats_stride == 0 or k >= n_steps_max

        if sample_now:
            # state at step index k-1 is cur; nxt provides the forward slice
            record_sample(cur.s, cur.phi, prev.phi if prev else None, nxt.phi, k - 1)
            while pending and pending[0] == want:
                pending.pop(0)
            want = pending.pop(0) if pending else None

        if check_now:
            grad_sup = record_stats(nxt.s, nxt.phi)
            if grad_sup > ceiling:
                raise BlowupSuspected(
                    f"sup|d_x phi| = {grad_sup:.3g} exceeded ceiling {ceiling:.3g}"
                    f" at s = {nxt.s:.6g}")
            E_now = 0.5 * series.E1_stats[-1]
            if E_now <= ctrl.stop_energy_fraction * E0:
                termination = "energy"
            elif k >= n_steps_max:
                termination = "smax"

        if termination is not None:
            # final sample at the termination state; one extra step is taken
            # only to provide the forward slice for centered stencils
            if series.s_stats[-1] < nxt.s:
                record_stats(nxt.s, nxt.phi)
            extra = advance(nxt)
            record_sample(nxt.s, nxt.phi, cur.phi, extra.phi, k)
            cur = nxt
            break

        prev, cur = cur, nxt

    return FlowHistory(series=series, samples=samples, termination=termination,
                       state=cur, E0=E0)


class _FunctionSampler:
    def __init__(self, fn):
        self._fn = fn

    def on_sample(self, ctx):
        self._fn(ctx)


# ---------------------------------------------------------------------------
# initial data constructors
# ---------------------------------------------------------------------------

def bump_profile(r):
    """Smooth compactly supported profile with eta(0) = 1, support |r| < 1."""
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    ri = r[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - ri * ri))
    return out


def _unit_tangent(target, base, direction):
    if direction is None:
        direction = np.zeros(target.point_dim)
        direction[0] = 1.0
    direction = np.asarray(direction, float)
    if target.is_embedded:
        direction = target.backend.project(base, direction)
    norm = math.sqrt(float(target.inner(base, direction, direction)))
    if norm <= 1e-12:
        raise ConfigError("degenerate bump direction")
    return direction / norm


def make_bump_data(grid: Grid2, target: TargetManifold, amplitude, width,
                   center=None, direction=None, base_point=None) -> MapField:
    """Geodesic bump: exp at the base point of a * eta(|x - x0| / w) * V.

    Exactly equal to the base point outside the bump support, which must fit
    inside the central half of the box.
    """
    if width <= 0 or amplitude < 0:
        raise ConfigError("bump needs width > 0 and amplitude >= 0")
    base = np.asarray(base_point, float) if base_point is not None \
        else target.default_base_point()
    center = np.asarray(center, float) if center is not None else grid.center
    half = grid.length / 4.0
    if np.max(np.abs(center - grid.center)) + width > half + 1e-12:
        raise BumpTooWide(
            f"support radius {width} at offset {center - grid.center} leaves the central half-box")
    v = _unit_tangent(target, base, direction)
    r = grid.periodic_distance(center)
    disp = amplitude * bump_profile(r / width)
    vec = disp[..., None] * v
    values = target.exp(np.broadcast_to(base, vec.shape), vec)
    # the profile vanishes identically outside its support; pin those nodes
    outside = disp == 0.0
    values[outside] = base
    return MapField(grid, target, values, base).validate()


def make_multiscale_bump_data(grid: Grid2, target: TargetManifold, amplitude,
                              widths, jitter=0.4, base_point=None) -> MapField:
    """Superposition of geodesic bumps at the given widths.

    Equal amplitudes put equal energy at every scale (the energy of a bump is
    scale invariant in 2d), producing data whose gradient content is spread
    log-uniformly across scales; centers are offset and tangent directions
    alternated so no accidental symmetry survives.
    """
    base = np.asarray(base_point, float) if base_point is not None \
        else target.default_base_point()
    axes = np.eye(target.point_dim)
    disp_total = 0.0
    for i, w in enumerate(widths):
        off = np.array([jitter * w * (1 if i % 2 == 0 else -1),
                        jitter * w * (1 if (i // 2) % 2 == 0 else -1)])
        if np.max(np.abs(off)) + w > grid.length / 4.0 + 1e-12:
            raise BumpTooWide(f"scale {w} with offset {off} leaves the central half-box")
        v = _unit_tangent(target, base, axes[i % 2])
        r = grid.periodic_distance(grid.center + off)
        disp_total = disp_total + (amplitude * bump_profile(r / w))[..., None] * v
    values = target.exp(np.broadcast_to(base, disp_total.shape), disp_total)
    dead = np.all(disp_total == 0.0, axis=-1)
    values[dead] = base
    return MapField(grid, target, values, base).validate()


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0.0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
        b = np.where(t < 1.0, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    return a / (a + b)


def make_stereographic_data(grid: Grid2, scale, target=None, cap_inner=None,
                            cap_outer=None, capped=True) -> MapField:
    """Inverse stereographic projection of ``scale * (x - center)`` into S^2.

    The ideal map is the degree-1 harmonic representative with energy density
    ``8 scale^2 / (1 + scale^2 |x|^2)^2``; its far field tends to the north
    pole.  With ``capped=True`` the map is blended onto the north pole across
    the annulus [cap_inner, cap_outer] (inside the central half-box) so the
    boundary band is exactly constant; ``capped=False`` returns the raw map
    for static diagnostics, skipping the boundary validation.
    """
    target = target or sphere_target(2)
    if not (target.is_embedded and target.point_dim == 3):
        raise ConfigError("stereographic data requires the sphere:2 target")
    if scale <= 0:
        raise ScaleOutOfRange("scale must be positive")
    half = grid.length / 4.0
    cap_outer = cap_outer if cap_outer is not None else 0.95 * half
    cap_inner = cap_inner if cap_inner is not None else 0.60 * half
    if not (0 < cap_inner < cap_outer <= half + 1e-12):
        raise ScaleOutOfRange("cap radii must satisfy 0 < inner < outer <= L/4")
    if capped and scale * cap_inner < 1.5:
        raise ScaleOutOfRange(
            f"scale {scale} leaves the map too far from the pole at the cap radius")

    x1, x2 = grid.coords()
    y1 = scale * (x1 - grid.center[0])
    y2 = scale * (x2 - grid.center[1])
    r2 = y1 * y1 + y2 * y2
    den = 1.0 + r2
    sigma = np.stack([2.0 * y1 / den, 2.0 * y2 / den, (r2 - 1.0) / den], axis=-1)
    north = np.array([0.0, 0.0, 1.0])

    if capped:
        r = np.hypot(x1 - grid.center[0], x2 - grid.center[1])
        chi = _smoothstep((r - cap_inner) / (cap_outer - cap_inner))
        cosang = np.clip(sigma[..., 2], -1.0, 1.0)
        ang = np.arccos(cosang)
        sin_ang = np.sin(ang)
        safe = sin_ang > 1e-12
        w_sig = np.where(safe, np.sin((1.0 - chi) * ang) / np.where(safe, sin_ang, 1.0), 1.0 - chi)
        w_n = np.where(safe, np.sin(chi * ang) / np.where(safe, sin_ang, 1.0), chi)
        values = w_sig[..., None] * sigma + w_n[..., None] * north
        values[chi >= 1.0] = north
        values = target.retract(values)
    else:
        values = sigma

    out = MapField(grid, target, values, north)
    return out.validate() if capped else out


def ideal_stereographic_density(grid: Grid2, scale):
    """Closed-form e_1 of the uncapped map, evaluated at the grid nodes."""
    x1, x2 = grid.coords()
    r2 = (x1 - grid.center[0]) ** 2 + (x2 - grid.center[1]) ** 2
    return 8.0 * scale ** 2 / (1.0 + scale ** 2 * r2) ** 2


# ---------------------------------------------------------------------------
# symmetry transforms
# ---------------------------------------------------------------------------

def translate_data(phi: MapField, shift) -> MapField:
    """Periodic lattice translation: phi(x - x0), exact."""
    shift = np.asarray(shift, float)
    steps = shift / phi.grid.dx
    k = np.rint(steps).astype(int)
    if np.max(np.abs(steps - k)) > 1e-9:
        raise IncommensurateScale(f"shift {shift} is not a lattice vector")
    values = np.roll(phi.values, (k[0], k[1]), axis=(0, 1))
    return MapField(phi.grid, phi.target, values, phi.base_point.copy())


def _resample_axis(arr, axis, num, den, n):
    """Values at index positions c + (i - c) * den / num along one axis."""
    c = n // 2
    offs = np.arange(n) - c
    pos = c + offs * den / num
    base = np.floor(pos).astype(int)
    w = pos - base
    lo = np.take(arr, np.mod(base, n), axis=axis)
    hi = np.take(arr, np.mod(base + 1, n), axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n
    w = w.reshape(shape)
    exact = np.isclose(w, 0.0, atol=1e-12).reshape(shape)
    return np.where(exact, lo, (1.0 - w) * lo + w * hi)


def rescale_data(phi: MapField, lam) -> MapField:
    """Dilation about the box center: phi(c + (x - c)/lam), resampled.

    ``lam`` must be (numerically) rational with a small denominator so the
    source positions are grid-commensurate; source positions landing between
    nodes use separable linear interpolation followed by retraction.
    """
    if lam <= 0:
        raise IncommensurateScale("scale factor must be positive")
    frac = Fraction(lam).limit_denominator(64)
    if abs(float(frac) - lam) > 1e-12 * max(1.0, abs(lam)):
        raise IncommensurateScale(f"scale {lam} is not grid-commensurate")
    if frac == 1:
        return phi.copy()
    n = phi.grid.n
    vals = _resample_axis(phi.values, 0, frac.numerator, frac.denominator, n)
    vals = _resample_axis(vals, 1, frac.numerator, frac.denominator, n)
    vals = phi.target.retract(vals)
    out = MapField(phi.grid, phi.target, vals, phi.base_point.copy())
    return out.validate()
