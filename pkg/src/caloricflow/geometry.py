"""Target manifolds.

Two backends are provided.  The unit sphere S^m sits in R^{m+1} through its
standard embedding and carries closed-form tangent projector, second
fundamental form and curvature operator.  The hyperbolic plane H^2 is handled
intrinsically in the Poincare-disk chart with closed-form metric, Christoffel
symbols and constant-curvature tensor; no Euclidean embedding is used.

Sign conventions.  The second fundamental form satisfies
``<Pi(X, Y), N> = <d_X N, Y>`` for a normal field N, which for the unit sphere
gives ``Pi(p)(X, Y) = <X, Y> p``.  The curvature operator is
``R(X, Y)Z = grad_X grad_Y Z - grad_Y grad_X Z - grad_[X,Y] Z`` so that the
sphere has ``<R(X, Y)Y, X> = +1`` and H^2 has ``-1`` on orthonormal pairs.

All operations broadcast over leading axes: points are arrays shaped
``(..., point_dim)`` and vector arguments match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ChartOverflow, ConfigError, NonTangentInput, RetractFailure

TANGENCY_TOL = 1e-8
CHART_MARGIN = 0.999


def _dot(a, b):
    return np.sum(a * b, axis=-1)


class EmbeddedTarget:
    """Manifold given through an isometric embedding into R^n.

    The only instance shipped is the round unit sphere; the class keeps the
    embedded capabilities (constraint, projector, second fundamental form,
    curvature operator, retraction, exponential map) behind one interface so
    the solver never special-cases the sphere formulas.
    """

    def __init__(self, ambient_dim, intrinsic_dim):
        self.ambient_dim = ambient_dim
        self.intrinsic_dim = intrinsic_dim

    # -- constraint and linear algebra at a point --------------------------

    def point_constraint(self, p):
        """Residual whose zero set is the manifold: |p| - 1."""
        return np.linalg.norm(p, axis=-1) - 1.0

    def project(self, p, v):
        """Orthogonal projection of ambient v onto T_p: v - <v,p> p."""
        return v - _dot(v, p)[..., None] * p

    def second_fundamental(self, p, x, y):
        """Pi(p)(X, Y) = <X, Y> p (normal-valued, symmetric, bilinear)."""
        return _dot(x, y)[..., None] * p

    def curvature(self, p, x, y, z):
        """R(X, Y)Z = <Y, Z> X - <X, Z> Y for the unit sphere."""
        return _dot(y, z)[..., None] * x - _dot(x, z)[..., None] * y

    def inner(self, p, x, y):
        """Pullback metric = ambient Euclidean product for isometric embeddings."""
        return _dot(x, y)

    def is_tangent(self, p, v, tol=TANGENCY_TOL):
        mag = np.linalg.norm(v, axis=-1)
        normal = np.abs(_dot(v, p))
        return np.all(normal <= tol * np.maximum(mag, 1.0))

    # -- nonlinear maps -----------------------------------------------------

    def retract(self, v):
        """Radial projection v/|v|; fails outside the retraction radius 1/2."""
        norms = np.linalg.norm(v, axis=-1)
        if not np.all(np.isfinite(norms)) or np.any(norms <= 0.5):
            raise RetractFailure("point outside sphere retraction radius")
        return v / norms[..., None]

    def exp(self, p, v):
        """Exponential map: cos(|v|) p + sin(|v|) v/|v| (tangent v)."""
        theta = np.linalg.norm(v, axis=-1)
        # sinc form keeps the zero-vector limit exact
        return np.cos(theta)[..., None] * p + np.sinc(theta / np.pi)[..., None] * v


class ChartedTarget:
    """Manifold described in a single chart with closed-form tensors.

    ``metric``, ``christoffel`` and ``curvature_components`` are callables of
    the chart point returning ``(..., m, m)``, ``(..., m, m, m)`` (index order
    ``[c, a, b]`` for Gamma^c_ab) and ``(..., m, m, m, m)`` (order
    ``[c, a, b, d]`` for R^c_abd) arrays.
    """

    def __init__(self, intrinsic_dim, metric, christoffel, curvature_components,
                 chart_radius=CHART_MARGIN):
        self.intrinsic_dim = intrinsic_dim
        self.ambient_dim = intrinsic_dim
        self._metric = metric
        self._christoffel = christoffel
        self._curvature = curvature_components
        self.chart_radius = chart_radius

    def chart_domain(self, u):
        return np.linalg.norm(u, axis=-1) <= self.chart_radius

    def _check_domain(self, u):
        r = np.linalg.norm(u, axis=-1)
        if not np.all(np.isfinite(r)) or np.any(r > self.chart_radius):
            raise ChartOverflow(
                f"chart point with |u| = {np.max(r):.6g} outside radius {self.chart_radius}")

    def metric(self, u):
        self._check_domain(u)
        return self._metric(u)

    def christoffel(self, u):
        self._check_domain(u)
        return self._christoffel(u)

    def curvature_components(self, u):
        self._check_domain(u)
        return self._curvature(u)

    def inner(self, u, x, y):
        h = self.metric(u)
        return np.einsum("...ab,...a,...b->...", h, x, y)

    def curvature(self, u, x, y, z):
        rc = self.curvature_components(u)
        return np.einsum("...cabd,...a,...b,...d->...c", rc, x, y, z)

    def retract(self, v):
        """Clamp to the chart domain (radial rescale onto |u| <= margin)."""
        r = np.linalg.norm(v, axis=-1)
        if not np.all(np.isfinite(r)):
            raise RetractFailure("non-finite chart point")
        scale = np.minimum(1.0, self.chart_radius / np.maximum(r, 1e-300))
        return v * scale[..., None]

    def exp(self, u, v, substeps=None):
        """Exponential map by RK4 integration of the geodesic equation."""
        u = np.broadcast_to(np.asarray(u, float), np.asarray(v).shape).copy()
        v = np.array(v, float, copy=True)
        speed = float(np.sqrt(np.maximum(self.inner(u, v, v).max(), 0.0)))
        k = substeps or max(16, int(8 * speed) + 1)
        dt = 1.0 / k

        def acc(pos, vel):
            gam = self.christoffel(pos)
            return -np.einsum("...cab,...a,...b->...c", gam, vel, vel)

        for _ in range(k):
            k1u, k1v = v, acc(u, v)
            k2u, k2v = v + 0.5 * dt * k1v, acc(u + 0.5 * dt * k1u, v + 0.5 * dt * k1v)
            k3u, k3v = v + 0.5 * dt * k2v, acc(u + 0.5 * dt * k2u, v + 0.5 * dt * k2v)
            k4u, k4v = v + dt * k3v, acc(u + dt * k3u, v + dt * k3v)
            u = u + (dt / 6.0) * (k1u + 2 * k2u + 2 * k3u + k4u)
            v = v + (dt / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        return u


@dataclass(frozen=True)
class TargetManifold:
    """A named target with exactly one active backend."""

    name: str
    backend: object
    curvature_sign: int
    energy_threshold: float | None = None

    @property
    def is_embedded(self):
        return isinstance(self.backend, EmbeddedTarget)

    @property
    def intrinsic_dim(self):
        return self.backend.intrinsic_dim

    @property
    def point_dim(self):
        """Storage dimension per node: ambient n for embedded, chart m otherwise."""
        return self.backend.ambient_dim

    def default_base_point(self):
        if self.is_embedded:
            p = np.zeros(self.point_dim)
            p[-1] = 1.0
            return p
        return np.zeros(self.point_dim)

    def inner(self, p, x, y):
        return self.backend.inner(p, x, y)

    def retract(self, v):
        return self.backend.retract(v)

    def exp(self, p, v):
        return self.backend.exp(p, v)


# Least energy of a nontrivial finite-energy harmonic map R^2 -> S^2.
# Configured, not computed: the value is fixed by quadrature of the degree-1
# inverse-stereographic energy density (see the geometry test oracle).
SPHERE2_ENERGY_THRESHOLD = 4.0 * math.pi


def sphere_target(m):
    """Unit sphere S^m embedded in R^{m+1}.

    For m = 2 the configured energy threshold is 4*pi; no threshold is
    configured for other dimensions.
    """
    if m < 1:
        raise ConfigError(f"sphere dimension must be >= 1, got {m}")
    threshold = SPHERE2_ENERGY_THRESHOLD if m == 2 else None
    return TargetManifold(
        name=f"sphere:{m}",
        backend=EmbeddedTarget(ambient_dim=m + 1, intrinsic_dim=m),
        curvature_sign=+1,
        energy_threshold=threshold,
    )


def _h2_metric(u):
    r2 = np.sum(u * u, axis=-1)
    conf2 = (2.0 / (1.0 - r2)) ** 2
    eye = np.eye(2)
    return conf2[..., None, None] * eye


def _h2_christoffel(u):
    # Gamma^c_ab = 2 (delta_ca u_b + delta_cb u_a - delta_ab u_c) / (1 - |u|^2)
    r2 = np.sum(u * u, axis=-1)
    fac = 2.0 / (1.0 - r2)
    eye = np.eye(2)
    term = (np.einsum("ca,...b->...cab", eye, u)
            + np.einsum("cb,...a->...cab", eye, u)
            - np.einsum("ab,...c->...cab", eye, u))
    return fac[..., None, None, None] * term


def _h2_curvature(u):
    # Constant curvature K = -1: R^c_abd = K (h_bd delta^c_a - h_ad delta^c_b)
    h = _h2_metric(u)
    eye = np.eye(2)
    return -(np.einsum("...bd,ca->...cabd", h, eye)
             - np.einsum("...ad,cb->...cabd", h, eye))


def hyperbolic_target():
    """Hyperbolic plane H^2 in the Poincare-disk chart.

    No nontrivial finite-energy harmonic map from the plane exists for this
    target, so the energy threshold is infinite.
    """
    return TargetManifold(
        name="h2",
        backend=ChartedTarget(2, _h2_metric, _h2_christoffel, _h2_curvature),
        curvature_sign=-1,
        energy_threshold=math.inf,
    )


def retract(target: TargetManifold, v):
    """Map a nearby storage-space point back onto the manifold."""
    return target.backend.retract(v)


def curvature_apply(target: TargetManifold, p, x, y, z):
    """Evaluate R(X, Y)Z at p with tangency checks on embedded backends."""
    backend = target.backend
    if target.is_embedded:
        for v in (x, y, z):
            if not backend.is_tangent(p, np.asarray(v, float)):
                raise NonTangentInput("curvature argument not tangent at p")
        return backend.curvature(p, x, y, z)
    backend._check_domain(np.asarray(p, float))
    return backend.curvature(p, x, y, z)


def parse_target(spec: str) -> TargetManifold:
    """Build a target from a CLI string: ``sphere:m`` or ``h2``."""
    spec = spec.strip().lower()
    if spec == "h2":
        return hyperbolic_target()
    if spec.startswith("sphere:"):
        try:
            m = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad sphere dimension in target spec {spec!r}") from None
        return sphere_target(m)
    raise ConfigError(f"unknown target spec {spec!r}")
