"""Optional numba-compiled inner loops for the sphere backend.

The numpy implementations in flow.py and gauge.py remain the reference; these
kernels compute the same update node by node (fused, no temporaries) and are
used automatically when numba imports.  Arithmetic matches the vectorized
path to rounding.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in the tested env
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def rk4_sphere_step(v, ds, dx):
    """One RK4 + retraction update of the sphere-valued flow.

    Returns (new_values, k1) where k1 is the tension field at the input
    state, reused by the caller for the dissipation series.
    """
    n = v.shape[0]
    m = v.shape[2]
    inv = 1.0 / (4.0 * dx * dx)
    out = np.empty_like(v)
    ks = np.empty((4, n, n, m))
    vv = v.copy()
    coef = (0.0, 0.5, 0.5, 1.0)
    for stage in range(4):
        if stage > 0:
            c = coef[stage] * ds
            for i in range(n):
                for j in range(n):
                    for d in range(m):
                        vv[i, j, d] = v[i, j, d] + c * ks[stage - 1, i, j, d]
        for i in range(n):
            im2 = (i - 2) % n
            ip2 = (i + 2) % n
            for j in range(n):
                jm2 = (j - 2) % n
                jp2 = (j + 2) % n
                dot = 0.0
                nrm2 = 0.0
                for d in range(m):
                    lap = (vv[im2, j, d] + vv[ip2, j, d] + vv[i, jm2, d]
                           + vv[i, jp2, d] - 4.0 * vv[i, j, d]) * inv
                    ks[stage, i, j, d] = lap
                    dot += lap * vv[i, j, d]
                    nrm2 += vv[i, j, d] * vv[i, j, d]
                dot /= nrm2
                for d in range(m):
                    ks[stage, i, j, d] -= dot * vv[i, j, d]
    for i in range(n):
        for j in range(n):
            r2 = 0.0
            for d in range(m):
                nv = v[i, j, d] + (ds / 6.0) * (ks[0, i, j, d] + 2.0 * ks[1, i, j, d]
                                                + 2.0 * ks[2, i, j, d] + ks[3, i, j, d])
                out[i, j, d] = nv
                r2 += nv * nv
            r = np.sqrt(r2)
            for d in range(m):
                out[i, j, d] /= r
    return out, ks[0]


@njit(cache=True)
def transport_frame_sphere(e, v_prev, v_next, ds):
    """Parallel-transport the orthonormal frame across one flow step (m = 2).

    Midpoint (RK2) integration of ``de/ds = -(e . dphi/ds) phi`` with the
    velocity estimated from the two slices, followed by tangent projection at
    the new state and symmetric (Loewdin) re-orthonormalization.
    """
    n = v_prev.shape[0]
    nc = v_prev.shape[2]
    out = np.empty_like(e)
    for i in range(n):
        for j in range(n):
            # midpoint base point, normalized
            pm0 = 0.0
            for d in range(nc):
                pm0 += (0.5 * (v_prev[i, j, d] + v_next[i, j, d])) ** 2
            pmr = np.sqrt(pm0)
            for a in range(2):
                # velocity and RK2 update with coefficients frozen at midpoint
                c1 = 0.0
                for d in range(nc):
                    vel = (v_next[i, j, d] - v_prev[i, j, d]) / ds
                    c1 += e[a, i, j, d] * vel
                c2 = 0.0
                for d in range(nc):
                    vel = (v_next[i, j, d] - v_prev[i, j, d]) / ds
                    pm = 0.5 * (v_prev[i, j, d] + v_next[i, j, d]) / pmr
                    eh = e[a, i, j, d] - 0.5 * ds * c1 * pm
                    c2 += eh * vel
                dotn = 0.0
                for d in range(nc):
                    pm = 0.5 * (v_prev[i, j, d] + v_next[i, j, d]) / pmr
                    ev = e[a, i, j, d] - ds * c2 * pm
                    out[a, i, j, d] = ev
                    dotn += ev * v_next[i, j, d]
                for d in range(nc):
                    out[a, i, j, d] -= dotn * v_next[i, j, d]
            # Loewdin orthonormalization of the pair (equivariant under
            # constant right rotations, unlike Gram-Schmidt)
            g11 = 0.0
            g12 = 0.0
            g22 = 0.0
            for d in range(nc):
                g11 += out[0, i, j, d] * out[0, i, j, d]
                g12 += out[0, i, j, d] * out[1, i, j, d]
                g22 += out[1, i, j, d] * out[1, i, j, d]
            det = g11 * g22 - g12 * g12
            sq = np.sqrt(det)
            t = np.sqrt(g11 + g22 + 2.0 * sq)
            # sqrt(G) = (G + sq I)/t; B = inv(sqrt(G))
            s11 = (g11 + sq) / t
            s12 = g12 / t
            s22 = (g22 + sq) / t
            dets = s11 * s22 - s12 * s12
            b11 = s22 / dets
            b12 = -s12 / dets
            b22 = s11 / dets
            for d in range(nc):
                e0 = out[0, i, j, d]
                e1 = out[1, i, j, d]
                out[0, i, j, d] = e0 * b11 + e1 * b12
                out[1, i, j, d] = e0 * b12 + e1 * b22
    return out
