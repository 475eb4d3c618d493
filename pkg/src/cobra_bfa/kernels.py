"""Selective-scan kernels: forward recurrence and backprop-through-time.

Two interchangeable implementations live here. The numba versions loop over
(batch, channel, state) explicitly; the numpy versions vectorize over batch and
channel and loop only over time. Set ``COBRA_DISABLE_NUMBA=1`` (or run without
numba installed) to force the numpy path.

Array conventions (all float arrays share one dtype):

    u      (B, T, c)   scan input (projected tokens)
    delta  (B, T, c)   positive step sizes
    A      (c, n)      diagonal transition entries per channel
    Bm, Cm (B, T, n)   input-dependent write/read vectors
    D      (c,)        skip coefficients
    hs     (B, T, c, n) state after the update at step t

Non-finite values are propagated, never trapped: fastmath stays off so that
Inf/NaN produced by corrupted weights behave exactly as IEEE arithmetic says.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("COBRA_DISABLE_NUMBA", "0") != "1"


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def scan_forward_numpy(u, delta, A, Bm, Cm, D):
    Bsz, T, c = u.shape
    n = A.shape[1]
    dtype = u.dtype
    hs = np.empty((Bsz, T, c, n), dtype=dtype)
    y = np.empty((Bsz, T, c), dtype=dtype)
    h = np.zeros((Bsz, c, n), dtype=dtype)
    with np.errstate(all="ignore"):
        for t in range(T):
            dt = delta[:, t, :, None]
            h = (1.0 + dt * A[None]) * h + dt * Bm[:, t, None, :] * u[:, t, :, None]
            hs[:, t] = h
            y[:, t] = np.einsum("bjs,bs->bj", h, Cm[:, t]) + D * u[:, t]
    return y, hs


def scan_backward_numpy(dy, u, delta, A, Bm, Cm, D, hs):
    Bsz, T, c = u.shape
    n = A.shape[1]
    dtype = u.dtype
    du = np.empty_like(u)
    ddelta = np.empty_like(delta)
    dBm = np.empty_like(Bm)
    dCm = np.empty_like(Cm)
    dA = np.zeros_like(A)
    dD = np.zeros_like(D)
    dh = np.zeros((Bsz, c, n), dtype=dtype)
    zero = np.zeros((Bsz, c, n), dtype=dtype)
    with np.errstate(all="ignore"):
        for t in range(T - 1, -1, -1):
            h_t = hs[:, t]
            h_prev = hs[:, t - 1] if t > 0 else zero
            dy_t = dy[:, t]
            u_t = u[:, t]
            dt = delta[:, t]
            b_t = Bm[:, t]

            dh = dh + dy_t[:, :, None] * Cm[:, t, None, :]
            dCm[:, t] = np.einsum("bj,bjs->bs", dy_t, h_t)
            dD += np.sum(dy_t * u_t, axis=0)
            du_t = dy_t * D

            dda = dh * h_prev
            dA += np.einsum("bjs,bj->js", dda, dt)
            dwrite = dh * b_t[:, None, :]
            ddelta[:, t] = np.sum(dda * A[None], axis=2) + np.sum(dwrite, axis=2) * u_t
            dBm[:, t] = np.einsum("bjs,bj->bs", dh, dt * u_t)
            du[:, t] = du_t + np.sum(dwrite, axis=2) * dt

            dh = dh * (1.0 + dt[:, :, None] * A[None])
    return du, ddelta, dA, dBm, dCm, dD


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _scan_forward_nb(u, delta, A, Bm, Cm, D):
        Bsz, T, c = u.shape
        n = A.shape[1]
        hs = np.empty((Bsz, T, c, n), dtype=u.dtype)
        y = np.empty((Bsz, T, c), dtype=u.dtype)
        for b in range(Bsz):
            for j in range(c):
                for t in range(T):
                    dt = delta[b, t, j]
                    x = u[b, t, j]
                    acc = D[j] * x
                    for s in range(n):
                        prev = hs[b, t - 1, j, s] if t > 0 else 0.0
                        h = (1.0 + dt * A[j, s]) * prev + dt * Bm[b, t, s] * x
                        hs[b, t, j, s] = h
                        acc += Cm[b, t, s] * h
                    y[b, t, j] = acc
        return y, hs

    @numba.njit(cache=True)
    def _scan_backward_nb(dy, u, delta, A, Bm, Cm, D, hs):
        Bsz, T, c = u.shape
        n = A.shape[1]
        du = np.empty_like(u)
        ddelta = np.empty_like(delta)
        dBm = np.zeros_like(Bm)
        dCm = np.zeros_like(Cm)
        dA = np.zeros_like(A)
        dD = np.zeros_like(D)
        dh = np.empty(n, dtype=u.dtype)
        for b in range(Bsz):
            for j in range(c):
                for s in range(n):
                    dh[s] = 0.0
                for t in range(T - 1, -1, -1):
                    g = dy[b, t, j]
                    x = u[b, t, j]
                    dt = delta[b, t, j]
                    dD[j] += g * x
                    dx = g * D[j]
                    dd = 0.0
                    for s in range(n):
                        h_t = hs[b, t, j, s]
                        prev = hs[b, t - 1, j, s] if t > 0 else 0.0
                        dhs = dh[s] + g * Cm[b, t, s]
                        dCm[b, t, s] += g * h_t
                        dda = dhs * prev
                        dA[j, s] += dda * dt
                        dd += dda * A[j, s] + dhs * Bm[b, t, s] * x
                        dBm[b, t, s] += dhs * dt * x
                        dx += dhs * dt * Bm[b, t, s]
                        dh[s] = dhs * (1.0 + dt * A[j, s])
                    ddelta[b, t, j] = dd
                    du[b, t, j] = dx
        return du, ddelta, dA, dBm, dCm, dD


def scan_forward(u, delta, A, Bm, Cm, D):
    """Run the Euler-discretized selective scan; returns ``(y, hs)``."""
    if USE_NUMBA:
        return _scan_forward_nb(u, delta, A, Bm, Cm, D)
    return scan_forward_numpy(u, delta, A, Bm, Cm, D)


def scan_backward(dy, u, delta, A, Bm, Cm, D, hs):
    """Reverse-mode pass through the scan; returns ``(du, ddelta, dA, dB, dC, dD)``."""
    if USE_NUMBA:
        return _scan_backward_nb(dy, u, delta, A, Bm, Cm, D, hs)
    return scan_backward_numpy(dy, u, delta, A, Bm, Cm, D, hs)
