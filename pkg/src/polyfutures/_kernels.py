"""Compiled EKF/UKF recursions for linear factor dynamics and polynomial measurements.

The measurement for contract ``i`` is ``H(x) @ Q[:, i]`` where ``H`` is the
monomial basis of degree 1 (``1, chi, xi``) or 2 (``1, chi, xi, chi^2,
chi*xi, xi^2``).  The Schwartz-Smith log-price model is the degree-1 case
with ``Q = [d; F]``.  These loops mirror ``filters.ekf_run`` and
``filters.ukf_run`` step for step; the likelihood optimiser calls them
thousands of times.

The innovation covariance is always ``diag(R) + U U^T`` with ``U`` of
rank 2 (EKF, ``U = J chol(P)``) or at most 5 (UKF, weighted sigma-point
deviations), so it is factored through the small capacitance matrix
``I + U^T R^{-1} U`` (Woodbury); each step costs O(m) instead of O(m^3).

Status codes: 0 ok, 1 innovation covariance not PD, 2 sigma-point
square root failed, 3 non-finite values.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

OK = 0
NON_PD = 1
SQRT_FAIL = 2
NON_FINITE = 3

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, nogil=True, error_model="numpy")
def _basis(x0, x1, degree, H, dH):
    H[0] = 1.0
    H[1] = x0
    H[2] = x1
    dH[:, :] = 0.0
    dH[1, 0] = 1.0
    dH[2, 1] = 1.0
    if degree == 2:
        H[3] = x0 * x0
        H[4] = x0 * x1
        H[5] = x1 * x1
        dH[3, 0] = 2.0 * x0
        dH[4, 0] = x1
        dH[4, 1] = x0
        dH[5, 1] = 2.0 * x1


@njit(cache=True, nogil=True, error_model="numpy")
def _cholesky(A, Lc):
    """In-place lower Cholesky; returns False if A is not PD."""
    m = A.shape[0]
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= Lc[j, k] * Lc[j, k]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        Lc[j, j] = d
        for i in range(j + 1, m):
            s = A[i, j]
            for k in range(j):
                s -= Lc[i, k] * Lc[j, k]
            Lc[i, j] = s / d
        for i in range(j):
            Lc[i, j] = 0.0
    return True


@njit(cache=True, nogil=True, error_model="numpy")
def _sqrt2(P, S):
    """Lower Cholesky of a 2x2 PSD matrix; jitter from ``1e-10 tr/2`` up to ``1e-4 tr``."""
    tr = 0.5 * (P[0, 0] + P[1, 1])
    scale = tr if tr > 1e-300 else 1e-300
    jitter = 0.0
    while True:
        a = P[0, 0] + jitter
        c = P[1, 1] + jitter
        b = P[1, 0]
        if a > 0.0:
            s00 = math.sqrt(a)
            s10 = b / s00
            r = c - s10 * s10
            if r > 0.0:
                S[0, 0] = s00
                S[0, 1] = 0.0
                S[1, 0] = s10
                S[1, 1] = math.sqrt(r)
                return True
        if jitter == 0.0:
            jitter = 1e-10 * scale
        else:
            jitter *= 10.0
        if jitter > 2e-4 * scale * (1.0 + 1e-12):
            return False


@njit(cache=True, nogil=True, error_model="numpy")
def _capacitance(R, U, C, Cc):
    """Cholesky of ``C = I + U^T R^{-1} U`` into ``Cc``; returns log det of the full covariance."""
    m, r = U.shape
    for k in range(m):
        if not R[k] > 0.0:
            return np.nan
    for i in range(r):
        for j in range(i, r):
            s = 1.0 if i == j else 0.0
            for k in range(m):
                s += U[k, i] * U[k, j] / R[k]
            C[i, j] = s
            C[j, i] = s
    if not _cholesky(C, Cc):
        return np.nan
    logdet = 0.0
    for k in range(m):
        logdet += math.log(R[k])
    for i in range(r):
        logdet += 2.0 * math.log(Cc[i, i])
    return logdet


@njit(cache=True, nogil=True, error_model="numpy")
def _woodbury_solve(R, U, Cc, b, x, t):
    """``x = (diag(R) + U U^T)^{-1} b``; ``t`` is scratch of length ``rank``."""
    m, r = U.shape
    for k in range(m):
        x[k] = b[k] / R[k]
    for i in range(r):
        s = 0.0
        for k in range(m):
            s += U[k, i] * x[k]
        t[i] = s
    # t <- C^{-1} t via the capacitance Cholesky
    for i in range(r):
        s = t[i]
        for j in range(i):
            s -= Cc[i, j] * t[j]
        t[i] = s / Cc[i, i]
    for i in range(r - 1, -1, -1):
        s = t[i]
        for j in range(i + 1, r):
            s -= Cc[j, i] * t[j]
        t[i] = s / Cc[i, i]
    for k in range(m):
        s = 0.0
        for i in range(r):
            s += U[k, i] * t[i]
        x[k] -= s / R[k]


@njit(cache=True, nogil=True, error_model="numpy")
def _measure(Q, degree, x0, x1, H, dH, out):
    _basis(x0, x1, degree, H, dH)
    k, m = Q.shape
    for i in range(m):
        s = 0.0
        for r in range(k):
            s += H[r] * Q[r, i]
        out[i] = s


@njit(cache=True, nogil=True, error_model="numpy")
def ekf_poly(c, E, Sw, Q, degree, R, a0, P0, y, record, fit_pred, fit_filt, states):
    n, m = y.shape
    k = Q.shape[0]
    H = np.empty(k)
    dH = np.empty((k, 2))
    J = np.empty((m, 2))
    U = np.empty((m, 2))
    yhat = np.empty(m)
    yfit = np.empty(m)
    e = np.empty(m)
    Cw = np.empty((2, 2))
    Cc = np.empty((2, 2))
    S = np.empty((2, 2))
    a = a0.copy()
    P = P0.copy()
    ap = np.empty(2)
    Pp = np.empty((2, 2))
    PJt = np.empty((2, m))
    K = np.empty((2, m))
    z = np.empty(m)
    tmp = np.empty(2)
    ll = 0.0
    for t in range(n):
        for i in range(2):
            ap[i] = c[i] + E[i, 0] * a[0] + E[i, 1] * a[1]
        for i in range(2):
            for j in range(2):
                s = Sw[i, j]
                for p in range(2):
                    for q in range(2):
                        s += E[i, p] * P[p, q] * E[j, q]
                Pp[i, j] = s
        v = 0.5 * (Pp[0, 1] + Pp[1, 0])
        Pp[0, 1] = v
        Pp[1, 0] = v
        # J P J^T = U U^T needs P PD; an indefinite prediction is a filter breakdown
        if not _cholesky(Pp, S):
            return -np.inf, NON_PD
        _basis(ap[0], ap[1], degree, H, dH)
        for i in range(m):
            s = 0.0
            g0 = 0.0
            g1 = 0.0
            for r in range(k):
                s += H[r] * Q[r, i]
                g0 += dH[r, 0] * Q[r, i]
                g1 += dH[r, 1] * Q[r, i]
            yhat[i] = s
            J[i, 0] = g0
            J[i, 1] = g1
            e[i] = y[t, i] - s
            U[i, 0] = g0 * S[0, 0] + g1 * S[1, 0]
            U[i, 1] = g1 * S[1, 1]
        logdet = _capacitance(R, U, Cw, Cc)
        if not math.isfinite(logdet):
            return -np.inf, NON_PD
        _woodbury_solve(R, U, Cc, e, z, tmp)
        quad = 0.0
        for i in range(m):
            quad += e[i] * z[i]
        ll += -0.5 * (m * LOG_2PI + logdet + quad)
        # K = Pp J^T L^{-1}
        for i in range(2):
            for j in range(m):
                PJt[i, j] = Pp[i, 0] * J[j, 0] + Pp[i, 1] * J[j, 1]
            _woodbury_solve(R, U, Cc, PJt[i], K[i], tmp)
        for i in range(2):
            s = 0.0
            for j in range(m):
                s += PJt[i, j] * z[j]
            a[i] = ap[i] + s
        # P = (I - K J) Pp
        for i in range(2):
            for j in range(2):
                s = Pp[i, j]
                for r in range(m):
                    s -= K[i, r] * PJt[j, r]
                P[i, j] = s
        v = 0.5 * (P[0, 1] + P[1, 0])
        P[0, 1] = v
        P[1, 0] = v
        if not (math.isfinite(a[0]) and math.isfinite(a[1])):
            return -np.inf, NON_FINITE
        if record:
            _measure(Q, degree, a[0], a[1], H, dH, yfit)
            fit_filt[t, :] = yfit
            fit_pred[t, :] = yhat
            states[t, 0] = a[0]
            states[t, 1] = a[1]
    return ll, OK


@njit(cache=True, nogil=True, error_model="numpy")
def _sigma_set(mean, cov, nl, Ps, S, X):
    """Rows ``mean, mean +/- columns of sqrt(nl * cov)``; False if the root fails."""
    for i in range(2):
        for j in range(2):
            Ps[i, j] = nl * cov[i, j]
    if not _sqrt2(Ps, S):
        return False
    for i in range(2):
        X[0, i] = mean[i]
        X[1, i] = mean[i] + S[i, 0]
        X[2, i] = mean[i] + S[i, 1]
        X[3, i] = mean[i] - S[i, 0]
        X[4, i] = mean[i] - S[i, 1]
    return True


@njit(cache=True, nogil=True, error_model="numpy")
def ukf_poly(c, E, Sw, Q, degree, R, a0, P0, y, lam, record, fit_pred, fit_filt, states):
    """UKF kernel; requires ``lam >= 0`` so that all weights are non-negative."""
    n, m = y.shape
    k = Q.shape[0]
    npts = 5
    nl = 2.0 + lam
    w = np.empty(npts)
    w[0] = lam / nl
    for i in range(1, npts):
        w[i] = 1.0 / (2.0 * nl)
    H = np.empty(k)
    dH = np.empty((k, 2))
    S = np.empty((2, 2))
    X = np.empty((npts, 2))
    FX = np.empty((npts, 2))
    Y = np.empty((npts, m))
    U = np.empty((m, npts))
    yhat = np.empty(m)
    yfit = np.empty(m)
    e = np.empty(m)
    Cw = np.empty((npts, npts))
    Cc = np.empty((npts, npts))
    Pxy = np.empty((2, m))
    K = np.empty((2, m))
    z = np.empty(m)
    tmp = np.empty(npts)
    a = a0.copy()
    P = P0.copy()
    ap = np.empty(2)
    Pp = np.empty((2, 2))
    Ps = np.empty((2, 2))
    ll = 0.0
    for t in range(n):
        if not _sigma_set(a, P, nl, Ps, S, X):
            return -np.inf, SQRT_FAIL
        for p in range(npts):
            for i in range(2):
                FX[p, i] = c[i] + E[i, 0] * X[p, 0] + E[i, 1] * X[p, 1]
        for i in range(2):
            s = 0.0
            for p in range(npts):
                s += w[p] * FX[p, i]
            ap[i] = s
        for i in range(2):
            for j in range(2):
                s = Sw[i, j]
                for p in range(npts):
                    s += w[p] * (FX[p, i] - ap[i]) * (FX[p, j] - ap[j])
                Pp[i, j] = s
        v = 0.5 * (Pp[0, 1] + Pp[1, 0])
        Pp[0, 1] = v
        Pp[1, 0] = v
        # fresh sigma set around the prediction for the measurement update
        if not _sigma_set(ap, Pp, nl, Ps, S, X):
            return -np.inf, SQRT_FAIL
        for p in range(npts):
            _measure(Q, degree, X[p, 0], X[p, 1], H, dH, yfit)
            Y[p, :] = yfit
        for i in range(m):
            s = 0.0
            for p in range(npts):
                s += w[p] * Y[p, i]
            yhat[i] = s
            e[i] = y[t, i] - s
        for p in range(npts):
            sw = math.sqrt(w[p])
            for i in range(m):
                U[i, p] = sw * (Y[p, i] - yhat[i])
        for i in range(2):
            for j in range(m):
                s = 0.0
                for p in range(npts):
                    s += w[p] * (X[p, i] - ap[i]) * (Y[p, j] - yhat[j])
                Pxy[i, j] = s
        logdet = _capacitance(R, U, Cw, Cc)
        if not math.isfinite(logdet):
            return -np.inf, NON_PD
        _woodbury_solve(R, U, Cc, e, z, tmp)
        quad = 0.0
        for i in range(m):
            quad += e[i] * z[i]
        ll += -0.5 * (m * LOG_2PI + logdet + quad)
        for i in range(2):
            _woodbury_solve(R, U, Cc, Pxy[i], K[i], tmp)
        for i in range(2):
            s = 0.0
            for j in range(m):
                s += Pxy[i, j] * z[j]
            a[i] = ap[i] + s
        # P = Pp - K L K^T = Pp - K Pxy^T
        for i in range(2):
            for j in range(2):
                s = Pp[i, j]
                for r in range(m):
                    s -= K[i, r] * Pxy[j, r]
                P[i, j] = s
        v = 0.5 * (P[0, 1] + P[1, 0])
        P[0, 1] = v
        P[1, 0] = v
        if not (math.isfinite(a[0]) and math.isfinite(a[1])):
            return -np.inf, NON_FINITE
        if record:
            _measure(Q, degree, a[0], a[1], H, dH, yfit)
            fit_filt[t, :] = yfit
            fit_pred[t, :] = yhat
            states[t, 0] = a[0]
            states[t, 1] = a[1]
    return ll, OK
