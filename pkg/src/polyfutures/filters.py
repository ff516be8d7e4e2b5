"""Kalman, extended Kalman and unscented Kalman filters with prediction-error likelihood.

The filters share one additive-noise state-space contract::

    x_t = f(x_{t-1}) + w_t,   w_t ~ N(0, Sigma_w)
    y_t = h(x_t) + v_t,       v_t ~ N(0, Sigma_v)

and return a :class:`FilterRun` holding the one-step predictions,
innovations, updated moments, the measurement map at the updated state
and the Gaussian log-likelihood of the innovations.  These implementations favour clarity; the estimation code
uses the compiled kernels in :mod:`polyfutures._kernels`, which are checked
against these.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "FilterError",
    "NonPDInnovation",
    "JacobianFailure",
    "SqrtFailure",
    "StateSpaceSystem",
    "FilterRun",
    "SigmaPointSet",
    "sigma_points",
    "kf_run",
    "ekf_run",
    "ukf_run",
    "loglik_from_innovations",
    "numerical_jacobian",
]

LOG_2PI = np.log(2.0 * np.pi)
FD_STEP = 1e-6


class FilterError(ArithmeticError):
    pass


class NonPDInnovation(FilterError):
    pass


class JacobianFailure(FilterError):
    pass


class SqrtFailure(FilterError):
    pass


@dataclass
class StateSpaceSystem:
    """Additive-noise state-space model.

    For a linear-Gaussian system build it with :meth:`linear`; the linear
    parts are then kept in ``c``, ``E``, ``d`` and ``F`` (measurement
    ``y = d + F.T @ x``), which :func:`kf_run` requires.
    """

    f: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    Sigma_w: np.ndarray
    Sigma_v: np.ndarray
    a0: np.ndarray
    P0: np.ndarray
    jac_f: Callable[[np.ndarray], np.ndarray] | None = None
    jac_h: Callable[[np.ndarray], np.ndarray] | None = None
    c: np.ndarray | None = None
    E: np.ndarray | None = None
    d: np.ndarray | None = None
    F: np.ndarray | None = None

    @classmethod
    def linear(cls, c, E, d, F, Sigma_w, Sigma_v, a0, P0) -> "StateSpaceSystem":
        c, E, d, F = (np.asarray(v, dtype=float) for v in (c, E, d, F))
        return cls(
            f=lambda x: c + E @ x,
            h=lambda x: d + F.T @ x,
            jac_f=lambda x: E,
            jac_h=lambda x: F.T,
            Sigma_w=np.asarray(Sigma_w, dtype=float),
            Sigma_v=np.asarray(Sigma_v, dtype=float),
            a0=np.asarray(a0, dtype=float),
            P0=np.asarray(P0, dtype=float),
            c=c,
            E=E,
            d=d,
            F=F,
        )

    @property
    def is_linear(self) -> bool:
        return all(v is not None for v in (self.c, self.E, self.d, self.F))

    @property
    def n_state(self) -> int:
        return np.atleast_1d(self.a0).size


@dataclass
class FilterRun:
    """Per-step filter output; arrays are indexed by time along axis 0."""

    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    fitted: np.ndarray
    filtered_fit: np.ndarray
    loglik: float

    @property
    def n_steps(self) -> int:
        return self.innovations.shape[0]


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray  # (2n+1, n)
    mean_weights: np.ndarray
    cov_weights: np.ndarray


def _observations(panel) -> np.ndarray:
    y = getattr(panel, "observations", panel)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    return y


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def numerical_jacobian(fun, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference Jacobian, step scaled by ``max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        hstep = step * max(1.0, abs(x[i]))
        dx = np.zeros_like(x)
        dx[i] = hstep
        cols.append((np.asarray(fun(x + dx)) - np.asarray(fun(x - dx))) / (2 * hstep))
    J = np.column_stack(cols)
    if not np.all(np.isfinite(J)):
        raise JacobianFailure("finite-difference Jacobian has non-finite entries")
    return J


class _Recorder:
    def __init__(self, n, nx, m):
        self.a_pred = np.empty((n, nx))
        self.P_pred = np.empty((n, nx, nx))
        self.e = np.empty((n, m))
        self.L = np.empty((n, m, m))
        self.a = np.empty((n, nx))
        self.P = np.empty((n, nx, nx))
        self.yhat = np.empty((n, m))
        self.yfit = np.empty((n, m))
        self.loglik = 0.0

    def step(self, t, a_pred, P_pred, yhat, e, L, a, P, yfit):
        chol = _innovation_chol(L, t)
        z = np.linalg.solve(chol, e)
        self.loglik -= 0.5 * (e.size * LOG_2PI + 2.0 * np.log(np.diag(chol)).sum() + z @ z)
        self.a_pred[t], self.P_pred[t] = a_pred, P_pred
        self.e[t], self.L[t], self.yhat[t] = e, L, yhat
        self.a[t], self.P[t] = a, P
        self.yfit[t] = yfit

    def result(self) -> FilterRun:
        return FilterRun(
            predicted_mean=self.a_pred,
            predicted_cov=self.P_pred,
            innovations=self.e,
            innovation_cov=self.L,
            filtered_mean=self.a,
            filtered_cov=self.P,
            fitted=self.yhat,
            filtered_fit=self.yfit,
            loglik=float(self.loglik),
        )


def _innovation_chol(L: np.ndarray, t: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(L)
    except np.linalg.LinAlgError:
        raise NonPDInnovation(f"innovation covariance not positive definite at step {t}") from None


def kf_run(system: StateSpaceSystem, panel) -> FilterRun:
    """Kalman filter for a linear-Gaussian :class:`StateSpaceSystem`."""
    if not system.is_linear:
        raise TypeError("kf_run needs a linear system; see StateSpaceSystem.linear")
    y = _observations(panel)
    n, m = y.shape
    c, E, d, Z = system.c, system.E, system.d, system.F.T
    rec = _Recorder(n, system.n_state, m)
    a, P = np.asarray(system.a0, float), np.asarray(system.P0, float)
    eye = np.eye(a.size)
    for t in range(n):
        a_pred = c + E @ a
        P_pred = _sym(E @ P @ E.T + system.Sigma_w)
        yhat = d + Z @ a_pred
        e = y[t] - yhat
        L = _sym(Z @ P_pred @ Z.T + system.Sigma_v)
        K = np.linalg.solve(L, Z @ P_pred).T
        a = a_pred + K @ e
        P = _sym((eye - K @ Z) @ P_pred)
        rec.step(t, a_pred, P_pred, yhat, e, L, a, P, d + Z @ a)
    return rec.result()


def ekf_run(system: StateSpaceSystem, panel) -> FilterRun:
    """Extended Kalman filter: first-order linearisation of ``f`` and ``h``.

    Missing Jacobians are replaced by central finite differences.
    """
    y = _observations(panel)
    n, m = y.shape
    jac_f = system.jac_f or (lambda x: numerical_jacobian(system.f, x))
    jac_h = system.jac_h or (lambda x: numerical_jacobian(system.h, x))
    rec = _Recorder(n, system.n_state, m)
    a, P = np.asarray(system.a0, float), np.asarray(system.P0, float)
    eye = np.eye(a.size)
    for t in range(n):
        Jf = np.atleast_2d(jac_f(a))
        a_pred = np.asarray(system.f(a), dtype=float)
        P_pred = _sym(Jf @ P @ Jf.T + system.Sigma_w)
        Jh = np.atleast_2d(jac_h(a_pred))
        yhat = np.atleast_1d(system.h(a_pred))
        e = y[t] - yhat
        L = _sym(Jh @ P_pred @ Jh.T + system.Sigma_v)
        K = np.linalg.solve(L, Jh @ P_pred).T
        a = a_pred + K @ e
        P = _sym((eye - K @ Jh) @ P_pred)
        rec.step(t, a_pred, P_pred, yhat, e, L, a, P, np.atleast_1d(system.h(a)))
    return rec.result()


def _sqrt_psd(P: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; on failure add ``1e-10 tr(P)/n`` jitter, growing x10 up to ``1e-4 tr(P)``."""
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    n = P.shape[0]
    scale = max(np.trace(P) / n, np.finfo(float).tiny)
    jitter = 1e-10 * scale
    while jitter <= 1e-4 * n * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(P + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise SqrtFailure("covariance square root failed after jitter escalation")


def sigma_points(mean, cov, lambda_scaling: float = 0.0) -> SigmaPointSet:
    """Symmetric ``2n+1`` sigma points ``mean, mean +/- columns of sqrt((n+lambda) cov)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    n = mean.size
    if n + lambda_scaling <= 0:
        raise ValueError("n + lambda must be positive")
    S = _sqrt_psd((n + lambda_scaling) * np.atleast_2d(cov))
    points = np.vstack([mean, mean + S.T, mean - S.T])
    w = np.full(2 * n + 1, 1.0 / (2 * (n + lambda_scaling)))
    w[0] = lambda_scaling / (n + lambda_scaling)
    return SigmaPointSet(points=points, mean_weights=w, cov_weights=w.copy())


def _unscented(fun, sp: SigmaPointSet):
    Y = np.array([np.atleast_1d(fun(x)) for x in sp.points])
    mean = sp.mean_weights @ Y
    dev = Y - mean
    return Y, mean, (sp.cov_weights[:, None] * dev).T @ dev


def ukf_run(system: StateSpaceSystem, panel, lambda_scaling: float = 0.0) -> FilterRun:
    """Unscented Kalman filter, additive-noise form.

    Sigma points of the previous posterior are pushed through ``f``; a
    fresh sigma set drawn from the predicted moments is pushed through
    ``h``, so that process noise reaches the measurement covariance.
    """
    y = _observations(panel)
    n, m = y.shape
    rec = _Recorder(n, system.n_state, m)
    a, P = np.asarray(system.a0, float), np.asarray(system.P0, float)
    for t in range(n):
        _, a_pred, P_pred = _unscented(system.f, sigma_points(a, P, lambda_scaling))
        P_pred = _sym(P_pred + system.Sigma_w)
        sp = sigma_points(a_pred, P_pred, lambda_scaling)
        Y, yhat, Pyy = _unscented(system.h, sp)
        L = _sym(Pyy + system.Sigma_v)
        Pxy = ((sp.cov_weights[:, None] * (sp.points - a_pred)).T) @ (Y - yhat)
        e = y[t] - yhat
        K = np.linalg.solve(L, Pxy.T).T
        a = a_pred + K @ e
        P = _sym(P_pred - K @ L @ K.T)
        rec.step(t, a_pred, P_pred, yhat, e, L, a, P, np.atleast_1d(system.h(a)))
    return rec.result()


def loglik_from_innovations(run: FilterRun) -> float:
    """Gaussian prediction-error log-likelihood from stored innovations."""
    n, m = run.innovations.shape
    total = -0.5 * n * m * LOG_2PI
    for e, L in zip(run.innovations, run.innovation_cov):
        chol = _innovation_chol(L, 0)
        z = np.linalg.solve(chol, e)
        total -= np.log(np.diag(chol)).sum() + 0.5 * z @ z
    return float(total)
