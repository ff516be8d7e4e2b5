"""Two-factor commodity models: Schwartz-Smith (log-linear) and polynomial diffusion.

Both models share the latent state ``x = (chi, xi)``: a short-term factor
``chi`` mean-reverting to zero and a long-term factor ``xi``, each an
Ornstein-Uhlenbeck process.  Under the pricing measure constant risk
premia shift the drifts to ``-kappa*chi - lambda_chi`` and
``mu_xi - gamma*xi - lambda_xi``.

In the Schwartz-Smith model the log spot price is ``chi + xi``.  In the
polynomial diffusion (PD) model the spot price is a polynomial in the
factors, ``S = H(x) @ p`` on the monomial basis ``H``; futures prices are
then ``H(x) @ expm(tau * G) @ p`` with ``G`` the matrix of the generator
restricted to polynomials of bounded degree.

All times are in years.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from itertools import product

import numpy as np

from .linalg_expm import EigenHint, ExpmMethod, IllConditioned, expm

logger = logging.getLogger(__name__)

__all__ = [
    "ModelParams",
    "InvalidParams",
    "TenorCountMismatch",
    "TransitionSpec",
    "SSMeasurementSpec",
    "GeneratorMatrix",
    "months_to_years",
    "reference_params",
    "REFERENCE_COORDS",
    "ss_transition",
    "ss_A",
    "ss_measurement",
    "ss_log_futures",
    "rn_state_moments",
    "monomial_basis",
    "apply_generator",
    "generator_matrix",
    "pd_basis_eval",
    "pd_basis_gradient",
    "pd_spot",
    "pd_generator_matrix",
    "pd_loadings",
    "pd_futures_price",
    "pd_measurement_row_jacobian",
]

# Eigenvector condition above which the PD pricer leaves the eigen route.
EIGEN_FALLBACK_COND = 1e8


class InvalidParams(ValueError):
    pass


class TenorCountMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """State, risk-premium and measurement-noise parameters.

    ``meas_sd`` holds one measurement noise standard deviation per futures
    contract; ``chi0``/``xi0`` is the initial state used to start both
    simulation and filtering.
    """

    kappa: float
    gamma: float
    mu_xi: float
    sigma_chi: float
    sigma_xi: float
    rho: float
    lambda_chi: float
    lambda_xi: float
    meas_sd: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chi0: float = 0.0
    xi0: float = 0.0

    STATE_NAMES = (
        "kappa",
        "gamma",
        "mu_xi",
        "sigma_chi",
        "sigma_xi",
        "rho",
        "lambda_chi",
        "lambda_xi",
        "chi0",
        "xi0",
    )

    def __post_init__(self):
        sd = np.atleast_1d(np.asarray(self.meas_sd, dtype=float)).copy()
        sd.setflags(write=False)
        object.__setattr__(self, "meas_sd", sd)
        for name in self.STATE_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
        problems = []
        for name in ("kappa", "gamma", "sigma_chi", "sigma_xi"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if not -1 < self.rho < 1:
            problems.append(f"rho must lie in (-1, 1) (got {self.rho})")
        if np.any(~(sd > 0)):
            problems.append("all meas_sd must be > 0")
        values = [getattr(self, n) for n in self.STATE_NAMES]
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(sd)):
            problems.append("parameters must be finite")
        if problems:
            raise InvalidParams("; ".join(problems))

    @property
    def x0(self) -> np.ndarray:
        return np.array([self.chi0, self.xi0])

    @property
    def n_contracts(self) -> int:
        return self.meas_sd.size

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["meas_sd"] = [float(v) for v in self.meas_sd]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidParams(f"unknown parameter field(s): {sorted(unknown)}")
        return cls(**d)


def months_to_years(months) -> np.ndarray:
    return np.asarray(months, dtype=float) / 12.0


REFERENCE_COORDS = np.array([5.0, 2.0, 2.0, 2.0, 3.0, 1.0])


def reference_params(n_contracts: int = 13) -> ModelParams:
    """Parameter set of the simulation study.

    Measurement noise decreases linearly with tenor, from ``n/100`` for
    the nearest contract to 0.01 for the furthest.
    """
    sd = np.arange(n_contracts, 0, -1) / 100.0
    return ModelParams(
        kappa=0.5,
        gamma=0.3,
        mu_xi=1.0,
        sigma_chi=1.5,
        sigma_xi=1.3,
        rho=-0.3,
        lambda_chi=0.5,
        lambda_xi=0.3,
        meas_sd=sd,
        chi0=0.0,
        xi0=3.33,
    )


# --------------------------------------------------------------------------
# Schwartz-Smith model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionSpec:
    """Exact one-step transition ``x_t = c + E x_{t-1} + w_t``, ``w_t ~ N(0, Sigma_w)``."""

    c: np.ndarray
    E: np.ndarray
    Sigma_w: np.ndarray


@dataclass(frozen=True)
class SSMeasurementSpec:
    """Log-futures measurement ``y_t = d + F.T @ x_t + v_t``."""

    d: np.ndarray
    F: np.ndarray
    Sigma_v: np.ndarray


def _one_minus_exp(rate, t):
    # (1 - e^{-rate*t}) without cancellation for small rate*t
    return -np.expm1(-rate * np.asarray(t, dtype=float))


def _ou_covariance(params: ModelParams, t) -> np.ndarray:
    k, g = params.kappa, params.gamma
    sc, sx, rho = params.sigma_chi, params.sigma_xi, params.rho
    v11 = _one_minus_exp(2 * k, t) / (2 * k) * sc**2
    v22 = _one_minus_exp(2 * g, t) / (2 * g) * sx**2
    v12 = _one_minus_exp(k + g, t) / (k + g) * sc * sx * rho
    return np.array([[v11, v12], [v12, v22]])


def ss_transition(params: ModelParams, dt: float) -> TransitionSpec:
    """Exact discretisation of the real-world factor dynamics over ``dt``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    c = np.array([0.0, params.mu_xi / params.gamma * _one_minus_exp(params.gamma, dt)])
    E = np.diag([np.exp(-params.kappa * dt), np.exp(-params.gamma * dt)])
    return TransitionSpec(c=c, E=E, Sigma_w=_ou_covariance(params, dt))


def ss_A(params: ModelParams, tau):
    """Deterministic part of the log futures price at time-to-maturity ``tau``.

    Drift terms under the pricing measure plus half the variance of
    ``chi_T + xi_T``, correlation included.  Vectorised over ``tau``.
    """
    k, g = params.kappa, params.gamma
    sc, sx, rho = params.sigma_chi, params.sigma_xi, params.rho
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    drift = -params.lambda_chi / k * _one_minus_exp(k, tau) + (
        params.mu_xi - params.lambda_xi
    ) / g * _one_minus_exp(g, tau)
    var = (
        _one_minus_exp(2 * k, tau) / (2 * k) * sc**2
        + _one_minus_exp(2 * g, tau) / (2 * g) * sx**2
        + 2 * _one_minus_exp(k + g, tau) / (k + g) * sc * sx * rho
    )
    out = drift + 0.5 * var
    return float(out) if out.ndim == 0 else out


def _check_tenors(tenors) -> np.ndarray:
    tenors = np.atleast_1d(np.asarray(tenors, dtype=float))
    if np.any(tenors < 0):
        raise ValueError("tenors must be non-negative")
    if np.any(np.diff(tenors) <= 0):
        raise ValueError("tenors must be strictly increasing")
    return tenors


def ss_measurement(params: ModelParams, tenors) -> SSMeasurementSpec:
    tenors = _check_tenors(tenors)
    if tenors.size != params.n_contracts:
        raise TenorCountMismatch(
            f"{tenors.size} tenors but {params.n_contracts} measurement SDs"
        )
    d = np.atleast_1d(ss_A(params, tenors))
    F = np.vstack([np.exp(-params.kappa * tenors), np.exp(-params.gamma * tenors)])
    return SSMeasurementSpec(d=d, F=F, Sigma_v=np.diag(params.meas_sd**2))


def ss_log_futures(params: ModelParams, x, tau):
    """Log futures price ``e^{-kappa tau} chi + e^{-gamma tau} xi + A(tau)``."""
    x = np.asarray(x, dtype=float)
    return (
        np.exp(-params.kappa * np.asarray(tau)) * x[..., 0]
        + np.exp(-params.gamma * np.asarray(tau)) * x[..., 1]
        + ss_A(params, tau)
    )


def rn_state_moments(params: ModelParams, x0, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``x_{t+tau}`` given ``x_t = x0`` under the pricing measure."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    k, g = params.kappa, params.gamma
    mean = np.array(
        [
            np.exp(-k * tau) * x0[0] - params.lambda_chi / k * _one_minus_exp(k, tau),
            np.exp(-g * tau) * x0[1]
            + (params.mu_xi - params.lambda_xi) / g * _one_minus_exp(g, tau),
        ]
    )
    return mean, _ou_covariance(params, tau)


# --------------------------------------------------------------------------
# Polynomial diffusion model
# --------------------------------------------------------------------------


def monomial_basis(degree: int, dim: int = 2) -> list[tuple[int, ...]]:
    """Exponent tuples of all monomials of total degree <= ``degree``.

    Graded order; within one degree, higher powers of earlier variables
    come first.  For ``degree=2, dim=2`` this is
    ``1, chi, xi, chi^2, chi*xi, xi^2``.
    """
    basis = []
    for total in range(degree + 1):
        block = [e for e in product(range(total + 1), repeat=dim) if sum(e) == total]
        basis.extend(sorted(block, reverse=True))
    return basis


def apply_generator(exponent, drift_const, drift_lin, diffusion) -> dict[tuple[int, ...], float]:
    """Apply the generator of an affine-drift, constant-diffusion SDE to one monomial.

    The drift is ``b(x) = drift_const + drift_lin @ x`` and the diffusion
    matrix ``a = diffusion`` is constant, so the result is again a
    polynomial of no higher degree.  Returns ``{exponent: coefficient}``.
    """
    e = tuple(int(v) for v in exponent)
    d = len(e)
    out: dict[tuple[int, ...], float] = {}

    def add(exp, coef):
        if coef != 0:
            out[exp] = out.get(exp, 0.0) + coef

    for i in range(d):
        if e[i] == 0:
            continue
        lower = list(e)
        lower[i] -= 1
        # b_i(x) * d/dx_i: constant part lowers the degree, linear part keeps it
        add(tuple(lower), drift_const[i] * e[i])
        for j in range(d):
            raised = list(lower)
            raised[j] += 1
            add(tuple(raised), drift_lin[i][j] * e[i])
    for i in range(d):
        for j in range(d):
            a = diffusion[i][j]
            if a == 0:
                continue
            lower = list(e)
            if i == j:
                if e[i] < 2:
                    continue
                coef = e[i] * (e[i] - 1)
                lower[i] -= 2
            else:
                if e[i] == 0 or e[j] == 0:
                    continue
                coef = e[i] * e[j]
                lower[i] -= 1
                lower[j] -= 1
            add(tuple(lower), 0.5 * a * coef)
    return out


def generator_matrix(basis, drift_const, drift_lin, diffusion) -> np.ndarray:
    """Matrix ``G`` with column ``j`` the coordinates of the generator applied to ``basis[j]``."""
    index = {e: k for k, e in enumerate(basis)}
    G = np.zeros((len(basis), len(basis)))
    for col, e in enumerate(basis):
        for exp, coef in apply_generator(e, drift_const, drift_lin, diffusion).items():
            if exp not in index:
                raise ValueError(f"generator leaves the basis at monomial {exp}")
            G[index[exp], col] += coef
    return G


PD_BASIS = monomial_basis(2)


@dataclass(frozen=True)
class GeneratorMatrix:
    G: np.ndarray
    degree: int


def pd_generator_matrix(params: ModelParams, correlated: bool = False) -> GeneratorMatrix:
    """Generator matrix of the risk-neutral factor dynamics on ``1, chi, xi, chi^2, chi*xi, xi^2``.

    By default the diffusion matrix is ``diag(sigma_chi^2, sigma_xi^2)``.
    ``correlated=True`` adds the ``rho*sigma_chi*sigma_xi`` off-diagonal,
    which only changes the (constant, chi*xi) entry.
    """
    sc, sx = params.sigma_chi, params.sigma_xi
    cross = params.rho * sc * sx if correlated else 0.0
    G = generator_matrix(
        PD_BASIS,
        drift_const=[-params.lambda_chi, params.mu_xi - params.lambda_xi],
        drift_lin=[[-params.kappa, 0.0], [0.0, -params.gamma]],
        diffusion=[[sc**2, cross], [cross, sx**2]],
    )
    return GeneratorMatrix(G=G, degree=2)


def pd_basis_eval(x) -> np.ndarray:
    """``(1, chi, xi, chi^2, chi*xi, xi^2)``; vectorised over leading axes of ``x``."""
    x = np.asarray(x, dtype=float)
    chi, xi = x[..., 0], x[..., 1]
    return np.stack([np.ones_like(chi), chi, xi, chi * chi, chi * xi, xi * xi], axis=-1)


def pd_basis_gradient(x) -> np.ndarray:
    """6x2 matrix of basis derivatives with respect to (chi, xi)."""
    chi, xi = float(x[0]), float(x[1])
    return np.array(
        [
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [2 * chi, 0.0],
            [xi, chi],
            [0.0, 2 * xi],
        ]
    )


def pd_spot(x, p) -> np.ndarray | float:
    out = pd_basis_eval(x) @ np.asarray(p, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def _propagators(G: np.ndarray, taus: np.ndarray, method: ExpmMethod):
    """Yield ``expm(tau * G)`` for each tau, sharing one eigen-decomposition."""
    method = ExpmMethod(method)
    if method is ExpmMethod.EIGEN:
        lam, V = np.linalg.eig(G)
        if np.all(lam.imag == 0):
            lam, V = lam.real, V.real
        if np.linalg.cond(V) <= EIGEN_FALLBACK_COND:
            for tau in taus:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", IllConditioned)
                    yield expm(method, tau * G, EigenHint(tau * lam, V))
            return
        logger.debug("generator eigenvectors ill-conditioned; using scaling and squaring")
        method = ExpmMethod.SCALING_SQUARING
    for tau in taus:
        yield expm(method, tau * G)


def pd_loadings(
    params: ModelParams,
    p,
    tenors,
    expm_method: ExpmMethod | str = ExpmMethod.EIGEN,
    correlated: bool = False,
) -> np.ndarray:
    """6 x m matrix whose column ``i`` is ``expm(tau_i G) @ p``.

    Futures prices for all tenors at state ``x`` are then
    ``pd_basis_eval(x) @ Q``.
    """
    taus = np.atleast_1d(np.asarray(tenors, dtype=float))
    if np.any(taus < 0):
        raise ValueError("tau must be non-negative")
    G = pd_generator_matrix(params, correlated).G
    p = np.asarray(p, dtype=float)
    if ExpmMethod(expm_method) is ExpmMethod.EIGEN:
        lam, V = np.linalg.eig(G)
        if np.all(lam.imag == 0) and np.linalg.cond(V) <= EIGEN_FALLBACK_COND:
            # expm(tau G) p = V diag(e^{tau lam}) V^{-1} p for all tenors at once
            lam, V = lam.real, V.real
            return V @ (np.exp(np.outer(lam, taus)) * np.linalg.solve(V, p)[:, None])
    return np.column_stack([M @ p for M in _propagators(G, taus, expm_method)])


def pd_futures_price(
    x,
    params: ModelParams,
    p,
    tau: float,
    expm_method: ExpmMethod | str = ExpmMethod.EIGEN,
    correlated: bool = False,
) -> float:
    """Futures price ``H(x) @ expm(tau G) @ p`` for one time-to-maturity."""
    q = pd_loadings(params, p, [tau], expm_method, correlated)[:, 0]
    return float(pd_basis_eval(x) @ q)


def pd_measurement_row_jacobian(
    x,
    params: ModelParams,
    p,
    tau: float,
    expm_method: ExpmMethod | str = ExpmMethod.EIGEN,
) -> np.ndarray:
    """Gradient of :func:`pd_futures_price` with respect to ``(chi, xi)``."""
    q = pd_loadings(params, p, [tau], expm_method)[:, 0]
    return q @ pd_basis_gradient(x)
