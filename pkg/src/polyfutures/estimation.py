"""Maximum-likelihood estimation of factor models from futures panels.

Two parameter blocks can be estimated: the model block ``theta`` (factor
dynamics, risk premia, initial state and one measurement SD per contract)
and, for the polynomial model, the coordinate vector ``p`` of the spot
price on the monomial basis.  :class:`CaseRegime` selects which blocks are
free.

Free parameters are optimised in an unconstrained space::

    kappa, gamma, sigma_chi, sigma_xi, meas_sd   log
    rho                                          arctanh
    everything else                              as is

The canonical free-vector order is ``kappa, gamma, mu_xi, sigma_chi,
sigma_xi, rho, lambda_chi, lambda_xi, chi0, xi0, meas_sd_1..m`` followed by
``alpha_1..alpha_6`` (the coordinates), restricted to the free blocks.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .filters import FilterRun, StateSpaceSystem, ekf_run, kf_run, ukf_run
from .linalg_expm import ExpmMethod
from .models import (
    InvalidParams,
    ModelParams,
    TenorCountMismatch,
    pd_basis_eval,
    pd_basis_gradient,
    pd_loadings,
    ss_measurement,
    ss_transition,
)
from .simulation import MODEL_CONVENTION, FuturesPanel, Model

logger = logging.getLogger(__name__)

__all__ = [
    "CaseRegime",
    "FilterKind",
    "EstimationConfig",
    "ParameterLayout",
    "StartRecord",
    "EstimationResult",
    "RMSEReport",
    "RecoveryReport",
    "AllStartsFailed",
    "ConventionMismatch",
    "DEFAULT_BOUNDS",
    "state_space",
    "filter_loglik",
    "negative_loglik",
    "neutral_start",
    "fit",
    "rmse_report",
    "recovery_report",
]

N_COORDS = 6
LOG_PARAMS = {"kappa", "gamma", "sigma_chi", "sigma_xi"}
START_STREAM = 2
FLAG_REL_ERR = 0.5

DEFAULT_BOUNDS = {
    "kappa": (1e-4, 50.0),
    "gamma": (1e-4, 50.0),
    "sigma_chi": (1e-4, 20.0),
    "sigma_xi": (1e-4, 20.0),
    "meas_sd": (1e-6, 10.0),
}


class AllStartsFailed(RuntimeError):
    pass


class ConventionMismatch(ValueError):
    pass


class CaseRegime(str, Enum):
    """Which parameter blocks are estimated."""

    CASE1 = "case1"  # everything fixed
    CASE2 = "case2"  # theta fixed, coordinates estimated
    CASE3 = "case3"  # coordinates fixed, theta estimated
    CASE4 = "case4"  # both estimated

    @property
    def estimates_theta(self) -> bool:
        return self in (CaseRegime.CASE3, CaseRegime.CASE4)

    @property
    def estimates_coords(self) -> bool:
        return self in (CaseRegime.CASE2, CaseRegime.CASE4)


class FilterKind(str, Enum):
    KF = "KF"
    EKF = "EKF"
    UKF = "UKF"


@dataclass
class EstimationConfig:
    """Estimation settings.

    ``params`` and ``coords`` hold the values of the blocks that stay
    fixed; free blocks start from :func:`neutral_start` instead.
    ``bounds`` maps parameter names (``meas_sd`` covers every contract) to
    ``(low, high)`` on the natural scale; proposals outside are rejected.
    """

    regime: CaseRegime
    filter: FilterKind
    model: Model
    params: ModelParams
    coords: np.ndarray | None = None
    max_evals: int = 5000
    n_starts: int = 8
    seed: int = 0
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    P0: np.ndarray = field(default_factory=lambda: np.eye(2))
    lambda_scaling: float = 0.0
    expm_method: ExpmMethod = ExpmMethod.EIGEN
    workers: int = 1

    def __post_init__(self):
        self.regime = CaseRegime(self.regime)
        self.filter = FilterKind(self.filter)
        self.model = Model(self.model)
        self.expm_method = ExpmMethod(self.expm_method)
        self.P0 = np.asarray(self.P0, dtype=float)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float)
        if int(self.max_evals) != self.max_evals or self.max_evals < 1:
            raise ValueError(f"max_evals must be an integer >= 1 (got {self.max_evals})")
        if int(self.n_starts) != self.n_starts or self.n_starts < 1:
            raise ValueError(f"n_starts must be an integer >= 1 (got {self.n_starts})")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.model is Model.SS:
            if self.regime.estimates_coords:
                raise ValueError(f"{self.regime.value} estimates coordinates; the SS model has none")
        else:
            if self.filter is FilterKind.KF:
                raise ValueError("KF needs the linear SS model; use EKF or UKF for PD")
            if self.coords is None or self.coords.size != N_COORDS:
                raise ValueError("PD model needs a 6-element coords vector")
        if self.P0.shape != (2, 2):
            raise ValueError("P0 must be 2x2")
        full = dict(DEFAULT_BOUNDS)
        full.update(self.bounds)
        for name, (lo, hi) in full.items():
            if not lo < hi:
                raise ValueError(f"bounds for {name}: low must be < high")
            if (name in LOG_PARAMS or name == "meas_sd") and lo < 0:
                raise ValueError(f"bounds for {name} must be non-negative")
            if name == "rho" and (lo < -1 or hi > 1):
                raise ValueError("rho bounds must lie within [-1, 1]")
        self.bounds = full


# --------------------------------------------------------------------------
# Free-vector layout
# --------------------------------------------------------------------------


class ParameterLayout:
    """Maps between the free vector and ``(ModelParams, coords)``."""

    def __init__(self, config: EstimationConfig, n_contracts: int):
        self.config = config
        self.n_contracts = n_contracts
        names = []
        if config.regime.estimates_theta:
            names += list(ModelParams.STATE_NAMES)
            names += [f"meas_sd_{i + 1}" for i in range(n_contracts)]
        if config.regime.estimates_coords:
            names += [f"alpha_{i + 1}" for i in range(N_COORDS)]
        self.names = names

    @property
    def size(self) -> int:
        return len(self.names)

    @staticmethod
    def _kind(name: str) -> str:
        if name in LOG_PARAMS or name.startswith("meas_sd"):
            return "log"
        if name == "rho":
            return "atanh"
        return "raw"

    def _bound(self, name: str):
        key = "meas_sd" if name.startswith("meas_sd") else name
        return self.config.bounds.get(key, (-math.inf, math.inf))

    def pack(self, params: ModelParams, coords=None) -> np.ndarray:
        values = self._natural(params, coords)
        z = np.empty(self.size)
        for i, (name, v) in enumerate(zip(self.names, values)):
            kind = self._kind(name)
            z[i] = math.log(v) if kind == "log" else math.atanh(v) if kind == "atanh" else v
        return z

    def _natural(self, params, coords):
        out = []
        for name in self.names:
            if name.startswith("meas_sd_"):
                out.append(float(params.meas_sd[int(name[8:]) - 1]))
            elif name.startswith("alpha_"):
                out.append(float(coords[int(name[6:]) - 1]))
            else:
                out.append(getattr(params, name))
        return out

    def unpack(self, z) -> tuple[ModelParams, np.ndarray | None]:
        """Natural-scale parameters; raises ``InvalidParams`` outside the bounds."""
        z = np.asarray(z, dtype=float)
        if z.size != self.size:
            raise ValueError(f"free vector has {z.size} entries, layout expects {self.size}")
        base = self.config.params
        state = {n: getattr(base, n) for n in ModelParams.STATE_NAMES}
        sd = np.array(base.meas_sd, dtype=float)
        coords = None if self.config.coords is None else self.config.coords.copy()
        if self.config.regime.estimates_coords and coords is None:
            coords = np.zeros(N_COORDS)
        for name, v in zip(self.names, z):
            kind = self._kind(name)
            v = math.exp(v) if kind == "log" else math.tanh(v) if kind == "atanh" else float(v)
            lo, hi = self._bound(name)
            if not lo <= v <= hi:
                raise InvalidParams(f"{name}={v} outside bounds [{lo}, {hi}]")
            if name.startswith("meas_sd_"):
                sd[int(name[8:]) - 1] = v
            elif name.startswith("alpha_"):
                coords[int(name[6:]) - 1] = v
            else:
                state[name] = v
        return ModelParams(meas_sd=sd, **state), coords


# --------------------------------------------------------------------------
# Likelihood
# --------------------------------------------------------------------------


def _check_panel(config: EstimationConfig, panel: FuturesPanel):
    if panel.convention is not MODEL_CONVENTION[config.model]:
        raise ConventionMismatch(
            f"{config.model.value} model expects {MODEL_CONVENTION[config.model].value} "
            f"observations, panel holds {panel.convention.value}"
        )
    if panel.n_contracts != config.params.n_contracts:
        raise TenorCountMismatch(
            f"panel has {panel.n_contracts} contracts but params carry "
            f"{config.params.n_contracts} measurement SDs"
        )


def _loadings(model: Model, params: ModelParams, coords, tenors, expm_method):
    """Polynomial degree and ``k x m`` loadings of the measurement map."""
    if model is Model.SS:
        ms = ss_measurement(params, tenors)
        return 1, np.vstack([ms.d, ms.F])
    return 2, pd_loadings(params, coords, tenors, expm_method)


def state_space(
    model: Model, params: ModelParams, coords, tenors, dt: float, P0=None, expm_method=ExpmMethod.EIGEN
) -> StateSpaceSystem:
    """Generic state-space form of either model for the reference filters."""
    model = Model(model)
    tr = ss_transition(params, dt)
    P0 = np.eye(2) if P0 is None else np.asarray(P0, dtype=float)
    if model is Model.SS:
        ms = ss_measurement(params, tenors)
        return StateSpaceSystem.linear(tr.c, tr.E, ms.d, ms.F, tr.Sigma_w, ms.Sigma_v, params.x0, P0)
    Q = pd_loadings(params, coords, tenors, expm_method)
    return StateSpaceSystem(
        f=lambda x: tr.c + tr.E @ x,
        h=lambda x: pd_basis_eval(x) @ Q,
        jac_f=lambda x: tr.E,
        jac_h=lambda x: Q.T @ pd_basis_gradient(x),
        Sigma_w=tr.Sigma_w,
        Sigma_v=np.diag(params.meas_sd**2),
        a0=params.x0,
        P0=P0,
    )


@dataclass
class _KernelOutput:
    loglik: float
    status: int
    fitted: np.ndarray | None = None
    filtered_fit: np.ndarray | None = None
    filtered_mean: np.ndarray | None = None


def filter_loglik(
    kind: FilterKind,
    model: Model,
    params: ModelParams,
    coords,
    panel: FuturesPanel,
    P0=None,
    lambda_scaling: float = 0.0,
    expm_method=ExpmMethod.EIGEN,
    record: bool = False,
) -> _KernelOutput:
    """Compiled filter pass; ``loglik`` is ``-inf`` when the filter breaks down."""
    kind, model = FilterKind(kind), Model(model)
    degree, Q = _loadings(model, params, coords, panel.tenors, expm_method)
    tr = ss_transition(params, panel.dt)
    y = panel.observations
    n, m = y.shape
    shape = (n, m) if record else (0, m)
    fit_pred, fit_filt = np.empty(shape), np.empty(shape)
    states = np.empty((n if record else 0, 2))
    P0 = np.eye(2) if P0 is None else np.asarray(P0, dtype=float)
    args = (tr.c, tr.E, tr.Sigma_w, np.ascontiguousarray(Q), degree, params.meas_sd**2, params.x0, P0, y)
    if kind is FilterKind.UKF:
        ll, status = _kernels.ukf_poly(*args, float(lambda_scaling), record, fit_pred, fit_filt, states)
    else:
        ll, status = _kernels.ekf_poly(*args, record, fit_pred, fit_filt, states)
    if not math.isfinite(ll):
        ll, status = -math.inf, status or _kernels.NON_FINITE
    out = _KernelOutput(loglik=float(ll), status=int(status))
    if record:
        out.fitted, out.filtered_fit, out.filtered_mean = fit_pred, fit_filt, states
    return out


class _Objective:
    """Negative log-likelihood over the free vector, with an evaluation counter."""

    def __init__(self, config: EstimationConfig, panel: FuturesPanel):
        _check_panel(config, panel)
        self.config = config
        self.panel = panel
        self.layout = ParameterLayout(config, panel.n_contracts)
        self.n_evals = 0

    def __call__(self, z) -> float:
        self.n_evals += 1
        try:
            params, coords = self.layout.unpack(z)
            out = filter_loglik(
                self.config.filter,
                self.config.model,
                params,
                coords,
                self.panel,
                self.config.P0,
                self.config.lambda_scaling,
                self.config.expm_method,
            )
        except (InvalidParams, ArithmeticError, ValueError, np.linalg.LinAlgError):
            return math.inf
        return -out.loglik


def negative_loglik(params_free, config: EstimationConfig, panel: FuturesPanel) -> float:
    """``-loglik`` at a free vector laid out per :class:`ParameterLayout`; ``+inf`` on failure."""
    return _Objective(config, panel)(params_free)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


def neutral_start(config: EstimationConfig, panel: FuturesPanel) -> tuple[ModelParams, np.ndarray | None]:
    """Deterministic first starting point for the free blocks."""
    params, coords = config.params, config.coords
    if config.regime.estimates_theta:
        params = ModelParams(
            kappa=1.0,
            gamma=1.0,
            mu_xi=0.0,
            sigma_chi=0.5,
            sigma_xi=0.5,
            rho=0.0,
            lambda_chi=0.0,
            lambda_xi=0.0,
            meas_sd=np.full(panel.n_contracts, 0.5),
            chi0=0.0,
            xi0=0.0,
        )
    if config.regime.estimates_coords:
        coords = np.zeros(N_COORDS)
        coords[0] = float(panel.observations.mean())
    return params, coords


def _start_points(config: EstimationConfig, layout: ParameterLayout, panel) -> list[np.ndarray]:
    params, coords = neutral_start(config, panel)
    z0 = layout.pack(params, coords)
    starts = [z0]
    for k in range(1, config.n_starts):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(START_STREAM, k)))
        )
        starts.append(z0 + rng.uniform(-1.0, 1.0, size=z0.size))
    return starts


def _initial_simplex(z: np.ndarray, step: float = 0.25) -> np.ndarray:
    simplex = np.tile(z, (z.size + 1, 1))
    simplex[1:] += np.diag(step * np.maximum(1.0, np.abs(z)))
    return simplex


@dataclass
class StartRecord:
    index: int
    start_objective: float
    objective: float
    n_evals: int
    restarts: int
    estimate: np.ndarray
    trace: list[float] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.objective)


def _run_start(config, panel, index, z0, max_restarts: int = 20) -> StartRecord:
    obj = _Objective(config, panel)
    f0 = obj(z0)
    best_z, best_f = z0, f0
    trace = [f0]
    restarts = 0
    while obj.n_evals < config.max_evals and restarts <= max_restarts:
        res = minimize(
            obj,
            best_z,
            method="Nelder-Mead",
            options={
                "maxfev": config.max_evals - obj.n_evals,
                "initial_simplex": _initial_simplex(best_z),
                "xatol": 1e-7,
                "fatol": 1e-7,
                "adaptive": best_z.size > 5,
            },
        )
        restarts += 1
        if not res.fun < best_f:
            break
        improved = best_f - res.fun
        best_z, best_f = np.asarray(res.x, dtype=float), float(res.fun)
        trace.append(best_f)
        if improved <= 1e-9 * (1.0 + abs(best_f)):
            break
    return StartRecord(
        index=index,
        start_objective=f0,
        objective=best_f,
        n_evals=obj.n_evals,
        restarts=restarts,
        estimate=best_z,
        trace=trace,
    )


@dataclass
class RMSEReport:
    per_contract: np.ndarray
    mean: float
    tenor_months: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["contract", "tenor_months", "rmse"])
        for i, (t, r) in enumerate(zip(self.tenor_months, self.per_contract)):
            w.writerow([i + 1, _fmt(t), _fmt(r)])
        w.writerow(["mean", "", _fmt(self.mean)])
        return buf.getvalue()


@dataclass
class EstimationResult:
    """Best multistart estimate with diagnostics.

    ``loglik`` is the log-likelihood of the compiled filter at the
    estimate; ``run`` is a full reference-filter pass at the same point.
    """

    config: EstimationConfig
    params: ModelParams
    coords: np.ndarray | None
    free_names: list[str]
    free_estimate: np.ndarray
    loglik: float
    rmse: RMSEReport
    run: FilterRun
    starts: list[StartRecord]
    best_start: int

    @property
    def n_evals(self) -> int:
        return sum(s.n_evals for s in self.starts)

    @property
    def filtered_states(self) -> np.ndarray:
        return self.run.filtered_mean

    def estimates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "value", "estimated"])
        free = set(self.free_names)
        for name, value in _named_values(self.params, self.coords):
            w.writerow([name, _fmt(value), int(name in free)])
        return buf.getvalue()


def _reference_run(config: EstimationConfig, params, coords, panel) -> FilterRun:
    system = state_space(config.model, params, coords, panel.tenors, panel.dt, config.P0, config.expm_method)
    if config.filter is FilterKind.KF:
        return kf_run(system, panel)
    if config.filter is FilterKind.EKF:
        return ekf_run(system, panel)
    return ukf_run(system, panel, config.lambda_scaling)


def fit(config: EstimationConfig, panel: FuturesPanel) -> EstimationResult:
    """Multistart Nelder-Mead maximum likelihood over the free blocks.

    Each start restarts the simplex from its own optimum until it stops
    improving or the per-start evaluation budget is spent.  The best start
    wins; ties go to the lowest start index.
    """
    _check_panel(config, panel)
    layout = ParameterLayout(config, panel.n_contracts)
    if layout.size == 0:
        obj = _Objective(config, panel)
        z = np.empty(0)
        f = obj(z)
        records = [StartRecord(0, f, f, obj.n_evals, 0, z, [f])]
    else:
        starts = _start_points(config, layout, panel)
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                records = list(
                    pool.map(lambda a: _run_start(config, panel, *a), enumerate(starts))
                )
        else:
            records = [_run_start(config, panel, k, z0) for k, z0 in enumerate(starts)]
    for r in records:
        logger.info(
            "start %d: %.6g -> %.6g (%d evals, %d restarts)",
            r.index, r.start_objective, r.objective, r.n_evals, r.restarts,
        )
    ok = [r for r in records if not r.failed]
    if not ok:
        raise AllStartsFailed(f"all {len(records)} starts returned +inf")
    best = min(ok, key=lambda r: (r.objective, r.index))
    params, coords = layout.unpack(best.estimate)
    run = _reference_run(config, params, coords, panel)
    return EstimationResult(
        config=config,
        params=params,
        coords=coords,
        free_names=list(layout.names),
        free_estimate=best.estimate,
        loglik=-best.objective,
        rmse=rmse_report(panel, run),
        run=run,
        starts=records,
        best_start=best.index,
    )


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def rmse_report(panel: FuturesPanel, run: FilterRun, fitted: str = "updated") -> RMSEReport:
    """Per-contract root mean square error of the filter fit.

    ``fitted="updated"`` compares observations with the measurement map at
    the filtered state, ``h(a_t)``; ``"predicted"`` uses the one-step-ahead
    forecasts ``y_{t|t-1}``.
    """
    if fitted == "updated":
        yhat = run.filtered_fit
    elif fitted == "predicted":
        yhat = run.fitted
    else:
        raise ValueError(f"fitted must be 'updated' or 'predicted' (got {fitted!r})")
    resid = panel.observations - yhat
    per = np.sqrt(np.mean(resid**2, axis=0))
    return RMSEReport(per_contract=per, mean=float(per.mean()), tenor_months=panel.tenor_months)


def _named_values(params: ModelParams, coords):
    for name in ModelParams.STATE_NAMES:
        yield name, getattr(params, name)
    for i, v in enumerate(params.meas_sd):
        yield f"meas_sd_{i + 1}", v
    if coords is not None:
        for i, v in enumerate(coords):
            yield f"alpha_{i + 1}", v


@dataclass
class RecoveryReport:
    """True versus estimated values; rows with ``|rel_err| > 0.5`` are flagged."""

    names: list[str]
    truth: np.ndarray
    estimate: np.ndarray
    estimated: np.ndarray

    @property
    def abs_err(self) -> np.ndarray:
        return self.estimate - self.truth

    @property
    def rel_err(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.truth != 0, self.abs_err / np.abs(self.truth), np.nan)

    @property
    def flagged(self) -> np.ndarray:
        return np.abs(np.nan_to_num(self.rel_err, nan=0.0)) > FLAG_REL_ERR

    def max_rel_error(self, names=None) -> float:
        sel = [i for i, n in enumerate(self.names) if names is None or n in names]
        rel = np.abs(self.rel_err[sel])
        rel = rel[np.isfinite(rel)]
        return float(rel.max()) if rel.size else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "true", "estimate", "abs_err", "rel_err", "estimated", "flag"])
        rel = self.rel_err
        for i, name in enumerate(self.names):
            w.writerow(
                [
                    name,
                    _fmt(self.truth[i]),
                    _fmt(self.estimate[i]),
                    _fmt(self.abs_err[i]),
                    _fmt(rel[i]),
                    int(self.estimated[i]),
                    int(self.flagged[i]),
                ]
            )
        return buf.getvalue()


def recovery_report(result: EstimationResult, truth: ModelParams, truth_coords=None) -> RecoveryReport:
    est = dict(_named_values(result.params, result.coords))
    true = dict(_named_values(truth, truth_coords))
    names = [n for n in est if n in true]
    free = set(result.free_names)
    return RecoveryReport(
        names=names,
        truth=np.array([true[n] for n in names], dtype=float),
        estimate=np.array([est[n] for n in names], dtype=float),
        estimated=np.array([n in free for n in names]),
    )
