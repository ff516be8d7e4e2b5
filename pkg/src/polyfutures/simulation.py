"""Synthetic factor paths and futures panels.

Factor paths use the exact Gaussian transition of the OU pair, so no
discretisation bias enters.  Each panel column is a rolling contract with
a fixed time-to-maturity.

Randomness is drawn from Philox streams keyed by ``(seed, stream)``:
stream 0 drives the factor innovations, stream 1 the measurement noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .models import (
    ModelParams,
    TenorCountMismatch,
    months_to_years,
    pd_basis_eval,
    pd_loadings,
    ss_log_futures,
    ss_transition,
)

__all__ = [
    "Model",
    "Convention",
    "FuturesPanel",
    "SimulationConfig",
    "rng_stream",
    "simulate_states",
    "simulate_panel",
    "write_panel",
    "read_panel",
    "DEFAULT_DT",
]

DEFAULT_DT = 1.0 / 360.0
STATE_STREAM = 0
NOISE_STREAM = 1
HEADER_PREFIX = "tenor_months:"


class Model(str, Enum):
    SS = "SS"
    PD = "PD"


class Convention(str, Enum):
    LOG_PRICE = "log_price"
    RAW_PRICE = "raw_price"


MODEL_CONVENTION = {Model.SS: Convention.LOG_PRICE, Model.PD: Convention.RAW_PRICE}


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one (seed, purpose) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


@dataclass
class FuturesPanel:
    """``n x m`` futures observations on constant tenors (years)."""

    observations: np.ndarray
    tenors: np.ndarray
    dt: float
    convention: Convention
    states: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.tenors = np.atleast_1d(np.asarray(self.tenors, dtype=float))
        self.convention = Convention(self.convention)
        n, m = self.observations.shape
        if n < 1 or m < 1:
            raise ValueError("panel needs at least one row and one column")
        if self.tenors.size != m:
            raise ValueError(f"{self.tenors.size} tenors for {m} columns")
        if np.any(self.tenors <= 0) or np.any(np.diff(self.tenors) <= 0):
            raise ValueError("tenors must be positive and strictly increasing")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(self.observations)):
            raise ValueError("observations must be finite")

    @property
    def n_obs(self) -> int:
        return self.observations.shape[0]

    @property
    def n_contracts(self) -> int:
        return self.observations.shape[1]

    @property
    def tenor_months(self) -> np.ndarray:
        return self.tenors * 12.0


@dataclass
class SimulationConfig:
    n_obs: int
    tenors_months: np.ndarray
    params: ModelParams
    model: Model = Model.PD
    coords: np.ndarray | None = None
    dt: float = DEFAULT_DT
    seed: int = 0

    def __post_init__(self):
        self.model = Model(self.model)
        self.tenors_months = np.atleast_1d(np.asarray(self.tenors_months, dtype=float))
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float)
        if int(self.n_obs) != self.n_obs or self.n_obs < 2:
            raise ValueError(f"n_obs must be an integer >= 2 (got {self.n_obs})")
        self.n_obs = int(self.n_obs)
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0 (got {self.dt})")
        if self.model is Model.PD and (self.coords is None or self.coords.size != 6):
            raise ValueError("PD model needs a 6-element coords vector")
        if self.tenors_months.size != self.params.n_contracts:
            raise TenorCountMismatch(
                f"{self.tenors_months.size} tenors but {self.params.n_contracts} measurement SDs"
            )


def _cov_factor(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_states(params: ModelParams, n_obs: int, dt: float, seed: int) -> np.ndarray:
    """``n_obs x 2`` path of (chi, xi); the first row is ``(chi0, xi0)``."""
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    tr = ss_transition(params, dt)
    rng = rng_stream(seed, STATE_STREAM)
    shocks = rng.standard_normal((n_obs - 1, 2)) @ _cov_factor(tr.Sigma_w).T
    X = np.empty((n_obs, 2))
    X[0] = params.x0
    for j in range(2):
        e = tr.E[j, j]
        # x_t = e * x_{t-1} + (c_j + w_t), started from x_0
        X[1:, j], _ = lfilter([1.0], [1.0, -e], tr.c[j] + shocks[:, j], zi=[e * X[0, j]])
    return X


def _mean_curve(config: SimulationConfig, states: np.ndarray, tenors: np.ndarray) -> np.ndarray:
    if config.model is Model.SS:
        return np.column_stack([ss_log_futures(config.params, states, tau) for tau in tenors])
    Q = pd_loadings(config.params, config.coords, tenors)
    return pd_basis_eval(states) @ Q


def simulate_panel(config: SimulationConfig) -> FuturesPanel:
    tenors = months_to_years(config.tenors_months)
    states = simulate_states(config.params, config.n_obs, config.dt, config.seed)
    mean = _mean_curve(config, states, tenors)
    noise = rng_stream(config.seed, NOISE_STREAM).standard_normal(mean.shape)
    obs = mean + noise * config.params.meas_sd[None, :]
    meta = {
        "model": config.model.value,
        "seed": config.seed,
        "dt": config.dt,
        "n_obs": config.n_obs,
        "tenors_months": [float(v) for v in config.tenors_months],
        "convention": MODEL_CONVENTION[config.model].value,
        "params": config.params.to_dict(),
        "coords": None if config.coords is None else [float(v) for v in config.coords],
    }
    return FuturesPanel(
        observations=obs,
        tenors=tenors,
        dt=config.dt,
        convention=MODEL_CONVENTION[config.model],
        states=states,
        meta=meta,
    )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_rows(path: Path, header: str, rows: np.ndarray):
    lines = [header] + [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_panel(panel: FuturesPanel, path, write_states: bool = True) -> list[Path]:
    """Write ``<path>`` (CSV), ``<stem>.json`` metadata and optionally ``<stem>_states.csv``."""
    path = Path(path)
    header = HEADER_PREFIX + ",".join(_fmt(m) for m in panel.tenor_months)
    _write_rows(path, header, panel.observations)
    meta = dict(panel.meta)
    meta.update(dt=panel.dt, convention=panel.convention.value)
    meta_path = path.with_suffix(".json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written = [path, meta_path]
    if write_states and panel.states is not None:
        states_path = path.with_name(path.stem + "_states.csv")
        _write_rows(states_path, "chi,xi", panel.states)
        written.append(states_path)
    return written


def read_panel(path) -> FuturesPanel:
    """Inverse of :func:`write_panel`; metadata and states are optional."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(HEADER_PREFIX):
        raise ValueError(f"{path}: first line must start with {HEADER_PREFIX!r}")
    months = np.array([float(v) for v in lines[0][len(HEADER_PREFIX):].split(",")])
    obs = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    states_path = path.with_name(path.stem + "_states.csv")
    states = None
    if states_path.exists():
        states = np.loadtxt(states_path, delimiter=",", skiprows=1, ndmin=2)
    return FuturesPanel(
        observations=obs,
        tenors=months_to_years(months),
        dt=float(meta.get("dt", DEFAULT_DT)),
        convention=Convention(meta.get("convention", Convention.RAW_PRICE.value)),
        states=states,
        meta=meta,
    )
