"""Command-line interface: ``polyfutures {simulate,fit,expm-bench,price}``.

Every command reads an optional JSON config, applies flag overrides, writes
the fully resolved config to ``<out>/config.json`` and its results next to
it.  Re-running with ``--config <out>/config.json`` reproduces the outputs
byte for byte.

Exit codes: 0 success, 2 invalid configuration, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .estimation import AllStartsFailed, EstimationConfig, fit, recovery_report
from .linalg_expm import ExpmMethod, run_expm_benchmark
from .models import (
    REFERENCE_COORDS,
    ModelParams,
    pd_loadings,
    pd_basis_eval,
    reference_params,
    ss_log_futures,
)
from .simulation import DEFAULT_DT, Model, SimulationConfig, read_panel, simulate_panel, write_panel

logger = logging.getLogger("polyfutures")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ESTIMATION = 3


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _check_keys(cfg: dict, allowed, where: str):
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")


def _params(raw, n_contracts: int) -> dict:
    """Reference parameters with the given fields replaced."""
    base = reference_params(n_contracts).to_dict()
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError("params: expected an object of parameter fields")
    base.update(raw)
    return ModelParams.from_dict(base).to_dict()


def _out_dir(arg, command: str) -> Path:
    if arg is not None:
        out = Path(arg)
    else:
        out = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
        k = 1
        while out.exists():
            out = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{k}"
            k += 1
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, cfg: dict):
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

SIMULATE_KEYS = ("model", "n_obs", "tenors_months", "dt", "seed", "params", "coords", "write_states", "threads")


def resolve_simulate(raw: dict, args) -> dict:
    _check_keys(raw, SIMULATE_KEYS, "simulate config")
    cfg = dict(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    cfg.setdefault("model", Model.PD.value)
    cfg.setdefault("n_obs", 1000)
    cfg.setdefault("tenors_months", list(range(1, 14)))
    cfg.setdefault("dt", DEFAULT_DT)
    cfg.setdefault("seed", 0)
    cfg.setdefault("write_states", True)
    cfg.setdefault("threads", 1)
    try:
        cfg["model"] = Model(cfg["model"]).value
    except ValueError:
        raise ConfigError(f"model: expected one of {[m.value for m in Model]}") from None
    cfg["tenors_months"] = [float(v) for v in cfg["tenors_months"]]
    cfg["params"] = _params(cfg.get("params"), len(cfg["tenors_months"]))
    if cfg["model"] == Model.PD.value:
        cfg.setdefault("coords", [float(v) for v in REFERENCE_COORDS])
    else:
        cfg.setdefault("coords", None)
    return cfg


def cmd_simulate(args) -> int:
    cfg = resolve_simulate(_load_config(args.config), args)
    sim = SimulationConfig(
        n_obs=cfg["n_obs"],
        tenors_months=cfg["tenors_months"],
        params=ModelParams.from_dict(cfg["params"]),
        model=cfg["model"],
        coords=cfg["coords"],
        dt=cfg["dt"],
        seed=cfg["seed"],
    )
    with threadpool_limits(cfg["threads"]):
        panel = simulate_panel(sim)
    out = _out_dir(args.out, "simulate")
    _echo(out, cfg)
    write_panel(panel, out / "panel.csv", write_states=cfg["write_states"])
    print(
        f"simulated n={panel.n_obs} m={panel.n_contracts} "
        f"convention={panel.convention.value} seed={cfg['seed']} -> {out / 'panel.csv'}"
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

FIT_KEYS = (
    "panel",
    "regime",
    "filter",
    "model",
    "params",
    "coords",
    "truth",
    "max_evals",
    "n_starts",
    "seed",
    "bounds",
    "lambda_scaling",
    "threads",
)


def resolve_fit(raw: dict, args):
    _check_keys(raw, FIT_KEYS, "fit config")
    cfg = dict(raw)
    if args.panel is not None:
        cfg["panel"] = args.panel
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    for key in ("regime", "filter"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if "panel" not in cfg:
        raise ConfigError("fit: no panel given (config field 'panel' or --panel)")
    cfg["panel"] = str(Path(cfg["panel"]).resolve())
    try:
        panel = read_panel(cfg["panel"])
    except OSError as exc:
        raise ConfigError(f"panel: cannot read {cfg['panel']}: {exc.strerror}") from None
    meta = panel.meta
    cfg.setdefault("model", meta.get("model", Model.PD.value))
    cfg.setdefault("regime", "case1")
    cfg.setdefault("filter", "EKF")
    cfg.setdefault("max_evals", 5000)
    cfg.setdefault("n_starts", 8)
    cfg.setdefault("seed", 0)
    cfg.setdefault("bounds", {})
    cfg.setdefault("lambda_scaling", 0.0)
    cfg.setdefault("threads", 1)
    m = panel.n_contracts
    cfg["params"] = _params(cfg.get("params", meta.get("params")), m)
    if cfg["model"] == Model.PD.value:
        cfg.setdefault("coords", meta.get("coords") or [float(v) for v in REFERENCE_COORDS])
    else:
        cfg.setdefault("coords", None)
    if "truth" not in cfg:
        cfg["truth"] = {"params": meta["params"], "coords": meta.get("coords")} if "params" in meta else None
    cfg["bounds"] = {k: [float(v) for v in b] for k, b in cfg["bounds"].items()}
    return cfg, panel


def cmd_fit(args) -> int:
    cfg, panel = resolve_fit(_load_config(args.config), args)
    est_cfg = EstimationConfig(
        regime=cfg["regime"],
        filter=cfg["filter"],
        model=cfg["model"],
        params=ModelParams.from_dict(cfg["params"]),
        coords=cfg["coords"],
        max_evals=cfg["max_evals"],
        n_starts=cfg["n_starts"],
        seed=cfg["seed"],
        bounds={k: tuple(v) for k, v in cfg["bounds"].items()},
        lambda_scaling=cfg["lambda_scaling"],
        workers=cfg["threads"],
    )
    out = _out_dir(args.out, "fit")
    _echo(out, cfg)
    with threadpool_limits(1):
        result = fit(est_cfg, panel)
    (out / "estimates.csv").write_text(result.estimates_csv())
    (out / "rmse.csv").write_text(result.rmse.to_csv())
    _write_csv(out / "filtered_states.csv", ["chi", "xi"], result.filtered_states)
    if cfg["truth"] is not None:
        truth = ModelParams.from_dict(cfg["truth"]["params"])
        report = recovery_report(result, truth, cfg["truth"].get("coords"))
        (out / "recovery.csv").write_text(report.to_csv())
    lines = [f"free parameters: {', '.join(result.free_names) or '(none)'}"]
    for s in result.starts:
        lines.append(
            f"start {s.index}: objective {_fmt(s.start_objective)} -> {_fmt(s.objective)}; "
            f"evals {s.n_evals}; restarts {s.restarts}; trace {' '.join(_fmt(v) for v in s.trace)}"
        )
    lines.append(f"best start {result.best_start}; loglik {_fmt(result.loglik)}; evals {result.n_evals}")
    (out / "run_log.txt").write_text("\n".join(lines) + "\n")
    print(f"{cfg['regime']} {cfg['filter']}: loglik {result.loglik:.6f}, mean RMSE {result.rmse.mean:.6f} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# expm-bench
# --------------------------------------------------------------------------

BENCH_KEYS = ("trials", "dim", "seed", "eigen_sd", "perturb_scale", "perturbation", "known_eigendata", "threads")


def resolve_bench(raw: dict, args) -> dict:
    _check_keys(raw, BENCH_KEYS, "expm-bench config")
    cfg = dict(raw)
    for key in ("trials", "dim", "seed", "threads"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    cfg.setdefault("trials", 100)
    cfg.setdefault("dim", 10)
    cfg.setdefault("seed", 0)
    cfg.setdefault("eigen_sd", 10.0)
    cfg.setdefault("perturb_scale", 1e-6)
    cfg.setdefault("perturbation", "random")
    cfg.setdefault("known_eigendata", True)
    cfg.setdefault("threads", 1)
    if int(cfg["trials"]) != cfg["trials"] or cfg["trials"] < 1:
        raise ConfigError(f"trials: must be an integer >= 1 (got {cfg['trials']})")
    if int(cfg["dim"]) != cfg["dim"] or cfg["dim"] < 2:
        raise ConfigError(f"dim: must be an integer >= 2 (got {cfg['dim']})")
    if cfg["perturbation"] not in ("random", "identity"):
        raise ConfigError("perturbation: expected 'random' or 'identity'")
    return cfg


def cmd_expm_bench(args) -> int:
    cfg = resolve_bench(_load_config(args.config), args)
    with threadpool_limits(cfg["threads"]):
        report = run_expm_benchmark(
            cfg["trials"],
            cfg["dim"],
            cfg["seed"],
            perturb_scale=cfg["perturb_scale"],
            perturbation=cfg["perturbation"],
            eigen_sd=cfg["eigen_sd"],
            known_eigendata=cfg["known_eigendata"],
        )
    out = _out_dir(args.out, "expm-bench")
    _echo(out, cfg)
    # wall-clock timings vary between runs and stay out of the reproducible report
    _write_csv(
        out / "expm_bench.csv",
        ["method", "mean_phi", "mean_psi", "failures", "trials"],
        [[s.method.value, s.mean_phi, s.mean_psi, str(s.failures), str(s.trials)] for s in report.stats.values()],
    )
    if args.timings:
        _write_csv(
            out / "timings.csv",
            ["method", "total_seconds"],
            [[s.method.value, s.total_seconds] for s in report.stats.values()],
        )
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# price
# --------------------------------------------------------------------------

PRICE_KEYS = ("model", "params", "coords", "state", "tenors_months", "expm_method", "correlated", "threads")


def resolve_price(raw: dict, args) -> dict:
    _check_keys(raw, PRICE_KEYS, "price config")
    cfg = dict(raw)
    if args.model is not None:
        cfg["model"] = args.model
    if args.params is not None:
        cfg["params"] = _load_config(args.params)
    if args.coords is not None:
        cfg["coords"] = args.coords
    if args.state is not None:
        cfg["state"] = args.state
    if args.tenors is not None:
        cfg["tenors_months"] = args.tenors
    if args.threads is not None:
        cfg["threads"] = args.threads
    cfg.setdefault("model", Model.PD.value)
    try:
        cfg["model"] = Model(cfg["model"]).value
    except ValueError:
        raise ConfigError(f"model: expected one of {[m.value for m in Model]}") from None
    cfg.setdefault("tenors_months", list(range(1, 21)))
    cfg["tenors_months"] = [float(v) for v in cfg["tenors_months"]]
    params = dict(cfg.get("params") or {})
    params.setdefault("meas_sd", [])
    cfg["params"] = _params(params, 0)
    cfg.setdefault("state", [cfg["params"]["chi0"], cfg["params"]["xi0"]])
    cfg["state"] = [float(v) for v in cfg["state"]]
    if len(cfg["state"]) != 2:
        raise ConfigError("state: expected two values (chi, xi)")
    if cfg["model"] == Model.PD.value:
        cfg.setdefault("coords", [float(v) for v in REFERENCE_COORDS])
        cfg["coords"] = [float(v) for v in cfg["coords"]]
        if len(cfg["coords"]) != 6:
            raise ConfigError("coords: expected 6 values")
    else:
        cfg["coords"] = None
    cfg.setdefault("expm_method", ExpmMethod.EIGEN.value)
    cfg["expm_method"] = ExpmMethod(cfg["expm_method"]).value
    cfg.setdefault("correlated", False)
    cfg.setdefault("threads", 1)
    return cfg


def cmd_price(args) -> int:
    cfg = resolve_price(_load_config(args.config), args)
    params = ModelParams.from_dict(cfg["params"])
    months = np.array(cfg["tenors_months"])
    taus = months / 12.0
    x = np.array(cfg["state"])
    with threadpool_limits(cfg["threads"]):
        if cfg["model"] == Model.PD.value:
            Q = pd_loadings(params, cfg["coords"], taus, cfg["expm_method"], cfg["correlated"])
            prices = pd_basis_eval(x) @ Q
        else:
            prices = np.exp(np.atleast_1d(ss_log_futures(params, x, taus)))
    out = _out_dir(args.out, "price")
    _echo(out, cfg)
    _write_csv(out / "term_structure.csv", ["tenor_months", "tau_years", "price"], zip(months, taus, prices))
    print(f"{cfg['model']} term structure at x={tuple(cfg['state'])}: {len(months)} tenors -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file")
    shared.add_argument("--out", help="output directory (default runs/<command>-<timestamp>)")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--threads", type=int, help="worker threads")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="polyfutures", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared], help="simulate a futures panel")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[shared], help="maximum-likelihood fit to a panel")
    p.add_argument("--panel", help="panel CSV written by 'simulate'")
    p.add_argument("--regime", choices=["case1", "case2", "case3", "case4"])
    p.add_argument("--filter", choices=["KF", "EKF", "UKF"])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("expm-bench", parents=[shared], help="matrix exponential benchmark")
    p.add_argument("--trials", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--timings", action="store_true", help="also write wall-clock timings.csv")
    p.set_defaults(func=cmd_expm_bench)

    p = sub.add_parser("price", parents=[shared], help="futures term structure at one state")
    p.add_argument("--model", choices=[m.value for m in Model])
    p.add_argument("--params", help="JSON file of parameter fields")
    p.add_argument("--coords", type=float, nargs=6)
    p.add_argument("--state", type=float, nargs=2, metavar=("CHI", "XI"))
    p.add_argument("--tenors", type=float, nargs="+", help="tenors in months")
    p.set_defaults(func=cmd_price)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except AllStartsFailed as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
