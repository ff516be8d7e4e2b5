"""Matrix exponential algorithms and a stability/accuracy/efficiency benchmark.

Seven classical routes to ``e^A`` are provided behind one entry point,
:func:`expm`.  The interpolation-based methods (Lagrange, Newton,
Vandermonde) and the eigen-decomposition method work from the spectrum of
``A``; the remaining three are series/rational approximants.

The benchmark draws random matrices with a known spectral decomposition,
so the exact exponential is available for every trial.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "ExpmMethod",
    "EigenHint",
    "GeneratedMatrix",
    "ExpmBenchReport",
    "MethodStats",
    "ExpmError",
    "NonConvergent",
    "SingularInterpolation",
    "RetryExhausted",
    "IllConditioned",
    "DimMismatch",
    "divided_differences",
    "trial_rng",
    "expm",
    "generate_test_matrix",
    "stability_metric",
    "accuracy_metric",
    "run_expm_benchmark",
    "taylor_oracle",
]


class ExpmMethod(str, Enum):
    TAYLOR = "taylor"
    PADE = "pade"
    SCALING_SQUARING = "scaling_squaring"
    LAGRANGE = "lagrange"
    NEWTON = "newton"
    VANDERMONDE = "vandermonde"
    EIGEN = "eigen"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    ExpmMethod.TAYLOR: "Taylor series",
    ExpmMethod.PADE: "Pade approximation",
    ExpmMethod.SCALING_SQUARING: "Scaling and squaring",
    ExpmMethod.LAGRANGE: "Lagrange",
    ExpmMethod.NEWTON: "Newton",
    ExpmMethod.VANDERMONDE: "Vandermonde",
    ExpmMethod.EIGEN: "Eigen-decomposition",
}

SPECTRAL_METHODS = frozenset(
    {ExpmMethod.LAGRANGE, ExpmMethod.NEWTON, ExpmMethod.VANDERMONDE, ExpmMethod.EIGEN}
)
INTERPOLATION_METHODS = frozenset(
    {ExpmMethod.LAGRANGE, ExpmMethod.NEWTON, ExpmMethod.VANDERMONDE}
)

TAYLOR_MAX_TERMS = 200
PADE_ORDER = 6
EIGEN_GAP_TOL = 1e-10
COND_LIMIT = 1e14
IMAG_TOL = 1e-8


class ExpmError(ArithmeticError):
    """Base class for matrix exponential failures."""


class NonConvergent(ExpmError):
    pass


class SingularInterpolation(ExpmError):
    pass


class RetryExhausted(ExpmError):
    pass


class DimMismatch(ValueError):
    pass


class IllConditioned(UserWarning):
    """Emitted when the result is numerically untrustworthy but still returned."""


@dataclass(frozen=True)
class EigenHint:
    """Eigenvalues and matching eigenvector columns of a matrix."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_square(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def _finish(X: np.ndarray) -> np.ndarray:
    """Drop a negligible imaginary part; flag it otherwise."""
    if not np.iscomplexobj(X):
        return X
    re, im = X.real, X.imag
    re_norm = np.linalg.norm(re)
    if np.linalg.norm(im) >= IMAG_TOL * max(re_norm, np.finfo(float).tiny):
        warnings.warn(
            "imaginary residue above tolerance in real matrix exponential",
            IllConditioned,
            stacklevel=3,
        )
    return np.ascontiguousarray(re)


def _eigen(A: np.ndarray, hint: EigenHint | None) -> EigenHint:
    if hint is not None:
        return hint
    w, V = np.linalg.eig(A)
    if np.all(w.imag == 0):
        w, V = w.real, V.real
    return EigenHint(w, V)


def _check_distinct(lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam)
    order = np.lexsort((np.imag(lam), np.real(lam)))
    lam = lam[order]
    if lam.size > 1:
        gaps = np.abs(lam[:, None] - lam[None, :])
        gaps[np.diag_indices_from(gaps)] = np.inf
        if gaps.min() <= EIGEN_GAP_TOL:
            raise SingularInterpolation(
                f"eigenvalues too close for interpolation (min gap {gaps.min():.3g})"
            )
    return lam


def _taylor(A: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    total = np.eye(n)
    term = np.eye(n)
    for k in range(1, TAYLOR_MAX_TERMS + 1):
        term = term @ A / k
        total = total + term
        nxt = np.linalg.norm(term @ A) / (k + 1)
        if nxt < 1e-16 * np.linalg.norm(total):
            return total
    raise NonConvergent(f"Taylor series did not converge within {TAYLOR_MAX_TERMS} terms")


def _pade_coefficients(q: int) -> list[float]:
    return [
        math.factorial(2 * q - k) * math.factorial(q)
        / (math.factorial(2 * q) * math.factorial(k) * math.factorial(q - k))
        for k in range(q + 1)
    ]


def _pade(A: np.ndarray, q: int = PADE_ORDER) -> np.ndarray:
    c = _pade_coefficients(q)
    n = A.shape[0]
    # Split into even and odd powers: N = U + V, D = U - V.
    U = c[0] * np.eye(n)
    V = np.zeros_like(A)
    power = np.eye(n)
    for k in range(1, q + 1):
        power = power @ A
        if k % 2:
            V = V + c[k] * power
        else:
            U = U + c[k] * power
    return np.linalg.solve(U - V, U + V)


def _scaling_squaring(A: np.ndarray) -> np.ndarray:
    norm1 = np.linalg.norm(A, 1)
    s = max(0, math.ceil(math.log2(norm1))) if norm1 > 0 else 0
    X = _pade(A / 2.0**s)
    for _ in range(s):
        X = X @ X
    return X


def _lagrange(A: np.ndarray, lam: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    eye = np.eye(n)
    total = np.zeros((n, n), dtype=complex)
    for i, li in enumerate(lam):
        basis = eye.astype(complex)
        for j, lj in enumerate(lam):
            if j != i:
                basis = basis @ (A - lj * eye) / (li - lj)
        total += np.exp(li) * basis
    return total


def divided_differences(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Newton divided-difference coefficients f[x0], f[x0,x1], ..."""
    coef = np.array(values, dtype=complex)
    x = np.asarray(points, dtype=complex)
    n = len(x)
    for k in range(1, n):
        coef[k:] = (coef[k:] - coef[k - 1 : -1]) / (x[k:] - x[: n - k])
    return coef


def _newton(A: np.ndarray, lam: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    eye = np.eye(n)
    coef = divided_differences(lam, np.exp(lam))
    P = coef[-1] * eye.astype(complex)
    for k in range(len(lam) - 2, -1, -1):
        P = coef[k] * eye + (A - lam[k] * eye) @ P
    return P


def _vandermonde(A: np.ndarray, lam: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    V = np.vander(lam, increasing=True)
    coef = np.linalg.solve(V, np.exp(lam))
    P = coef[-1] * np.eye(n, dtype=complex)
    for k in range(len(lam) - 2, -1, -1):
        P = coef[k] * np.eye(n) + A @ P
    return P


def _eigendecomposition(lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    if np.linalg.cond(vecs) > COND_LIMIT:
        warnings.warn(
            "eigenvector matrix is ill-conditioned; exponential may be inaccurate",
            IllConditioned,
            stacklevel=3,
        )
    scaled = vecs * np.exp(lam)[None, :]
    # X = V diag(e^lam) V^{-1}  <=>  V^T X^T = (V diag(e^lam))^T
    return np.linalg.solve(vecs.T, scaled.T).T


def expm(method: ExpmMethod | str, A, hint: EigenHint | None = None) -> np.ndarray:
    """Matrix exponential of ``A`` by the requested method.

    Parameters
    ----------
    method : ExpmMethod or str
        One of the seven supported algorithms.
    A : array_like
        Real square matrix.
    hint : EigenHint, optional
        Precomputed eigen-data; only used by the spectral methods.  When
        absent the spectrum is computed with ``numpy.linalg.eig``.

    Raises
    ------
    NonConvergent
        Taylor series exceeded its term cap.
    SingularInterpolation
        Interpolation method given (numerically) repeated eigenvalues.
    """
    method = ExpmMethod(method)
    A = _as_square(A)
    if method is ExpmMethod.TAYLOR:
        return _taylor(A)
    if method is ExpmMethod.PADE:
        return _pade(A)
    if method is ExpmMethod.SCALING_SQUARING:
        return _scaling_squaring(A)

    eig = _eigen(A, hint)
    if method is ExpmMethod.EIGEN:
        return _finish(_eigendecomposition(np.asarray(eig.eigenvalues), np.asarray(eig.eigenvectors)))
    lam = _check_distinct(eig.eigenvalues)
    if method is ExpmMethod.LAGRANGE:
        return _finish(_lagrange(A, lam))
    if method is ExpmMethod.NEWTON:
        return _finish(_newton(A, lam))
    return _finish(_vandermonde(A, lam))


def taylor_oracle(A, terms: int = 60, squarings: int | None = None) -> np.ndarray:
    """Fixed-length Taylor series with optional scaling and squaring.

    Deliberately independent of :func:`expm`: no adaptive stopping, no
    Pade core.  With ``squarings=None`` the scaling is chosen so that the
    scaled matrix has unit 1-norm or less.
    """
    A = np.asarray(A, dtype=float)
    if squarings is None:
        norm1 = np.linalg.norm(A, 1)
        squarings = max(0, math.ceil(math.log2(norm1))) if norm1 > 1 else 0
    B = A / 2.0**squarings
    n = A.shape[0]
    total = np.eye(n)
    term = np.eye(n)
    for k in range(1, terms + 1):
        term = term @ B / k
        total = total + term
    for _ in range(squarings):
        total = total @ total
    return total


@dataclass(frozen=True)
class GeneratedMatrix:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def hint(self) -> EigenHint:
        return EigenHint(self.eigenvalues, self.eigenvectors)

    def true_expm(self) -> np.ndarray:
        """Reference exponential ``U diag(e^lam) U^{-1}`` with an explicit inverse."""
        U = self.eigenvectors
        return (U * np.exp(self.eigenvalues)[None, :]) @ np.linalg.inv(U)


def _generate(rng: np.random.Generator, dim: int, eigen_sd: float) -> GeneratedMatrix:
    lam = rng.normal(0.0, eigen_sd, size=dim)
    for _ in range(100):
        U = rng.normal(0.0, 1.0, size=(dim, dim))
        U /= np.linalg.norm(U, axis=0, keepdims=True)
        if np.linalg.cond(U) < 1e12:
            break
    else:
        raise RetryExhausted("eigenvector matrix singular after 100 redraws")
    A = np.linalg.solve(U.T, (U * lam[None, :]).T).T
    return GeneratedMatrix(A, lam, U)


def generate_test_matrix(dim: int, rng_seed: int, eigen_sd: float = 10.0) -> GeneratedMatrix:
    """Random matrix ``U diag(lam) U^{-1}`` with known eigen-data.

    Eigenvalues are i.i.d. Normal(0, eigen_sd**2); eigenvector entries are
    standard normal with columns scaled to unit Euclidean norm.
    """
    if dim < 2:
        raise ValueError("dim must be at least 2")
    return _generate(np.random.default_rng(rng_seed), dim, eigen_sd)


def _perturbation(
    rng: np.random.Generator, A: np.ndarray, scale: float, kind: str = "random"
) -> np.ndarray:
    if kind == "identity":
        return scale * np.eye(A.shape[0])
    if kind != "random":
        raise ValueError(f"unknown perturbation kind {kind!r}")
    E = rng.normal(size=A.shape)
    target = scale * np.linalg.norm(A, 2)
    if target == 0:
        target = scale
    return E * (target / np.linalg.norm(E, 2))


def stability_metric(
    method: ExpmMethod | str,
    A,
    perturb_scale: float = 1e-6,
    *,
    E=None,
    rng: np.random.Generator | int | None = None,
    hint: EigenHint | None = None,
    perturbation: str = "random",
) -> float:
    """Relative 2-norm response ``||e^{A+E} - e^A|| / ||e^A||``.

    ``E`` defaults to a standard normal matrix rescaled so that
    ``||E||_2 = perturb_scale * ||A||_2`` (or ``perturb_scale`` when A = 0).
    ``perturbation="identity"`` uses ``E = perturb_scale * I`` instead, for
    which the exact response is ``e^{perturb_scale} - 1`` for every A.
    Pass ``E`` explicitly to compare methods on the same perturbation.
    """
    if perturb_scale <= 0:
        raise ValueError("perturb_scale must be positive")
    A = _as_square(A)
    if E is None:
        E = _perturbation(np.random.default_rng(rng), A, perturb_scale, perturbation)
    base = expm(method, A, hint)
    moved = expm(method, A + E)
    return float(np.linalg.norm(moved - base, 2) / np.linalg.norm(base, 2))


def accuracy_metric(B, C) -> float:
    """Sum of squared elementwise differences."""
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    if B.shape != C.shape:
        raise DimMismatch(f"dimension mismatch: {B.shape} vs {C.shape}")
    return float(np.sum((B - C) ** 2))


@dataclass
class MethodStats:
    method: ExpmMethod
    mean_phi: float
    mean_psi: float
    total_seconds: float
    failures: int
    trials: int


@dataclass
class ExpmBenchReport:
    dim: int
    trials: int
    seed: int
    stats: dict[ExpmMethod, MethodStats] = field(default_factory=dict)
    phi: dict[ExpmMethod, np.ndarray] = field(default_factory=dict, repr=False)
    psi: dict[ExpmMethod, np.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        return [
            {
                "method": s.method.value,
                "mean_phi": s.mean_phi,
                "mean_psi": s.mean_psi,
                "total_seconds": s.total_seconds,
                "failures": s.failures,
            }
            for s in self.stats.values()
        ]

    def table(self) -> str:
        lines = [f"{'Method':<22}{'Stability':>12}{'Accuracy':>14}{'Efficiency':>12}{'Failed':>8}"]
        for s in self.stats.values():
            lines.append(
                f"{s.method.label:<22}{s.mean_phi:>12.4f}{s.mean_psi:>14.4e}"
                f"{s.total_seconds:>12.4f}{s.failures:>8d}"
            )
        return "\n".join(lines)


def trial_rng(seed: int, trial: int, stream: int) -> np.random.Generator:
    """Independent generator for one (seed, trial, stream) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(trial, stream))))


def run_expm_benchmark(
    trials: int,
    dim: int,
    rng_seed: int,
    *,
    perturb_scale: float = 1e-6,
    perturbation: str = "random",
    eigen_sd: float = 10.0,
    known_eigendata: bool = True,
    methods=tuple(ExpmMethod),
) -> ExpmBenchReport:
    """Average stability and accuracy of each method over random trials.

    Every method sees the same matrix and perturbation in a given trial;
    trial ``t`` draws from streams derived from ``(rng_seed, t)`` only.
    Failures (exceptions) are recorded as NaN and excluded from the means.

    With ``known_eigendata`` the spectral methods are handed the
    construction eigenvalues/eigenvectors for ``e^A``, as a user who built
    the matrix would; otherwise they call ``numpy.linalg.eig``.  The
    perturbed exponential ``e^{A+E}`` always recomputes its spectrum.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    methods = [ExpmMethod(m) for m in methods]
    phi = {m: np.full(trials, np.nan) for m in methods}
    psi = {m: np.full(trials, np.nan) for m in methods}
    seconds = {m: 0.0 for m in methods}

    for t in range(trials):
        gen = _generate(trial_rng(rng_seed, t, 0), dim, eigen_sd)
        A = gen.matrix
        E = _perturbation(trial_rng(rng_seed, t, 1), A, perturb_scale, perturbation)
        truth = gen.true_expm()
        hint = gen.hint() if known_eigendata else None
        for m in methods:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IllConditioned)
                try:
                    start = time.perf_counter()
                    B = expm(m, A, hint)
                    seconds[m] += time.perf_counter() - start
                    moved = expm(m, A + E)
                except (ExpmError, np.linalg.LinAlgError):
                    continue
            with np.errstate(all="ignore"):
                psi[m][t] = accuracy_metric(B, truth)
                phi[m][t] = np.linalg.norm(moved - B, 2) / np.linalg.norm(B, 2)

    report = ExpmBenchReport(dim=dim, trials=trials, seed=rng_seed, phi=phi, psi=psi)
    for m in methods:
        ok = np.isfinite(psi[m]) & np.isfinite(phi[m])
        report.stats[m] = MethodStats(
            method=m,
            mean_phi=float(np.mean(phi[m][ok])) if ok.any() else float("nan"),
            mean_psi=float(np.mean(psi[m][ok])) if ok.any() else float("nan"),
            total_seconds=seconds[m],
            failures=int((~ok).sum()),
            trials=trials,
        )
    return report
