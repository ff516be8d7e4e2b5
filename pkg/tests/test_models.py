"""Schwartz-Smith and polynomial diffusion model matrices and pricing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyfutures.linalg_expm import ExpmMethod, expm
from polyfutures.models import (
    PD_BASIS,
    REFERENCE_COORDS,
    InvalidParams,
    ModelParams,
    TenorCountMismatch,
    months_to_years,
    pd_basis_eval,
    pd_futures_price,
    pd_generator_matrix,
    pd_loadings,
    pd_measurement_row_jacobian,
    pd_spot,
    reference_params,
    rn_state_moments,
    ss_A,
    ss_log_futures,
    ss_measurement,
    ss_transition,
)

# independent high-precision evaluations at the reference parameters
A_AT_ONE = 1.1551691909823835204
A_AT_HALF = 0.67040438543969929378
LOG_FUTURES_0_333_HALF = 3.5365619469351417919


@pytest.fixture
def params():
    return reference_params(13)


@st.composite
def model_params(draw):
    pos = st.floats(0.05, 3.0)
    return ModelParams(
        kappa=draw(pos),
        gamma=draw(pos),
        mu_xi=draw(st.floats(-2, 2)),
        sigma_chi=draw(pos),
        sigma_xi=draw(pos),
        rho=draw(st.floats(-0.95, 0.95)),
        lambda_chi=draw(st.floats(-1, 1)),
        lambda_xi=draw(st.floats(-1, 1)),
        meas_sd=[0.1],
    )


states = st.tuples(st.floats(-3, 3), st.floats(-3, 3)).map(np.array)


def generator_fd(f, x, params, h=1e-4):
    """Central-difference application of the risk-neutral generator to ``f`` at ``x``."""
    chi, xi = x
    fx = f(chi, xi)
    d_chi = (f(chi + h, xi) - f(chi - h, xi)) / (2 * h)
    d_xi = (f(chi, xi + h) - f(chi, xi - h)) / (2 * h)
    dd_chi = (f(chi + h, xi) - 2 * fx + f(chi - h, xi)) / h**2
    dd_xi = (f(chi, xi + h) - 2 * fx + f(chi, xi - h)) / h**2
    b = (-params.kappa * chi - params.lambda_chi, params.mu_xi - params.gamma * xi - params.lambda_xi)
    return (
        0.5 * (params.sigma_chi**2 * dd_chi + params.sigma_xi**2 * dd_xi)
        + b[0] * d_chi
        + b[1] * d_xi
    )


class TestModelParams:
    @pytest.mark.parametrize(
        "field, value",
        [("kappa", 0.0), ("gamma", -1.0), ("sigma_chi", 0.0), ("sigma_xi", -0.1), ("rho", 1.0), ("rho", -1.0)],
    )
    def test_invariants(self, params, field, value):
        with pytest.raises(InvalidParams):
            params.replace(**{field: value})

    def test_meas_sd_positive(self, params):
        with pytest.raises(InvalidParams):
            params.replace(meas_sd=[0.1, 0.0])

    def test_non_finite(self, params):
        with pytest.raises(InvalidParams):
            params.replace(mu_xi=np.nan)

    def test_dict_round_trip(self, params):
        again = ModelParams.from_dict(params.to_dict())
        assert again.to_dict() == params.to_dict()

    def test_unknown_field(self, params):
        d = params.to_dict() | {"beta": 1.0}
        with pytest.raises(InvalidParams):
            ModelParams.from_dict(d)

    def test_meas_sd_is_read_only(self, params):
        with pytest.raises(ValueError):
            params.meas_sd[0] = 1.0

    def test_reference_noise_profile(self):
        p = reference_params(20)
        assert p.meas_sd[0] == 0.2 and p.meas_sd[-1] == 0.01
        assert np.all(np.diff(p.meas_sd) < 0)

    def test_months_to_years(self):
        np.testing.assert_allclose(months_to_years([1, 6, 12]), [1 / 12, 0.5, 1.0])


class TestSSTransition:
    def test_zero_step(self, params):
        t = ss_transition(params, 0.0)
        np.testing.assert_array_equal(t.c, 0.0)
        np.testing.assert_array_equal(t.E, np.eye(2))
        np.testing.assert_array_equal(t.Sigma_w, 0.0)

    def test_daily_decay(self, params):
        t = ss_transition(params, 1 / 360)
        np.testing.assert_allclose(np.diag(t.E), [np.exp(-0.5 / 360), np.exp(-0.3 / 360)], rtol=1e-15)
        assert t.E[0, 1] == t.E[1, 0] == 0.0

    def test_stationary_variance(self, params):
        t = ss_transition(params, 1e6)
        assert t.Sigma_w[0, 0] == pytest.approx(2.25, rel=1e-12)
        assert t.Sigma_w[1, 1] == pytest.approx(1.3**2 / 0.6, rel=1e-12)
        assert t.c[1] == pytest.approx(1.0 / 0.3, rel=1e-12)

    def test_small_step_limit(self, params):
        dt = 1e-6
        expected = np.array([[1.5**2, -0.3 * 1.5 * 1.3], [-0.3 * 1.5 * 1.3, 1.3**2]])
        np.testing.assert_allclose(ss_transition(params, dt).Sigma_w / dt, expected, rtol=1e-3)

    def test_negative_step(self, params):
        with pytest.raises(ValueError):
            ss_transition(params, -1.0)

    @settings(max_examples=100, deadline=None)
    @given(p=model_params(), dt=st.floats(0, 50))
    def test_covariance_symmetric_psd(self, p, dt):
        S = ss_transition(p, dt).Sigma_w
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-12

    @settings(max_examples=50, deadline=None)
    @given(p=model_params(), dt=st.floats(1e-3, 5))
    def test_decay_in_unit_interval(self, p, dt):
        e = np.diag(ss_transition(p, dt).E)
        assert np.all((e > 0) & (e <= 1))


class TestSSPricing:
    def test_A_at_zero(self, params):
        assert ss_A(params, 0.0) == 0.0

    def test_A_single_term(self):
        p = ModelParams(
            kappa=0.5, gamma=0.3, mu_xi=1.0, sigma_chi=1e-300, sigma_xi=1e-300,
            rho=0.0, lambda_chi=0.0, lambda_xi=0.0, meas_sd=[0.1],
        )
        assert ss_A(p, 1.0) == pytest.approx((1 - np.exp(-0.3)) / 0.3, rel=1e-14)

    @pytest.mark.parametrize("tau, expected", [(1.0, A_AT_ONE), (0.5, A_AT_HALF)])
    def test_A_oracle(self, params, tau, expected):
        assert ss_A(params, tau) == pytest.approx(expected, rel=1e-13)

    def test_A_vectorised(self, params):
        np.testing.assert_allclose(ss_A(params, [0.5, 1.0]), [A_AT_HALF, A_AT_ONE], rtol=1e-13)

    def test_A_negative_tau(self, params):
        with pytest.raises(ValueError):
            ss_A(params, -0.1)

    def test_log_futures_at_zero(self, params):
        assert ss_log_futures(params, [0.0, 0.0], 0.0) == 0.0

    def test_log_futures_oracle(self, params):
        assert ss_log_futures(params, [0.0, 3.33], 0.5) == pytest.approx(LOG_FUTURES_0_333_HALF, rel=1e-14)

    @given(x=states)
    def test_log_futures_at_maturity_is_log_spot(self, x):
        p = reference_params(1)
        assert ss_log_futures(p, x, 0.0) == pytest.approx(x[0] + x[1], abs=1e-14)

    def test_measurement_at_zero_tenor(self):
        m = ss_measurement(reference_params(1), [0.0])
        np.testing.assert_array_equal(m.d, [0.0])
        np.testing.assert_array_equal(m.F[:, 0], [1.0, 1.0])

    def test_measurement_loadings_decrease(self, params):
        m = ss_measurement(params, months_to_years(np.arange(1, 14)))
        assert m.F.shape == (2, 13) and m.d.shape == (13,)
        assert np.all(np.diff(m.F, axis=1) < 0)
        np.testing.assert_allclose(np.diag(m.Sigma_v), params.meas_sd**2)

    def test_measurement_intercept_is_A(self):
        m = ss_measurement(reference_params(1), [1.0])
        assert m.d[0] == pytest.approx(A_AT_ONE, rel=1e-13)

    def test_tenor_count_mismatch(self, params):
        with pytest.raises(TenorCountMismatch):
            ss_measurement(params, [0.1, 0.2])

    @pytest.mark.parametrize("tenors", [[0.2, 0.1], [0.1, 0.1], [-0.1, 0.1]])
    def test_tenor_validation(self, tenors):
        with pytest.raises(ValueError):
            ss_measurement(reference_params(2), tenors)


class TestRiskNeutralMoments:
    def test_zero_horizon(self, params):
        mean, cov = rn_state_moments(params, [0.2, 3.0], 0.0)
        np.testing.assert_array_equal(mean, [0.2, 3.0])
        np.testing.assert_array_equal(cov, 0.0)

    def test_no_premia_matches_transition(self, params):
        p = params.replace(lambda_chi=0.0, lambda_xi=0.0)
        x0 = np.array([0.4, 2.0])
        mean, cov = rn_state_moments(p, x0, 0.7)
        t = ss_transition(p, 0.7)
        np.testing.assert_allclose(mean, t.c + t.E @ x0, rtol=1e-14)
        np.testing.assert_allclose(cov, t.Sigma_w, rtol=1e-14)

    def test_log_futures_is_lognormal_mean(self, params):
        # log F = log E[exp(chi + xi)] with Gaussian (chi, xi)
        x = np.array([0.1, 2.5])
        mean, cov = rn_state_moments(params, x, 1.3)
        expected = mean.sum() + 0.5 * cov.sum()
        assert ss_log_futures(params, x, 1.3) == pytest.approx(expected, rel=1e-13)

    @pytest.mark.slow
    def test_euler_simulation_oracle(self, params):
        rng = np.random.default_rng(17)
        n, h, horizon = 100_000, 1e-3, 2.0
        chi, xi = np.zeros(n), np.full(n, 3.33)
        r = params.rho
        s_chi, s_xi = params.sigma_chi * np.sqrt(h), params.sigma_xi * np.sqrt(h)
        for _ in range(int(round(horizon / h))):
            z1, z2 = rng.standard_normal((2, n))
            chi_next = chi + (-params.kappa * chi - params.lambda_chi) * h + s_chi * z1
            xi += (params.mu_xi - params.lambda_xi - params.gamma * xi) * h + s_xi * (
                r * z1 + np.sqrt(1 - r * r) * z2
            )
            chi = chi_next
        x = np.column_stack([chi, xi])
        mean, cov = rn_state_moments(params, [0.0, 3.33], horizon)
        se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se)
        np.testing.assert_allclose(np.cov(x.T), cov, rtol=0.02, atol=0.02)

    def test_negative_horizon(self, params):
        with pytest.raises(ValueError):
            rn_state_moments(params, [0, 0], -1.0)


class TestPDBasis:
    @pytest.mark.parametrize(
        "x, expected",
        [((0, 0), (1, 0, 0, 0, 0, 0)), ((1, 2), (1, 1, 2, 1, 2, 4)), ((-1, 3), (1, -1, 3, 1, -3, 9))],
    )
    def test_basis(self, x, expected):
        np.testing.assert_array_equal(pd_basis_eval(x), expected)

    def test_basis_vectorised(self):
        out = pd_basis_eval(np.array([[0.0, 0.0], [1.0, 2.0]]))
        assert out.shape == (2, 6)

    def test_basis_order(self):
        assert PD_BASIS == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]

    @pytest.mark.parametrize(
        "x, p, expected",
        [((0, 0), REFERENCE_COORDS, 5.0), ((1, 1), REFERENCE_COORDS, 15.0), ((2, 0), np.zeros(6), 0.0)],
    )
    def test_spot(self, x, p, expected):
        assert pd_spot(x, p) == expected


class TestGenerator:
    def test_matches_closed_form(self, params):
        k, g, mu = params.kappa, params.gamma, params.mu_xi
        lc, lx, sc, sx = params.lambda_chi, params.lambda_xi, params.sigma_chi, params.sigma_xi
        expected = np.array(
            [
                [0, -lc, mu - lx, sc**2, 0, sx**2],
                [0, -k, 0, -2 * lc, mu - lx, 0],
                [0, 0, -g, 0, -lc, 2 * mu - 2 * lx],
                [0, 0, 0, -2 * k, 0, 0],
                [0, 0, 0, 0, -k - g, 0],
                [0, 0, 0, 0, 0, -2 * g],
            ]
        )
        gm = pd_generator_matrix(params)
        assert gm.degree == 2
        np.testing.assert_allclose(gm.G, expected, rtol=1e-15, atol=0)

    def test_reference_entries(self, params):
        G = pd_generator_matrix(params).G
        assert G[0, 1] == -0.5
        assert G[1, 4] == pytest.approx(0.7, rel=1e-15)
        assert G[3, 3] == -1.0
        assert G[0, 3] == 2.25

    @given(p=model_params())
    def test_structure(self, p):
        G = pd_generator_matrix(p).G
        np.testing.assert_array_equal(G[:, 0], 0.0)
        np.testing.assert_array_equal(np.tril(G, -1), 0.0)
        k, g = p.kappa, p.gamma
        np.testing.assert_allclose(np.diag(G), [0, -k, -g, -2 * k, -k - g, -2 * g], rtol=1e-15)

    def test_correlated_flag_changes_one_entry(self, params):
        plain = pd_generator_matrix(params).G
        corr = pd_generator_matrix(params, correlated=True).G
        diff = np.argwhere(plain != corr)
        np.testing.assert_array_equal(diff, [[0, 4]])
        assert corr[0, 4] == pytest.approx(-0.3 * 1.5 * 1.3, rel=1e-15)

    def test_generator_ignores_rho_by_default(self, params):
        np.testing.assert_array_equal(
            pd_generator_matrix(params).G, pd_generator_matrix(params.replace(rho=0.6)).G
        )

    @pytest.mark.parametrize("k", range(6))
    def test_finite_difference_generator(self, params, rng, k):
        # coordinates of G f, evaluated on H(x), must match the differential operator on f
        a, b = PD_BASIS[k]

        def f(chi, xi):
            return chi**a * xi**b

        G = pd_generator_matrix(params).G
        for x in rng.uniform(-2, 2, (5, 2)):
            analytic = pd_basis_eval(x) @ G[:, k]
            numeric = generator_fd(f, x, params)
            assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-6)

    def test_cross_monomial_coordinates(self, params):
        G = pd_generator_matrix(params).G
        expected = np.zeros(6)
        expected[[1, 2, 4]] = [params.mu_xi - params.lambda_xi, -params.lambda_chi, -params.kappa - params.gamma]
        np.testing.assert_allclose(G[:, 4], expected, rtol=1e-15)


class TestPDPricing:
    @pytest.mark.parametrize("method", [ExpmMethod.EIGEN, ExpmMethod.SCALING_SQUARING, ExpmMethod.TAYLOR])
    def test_zero_tau_is_spot(self, params, method):
        x = np.array([0.3, 2.0])
        price = pd_futures_price(x, params, REFERENCE_COORDS, 0.0, method)
        assert price == pytest.approx(pd_spot(x, REFERENCE_COORDS), rel=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(p=model_params(), x=states, tau=st.floats(0, 10))
    def test_constant_is_martingale(self, p, x, tau):
        e1 = np.eye(6)[0]
        assert pd_futures_price(x, p, e1, tau) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(p=model_params(), x=states, t1=st.floats(0, 3), t2=st.floats(0, 3))
    def test_semigroup(self, p, x, t1, t2):
        G = pd_generator_matrix(p).G
        direct = pd_futures_price(x, p, REFERENCE_COORDS, t1 + t2, ExpmMethod.SCALING_SQUARING)
        q = expm(ExpmMethod.SCALING_SQUARING, t1 * G) @ (
            expm(ExpmMethod.SCALING_SQUARING, t2 * G) @ REFERENCE_COORDS
        )
        assert direct == pytest.approx(pd_basis_eval(x) @ q, rel=1e-8, abs=1e-10)

    def test_methods_agree(self, params):
        taus = months_to_years(np.arange(0, 21))
        ref = pd_loadings(params, REFERENCE_COORDS, taus, ExpmMethod.SCALING_SQUARING)
        for method in (ExpmMethod.EIGEN, ExpmMethod.TAYLOR, ExpmMethod.PADE):
            np.testing.assert_allclose(pd_loadings(params, REFERENCE_COORDS, taus, method), ref, rtol=1e-9)

    def test_eigen_fallback_on_repeated_rates(self, params):
        # kappa == gamma makes G defective; the result must still be accurate
        p = params.replace(gamma=0.5)
        taus = [0.25, 1.0]
        ref = pd_loadings(p, REFERENCE_COORDS, taus, ExpmMethod.SCALING_SQUARING)
        np.testing.assert_allclose(pd_loadings(p, REFERENCE_COORDS, taus), ref, rtol=1e-9)

    def test_loadings_shape(self, params):
        assert pd_loadings(params, REFERENCE_COORDS, [0.1, 0.2, 0.3]).shape == (6, 3)

    def test_negative_tau(self, params):
        with pytest.raises(ValueError):
            pd_loadings(params, REFERENCE_COORDS, [-0.1])

    @pytest.mark.parametrize("correlated", [False, True])
    def test_monte_carlo_oracle(self, params, correlated):
        # the default generator omits rho, so it prices exactly the uncorrelated dynamics
        mc_params = params if correlated else params.replace(rho=0.0)
        x, tau = np.array([0.1, 3.0]), 0.5
        mean, cov = rn_state_moments(mc_params, x, tau)
        draws = np.random.default_rng(3).multivariate_normal(mean, cov, size=1_000_000)
        spots = pd_spot(draws, REFERENCE_COORDS)
        se = spots.std(ddof=1) / np.sqrt(spots.size)
        price = pd_futures_price(x, params, REFERENCE_COORDS, tau, correlated=correlated)
        assert abs(price - spots.mean()) < 3 * se

    def test_default_generator_misprices_correlated_dynamics(self, params):
        # the gap is the cross-monomial weight times the integrated factor covariance
        x, tau = np.array([0.1, 3.0]), 0.5
        mean, cov = rn_state_moments(params, x, tau)
        draws = np.random.default_rng(3).multivariate_normal(mean, cov, size=1_000_000)
        spots = pd_spot(draws, REFERENCE_COORDS)
        se = spots.std(ddof=1) / np.sqrt(spots.size)
        plain = pd_futures_price(x, params, REFERENCE_COORDS, tau)
        corr = pd_futures_price(x, params, REFERENCE_COORDS, tau, correlated=True)
        cross = REFERENCE_COORDS[4] * (cov[0, 1] - rn_state_moments(params.replace(rho=0.0), x, tau)[1][0, 1])
        assert corr - plain == pytest.approx(cross, rel=1e-10)
        assert abs(plain - spots.mean()) > 10 * se


class TestJacobian:
    def test_origin(self, params):
        q = pd_loadings(params, REFERENCE_COORDS, [0.4])[:, 0]
        np.testing.assert_allclose(
            pd_measurement_row_jacobian([0, 0], params, REFERENCE_COORDS, 0.4), q[1:3], rtol=1e-15
        )

    def test_polynomial_gradient(self, params):
        J = pd_measurement_row_jacobian([1, 1], params, REFERENCE_COORDS, 0.0)
        np.testing.assert_allclose(J, [9.0, 7.0], rtol=1e-13)

    def test_finite_differences(self, params, rng):
        h = 1e-6
        for _ in range(10):
            x = rng.uniform(-2, 4, 2)
            tau = rng.uniform(0, 2)
            J = pd_measurement_row_jacobian(x, params, REFERENCE_COORDS, tau)
            fd = np.array(
                [
                    (
                        pd_futures_price(x + h * e, params, REFERENCE_COORDS, tau)
                        - pd_futures_price(x - h * e, params, REFERENCE_COORDS, tau)
                    )
                    / (2 * h)
                    for e in np.eye(2)
                ]
            )
            assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-5
