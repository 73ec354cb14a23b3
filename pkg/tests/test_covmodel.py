import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from gptrain import kernels
from gptrain.covmodel import (CovarianceModel, HyperPoint, PriorSpec, coordinate_names,
                              cross_covariance, erfinv_checked, k1, k2, kernel_eval,
                              kernel_matrix, kernel_partials, parse_model, to_natural,
                              wendland_window, window_derivative)
from gptrain.errors import DomainError, TransformOverflowError, UsageError

from conftest import REF_K2, central_diff, random_point, relative_error


def wendland_reference(tau):
    """Textbook Wendland function (1 - t)^5_+ (8 t^2 + 5 t + 1)."""
    tau = np.asarray(tau, dtype=float)
    return np.where(tau < 1, (1 - tau) ** 5 * (8 * tau ** 2 + 5 * tau + 1), 0.0)


class TestWindow:
    def test_endpoints(self):
        assert wendland_window(0.0) == 1.0
        assert wendland_window(1.0) == 0.0
        assert wendland_window(3.7) == 0.0

    def test_midpoint(self):
        assert wendland_window(0.5) == pytest.approx(0.171875, rel=1e-15)

    def test_matches_textbook_form(self):
        tau = np.linspace(0, 1.5, 301)
        np.testing.assert_allclose(wendland_window(tau), wendland_reference(tau), atol=1e-15)

    def test_monotone_non_increasing(self):
        c = wendland_window(np.linspace(0, 1, 2001))
        assert np.all(np.diff(c) <= 1e-15)

    def test_derivative_matches_finite_difference(self):
        tau = np.linspace(0.01, 0.99, 50)
        fd = (wendland_window(tau + 1e-6) - wendland_window(tau - 1e-6)) / 2e-6
        np.testing.assert_allclose(window_derivative(tau), fd, atol=1e-8)

    def test_smooth_at_support_edge(self):
        # value and first derivative vanish from both sides
        assert abs(wendland_window(1 - 1e-4)) < 1e-18
        assert abs(window_derivative(1 - 1e-4)) < 1e-14

    @pytest.mark.parametrize("omega", [0.0, 1.0, 3.0, 7.5, 10.0, 20.0, 45.0])
    def test_spectral_density_non_negative(self, omega):
        # positive definiteness on the line (Bochner): the cosine transform is >= 0
        val, _ = integrate.quad(lambda t: math.cos(omega * t) * wendland_window(t), 0, 1,
                                limit=200)
        assert val > -1e-12

    def test_window_matrix_positive_definite(self):
        ts = np.arange(1.0, 301.0)
        d = np.abs(ts[:, None] - ts[None, :]) / math.exp(3.5)
        assert np.linalg.eigvalsh(wendland_window(d)).min() > -1e-10

    def test_negative_tau_rejected(self):
        with pytest.raises(DomainError):
            wendland_window(-0.1)


class TestTransforms:
    def test_erfinv_domain(self):
        assert erfinv_checked(0.0) == 0.0
        with pytest.raises(TransformOverflowError):
            erfinv_checked(1.0)
        with pytest.raises(TransformOverflowError):
            erfinv_checked(-1.0)

    def test_xi_zero_is_median_smoothness(self):
        spec = PriorSpec(((0, 1), (0, 1)), ((-0.5, 0.5),))
        nat = to_natural(HyperPoint((0.0, 0.0), (0.0,)), spec)
        assert nat.smoothness[0] == pytest.approx(math.e)

    def test_uniform_xi_gives_log_normal_smoothness(self):
        # flat prior in xi is equivalent to a log-normal prior on l
        spec = PriorSpec(((0, 1), (0, 1)), ((-0.5, 0.5),), mu=1.0, sigma_l=2.0)
        xs = np.random.default_rng(3).uniform(-0.5, 0.5, 4000)
        logs = [math.log(to_natural(HyperPoint((0.0, 0.0), (x,)), spec).smoothness[0])
                for x in xs]
        assert stats.kstest(logs, "norm", args=(1.0, 2.0)).pvalue > 1e-3

    def test_timescales_are_exponentials(self):
        spec = PriorSpec(((0, 5),) * 3, ((-0.5, 0.5),) * 2)
        nat = to_natural(HyperPoint((3.5, 1.5, 3.0), (0.0, 0.0), psi=math.log(2.0)), spec)
        np.testing.assert_allclose(nat.timescales, np.exp([3.5, 1.5, 3.0]))
        assert nat.sigma_f == pytest.approx(2.0)


class TestPriorSpec:
    def test_bounds_from_regular_grid(self):
        spec = PriorSpec.from_times(np.arange(1.0, 101.0), 2)
        assert spec.phi_bounds[0] == pytest.approx((0.0, math.log(99.0)))
        assert spec.phi_bounds[1] == pytest.approx((math.log(2.0), math.log(99.0)))
        assert spec.xi_bounds == ((-0.5, 0.5), (-0.5, 0.5))

    def test_min_gap_floor(self):
        spec = PriorSpec.from_times(np.arange(1.0, 101.0), 1, periodic_floor="min_gap")
        assert spec.phi_bounds[1][0] == pytest.approx(0.0)

    def test_nyquist_floor_falls_back_on_short_series(self):
        # 2 dt equals the span here, which would leave an empty periodic range
        spec = PriorSpec.from_times([0.0, 1.0, 2.0], 1)
        assert spec.phi_bounds[1] == pytest.approx((0.0, math.log(2.0)))

    def test_irregular_times_use_smallest_gap(self):
        spec = PriorSpec.from_times([0.0, 0.25, 3.0, 10.0], 1, periodic_floor="min_gap")
        assert spec.phi_bounds[0] == pytest.approx((math.log(0.25), math.log(10.0)))

    def test_degenerate_times_rejected(self):
        with pytest.raises(DomainError):
            PriorSpec.from_times([0.0], 1)
        with pytest.raises(DomainError):
            PriorSpec.from_times([0.0, 1.0], 1)

    def test_ordered_volume_halves_for_two_periods(self):
        spec = PriorSpec.from_times(np.arange(1.0, 51.0), 2)
        lo, hi = spec.bounds()
        assert spec.log_volume() == pytest.approx(np.sum(np.log(hi - lo)) - math.log(2.0))

    def test_ordered_volume_by_sampling(self):
        # fraction of the full box with T1 <= T2 <= T3 is 1/3!
        spec = PriorSpec(((0, 1),) + ((0, 2),) * 3, ((-0.5, 0.5),) * 3)
        u = np.random.default_rng(0).uniform(0, 2, size=(200_000, 3))
        frac = np.mean((u[:, 0] <= u[:, 1]) & (u[:, 1] <= u[:, 2]))
        full = 2.0 ** 3 * 1.0
        assert spec.volume() == pytest.approx(full * frac, rel=0.02)

    def test_full_mode_adds_psi(self):
        spec = PriorSpec.from_times(np.arange(10.0), 1)
        lo, hi = spec.bounds(full=True)
        assert lo.size == 4 and (lo[-1], hi[-1]) == pytest.approx(spec.psi_bounds)

    @pytest.mark.parametrize("key,check", [
        ("phi", lambda s: s.phi_bounds[1:] == ((0.5, 2.0), (0.5, 2.0))),
        ("phi0", lambda s: s.phi_bounds[0] == (0.5, 2.0)),
        ("phi2", lambda s: s.phi_bounds[1] == (0.5, 2.0)),
        ("xi", lambda s: s.xi_bounds == ((-0.4, 0.4), (-0.4, 0.4))),
        ("xi2", lambda s: s.xi_bounds[1] == (-0.4, 0.4) and s.xi_bounds[0] == (-0.5, 0.5)),
        ("psi", lambda s: s.psi_bounds == (-1.0, 1.0)),
    ])
    def test_override(self, key, check):
        spec = PriorSpec.from_times(np.arange(1.0, 101.0), 2)
        vals = {"xi": (-0.4, 0.4), "xi2": (-0.4, 0.4), "psi": (-1.0, 1.0)}.get(key, (0.5, 2.0))
        assert check(spec.override(key, *vals))

    def test_override_rejects_unknown_keys(self):
        spec = PriorSpec.from_times(np.arange(1.0, 101.0), 1)
        for key in ("phi5", "xi0", "nonsense"):
            with pytest.raises(UsageError):
                spec.override(key, 0.0, 1.0)

    def test_invalid_intervals(self):
        with pytest.raises(DomainError):
            PriorSpec(((1, 0), (0, 1)), ((-0.5, 0.5),))
        with pytest.raises(DomainError):
            PriorSpec(((0, 1), (0, 1)), ((-0.6, 0.5),))
        with pytest.raises(DomainError):
            PriorSpec(((0, 1), (0, 1), (0, 2)), ((-0.5, 0.5),) * 2)


finite = st.floats(-5, 5, allow_nan=False)
xis = st.floats(-0.49, 0.49, allow_nan=False)


class TestHyperPoint:
    @given(st.integers(0, 4).flatmap(lambda N: st.tuples(
        st.lists(finite, min_size=N + 1, max_size=N + 1),
        st.lists(xis, min_size=N, max_size=N),
        st.one_of(st.none(), finite))))
    def test_vector_round_trip(self, parts):
        phi, xi, psi = parts
        p = HyperPoint(phi, xi, psi)
        q = HyperPoint.from_vector(p.vector(), p.n_periodic, p.full)
        assert q == p

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            HyperPoint((1.0,), (0.0,))
        with pytest.raises(UsageError):
            HyperPoint.from_vector(np.zeros(4), 1)

    def test_coordinate_names(self):
        assert coordinate_names(2, full=True) == ["phi0", "phi1", "phi2", "xi1", "xi2", "psi"]

    def test_check_point(self):
        model = k2().for_times(np.arange(1.0, 101.0))
        model.check_point(REF_K2)
        with pytest.raises(DomainError, match="non-decreasing"):
            model.check_point(HyperPoint((3.5, 3.0, 1.5), (0.0, 0.0)))
        with pytest.raises(DomainError, match="phi0"):
            model.check_point(HyperPoint((9.0, 1.5, 3.0), (0.0, 0.0)))
        with pytest.raises(UsageError):
            k2().check_point(REF_K2)


class TestModels:
    def test_parse(self):
        assert parse_model("k1").n_periodic == 1
        assert parse_model("K2", 0.1).sigma_n == 0.1
        assert parse_model("periodic:3").n_periodic == 3
        for bad in ("k3", "periodic:x", ""):
            with pytest.raises(UsageError):
                parse_model(bad)

    def test_invalid_noise(self):
        with pytest.raises((DomainError, UsageError)):
            CovarianceModel(1, -0.1)


class TestKernelMatrix:
    def test_matches_elementwise_evaluation(self, backend, rng):
        ts = np.sort(rng.uniform(0, 40, 12))
        model = k2(0.05).for_times(ts)
        point = random_point(rng, model, full=True)
        K = kernel_matrix(model, point, ts)
        ref = np.array([[kernel_eval(model, point, a, b, same_sample=(i == j))
                         for j, b in enumerate(ts)] for i, a in enumerate(ts)])
        np.testing.assert_allclose(K, ref, rtol=1e-13, atol=1e-15)

    def test_symmetric_positive_definite(self, backend, k2_data_100):
        model, data = k2_data_100
        K = kernel_matrix(model, REF_K2, data.ts)
        np.testing.assert_array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() > 0.5 * model.sigma_n ** 2

    def test_diagonal_carries_noise(self):
        model = k1(0.1).for_times(np.arange(5.0))
        K = kernel_matrix(model, HyperPoint((1.0, 1.0), (0.0,), math.log(3.0)), np.arange(5.0))
        np.testing.assert_allclose(np.diag(K), 9.0 * (1 + 0.01))

    def test_support_beyond_window_is_zero(self):
        model = k1().for_times(np.arange(0.0, 20.0))
        point = HyperPoint((math.log(5.0), 1.0), (0.0,))
        K = kernel_matrix(model, point, np.arange(0.0, 20.0))
        assert K[0, 5] == 0.0 and K[0, 4] > 0.0

    def test_cross_covariance_without_noise(self):
        ts = np.arange(1.0, 31.0)
        model = k2().for_times(ts)
        Kx = cross_covariance(model, REF_K2, ts, ts)
        K = kernel_matrix(model, REF_K2, ts)
        np.testing.assert_allclose(Kx + model.sigma_n ** 2 * np.eye(ts.size), K, atol=1e-14)

    def test_periods_below_nyquist_alias_on_a_grid(self):
        # with integer lags, sin^2(pi d / T) = sin^2(pi d / T') for 1/T + 1/T' = 1
        ts = np.arange(1.0, 41.0)
        model = k1().for_times(ts, periodic_floor="min_gap")
        T = 1.25
        Tp = 1.0 / (1.0 - 1.0 / T)
        Ka = kernel_matrix(model, HyperPoint((3.0, math.log(T)), (0.1,)), ts)
        Kb = kernel_matrix(model, HyperPoint((3.0, math.log(Tp)), (0.1,)), ts)
        np.testing.assert_allclose(Ka, Kb, atol=1e-12)


class TestKernelPartials:
    @pytest.mark.parametrize("model_fn,full", [(k1, False), (k2, False), (k2, True)])
    def test_first_order_matches_finite_difference(self, backend, rng, model_fn, full):
        ts = np.sort(rng.uniform(0, 30, 9))
        model = model_fn().for_times(ts)
        point = random_point(rng, model, full)
        x = point.vector()
        N = model.n_periodic

        def K_at(v):
            return kernel_matrix(model, HyperPoint.from_vector(v, N, full), ts)

        parts = kernel_partials(model, point, ts, order=1)
        assert parts.names == tuple(model.coordinate_names(full))
        assert relative_error(parts.first, central_diff(K_at, x, 1e-6)) < 1e-6

    @pytest.mark.parametrize("model_fn,full", [(k1, True), (k2, False)])
    def test_second_order_matches_finite_difference(self, backend, rng, model_fn, full):
        ts = np.sort(rng.uniform(0, 30, 8))
        model = model_fn().for_times(ts)
        point = random_point(rng, model, full)
        N = model.n_periodic

        def D1_at(v):
            return kernel_partials(model, HyperPoint.from_vector(v, N, full), ts).first

        parts = kernel_partials(model, point, ts, order=2)
        assert relative_error(parts.second, central_diff(D1_at, point.vector(), 1e-6)) < 1e-5
        np.testing.assert_allclose(parts.second, np.swapaxes(parts.second, 0, 1), atol=1e-12)

    def test_order_validated(self):
        model = k1().for_times(np.arange(5.0))
        with pytest.raises(UsageError):
            kernel_partials(model, HyperPoint((1.0, 1.0), (0.0,)), np.arange(5.0), order=3)


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="compiled backend not built")
class TestBackendAgreement:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 25), N=st.integers(0, 3),
           window=st.booleans())
    def test_kernel_arrays_agree(self, seed, n, N, window):
        rng = np.random.default_rng(seed)
        ts = np.sort(rng.uniform(0, 50, n))
        T = np.exp(rng.uniform(0, 4, N + 1))
        a, da, dda = rng.uniform(0, 3, (3, N))
        py = kernels.BACKENDS["python"].kernel_arrays(ts, T, a, da, dda, 1e-4, window, 2)
        cc = kernels.BACKENDS["compiled"].kernel_arrays(ts, T, a, da, dda, 1e-4, window, 2)
        for x, y in zip(py, cc):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-14)

    def test_window_values_agree(self):
        from gptrain import _kernels_ext, _kernels_py

        ts = np.linspace(0, 10, 40)
        T = np.array([7.0])
        empty = np.zeros(0)
        cc = _kernels_ext.kernel_arrays(ts, T, empty, empty, empty, 0.0, True, 0)[0]
        d = np.abs(ts[:, None] - ts[None, :]) / 7.0
        np.testing.assert_allclose(cc, _kernels_py.window_values(d)[0], atol=1e-15)
