import dataclasses
import itertools
import math
import os
from unittest.mock import patch

import numpy as np
from django.test import SimpleTestCase, override_settings, tag
from scipy.linalg import LinAlgError, eigvalsh, toeplitz
from scipy.optimize import minimize_scalar
from scipy.special import i0, ive

from estimation import engine
from estimation.circular import (
    VonMises,
    bessel_ratio,
    bessel_ratios,
    circular_moment,
    log_i0,
    vm_log_pdf,
    wrap_angle,
)
from estimation.engine import (
    ACTIVATE,
    DEACTIVATE,
    EstimatorFailure,
    EstimatorOptions,
    EstimatorState,
    apply_flip,
    compute_coupling,
    fit_frequency_posterior,
    flip_delta,
    frequency_message,
    initialize,
    lag_moments,
    ln_evidence,
    lower_bound,
    run,
    support_mask,
    update_hyperparams,
    update_support,
    update_weights,
)
from estimation.model import (
    ComponentPosterior,
    HyperParams,
    MeasurementSet,
    PriorConfig,
    PriorMatching,
    WeightPosterior,
    steering_matrix,
    steering_vector,
    wrap_distance,
)
from estimation.parallel import (
    SnapshotKernel,
    combine_deltas,
    combine_hyperparams,
    run_parallel,
    snapshot_message,
)
from estimation.sequential import GroupPlan, iter_sequential, partition, run_sequential

FULL_ACCEPTANCE = os.getenv("MVALSE_FULL_ACCEPTANCE", "").lower() in {"1", "true", "yes"}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _exact_component(theta, M):
    """Component whose moment vector is the exact steering vector."""
    return ComponentPosterior(
        eta=np.zeros(M, dtype=np.complex128),
        fitted=VonMises(theta, 0.0),
        a_hat=steering_vector(theta, M),
    )


def _random_state(rng, N=8, M=16, L=4, active=(), hyper=None):
    Y = rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L))
    measurements = MeasurementSet(Y)
    components = [
        ComponentPosterior.from_fit(
            np.zeros(M, dtype=np.complex128),
            VonMises(rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 50.0)),
        )
        for _ in range(N)
    ]
    if hyper is None:
        hyper = HyperParams(
            nu=rng.uniform(0.2, 2.0),
            lambda_=rng.uniform(0.05, 0.95),
            tau=rng.uniform(0.2, 3.0),
        )
    coupling = compute_coupling(components, measurements)
    return EstimatorState(
        measurements=measurements,
        priors=[VonMises.uniform()] * N,
        components=components,
        coupling=coupling,
        weights=update_weights(coupling, active, hyper),
        hyper=hyper,
        nu_floor=1e-12,
    )


def _tones(rng, thetas, M, L, snr_db):
    A = steering_matrix(thetas, M)
    W = 1.0 + np.sqrt(0.05) * (rng.standard_normal((len(thetas), L)) + 1j * rng.standard_normal((len(thetas), L)))
    X = A @ W
    U = rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L))
    U *= np.linalg.norm(X) / (np.linalg.norm(U) * 10 ** (snr_db / 20))
    return MeasurementSet(X + U), X


def _separated_thetas(rng, K, separation):
    while True:
        thetas = rng.uniform(-np.pi, np.pi, K)
        if all(wrap_distance(a, b) > separation for a, b in itertools.combinations(thetas, 2)):
            return thetas


def _log_density(theta, eta, prior):
    m = np.arange(len(eta))
    return prior.concentration * np.cos(theta - prior.mean_direction) + float(
        np.real(np.sum(np.conj(eta) * np.exp(1j * m * theta)))
    )


# ---------------------------------------------------------------------------
# circular
# ---------------------------------------------------------------------------

class BesselRatioTests(SimpleTestCase):
    def test_order_zero_is_exactly_one(self):
        self.assertEqual(bessel_ratio(0, 7.3), 1.0)

    def test_zero_concentration(self):
        self.assertEqual(bessel_ratio(1, 0.0), 0.0)

    def test_known_value(self):
        self.assertAlmostEqual(bessel_ratio(1, 2.0), 0.6977746579640081, places=12)

    def test_negative_arguments_rejected(self):
        with self.assertRaises(ValueError):
            bessel_ratio(1, -0.5)
        with self.assertRaises(ValueError):
            bessel_ratio(-1, 2.0)

    def test_matches_scaled_bessel_functions(self):
        for kappa in (0.01, 0.5, 2.0, 20.0, 200.0, 700.0, 5000.0):
            expected = ive(np.arange(33), kappa) / ive(0, kappa)
            np.testing.assert_allclose(bessel_ratios(kappa, 32), expected, rtol=1e-11, atol=1e-300)

    def test_monotone_and_bounded(self):
        for kappa in (0.0, 0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e6):
            ratios = bessel_ratios(kappa, 64)
            self.assertEqual(ratios[0], 1.0)
            self.assertTrue(np.all(ratios >= 0.0))
            self.assertTrue(np.all(np.diff(ratios) <= 0.0), f"not monotone at kappa={kappa}")
            if kappa > 0:
                self.assertTrue(np.all(ratios[1:] < 1.0))

    def test_huge_concentration_stays_finite(self):
        value = bessel_ratio(1, 1e8)
        self.assertTrue(1.0 - 1e-7 <= value < 1.0)
        self.assertAlmostEqual(value, 1.0 - 0.5e-8, delta=1e-12)


class CircularMomentTests(SimpleTestCase):
    def test_uniform_has_zero_resultant(self):
        self.assertEqual(circular_moment(VonMises(np.pi / 2, 0.0), 1), 0j)

    def test_huge_concentration(self):
        value = circular_moment(VonMises(0.0, 1e8), 1)
        self.assertAlmostEqual(value.imag, 0.0)
        self.assertTrue(1.0 - 1e-7 <= value.real <= 1.0)

    def test_second_moment(self):
        expected = np.exp(0.6j) * ive(2, 2.0) / ive(0, 2.0)
        self.assertAlmostEqual(circular_moment(VonMises(0.3, 2.0), 2), expected, places=12)

    def test_order_must_be_positive(self):
        with self.assertRaises(ValueError):
            circular_moment(VonMises(0.0, 1.0), 0)

    def test_matches_quadrature(self):
        grid = -np.pi + 2 * np.pi * np.arange(1 << 14) / (1 << 14)
        for kappa in (0.0, 0.5, 2.0, 20.0, 200.0):
            vm = VonMises(0.7, kappa)
            density = np.exp(vm_log_pdf(grid, vm))
            for m in range(1, 33):
                quadrature = np.mean(np.exp(1j * m * grid) * density) * 2 * np.pi
                self.assertLess(abs(circular_moment(vm, m) - quadrature), 1e-8, f"kappa={kappa} m={m}")

    def test_magnitude_nondecreasing_in_concentration(self):
        kappas = np.linspace(0.0, 50.0, 101)
        for m in (1, 3, 10):
            magnitudes = [abs(circular_moment(VonMises(-1.0, k), m)) for k in kappas]
            self.assertTrue(np.all(np.diff(magnitudes) >= 0.0))


class VonMisesDensityTests(SimpleTestCase):
    def test_uniform_density(self):
        self.assertAlmostEqual(vm_log_pdf(0.4, VonMises(0.4, 0.0)), -math.log(2 * math.pi))
        self.assertAlmostEqual(vm_log_pdf(0.4 + math.pi, VonMises(0.4, 0.0)), -math.log(2 * math.pi))

    def test_known_value(self):
        expected = 2.0 - math.log(2 * math.pi) - math.log(2.2795853023360673)
        self.assertAlmostEqual(vm_log_pdf(0.0, VonMises(0.0, 2.0)), expected, places=12)

    def test_log_i0_is_overflow_safe(self):
        self.assertAlmostEqual(log_i0(3.0), math.log(i0(3.0)), places=12)
        self.assertTrue(math.isfinite(log_i0(1e8)))

    def test_density_integrates_to_one(self):
        grid = -np.pi + 2 * np.pi * np.arange(1 << 14) / (1 << 14)
        for kappa in (0.0, 1.0, 10.0, 100.0):
            total = np.mean(np.exp(vm_log_pdf(grid, VonMises(1.0, kappa)))) * 2 * np.pi
            self.assertAlmostEqual(total, 1.0, delta=1e-8)

    def test_invariants_enforced(self):
        with self.assertRaises(ValueError):
            VonMises(0.0, -1.0)
        self.assertAlmostEqual(VonMises(3 * math.pi / 2, 1.0).mean_direction, -math.pi / 2)

    def test_wrap_angle_range(self):
        self.assertEqual(wrap_angle(math.pi), -math.pi)
        values = wrap_angle(np.linspace(-20, 20, 1001))
        self.assertTrue(np.all(values >= -math.pi) and np.all(values < math.pi))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ModelTests(SimpleTestCase):
    def test_steering_vector_examples(self):
        np.testing.assert_array_equal(steering_vector(0.0, 4), np.ones(4))
        np.testing.assert_allclose(steering_vector(math.pi, 3), [1, -1, 1], atol=1e-15)
        np.testing.assert_allclose(steering_vector(0.7, 2), [1, np.exp(0.7j)])
        np.testing.assert_allclose(np.abs(steering_vector(1.234, 50)), 1.0, atol=1e-15)

    def test_steering_vector_is_periodic(self):
        np.testing.assert_allclose(steering_vector(0.3 + 2 * math.pi, 16), steering_vector(0.3, 16), atol=1e-12)

    def test_wrap_distance_examples(self):
        self.assertAlmostEqual(wrap_distance(0.0, 2 * math.pi), 0.0)
        self.assertAlmostEqual(wrap_distance(-math.pi + 0.1, math.pi - 0.1), 0.2)
        self.assertAlmostEqual(wrap_distance(0.5, 1.0), 0.5)

    def test_wrap_distance_is_a_metric(self):
        rng = np.random.default_rng(3)
        for a, b, c in rng.uniform(-10, 10, (200, 3)):
            self.assertAlmostEqual(wrap_distance(a, b), wrap_distance(b, a))
            self.assertLessEqual(wrap_distance(a, c), wrap_distance(a, b) + wrap_distance(b, c) + 1e-12)
            self.assertLessEqual(wrap_distance(a, b), math.pi)

    def test_measurement_set_validation(self):
        with self.assertRaises(ValueError):
            MeasurementSet(np.ones((1, 3)))
        with self.assertRaises(ValueError):
            MeasurementSet(np.array([[1.0, np.nan], [0.0, 1.0]]))
        column = MeasurementSet(np.arange(4))
        self.assertEqual((column.M, column.L), (4, 1))

    def test_grid_priors(self):
        priors = PriorConfig.grid(20, 1e4)
        self.assertEqual(priors.N, 20)
        for i, prior in enumerate(priors.priors, start=1):
            self.assertAlmostEqual(prior.mean_direction, (2 * i - 1 - 20) / 21 * math.pi)
            self.assertEqual(prior.concentration, 1e4)
        self.assertFalse(PriorConfig.uninformative(5).informative)

    def test_hyperparameter_validation(self):
        with self.assertRaises(ValueError):
            HyperParams(nu=0.0, lambda_=0.5, tau=1.0)
        with self.assertRaises(ValueError):
            HyperParams(nu=1.0, lambda_=1.0, tau=1.0)
        self.assertEqual(HyperParams(nu=1.0, lambda_=0.5, tau=1.0).log_odds, 0.0)


# ---------------------------------------------------------------------------
# engine: coupling, messages, frequency fits
# ---------------------------------------------------------------------------

class CouplingTests(SimpleTestCase):
    def test_single_component_diagonal_forced(self):
        comp = ComponentPosterior.from_fit(np.zeros(6), VonMises(0.2, 3.0))
        coupling = compute_coupling([comp], MeasurementSet(np.ones((6, 2))))
        np.testing.assert_array_equal(coupling.J, [[6]])

    def test_exact_steering_vectors(self):
        M, thetas = 8, [0.3, -1.1, 2.0]
        comps = [_exact_component(t, M) for t in thetas]
        coupling = compute_coupling(comps, MeasurementSet(np.zeros((M, 1))))
        for i, j in itertools.product(range(3), repeat=2):
            expected = M if i == j else sum(np.exp(1j * m * (thetas[j] - thetas[i])) for m in range(M))
            self.assertAlmostEqual(coupling.J[i, j], expected, places=10)

    def test_matched_row_of_H(self):
        M, w = 10, np.array([1 + 1j, -0.5, 2j])
        Y = np.outer(steering_vector(0.8, M), w)
        coupling = compute_coupling([_exact_component(0.8, M)], MeasurementSet(Y))
        np.testing.assert_allclose(coupling.H[0], M * w, atol=1e-12)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            compute_coupling([_exact_component(0.1, 5)], MeasurementSet(np.zeros((6, 1))))


class FrequencyMessageTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.M, self.L = 8, 3
        self.Y = MeasurementSet(self.rng.standard_normal((self.M, self.L)) + 1j * self.rng.standard_normal((self.M, self.L)))

    def test_single_active_component(self):
        comps = [_exact_component(0.4, self.M)]
        w = self.rng.standard_normal((1, self.L)) + 0j
        weights = WeightPosterior((0,), w, np.array([[0.3]], dtype=complex))
        eta = frequency_message(0, self.Y, comps, weights, nu=0.5)
        np.testing.assert_allclose(eta, (2 / 0.5) * self.Y.Y @ w[0].conj())

    def test_linear_in_inverse_noise(self):
        state = _random_state(self.rng, N=4, M=self.M, L=self.L, active=(0, 2, 3))
        eta = frequency_message(2, state.measurements, state.components, state.weights, 0.7)
        halved = frequency_message(2, state.measurements, state.components, state.weights, 1.4)
        np.testing.assert_allclose(halved, eta / 2)

    def test_orthogonal_components_with_diagonal_covariance(self):
        comps = [_exact_component(0.0, self.M), _exact_component(2 * math.pi / self.M, self.M)]
        W = self.rng.standard_normal((2, self.L)) + 1j * self.rng.standard_normal((2, self.L))
        weights = WeightPosterior((0, 1), W, np.diag([0.2, 0.4]).astype(complex))
        eta = frequency_message(0, self.Y, comps, weights, nu=0.9)
        expected = (2 / 0.9) * (self.Y.Y - np.outer(comps[1].a_hat, W[1])) @ W[0].conj()
        np.testing.assert_allclose(eta, expected, atol=1e-12)

    def test_inactive_component_rejected(self):
        weights = WeightPosterior((0,), np.ones((1, self.L), dtype=complex), np.eye(1, dtype=complex))
        with self.assertRaises(ValueError):
            frequency_message(1, self.Y, [_exact_component(0.0, self.M)] * 2, weights, 1.0)


class FrequencyPosteriorTests(SimpleTestCase):
    def test_no_data_returns_prior(self):
        prior = VonMises(1.2, 30.0)
        comp = fit_frequency_posterior(np.zeros(8, dtype=complex), prior)
        self.assertEqual(comp.fitted, prior)

    def test_degenerate_uniform(self):
        comp = fit_frequency_posterior(np.zeros(5, dtype=complex), VonMises(2.0, 0.0))
        self.assertEqual((comp.theta, comp.kappa), (0.0, 0.0))
        np.testing.assert_array_equal(comp.a_hat, [1, 0, 0, 0, 0])

    def test_single_harmonic_is_exact(self):
        eta = np.array([0.7 - 0.2j, 3.0 * np.exp(-2.1j)])
        comp = fit_frequency_posterior(eta, VonMises.uniform())
        self.assertAlmostEqual(comp.theta, np.angle(eta[1]), places=10)
        self.assertAlmostEqual(comp.kappa, 3.0, places=9)

    def test_symmetric_mode_and_curvature(self):
        M, theta0, c = 12, -0.45, 0.8
        comp = fit_frequency_posterior(c * steering_vector(theta0, M), VonMises.uniform())
        self.assertLess(wrap_distance(comp.theta, theta0), 1e-10)
        self.assertAlmostEqual(comp.kappa / (c * np.sum(np.arange(M) ** 2)), 1.0, places=9)

    def test_moment_vector_invariants(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            eta = rng.standard_normal(10) + 1j * rng.standard_normal(10)
            comp = fit_frequency_posterior(eta, VonMises(rng.uniform(-3, 3), rng.uniform(0, 5)))
            self.assertEqual(comp.a_hat[0], 1.0)
            self.assertTrue(np.all(np.abs(comp.a_hat) <= 1.0 + 1e-15))
            np.testing.assert_allclose(comp.a_hat, comp.fitted.moments(10))

    def test_mode_matches_dense_search(self):
        rng = np.random.default_rng(17)
        dense = -np.pi + 2 * np.pi * np.arange(1 << 16) / (1 << 16)
        spacing = dense[1] - dense[0]
        for trial in range(20):
            M = int(rng.integers(2, 9))
            eta = 4.0 * (rng.standard_normal(M) + 1j * rng.standard_normal(M))
            prior = VonMises(rng.uniform(-3, 3), rng.uniform(0, 3)) if trial % 2 else VonMises.uniform()
            values = prior.concentration * np.cos(dense - prior.mean_direction) + np.real(
                np.exp(1j * np.outer(dense, np.arange(M))) @ np.conj(eta)
            )
            start = dense[int(np.argmax(values))]
            refined = minimize_scalar(
                lambda t: -_log_density(t, eta, prior),
                bounds=(start - 2 * spacing, start + 2 * spacing),
                method="bounded",
                options={"xatol": 1e-12},
            )
            comp = fit_frequency_posterior(eta, prior)
            self.assertLess(wrap_distance(comp.theta, refined.x), 1e-6, f"trial {trial}")


# ---------------------------------------------------------------------------
# engine: weights, flips and evidence
# ---------------------------------------------------------------------------

class WeightUpdateTests(SimpleTestCase):
    def test_empty_support(self):
        state = _random_state(np.random.default_rng(0), N=3, M=6, L=2)
        weights = update_weights(state.coupling, (), state.hyper)
        self.assertEqual(weights.W_hat.shape, (0, 2))
        self.assertEqual(weights.C_hat.shape, (0, 0))

    def test_single_exact_component(self):
        M, w = 16, np.array([1.0 + 0.5j, -2.0, 0.3j])
        Y = MeasurementSet(np.outer(steering_vector(1.3, M), w))
        hyper = HyperParams(nu=0.2, lambda_=0.5, tau=0.8)
        coupling = compute_coupling([_exact_component(1.3, M)], Y)
        weights = update_weights(coupling, (0,), hyper)
        ratio = hyper.nu / hyper.tau
        np.testing.assert_allclose(weights.W_hat[0], M / (M + ratio) * w, atol=1e-12)
        self.assertAlmostEqual(weights.C_hat[0, 0], hyper.nu / (M + ratio))

    def test_covariance_is_hermitian_positive_definite(self):
        state = _random_state(np.random.default_rng(1), active=(0, 2, 5, 7))
        C = state.weights.C_hat
        np.testing.assert_allclose(C, C.conj().T)
        self.assertTrue(np.all(eigvalsh(C) > 0))

    def test_chain_of_activations_matches_direct_inverse(self):
        state = _random_state(np.random.default_rng(2))
        weights = WeightPosterior.empty(state.L)
        for k in (4, 1, 6, 0):
            weights = apply_flip(state.coupling, weights, flip_delta(k, state.coupling, weights, state.hyper), state.hyper.nu)
        direct = update_weights(state.coupling, (0, 1, 4, 6), state.hyper)
        self.assertEqual(weights.active, (0, 1, 4, 6))
        np.testing.assert_allclose(weights.C_hat, direct.C_hat, atol=1e-8)
        np.testing.assert_allclose(weights.W_hat, direct.W_hat, atol=1e-8)


class FlipDeltaTests(SimpleTestCase):
    def test_activation_from_empty(self):
        state = _random_state(np.random.default_rng(4))
        nu, tau, M = state.hyper.nu, state.hyper.tau, state.M
        flip = flip_delta(3, state.coupling, state.weights, state.hyper)
        self.assertEqual(flip.direction, ACTIVATE)
        self.assertAlmostEqual(flip.v, nu / (M + nu / tau))
        np.testing.assert_allclose(flip.u, flip.v * state.coupling.H[3].conj() / nu)
        self.assertAlmostEqual(flip.delta, ln_evidence(support_mask([3], state.N), state.coupling, state.hyper), places=8)

    def test_activate_then_deactivate(self):
        state = _random_state(np.random.default_rng(6), active=(1, 4))
        original = state.weights
        act = flip_delta(2, state.coupling, original, state.hyper)
        grown = apply_flip(state.coupling, original, act, state.hyper.nu)
        deact = flip_delta(2, state.coupling, grown, state.hyper)
        self.assertEqual(deact.direction, DEACTIVATE)
        self.assertAlmostEqual(deact.delta, -act.delta, places=8)
        back = apply_flip(state.coupling, grown, deact, state.hyper.nu)
        self.assertEqual(back.active, original.active)
        np.testing.assert_allclose(back.C_hat, original.C_hat, atol=1e-10)
        np.testing.assert_allclose(back.W_hat, original.W_hat, atol=1e-10)

    def test_even_odds_have_no_prior_term(self):
        hyper = HyperParams(nu=1.0, lambda_=0.5, tau=1.0)
        state = _random_state(np.random.default_rng(8), hyper=hyper)
        flip = flip_delta(0, state.coupling, state.weights, hyper)
        expected = state.L * math.log(flip.v / hyper.tau) + float(np.vdot(flip.u, flip.u).real) / flip.v
        self.assertAlmostEqual(flip.delta, expected, places=12)

    def test_direction_must_match_membership(self):
        state = _random_state(np.random.default_rng(9), active=(0,))
        with self.assertRaises(ValueError):
            flip_delta(0, state.coupling, state.weights, state.hyper, direction=ACTIVATE)

    def test_delta_matches_evidence_difference(self):
        rng = np.random.default_rng(21)
        for trial in range(200):
            N = int(rng.integers(2, 13))
            L = (1, 4)[trial % 2]
            active = tuple(sorted(rng.choice(N, size=int(rng.integers(0, N)), replace=False)))
            state = _random_state(rng, N=N, M=16, L=L, active=active)
            base = ln_evidence(support_mask(active, N), state.coupling, state.hyper)
            for k in range(N):
                flipped = tuple(sorted(set(active) ^ {k}))
                expected = ln_evidence(support_mask(flipped, N), state.coupling, state.hyper) - base
                delta = flip_delta(k, state.coupling, state.weights, state.hyper).delta
                self.assertLessEqual(abs(delta - expected), 1e-8 * max(1.0, abs(expected)), f"trial {trial} k={k}")

    def test_rank_one_updates_track_direct_solution(self):
        rng = np.random.default_rng(22)
        for trial in range(100):
            state = _random_state(rng, N=10, M=16, L=3)
            weights = state.weights
            for k in rng.integers(0, 10, size=10):
                flip = flip_delta(int(k), state.coupling, weights, state.hyper)
                weights = apply_flip(state.coupling, weights, flip, state.hyper.nu)
                direct = update_weights(state.coupling, weights.active, state.hyper)
                self.assertLessEqual(np.max(np.abs(weights.C_hat - direct.C_hat), initial=0.0), 1e-8)
                self.assertLessEqual(np.max(np.abs(weights.W_hat - direct.W_hat), initial=0.0), 1e-8)


class EvidenceTests(SimpleTestCase):
    def test_empty_support_scores_zero(self):
        state = _random_state(np.random.default_rng(30))
        self.assertEqual(ln_evidence(np.zeros(state.N, dtype=bool), state.coupling, state.hyper), 0.0)

    def test_singleton_closed_form(self):
        hyper = HyperParams(nu=0.6, lambda_=0.5, tau=1.7)
        state = _random_state(np.random.default_rng(31), hyper=hyper)
        M, L, ratio = state.M, state.L, hyper.nu / hyper.tau
        h = state.coupling.H[2]
        expected = -L * math.log(M + ratio) + float(np.vdot(h, h).real) / (hyper.nu * (M + ratio)) + L * math.log(ratio)
        self.assertAlmostEqual(ln_evidence(support_mask([2], state.N), state.coupling, hyper), expected, places=9)

    def test_mask_and_indices_agree(self):
        state = _random_state(np.random.default_rng(32))
        mask = np.zeros(state.N, dtype=bool)
        mask[[1, 5]] = True
        self.assertEqual(
            ln_evidence(mask, state.coupling, state.hyper),
            ln_evidence(support_mask([5, 1], state.N), state.coupling, state.hyper),
        )

    def test_integer_mask_reads_as_binary_vector(self):
        state = _random_state(np.random.default_rng(33), N=8)
        ints = np.array([0, 1, 0, 0, 0, 1, 0, 0])
        self.assertEqual(
            ln_evidence(ints, state.coupling, state.hyper),
            ln_evidence(ints.astype(bool), state.coupling, state.hyper),
        )
        self.assertEqual(
            ln_evidence(ints.astype(float), state.coupling, state.hyper),
            ln_evidence(support_mask([1, 5], 8), state.coupling, state.hyper),
        )

    def test_support_must_be_binary_of_length_n(self):
        state = _random_state(np.random.default_rng(34), N=8)
        with self.assertRaises(ValueError):
            ln_evidence([1, 5], state.coupling, state.hyper)
        with self.assertRaises(ValueError):
            ln_evidence(np.array([0, 2, 0, 0, 0, 1, 0, 0]), state.coupling, state.hyper)


class _AlwaysImprovingKernel(engine.BatchKernel):
    """Reports every flip as an improvement, so the search never settles."""

    def flip_deltas(self, state, weights, candidates):
        return [dataclasses.replace(flip, delta=1.0) for flip in super().flip_deltas(state, weights, candidates)]


class SupportSearchTests(SimpleTestCase):
    def test_flip_count_is_capped(self):
        state = _random_state(np.random.default_rng(43), N=5)
        with patch("estimation.engine.apply_flip", wraps=engine.apply_flip) as spy:
            with self.assertLogs("estimation.engine", "WARNING") as logs:
                update_support(state, EstimatorOptions(), kernel=_AlwaysImprovingKernel())
        self.assertEqual(spy.call_count, engine.MAX_FLIPS_PER_COMPONENT * 5)
        self.assertIn("without settling", logs.output[0])

    def test_zero_data_keeps_empty_support(self):
        state = initialize(MeasurementSet(np.zeros((8, 2))), PriorConfig.uninformative(5), EstimatorOptions())
        weights = update_support(state, EstimatorOptions())
        self.assertEqual(weights.active, ())

    def test_noiseless_single_tone_activates_one_component(self):
        M = 16
        Y = MeasurementSet(np.outer(steering_vector(0.9, M), [1.0 + 0.3j, -0.7]))
        state = initialize(Y, PriorConfig.uninformative(8), EstimatorOptions())
        weights = update_support(state, EstimatorOptions())
        self.assertEqual(weights.active, (0,))
        self.assertLess(wrap_distance(state.components[0].theta, 0.9), 1e-6)

    def test_evidence_increases_with_every_flip(self):
        rng = np.random.default_rng(40)
        Y, _ = _tones(rng, [-1.0, 0.4, 2.2], 16, 4, 5.0)
        state = initialize(Y, PriorConfig.uninformative(12), EstimatorOptions())
        with patch("estimation.engine.apply_flip", wraps=engine.apply_flip) as spy:
            update_support(state, EstimatorOptions())
        supports = [()] + [call.args[1].active for call in spy.call_args_list[1:]] + [state.weights.active]
        scores = [ln_evidence(support_mask(s, state.N), state.coupling, state.hyper) for s in supports]
        self.assertGreater(spy.call_count, 0)
        self.assertLessEqual(spy.call_count, 10 * state.N)
        self.assertTrue(all(b > a for a, b in zip(scores, scores[1:])))

    def test_greedy_result_is_a_local_maximum(self):
        rng = np.random.default_rng(41)
        N = 8
        for instance in range(50):
            state = _random_state(rng, N=N, M=12, L=2)
            thetas = _separated_thetas(rng, 2, 0.5)
            X = steering_matrix(thetas, 12) @ (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
            state.measurements = MeasurementSet(state.measurements.Y * 0.3 + 2.0 * X)
            state.coupling = compute_coupling(state.components, state.measurements)
            update_support(state, EstimatorOptions())
            scores = {
                support: ln_evidence(support_mask(support, N), state.coupling, state.hyper)
                for r in range(N + 1)
                for support in itertools.combinations(range(N), r)
            }
            final = state.weights.active
            self.assertGreaterEqual(scores[final], 0.0)
            for k in range(N):
                neighbour = tuple(sorted(set(final) ^ {k}))
                self.assertLessEqual(scores[neighbour], scores[final] + 1e-8, f"instance {instance} k={k}")

    def test_no_deactivate_only_grows(self):
        state = _random_state(np.random.default_rng(42), active=(0, 1, 2, 3))
        update_support(state, EstimatorOptions(deactivate=False))
        self.assertTrue({0, 1, 2, 3} <= set(state.weights.active))

    def test_fixed_support_hook(self):
        state = _random_state(np.random.default_rng(43))
        update_support(state, EstimatorOptions(fixed_support_size=3))
        self.assertEqual(state.weights.active, (0, 1, 2))


class HyperparameterTests(SimpleTestCase):
    def test_empty_support(self):
        state = _random_state(np.random.default_rng(50))
        hyper = update_hyperparams(state)
        Y = state.measurements.Y
        self.assertAlmostEqual(hyper.nu, np.linalg.norm(Y) ** 2 / Y.size)
        self.assertEqual(hyper.tau, state.hyper.tau)
        self.assertEqual(hyper.lambda_, 1e-3)

    def test_activation_ratio(self):
        state = _random_state(np.random.default_rng(51), N=20, active=(2, 7, 11))
        self.assertAlmostEqual(update_hyperparams(state).lambda_, 0.15)

    def test_singleton_with_exact_moments(self):
        rng = np.random.default_rng(52)
        M, L = 12, 3
        Y = MeasurementSet(rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L)))
        comps = [_exact_component(0.5, M)]
        hyper = HyperParams(nu=0.4, lambda_=0.5, tau=1.1)
        coupling = compute_coupling(comps, Y)
        state = EstimatorState(Y, [VonMises.uniform()], comps, coupling,
                               update_weights(coupling, (0,), hyper), hyper, nu_floor=1e-12)
        residual = Y.Y - np.outer(comps[0].a_hat, state.weights.W_hat[0])
        expected = np.linalg.norm(residual) ** 2 / (M * L) + state.weights.C_hat[0, 0].real
        self.assertAlmostEqual(update_hyperparams(state).nu, expected, places=12)
        W, C = state.weights.W_hat, state.weights.C_hat
        self.assertAlmostEqual(
            update_hyperparams(state).tau,
            (np.linalg.norm(W) ** 2 + L * C[0, 0].real) / L,
            places=12,
        )

    def test_updates_are_stationary_points_of_the_bound(self):
        rng = np.random.default_rng(53)
        for _ in range(10):
            state = _random_state(rng, N=10, active=(1, 3, 5, 8))
            state.hyper = update_hyperparams(state)
            best = lower_bound(state)
            for factor in (0.99, 1.01):
                for field in ("nu", "tau"):
                    perturbed = HyperParams(**{**{"nu": state.hyper.nu, "lambda_": state.hyper.lambda_, "tau": state.hyper.tau},
                                               field: getattr(state.hyper, field) * factor})
                    self.assertLess(lower_bound(state, perturbed), best)


class InitializationTests(SimpleTestCase):
    def test_lag_moments_two_samples(self):
        Y = np.array([[1 + 1j], [2 - 1j]])
        gamma = lag_moments(Y)
        self.assertAlmostEqual(gamma[1], Y[1, 0] * np.conj(Y[0, 0]) / 2)
        self.assertAlmostEqual(gamma[0], np.linalg.norm(Y) ** 2 / 2)

    def test_noise_and_weight_variance(self):
        rng = np.random.default_rng(60)
        M, L, N = 12, 3, 10
        Y = MeasurementSet(rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L)))
        state = initialize(Y, PriorConfig.uninformative(N), EstimatorOptions())
        gamma = lag_moments(Y.Y)
        nu = np.mean(eigvalsh(toeplitz(gamma))[:3]) / L
        self.assertAlmostEqual(state.hyper.nu, nu, places=10)
        self.assertEqual(state.hyper.lambda_, 0.5)
        self.assertAlmostEqual(state.hyper.tau, (np.linalg.norm(Y.Y) ** 2 / M - L * nu) / (0.5 * N), places=10)
        self.assertEqual(state.weights.active, ())
        self.assertEqual(len(state.components), N)

    def test_zero_data_floors_noise(self):
        state = initialize(MeasurementSet(np.zeros((6, 2))), PriorConfig.uninformative(4), EstimatorOptions())
        self.assertGreater(state.hyper.nu, 0.0)
        self.assertGreater(state.hyper.tau, 0.0)

    def test_in_order_matching_keeps_prior_order(self):
        rng = np.random.default_rng(61)
        Y, _ = _tones(rng, [0.9], 20, 2, 20.0)
        priors = PriorConfig.grid(6, 50.0, matching=PriorMatching.IN_ORDER)
        state = initialize(Y, priors, EstimatorOptions())
        self.assertEqual(state.priors, list(priors.priors))

    def test_nearest_matching_picks_closest_prior(self):
        rng = np.random.default_rng(62)
        priors = PriorConfig.grid(20, 1e4)
        target = priors.priors[13].mean_direction
        Y, _ = _tones(rng, [target + 0.002], 20, 4, 20.0)
        state = initialize(Y, priors, EstimatorOptions())
        self.assertEqual(state.priors[0], priors.priors[13])
        self.assertEqual(sorted(state.priors, key=lambda p: p.mean_direction), list(priors.priors))


class RunTests(SimpleTestCase):
    def test_zero_input(self):
        estimate = run(MeasurementSet(np.zeros((8, 3))), PriorConfig.uninformative(6), EstimatorOptions())
        self.assertEqual(estimate.K_hat, 0)
        self.assertTrue(estimate.converged)
        np.testing.assert_array_equal(estimate.X_hat, np.zeros((8, 3)))

    def test_convergence_needs_two_iterations(self):
        estimate = run(MeasurementSet(np.zeros((8, 3))), PriorConfig.uninformative(6), EstimatorOptions())
        self.assertEqual(estimate.iterations, 2)
        self.assertEqual(estimate.support_history, ((), ()))
        capped = run(MeasurementSet(np.zeros((8, 3))), PriorConfig.uninformative(6), EstimatorOptions(max_iterations=1))
        self.assertFalse(capped.converged)

    def test_single_tone_high_snr(self):
        rng = np.random.default_rng(70)
        Y, _ = _tones(rng, [1.1], 20, 4, 40.0)
        estimate = run(Y, PriorConfig.uninformative(20), EstimatorOptions())
        self.assertEqual(estimate.K_hat, 1)
        self.assertLess(wrap_distance(estimate.thetas[0], 1.1), 1e-3)
        self.assertEqual(len(estimate.support_history), estimate.iterations)

    def test_estimate_is_consistent(self):
        rng = np.random.default_rng(71)
        Y, _ = _tones(rng, [-2.0, 0.3], 16, 3, 15.0)
        estimate = run(Y, PriorConfig.uninformative(10), EstimatorOptions())
        self.assertEqual(estimate.K_hat, len(estimate.active))
        A = np.stack([estimate.components[i].a_hat for i in estimate.active], axis=1)
        np.testing.assert_allclose(estimate.X_hat, A @ estimate.weights)
        for comp in estimate.components:
            self.assertEqual(comp.a_hat[0], 1.0)
            self.assertTrue(np.all(np.abs(comp.a_hat) <= 1.0 + 1e-15))

    def test_failure_reports_iteration(self):
        rng = np.random.default_rng(72)
        Y, _ = _tones(rng, [0.5], 8, 2, 10.0)
        with patch("estimation.engine.cho_factor", side_effect=LinAlgError("not positive definite")):
            with self.assertRaises(EstimatorFailure) as ctx:
                run(Y, PriorConfig.uninformative(4), EstimatorOptions(fixed_support_size=1))
        self.assertEqual(ctx.exception.iteration, 1)
        self.assertIn("iteration 1", str(ctx.exception))

    @override_settings(MVALSE={"MAX_ITERATIONS": 7, "TOLERANCE": 1e-3, "PRIOR_MATCHING": "in_order"})
    def test_options_from_settings(self):
        options = EstimatorOptions.from_settings(tolerance=None, deactivate=False)
        self.assertEqual(options.max_iterations, 7)
        self.assertEqual(options.tolerance, 1e-3)
        self.assertEqual(options.prior_matching, PriorMatching.IN_ORDER)
        self.assertFalse(options.deactivate)
        self.assertEqual(options.grid_size, 4096)


# ---------------------------------------------------------------------------
# parallel
# ---------------------------------------------------------------------------

class SnapshotDecompositionTests(SimpleTestCase):
    def test_single_snapshot_message_is_batch_message(self):
        state = _random_state(np.random.default_rng(80), L=1, active=(0, 3))
        batch = frequency_message(3, state.measurements, state.components, state.weights, state.hyper.nu)
        np.testing.assert_allclose(snapshot_message(3, 0, state), batch, rtol=1e-12)

    def test_messages_sum_to_batch_message(self):
        rng = np.random.default_rng(81)
        for _ in range(10):
            state = _random_state(rng, N=6, L=5, active=(0, 2, 4, 5))
            for i in state.weights.active:
                total = np.zeros(state.M, dtype=complex)
                for l in range(state.L):
                    total = total + snapshot_message(i, l, state)
                batch = frequency_message(i, state.measurements, state.components, state.weights, state.hyper.nu)
                self.assertLess(np.max(np.abs(total - batch)), 1e-10 * max(1.0, np.max(np.abs(batch))))

    def test_zero_weight_column_gives_zero_message(self):
        state = _random_state(np.random.default_rng(82), N=3, L=2)
        W = np.array([[0.0, 1.0], [0.0, 2.0]], dtype=complex)
        state.weights = WeightPosterior((0, 2), W, np.diag([0.5, 0.5]).astype(complex))
        np.testing.assert_array_equal(snapshot_message(0, 0, state), np.zeros(state.M))

    def test_snapshot_out_of_range(self):
        state = _random_state(np.random.default_rng(83), L=2, active=(0,))
        with self.assertRaises(ValueError):
            snapshot_message(0, 2, state)

    def test_combine_deltas(self):
        self.assertEqual(combine_deltas([1.25], 0.3), 1.25)
        self.assertEqual(combine_deltas([1.0, 2.0, -0.5], 0.5), 2.5)
        log_odds = math.log(0.2 / 0.8)
        self.assertAlmostEqual(combine_deltas([1.0, 1.0], 0.2, DEACTIVATE), 2.0 + log_odds)

    def test_snapshot_deltas_match_batch(self):
        rng = np.random.default_rng(84)
        kernel = SnapshotKernel()
        for _ in range(20):
            state = _random_state(rng, N=7, L=4, active=tuple(sorted(rng.choice(7, 3, replace=False))))
            batch = [flip_delta(k, state.coupling, state.weights, state.hyper) for k in range(7)]
            split = kernel.flip_deltas(state, state.weights, range(7))
            for a, b in zip(batch, split):
                self.assertEqual(a.direction, b.direction)
                self.assertLess(abs(a.delta - b.delta), 1e-10 * max(1.0, abs(a.delta)))
                np.testing.assert_allclose(b.u, a.u, rtol=1e-10, atol=1e-14)

    def test_combine_hyperparams(self):
        state = _random_state(np.random.default_rng(85), N=10, L=4)
        options = EstimatorOptions()
        hyper = combine_hyperparams([0.3] * 4, [2.0] * 4, 2, state, options)
        self.assertAlmostEqual(hyper.nu, 0.3)
        self.assertAlmostEqual(hyper.tau, 2.0)
        self.assertAlmostEqual(hyper.lambda_, 0.2)
        single = combine_hyperparams([0.7], [1.5], 1, state, options)
        self.assertEqual((single.nu, single.tau), (0.7, 1.5))

    def test_snapshot_hyperparams_match_batch(self):
        rng = np.random.default_rng(86)
        kernel = SnapshotKernel()
        for active in [(), (1,), (0, 4, 6)]:
            state = _random_state(rng, N=8, L=6, active=active)
            batch = update_hyperparams(state, options=EstimatorOptions())
            split = kernel.hyperparams(state, state.weights, EstimatorOptions())
            self.assertAlmostEqual(split.nu / batch.nu, 1.0, places=10)
            self.assertAlmostEqual(split.tau / batch.tau, 1.0, places=10)
            self.assertEqual(split.lambda_, batch.lambda_)

    def test_intermediates_have_one_entry_per_snapshot(self):
        state = _random_state(np.random.default_rng(87), L=3, active=(1, 2))
        pieces = SnapshotKernel().intermediates(1, 5, state)
        self.assertEqual(len(pieces.eta_per_snapshot), 3)
        self.assertEqual(len(pieces.nu_per_snapshot), 3)


class ParallelRunTests(SimpleTestCase):
    def _instances(self, count, seed=90):
        rng = np.random.default_rng(seed)
        for _ in range(count):
            thetas = _separated_thetas(rng, 3, 2 * math.pi / 20)
            Y, _ = _tones(rng, thetas, 20, 8, 10.0)
            yield Y

    def _check_equivalence(self, count):
        priors = PriorConfig.uninformative(20)
        options = EstimatorOptions()
        for Y in self._instances(count):
            batch = run(Y, priors, options)
            outputs = [run_parallel(Y, priors, options, workers=w) for w in (1, 2, Y.L)]
            for estimate in outputs:
                self.assertEqual(estimate.support_history, batch.support_history)
                scale = max(np.linalg.norm(batch.X_hat), 1e-300)
                self.assertLess(np.linalg.norm(estimate.X_hat - batch.X_hat) / scale, 1e-8)
            for estimate in outputs[1:]:
                np.testing.assert_array_equal(estimate.X_hat, outputs[0].X_hat)

    def test_matches_batch_run(self):
        self._check_equivalence(3)

    @tag("slow")
    def test_matches_batch_run_many_instances(self):
        self._check_equivalence(50 if FULL_ACCEPTANCE else 10)

    def test_workers_must_be_positive(self):
        with self.assertRaises(ValueError):
            run_parallel(MeasurementSet(np.zeros((4, 2))), PriorConfig.uninformative(2), workers=0)


# ---------------------------------------------------------------------------
# sequential
# ---------------------------------------------------------------------------

class PartitionTests(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(partition(8, 4).group_sizes, (2, 2, 2, 2))
        self.assertEqual(partition(8, 1).group_sizes, (8,))
        self.assertEqual(partition(7, 3).group_sizes, (3, 2, 2))

    def test_too_many_groups(self):
        with self.assertRaises(ValueError):
            partition(3, 4)

    def test_bounds_cover_all_snapshots(self):
        plan = partition(11, 4)
        self.assertEqual(plan.bounds(), [(0, 3), (3, 6), (6, 9), (9, 11)])
        with self.assertRaises(ValueError):
            GroupPlan((2, 0))


class SequentialTests(SimpleTestCase):
    def _check_single_group(self, count):
        rng = np.random.default_rng(100)
        priors = PriorConfig.uninformative(12)
        for _ in range(count):
            Y, _ = _tones(rng, _separated_thetas(rng, 2, 0.6), 16, 6, 8.0)
            batch = run(Y, priors, EstimatorOptions())
            seq = run_sequential(Y, priors, partition(Y.L, 1), EstimatorOptions())
            np.testing.assert_array_equal(seq.X_hat, batch.X_hat)
            np.testing.assert_array_equal(seq.thetas, batch.thetas)
            self.assertEqual(seq.support_history, batch.support_history)
            self.assertEqual(seq.hyper, batch.hyper)

    def test_single_group_is_the_batch_run(self):
        self._check_single_group(3)

    @tag("slow")
    def test_single_group_is_the_batch_run_many_instances(self):
        self._check_single_group(20)

    def test_concentration_accumulates_across_groups(self):
        rng = np.random.default_rng(101)
        Y, _ = _tones(rng, [0.7], 16, 6, 30.0)
        estimates = list(iter_sequential(Y, PriorConfig.uninformative(8), partition(6, 6), EstimatorOptions()))
        kappas = [float(np.max(e.concentrations)) for e in estimates]
        self.assertTrue(all(e.K_hat >= 1 for e in estimates))
        self.assertTrue(all(b >= a for a, b in zip(kappas, kappas[1:])), kappas)

    def test_zero_signal_passes_priors_through(self):
        priors = PriorConfig.grid(6, 40.0, matching=PriorMatching.IN_ORDER)
        estimate = run_sequential(MeasurementSet(np.zeros((8, 4))), priors, partition(4, 2), EstimatorOptions())
        self.assertEqual(estimate.K_hat, 0)
        self.assertEqual(estimate.priors, priors.priors)

    def test_carry_hyperparams(self):
        rng = np.random.default_rng(102)
        Y, _ = _tones(rng, [-0.4], 12, 4, 20.0)
        with patch("estimation.sequential.run", wraps=run) as spy:
            estimates = list(iter_sequential(Y, PriorConfig.uninformative(6), partition(4, 2),
                                             EstimatorOptions(), carry_hyperparams=True))
        self.assertIsNone(spy.call_args_list[0].kwargs["initial_hyper"])
        self.assertEqual(spy.call_args_list[1].kwargs["initial_hyper"], estimates[0].hyper)

    def test_plan_must_cover_data(self):
        with self.assertRaises(ValueError):
            run_sequential(MeasurementSet(np.zeros((4, 3))), PriorConfig.uninformative(2), partition(4, 2))
