import unittest

import numpy as np

from errors import NumericFault
from models import ContaminatedMixture, GaussianLocation, GaussianTarget, LogisticRegression, T5Location
from potential import (CostCounter, ExactPhi, Preconditioner, SubsampleDraw, SubsampledPhi, alpha_tilde,
                       draw_subsample, estimate_phi_floor, phi_bounds_exact, phi_bounds_subsampled, phi_exact,
                       phi_raw, phi_subsampled, precompute_control_variates)


def all_pairs(n_factors):
    """Every (I, J) pair, so a batch mean is the exhaustive average"""
    return SubsampleDraw(i_idx=np.repeat(np.arange(n_factors), n_factors),
                         j_idx=np.tile(np.arange(n_factors), n_factors))


def small_models(rng):
    """(model, preconditioner, sampling box) for each family at n=8"""
    y = rng.standard_normal((8, 2)) + 1.0
    design = np.column_stack([np.ones(8), rng.standard_normal(8)])
    labels = np.array([0, 1, 1, 0, 1, 0, 1, 1], dtype=float)
    x1, x2 = rng.standard_normal(8), rng.standard_normal(8)
    mixture = ContaminatedMixture(x1, x2, 2.0 * x1 + 5.0 * x2 + rng.standard_normal(8))
    return [
        (GaussianLocation(y), Preconditioner.scaled(np.ones(2), 8), (np.full(2, -1.0), np.full(2, 3.0))),
        (T5Location(rng.standard_t(5.0, size=8)), Preconditioner.scaled(np.ones(1), 8),
         (np.array([-3.0]), np.array([3.0]))),
        (LogisticRegression(design, labels), Preconditioner(np.array([0.5, 0.3])),
         (np.full(2, -2.0), np.full(2, 2.0))),
        (mixture, Preconditioner(np.full(5, 0.05)),
         (np.array([1.0, 4.0, -0.5, 1.5, -4.0]), np.array([3.0, 6.0, 0.5, 3.0, -1.0]))),
    ]


class TestPreconditioner(unittest.TestCase):
    def test_scaled_and_identity(self):
        """Scaled preconditioners divide by n and keep the square root"""
        precond = Preconditioner.scaled([2.0, 8.0], 4)
        np.testing.assert_allclose(precond.diag, [0.5, 2.0])
        np.testing.assert_allclose(precond.sqrt_diag, np.sqrt([0.5, 2.0]))
        self.assertEqual(precond.n_scaling, 4)
        self.assertEqual(Preconditioner.identity(3).dim, 3)

    def test_invalid_entries(self):
        """Non-positive or non-finite entries are rejected"""
        for diag in ([0.0], [-1.0], [np.inf], []):
            with self.assertRaises(ValueError):
                Preconditioner(np.array(diag))


class TestKillingRate(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(42)
        self.target = GaussianTarget([0.0], [1.0])
        self.identity = Preconditioner.identity(1)

    def test_gaussian_target_rate(self):
        """Standard normal target has phi(x) = x^2 / 2 and Phi = -1/2"""
        self.assertAlmostEqual(self.target.phi_lower_bound(self.identity), -0.5)
        for x in (-2.0, 0.0, 0.7, 3.0):
            self.assertAlmostEqual(phi_exact(self.target, self.identity, [x]), 0.5 * x * x, places=12)
            self.assertAlmostEqual(phi_raw(self.target, self.identity, [x]), 0.5 * (x * x - 1.0), places=12)

    def test_exact_rate_costs_full_sweep(self):
        """A full evaluation touches every factor"""
        model = GaussianLocation(self.rng.standard_normal(20))
        counter = CostCounter()
        phi_exact(model, Preconditioner.scaled([1.0], 20), [0.1], counter)
        self.assertEqual(counter.factor_touches, 21)

    def test_nonfinite_point(self):
        """Non-finite points are a precondition error"""
        with self.assertRaises(ValueError):
            phi_raw(self.target, self.identity, [np.nan])

    def test_nonfinite_gradient_names_factor(self):
        """A factor with an infinite gradient raises NumericFault naming it"""
        model = T5Location(np.array([0.0, np.inf, 1.0]))
        with self.assertRaises(NumericFault) as ctx:
            phi_raw(model, Preconditioner.identity(1), [0.0])
        self.assertEqual(ctx.exception.diagnostics["factor"], 2)


class TestSubsampledRate(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.models = small_models(self.rng)

    def test_exhaustive_average_is_exact(self):
        """Averaging over all (I, J) pairs reproduces phi(x)"""
        for model, precond, (lo, hi) in self.models:
            x_hat = 0.5 * (lo + hi)
            cache = precompute_control_variates(model, precond, x_hat)
            draw = all_pairs(model.n_factors)
            for _ in range(20):
                x = lo + (hi - lo) * self.rng.random(model.dim)
                exact = phi_exact(model, precond, x)
                estimate = phi_subsampled(cache, model, precond, draw, x)
                self.assertLessEqual(abs(estimate - exact), 1e-11 * max(1.0, abs(exact)),
                                     f"{type(model).__name__} at {x}")

    def test_estimate_at_centre_is_constant(self):
        """At x_hat every draw returns C and the gradient difference vanishes"""
        for model, precond, (lo, hi) in self.models:
            x_hat = 0.5 * (lo + hi)
            cache = precompute_control_variates(model, precond, x_hat)
            for _ in range(5):
                draw = draw_subsample(model.n_data, 3, self.rng)
                self.assertAlmostEqual(phi_subsampled(cache, model, precond, draw, x_hat), cache.c_const,
                                       places=9)
            np.testing.assert_allclose(alpha_tilde(model, 1, x_hat, x_hat, cache), 0.0, atol=1e-12)

    def test_thread_count_does_not_change_cache(self):
        """Control variates are identical for one or several threads"""
        model, precond, (lo, hi) = self.models[0]
        one = precompute_control_variates(model, precond, lo, threads=1)
        four = precompute_control_variates(model, precond, lo, threads=4)
        self.assertEqual(one.c_const, four.c_const)
        np.testing.assert_array_equal(one.factor_grads, four.factor_grads)

    def test_subsample_cost(self):
        """Each pair touches two factors"""
        model, precond, (lo, hi) = self.models[1]
        cache = precompute_control_variates(model, precond, lo)
        counter = CostCounter()
        phi_subsampled(cache, model, precond, draw_subsample(model.n_data, 4, self.rng), hi, counter)
        self.assertEqual(counter.factor_touches, 8)

    def test_bad_indices(self):
        """Out-of-range draws and batch sizes are rejected"""
        model, precond, (lo, _) = self.models[1]
        cache = precompute_control_variates(model, precond, lo)
        bad = SubsampleDraw(i_idx=np.array([model.n_factors]), j_idx=np.array([0]))
        with self.assertRaises(IndexError):
            phi_subsampled(cache, model, precond, bad, lo)
        with self.assertRaises(ValueError):
            draw_subsample(8, 0, self.rng)
        with self.assertRaises(ValueError):
            draw_subsample(0, 1, self.rng)
        with self.assertRaises(ValueError):
            SubsampledPhi(cache, model, precond, batch_size=0)


class TestRateBounds(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(17)
        self.models = small_models(self.rng)

    def _sub_boxes(self, lo, hi, count):
        for _ in range(count):
            a = lo + (hi - lo) * self.rng.random(lo.shape[0])
            b = lo + (hi - lo) * self.rng.random(lo.shape[0])
            yield np.minimum(a, b), np.maximum(a, b)

    def test_exact_bounds_contain_rate(self):
        """Box bounds contain phi at sampled points of the box"""
        for model, precond, (lo, hi) in self.models:
            for box_lo, box_hi in self._sub_boxes(lo, hi, 10):
                bounds = phi_bounds_exact(model, precond, box_lo, box_hi)
                points = box_lo + (box_hi - box_lo) * self.rng.random((100, model.dim))
                for x in np.vstack([points, box_lo, box_hi]):
                    value = phi_exact(model, precond, x)
                    slack = 1e-9 * max(1.0, abs(value))
                    self.assertGreaterEqual(value, bounds.lower - slack, type(model).__name__)
                    self.assertLessEqual(value, bounds.upper + slack, type(model).__name__)

    def test_rate_floor_holds(self):
        """phi is non-negative wherever the floor applies"""
        for model, precond, (lo, hi) in self.models:
            for x in lo + (hi - lo) * self.rng.random((200, model.dim)):
                self.assertGreaterEqual(phi_exact(model, precond, x), -1e-12, type(model).__name__)

    def test_subsampled_bounds_contain_every_draw(self):
        """Bounds hold for each single (I, J) pair anywhere in the box"""
        for model, precond, (lo, hi) in self.models:
            cache = precompute_control_variates(model, precond, 0.5 * (lo + hi))
            for box_lo, box_hi in self._sub_boxes(lo, hi, 4):
                bounds = phi_bounds_subsampled(cache, model, precond, box_lo, box_hi)
                for x in box_lo + (box_hi - box_lo) * self.rng.random((10, model.dim)):
                    for i in range(model.n_factors):
                        for j in range(model.n_factors):
                            draw = SubsampleDraw(np.array([i]), np.array([j]))
                            value = phi_subsampled(cache, model, precond, draw, x)
                            slack = 1e-9 * max(1.0, abs(value))
                            self.assertGreaterEqual(value, bounds.lower - slack)
                            self.assertLessEqual(value, bounds.upper + slack)

    def test_degenerate_box(self):
        """A single-point box bounds phi exactly"""
        model, precond, (lo, _) = self.models[0]
        bounds = phi_bounds_exact(model, precond, lo, lo)
        self.assertEqual(bounds.lower, bounds.upper)
        self.assertAlmostEqual(bounds.lower, phi_exact(model, precond, lo))

    def test_bound_cost(self):
        """Box bounds charge factor touches only when they evaluate the factors"""
        gaussian, g_precond, (lo, hi) = self.models[0]
        counter = CostCounter()
        phi_bounds_exact(gaussian, g_precond, lo, hi, counter)
        self.assertEqual(counter.factor_touches, 0)
        phi_bounds_exact(gaussian, g_precond, lo, lo, counter)
        self.assertEqual(counter.factor_touches, gaussian.n_factors)

        t5, t_precond, (lo, hi) = self.models[1]
        counter = CostCounter()
        phi_bounds_exact(t5, t_precond, lo, hi, counter)
        self.assertEqual(counter.factor_touches, t5.n_factors)

    def test_inverted_box(self):
        """Boxes with lo > hi are rejected"""
        model, precond, (lo, hi) = self.models[0]
        with self.assertRaises(ValueError):
            phi_bounds_exact(model, precond, hi, lo)

    def test_providers(self):
        """Exact providers have floor 0; support-floor providers a finite one"""
        model, precond, (lo, hi) = self.models[1]
        exact = ExactPhi(model, precond)
        self.assertEqual(exact.floor, 0.0)
        cache = precompute_control_variates(model, precond, 0.5 * (lo + hi))
        self.assertEqual(SubsampledPhi(cache, model, precond).floor, -np.inf)
        floored = SubsampledPhi.with_support_floor(cache, model, precond, 1, support_width=5.0)
        self.assertTrue(np.isfinite(floored.floor))
        self.assertLessEqual(floored.floor, cache.c_const)


class TestPhiFloorSearch(unittest.TestCase):
    def test_gaussian_minimum(self):
        """Minimum of phi_raw for N(0, 1) is -1/2 at the origin"""
        value, point = estimate_phi_floor(GaussianTarget([0.0], [1.0]), Preconditioner.identity(1),
                                          [-5.0], [5.0])
        self.assertAlmostEqual(value, -0.5, delta=1e-6)
        self.assertAlmostEqual(point[0], 0.0, delta=1e-3)

    def test_matches_dense_grid(self):
        """Grid search with refinement finds the dense-grid minimum"""
        y = np.random.default_rng(1).standard_t(5.0, size=20)
        model = T5Location(y)
        precond = Preconditioner.scaled([1.0], 20)
        value, _ = estimate_phi_floor(model, precond, [-6.0], [6.0])
        dense = min(phi_raw(model, precond, [x]) for x in np.linspace(-6.0, 6.0, 20001))
        self.assertLess(abs(value - dense), 1e-3 * max(1.0, abs(dense)))
        self.assertGreaterEqual(value, model.phi_lower_bound(precond))

    def test_degenerate_box(self):
        """A point box returns phi_raw at the point"""
        model = GaussianTarget([0.0], [1.0])
        value, point = estimate_phi_floor(model, Preconditioner.identity(1), [1.0], [1.0])
        self.assertEqual(value, 0.0)
        np.testing.assert_array_equal(point, [1.0])


if __name__ == '__main__':
    unittest.main()
