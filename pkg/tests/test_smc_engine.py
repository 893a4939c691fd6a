import itertools
import math
import os
import unittest

import numpy as np
from scipy import optimize, special, stats

from errors import ConfigError, NumericFault
from models import (GaussianLocation, GaussianTarget, ModelSpec, build_model, default_preconditioner, find_mode,
                    generate_synthetic)
from potential import ExactPhi, PhiBounds, Preconditioner
from samplers import TrajectoryState, is_kbm_advance, layer_half_widths
from smc_engine import (CheckpointRecord, OccupationEstimate, ParticleCloud, RunConfig, _importance_run,
                        effective_sample_size, occupation_estimate, offspring_indices, qsmc_run, r_qsmc_run,
                        r_scale_run, resample, run_engine, scale_run, stream_for)

SLOW = os.environ.get("QSMC_RUN_SLOW") == "1"


def small_config(**overrides):
    settings = dict(n_particles=32, horizon=2.0, checkpoint_gap=0.1, burn_in=0.5, seed=123)
    settings.update(overrides)
    return RunConfig(**settings)


def unit_posterior():
    """Eight zero observations whose posterior is exactly N(0, 1)"""
    model = GaussianLocation(np.zeros((8, 1)), noise_scale=math.sqrt(8 / 0.99), prior_scale=10.0)
    return model, Preconditioner.identity(1)


class TestWeights(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(8)

    def test_effective_sample_size(self):
        """ESS of uniform and degenerate weights"""
        self.assertAlmostEqual(effective_sample_size(np.full(10, 0.1)), 10.0)
        self.assertAlmostEqual(effective_sample_size([1.0, 0.0, 0.0]), 1.0)
        self.assertAlmostEqual(effective_sample_size([0.5, 0.5]), 2.0)

    def test_effective_sample_size_rejects_non_simplex(self):
        """Weights must be non-negative and sum to one"""
        for weights in ([0.5, 0.6], [-0.5, 1.5], []):
            with self.assertRaises(ValueError):
                effective_sample_size(weights)

    def test_multinomial_counts(self):
        """Multinomial offspring counts follow the weights"""
        weights = np.array([0.7, 0.2, 0.1])
        n = 100000
        counts = np.bincount(offspring_indices(weights, "multinomial", self.rng, size=n), minlength=3)
        for count, w in zip(counts, weights):
            self.assertLess(abs(count - n * w), 4.0 * math.sqrt(n * w * (1 - w)))

    def test_systematic_uniform_is_permutation(self):
        """Systematic resampling of equal weights keeps every particle once"""
        indices = offspring_indices(np.full(50, 0.02), "systematic", self.rng)
        np.testing.assert_array_equal(np.sort(indices), np.arange(50))

    def test_offspring_counts_unbiased(self):
        """E[count_k] = N w_k for both schemes"""
        weights = np.array([0.5, 0.3, 0.2])
        reps = 10000
        for scheme in ("multinomial", "systematic"):
            totals = np.zeros(3)
            for _ in range(reps):
                totals += np.bincount(offspring_indices(weights, scheme, self.rng), minlength=3)
            means = totals / reps
            # Per-draw count variance is at most N w (1 - w)
            for mean, w in zip(means, weights):
                self.assertLess(abs(mean - 3 * w), 4.0 * math.sqrt(3 * w * (1 - w) / reps), scheme)

    def test_unknown_scheme(self):
        """Unknown resampling schemes are rejected"""
        with self.assertRaises(ValueError):
            offspring_indices([1.0], "residual", self.rng)

    def test_resample_copies_parents(self):
        """Offspring are independent copies with uniform weights"""
        theta = np.ones(1)
        particles = [TrajectoryState.start(0.0, [float(k)], theta) for k in range(4)]
        cloud = ParticleCloud(particles=particles, normalized_weights=np.array([0.0, 0.0, 1.0, 0.0]), time=0.0)
        child_cloud = resample(cloud, "systematic", self.rng)
        np.testing.assert_allclose(child_cloud.normalized_weights, 0.25)
        for child in child_cloud.particles:
            self.assertEqual(child.current_state[0], 2.0)
            self.assertIsNot(child, particles[2])
            self.assertAlmostEqual(child.log_weight, -math.log(4))

    def test_cloud_rejects_bad_weights(self):
        """Cloud weights must be a simplex vector over the particles"""
        particles = [TrajectoryState.start(0.0, [0.0], np.ones(1))]
        with self.assertRaises(ValueError):
            ParticleCloud(particles=particles, normalized_weights=np.array([0.5]), time=0.0)


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        """Threshold defaults to N/2 and the estimator follows the engine"""
        config = RunConfig(n_particles=100, horizon=1.0, checkpoint_gap=0.25, burn_in=0.0)
        self.assertEqual(config.ess_threshold, 50.0)
        self.assertEqual(config.estimator, "exact")
        self.assertEqual(RunConfig(engine="scale").estimator, "subsampled")
        np.testing.assert_allclose(config.checkpoint_times(), [0.25, 0.5, 0.75, 1.0])
        self.assertEqual(config.n_checkpoints, 4)

    def test_invalid_settings(self):
        """Bad schedules, thresholds and engine pairings are configuration errors"""
        bad = [
            dict(ess_threshold=2000.0),
            dict(ess_threshold=-1.0),
            dict(horizon=1.0, checkpoint_gap=0.3, burn_in=0.0),
            dict(horizon=1.0, checkpoint_gap=0.1, burn_in=1.0),
            dict(engine="r-qsmc", n_particles=1),
            dict(engine="scale", estimator="exact"),
            dict(engine="qsmc", estimator="subsampled"),
            dict(engine="r-qsmc", estimator="exact-wide"),
            dict(engine="bogus"),
            dict(resampler="stratified"),
            dict(threads=0),
            dict(theta_scale=0.0),
        ]
        for settings in bad:
            with self.assertRaises(ConfigError, msg=str(settings)):
                RunConfig(**settings)

    def test_zero_threshold_allowed(self):
        """A zero threshold disables resampling"""
        self.assertEqual(RunConfig(ess_threshold=0.0).ess_threshold, 0.0)


class TestImportanceEngine(unittest.TestCase):
    def setUp(self):
        self.model = GaussianTarget([0.0], [1.0])
        self.precond = Preconditioner.identity(1)
        self.x_hat = np.zeros(1)

    def test_records_and_resampling_rule(self):
        """One record per checkpoint; resampling happens exactly when the previous ESS <= threshold"""
        config = small_config()
        records = qsmc_run(config, self.model, self.precond, self.x_hat)
        self.assertEqual(len(records), config.n_checkpoints)
        previous = float(config.n_particles)
        for record in records:
            self.assertAlmostEqual(record.weights.sum(), 1.0, places=12)
            self.assertTrue(np.all(record.weights >= 0.0))
            self.assertGreaterEqual(record.ess, 1.0 - 1e-9)
            self.assertLessEqual(record.ess, config.n_particles + 1e-9)
            self.assertEqual(record.resampled, previous <= config.ess_threshold)
            previous = record.ess
        self.assertEqual(records[-1].time, config.horizon)
        self.assertGreater(sum(r.cost_counters["factor_touches"] for r in records), 0)

    def test_deterministic_across_threads(self):
        """Same seed gives identical output for one or four threads"""
        one = qsmc_run(small_config(), self.model, self.precond, self.x_hat)
        again = qsmc_run(small_config(), self.model, self.precond, self.x_hat)
        four = qsmc_run(small_config(threads=4), self.model, self.precond, self.x_hat)
        for a, b, c in zip(one, again, four):
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.states, c.states)
            np.testing.assert_array_equal(a.weights, c.weights)

    def test_seed_changes_output(self):
        """Different seeds give different trajectories"""
        a = qsmc_run(small_config(seed=1), self.model, self.precond, self.x_hat)
        b = qsmc_run(small_config(seed=2), self.model, self.precond, self.x_hat)
        self.assertFalse(np.array_equal(a[-1].states, b[-1].states))

    def test_without_resampling_matches_kernel(self):
        """With a zero threshold the engine is N independent kernel calls on fixed streams"""
        config = small_config(ess_threshold=0.0, n_particles=8)
        records = qsmc_run(config, self.model, self.precond, self.x_hat)
        self.assertFalse(any(r.resampled for r in records))
        provider = ExactPhi(self.model, self.precond)
        theta = layer_half_widths(self.precond, config.theta_scale)
        log_weights = np.empty(config.n_particles)
        for k in range(config.n_particles):
            traj = TrajectoryState.start(0.0, self.x_hat, theta)
            for g, t in enumerate(config.checkpoint_times(), start=1):
                is_kbm_advance(traj, provider, self.precond, float(t), stream_for(config.seed, 0, k, g))
            np.testing.assert_array_equal(traj.current_state, records[-1].states[k])
            log_weights[k] = traj.log_weight
        expected = np.exp(log_weights - log_weights.max())
        np.testing.assert_allclose(records[-1].weights, expected / expected.sum(), rtol=1e-9, atol=1e-15)

    def test_all_weights_zero(self):
        """A checkpoint with every weight zero raises NumericFault"""

        class Lethal:
            floor = 0.0

            def evaluate(self, x, rng, counter=None):
                return 10.0

            def bounds(self, lo, hi, counter=None):
                return PhiBounds(0.0, 10.0)

        with self.assertRaises(NumericFault):
            _importance_run(small_config(n_particles=4, horizon=5.0, burn_in=0.0, checkpoint_gap=5.0),
                            Lethal(), self.precond, self.x_hat)

    def test_subsampled_engine(self):
        """ScaLE runs on a data model and reports subsample costs"""
        y = np.random.default_rng(4).standard_normal(8) + 1.0
        model = GaussianLocation(y)
        precond = Preconditioner.scaled([1.0], 8)
        config = small_config(engine="scale")
        records = scale_run(config, model, precond, x_hat=model.post_mean)
        self.assertEqual(len(records), config.n_checkpoints)
        self.assertTrue(all(np.all(np.isfinite(r.states)) for r in records))
        # Subsampled evaluations touch factors in pairs
        self.assertEqual(records[0].cost_counters["factor_touches"] % 2, 0)


class TestRejectionEngine(unittest.TestCase):
    def setUp(self):
        self.model = GaussianTarget([0.0], [1.0])
        self.precond = Preconditioner.identity(1)
        self.x_hat = np.zeros(1)

    def test_uniform_records(self):
        """Rejection engines emit uniform weights with ESS = N"""
        config = small_config(engine="r-qsmc")
        records = r_qsmc_run(config, self.model, self.precond, self.x_hat)
        self.assertEqual(len(records), config.n_checkpoints)
        for record in records:
            np.testing.assert_allclose(record.weights, 1.0 / config.n_particles)
            self.assertEqual(record.ess, float(config.n_particles))
            self.assertFalse(record.resampled)
        self.assertGreater(sum(r.cost_counters["kills"] for r in records), 0)

    def test_deterministic(self):
        """Rejection runs repeat exactly for a fixed seed"""
        config = small_config(engine="r-qsmc", kbm_use_lower=True)
        a = r_qsmc_run(config, self.model, self.precond, self.x_hat)
        b = run_engine(config, self.model, self.precond, self.x_hat)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.states, y.states)

    def test_subsampled_rejection_engine(self):
        """R-ScaLE runs with the support floor on a data model"""
        y = np.random.default_rng(6).standard_normal(8)
        model = GaussianLocation(y)
        precond = Preconditioner.scaled([1.0], 8)
        config = small_config(engine="r-scale")
        records = r_scale_run(config, model, precond, x_hat=model.post_mean)
        self.assertEqual(len(records), config.n_checkpoints)
        self.assertTrue(all(np.all(np.isfinite(r.states)) for r in records))


class TestOccupationEstimate(unittest.TestCase):
    def _record(self, time, states, weights=None):
        states = np.asarray(states, dtype=float).reshape(len(states), -1)
        weights = np.full(len(states), 1.0 / len(states)) if weights is None else np.asarray(weights)
        return CheckpointRecord(time=time, states=states, weights=weights, ess=effective_sample_size(weights),
                                resampled=False)

    def test_single_particle(self):
        """One checkpoint with one particle estimates its state"""
        estimate = occupation_estimate([self._record(1.0, [[3.0, -1.0]])], 0.0, 1.0)
        np.testing.assert_allclose(estimate.mean, [3.0, -1.0])
        np.testing.assert_allclose(estimate.covariance, np.zeros((2, 2)))

    def test_repeated_checkpoints(self):
        """Duplicated identical checkpoints give the single-checkpoint estimate"""
        record = self._record(1.0, [[0.0], [2.0]], [0.25, 0.75])
        single = occupation_estimate([record], 0.5, 1.0)
        repeated = occupation_estimate([self._record(t, [[0.0], [2.0]], [0.25, 0.75]) for t in (0.6, 0.8, 1.0)],
                                       0.5, 1.0)
        np.testing.assert_allclose(single.mean, [1.5])
        np.testing.assert_allclose(repeated.mean, single.mean)
        self.assertEqual(repeated.n_checkpoints, 3)

    def test_burn_in_excludes_early_checkpoints(self):
        """Checkpoints before t_star do not count"""
        records = [self._record(0.5, [[100.0]]), self._record(1.0, [[1.0]])]
        np.testing.assert_allclose(occupation_estimate(records, 0.75, 1.0).mean, [1.0])

    def test_invalid_window(self):
        """t_star must be below T and the window must hold checkpoints"""
        records = [self._record(1.0, [[0.0]])]
        with self.assertRaises(ValueError):
            occupation_estimate(records, 1.0, 1.0)
        with self.assertRaises(ValueError):
            occupation_estimate(records, 2.0, 3.0)

    def test_ks_distances(self):
        """KS to itself is zero and a point mass at 0 is 1/2 from N(0, 1)"""
        estimate = OccupationEstimate(states=np.zeros((3, 1)), weights=np.full(3, 1 / 3), n_checkpoints=1)
        self.assertEqual(estimate.ks_distance_to(estimate), 0.0)
        self.assertAlmostEqual(estimate.ks_distance(stats.norm.cdf), 0.5)
        spread = OccupationEstimate(states=np.array([[0.0], [1.0]]), weights=np.array([0.5, 0.5]), n_checkpoints=1)
        self.assertAlmostEqual(estimate.ks_distance_to(spread), 0.5)
        np.testing.assert_allclose(spread.cdf(0, [-1.0, 0.0, 0.5, 1.0]), [0.0, 0.5, 0.5, 1.0])


@unittest.skipUnless(SLOW, "set QSMC_RUN_SLOW=1 for full-length runs")
class TestGaussianAccuracy(unittest.TestCase):
    def setUp(self):
        self.model = GaussianTarget([0.0], [1.0])
        self.precond = Preconditioner.identity(1)

    def test_qsmc_recovers_standard_normal(self):
        """Importance engine: KS < 0.02 and mean within 0.05"""
        config = RunConfig(n_particles=1024, horizon=50.0, checkpoint_gap=0.1, burn_in=10.0, seed=0)
        estimate = occupation_estimate(qsmc_run(config, self.model, self.precond, np.zeros(1)), 10.0, 50.0)
        self.assertLess(estimate.ks_distance(stats.norm.cdf), 0.02)
        self.assertLess(abs(estimate.mean[0]), 0.05)
        self.assertLess(abs(estimate.covariance[0, 0] - 1.0), 0.05)

    def test_r_qsmc_recovers_standard_normal(self):
        """Rejection engine: KS < 0.02"""
        config = RunConfig(n_particles=1024, horizon=50.0, checkpoint_gap=0.1, burn_in=10.0, seed=0,
                           engine="r-qsmc")
        estimate = occupation_estimate(r_qsmc_run(config, self.model, self.precond, np.zeros(1)), 10.0, 50.0)
        self.assertLess(estimate.ks_distance(stats.norm.cdf), 0.02)

    def test_scale_recovers_standard_normal(self):
        """Subsampled importance engine: KS < 0.03 on an eight-point posterior equal to N(0, 1)"""
        model, precond = unit_posterior()
        config = RunConfig(n_particles=1024, horizon=50.0, checkpoint_gap=0.1, burn_in=10.0, seed=0,
                           engine="scale")
        estimate = occupation_estimate(scale_run(config, model, precond, model.post_mean), 10.0, 50.0)
        self.assertLess(estimate.ks_distance(stats.norm.cdf), 0.03)

    def test_r_scale_recovers_standard_normal(self):
        """Subsampled rejection engine: KS < 0.03 on the same posterior"""
        model, precond = unit_posterior()
        config = RunConfig(n_particles=1024, horizon=50.0, checkpoint_gap=0.1, burn_in=10.0, seed=0,
                           engine="r-scale")
        estimate = occupation_estimate(r_scale_run(config, model, precond, model.post_mean), 10.0, 50.0)
        self.assertLess(estimate.ks_distance(stats.norm.cdf), 0.03)


@unittest.skipUnless(SLOW, "set QSMC_RUN_SLOW=1 for full-length runs")
class TestEngineAgreement(unittest.TestCase):
    def test_engines_agree_on_gaussian_toy(self):
        """Posterior means from all four engines agree within 3 combined standard errors over 20 seeds"""
        y = np.random.default_rng(2024).standard_normal((8, 1)) + 1.0
        model = GaussianLocation(y)
        precond = default_preconditioner(model, "gaussian-location", model.post_mean)
        means = {}
        for engine in ("qsmc", "scale", "r-qsmc", "r-scale"):
            means[engine] = np.array([
                occupation_estimate(run_engine(RunConfig(n_particles=128, horizon=20.0, checkpoint_gap=0.1,
                                                         burn_in=5.0, seed=seed, engine=engine),
                                               model, precond, model.post_mean), 5.0, 20.0).mean[0]
                for seed in range(20)])
        for a, b in itertools.combinations(means, 2):
            combined = math.sqrt(np.var(means[a], ddof=1) / 20 + np.var(means[b], ddof=1) / 20)
            self.assertLess(abs(means[a].mean() - means[b].mean()), 3.0 * combined, f"{a} vs {b}")


def logistic_mle(design, y):
    """Maximum likelihood estimate and its standard errors"""
    def objective(beta):
        eta = design @ beta
        return -np.sum(y * eta - np.logaddexp(0.0, eta)), -design.T @ (y - special.expit(eta))

    beta = optimize.minimize(objective, np.zeros(design.shape[1]), jac=True, method="BFGS").x
    p = special.expit(design @ beta)
    information = design.T @ (design * (p * (1.0 - p))[:, None])
    return beta, np.sqrt(np.diag(np.linalg.inv(information)))


@unittest.skipUnless(SLOW, "set QSMC_RUN_SLOW=1 for full-length runs")
class TestScaleOnData(unittest.TestCase):
    def test_logistic_mean_near_mle(self):
        """ScaLE on 3918 binary outcomes lands within 3 standard errors of the MLE"""
        spec = ModelSpec.for_family("logistic-regression", dim=2)
        data = generate_synthetic(spec, 3918, [-0.4, 3.0], seed=3918)
        model = build_model(spec, data)
        design = np.column_stack([np.ones(data.n), data.column("x1")])
        mle, se = logistic_mle(design, data.column("y"))

        x_hat = find_mode(model)
        precond = default_preconditioner(model, "logistic-regression", x_hat)
        config = RunConfig(n_particles=100, horizon=200.0, checkpoint_gap=0.5, burn_in=50.0, seed=1,
                           engine="scale")
        estimate = occupation_estimate(scale_run(config, model, precond, x_hat), 50.0, 200.0)
        for j in range(2):
            self.assertLess(abs(estimate.mean[j] - mle[j]), 3.0 * se[j], f"coefficient {j}")

    def test_t5_cost_does_not_grow_with_n(self):
        """Factor touches per unit time vary by less than a factor of two from n = 2^8 to 2^14"""
        rates = []
        spec = ModelSpec.for_family("t5-location")
        for n in (2**8, 2**10, 2**12, 2**14):
            model = build_model(spec, generate_synthetic(spec, n, [0.0], seed=n))
            x_hat = find_mode(model)
            precond = default_preconditioner(model, "t5-location", x_hat)
            config = RunConfig(n_particles=32, horizon=10.0, checkpoint_gap=1.0, burn_in=2.0, seed=7,
                               engine="scale")
            records = scale_run(config, model, precond, x_hat)
            # Steady state only
            touches = sum(r.cost_counters["factor_touches"] for r in records if r.time > 2.0)
            rates.append(touches / 8.0)
        self.assertGreater(min(rates), 0.0)
        self.assertLess(max(rates) / min(rates), 2.0, rates)

    def test_mixture_recovers_generating_parameters(self):
        """Posterior on 2^14 mixture points sits within 3 SDs of the generating values"""
        truth = [2.0, 5.0, 1.0, 10.0, 0.05]
        spec = ModelSpec.for_family("contaminated-mixture")
        model = build_model(spec, generate_synthetic(spec, 2**14, truth, seed=14))
        target = spec.unconstrained(np.array(truth))
        x_hat = find_mode(model, x0=target)
        precond = default_preconditioner(model, "contaminated-mixture", x_hat)
        config = RunConfig(n_particles=256, horizon=50.0, checkpoint_gap=0.5, burn_in=10.0, seed=3,
                           engine="scale")
        estimate = occupation_estimate(scale_run(config, model, precond, x_hat), 10.0, 50.0)
        sd = np.sqrt(np.diag(estimate.covariance))
        for j in range(5):
            self.assertLess(abs(estimate.mean[j] - target[j]), 3.0 * sd[j], f"coordinate {j}")


if __name__ == '__main__':
    unittest.main()
