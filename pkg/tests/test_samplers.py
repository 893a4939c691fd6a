import math
import os
import unittest

import numpy as np

from errors import BoundViolation
from models import GaussianTarget
from potential import ExactPhi, PhiBounds, Preconditioner
from samplers import (TrajectoryState, advance_to, is_kbm_advance, kbm_advance, kbm_kill, kbm_propose,
                      layer_half_widths, prs_sample_k)

SLOW = os.environ.get("QSMC_RUN_SLOW") == "1"


class FixedRateProvider:
    """Killing rate with constant bounds and a fixed value, for driving the kernels directly"""

    def __init__(self, lower, upper, value, floor=0.0):
        self.lower = lower
        self.upper = upper
        self.value = value
        self.floor = floor

    def evaluate(self, x, rng, counter=None):
        return self.value

    def bounds(self, lo, hi, counter=None):
        return PhiBounds(self.lower, self.upper)


def survival_oracle(horizon):
    """E exp(-int_0^T B_s^2 / 2 ds) for standard Brownian motion from 0"""
    return 1.0 / math.sqrt(math.cosh(horizon))


class TestKilledBrownianMotion(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(99)
        self.precond = Preconditioner.identity(1)
        self.provider = ExactPhi(GaussianTarget([0.0], [1.0]), self.precond)
        self.theta = layer_half_widths(self.precond, 1.0)

    def test_importance_weights_are_unbiased(self):
        """Mean IS weight matches the Feynman-Kac survival probability"""
        horizon, count = 0.5, 2000
        weights = np.empty(count)
        for i in range(count):
            traj = TrajectoryState.start(0.0, [0.0], self.theta)
            is_kbm_advance(traj, self.provider, self.precond, horizon, self.rng)
            self.assertEqual(traj.current_time, horizon)
            weights[i] = math.exp(traj.log_weight)
        se = weights.std() / math.sqrt(count)
        self.assertLess(abs(weights.mean() - survival_oracle(horizon)), 4.0 * se + 1e-3)
        self.assertTrue(np.all((weights >= 0.0) & (weights <= 1.0)))

    def test_weighted_endpoint_is_tilted(self):
        """Weighted endpoint second moment is tanh(T)"""
        horizon, count = 1.0, 3000
        weights = np.empty(count)
        ends = np.empty(count)
        for i in range(count):
            traj = TrajectoryState.start(0.0, [0.0], self.theta)
            is_kbm_advance(traj, self.provider, self.precond, horizon, self.rng)
            weights[i] = math.exp(traj.log_weight)
            ends[i] = traj.current_state[0]
        second = float(np.sum(weights * ends**2) / np.sum(weights))
        self.assertLess(abs(second - math.tanh(horizon)), 0.1)

    def test_survival_probability(self):
        """Fraction of unkilled trajectories matches the survival probability"""
        horizon, count = 0.5, 3000
        for use_lower in (False, True):
            alive = 0
            for _ in range(count):
                record = kbm_kill((0.0, np.array([0.0])), self.provider, self.precond, self.rng,
                                  use_lower=use_lower, max_time=horizon)
                alive += record is None
            p = survival_oracle(horizon)
            self.assertLess(abs(alive / count - p), 4.0 * math.sqrt(p * (1 - p) / count), f"use_lower={use_lower}")

    def test_survivors_are_tilted(self):
        """Survivors of killing up to T end distributed as N(0, tanh T)"""
        horizon, count = 1.0, 3000
        ends = []
        for _ in range(count):
            traj = TrajectoryState.start(0.0, [0.0], self.theta)
            if kbm_advance(traj, self.provider, self.precond, horizon, self.rng) is None:
                ends.append(traj.current_state[0])
        ends = np.array(ends)
        self.assertGreater(len(ends), 1000)
        target = math.tanh(horizon)
        self.assertLess(abs(np.mean(ends**2) - target), 4.0 * target * math.sqrt(2.0 / len(ends)))

    def test_kill_record(self):
        """Kill records carry a kill time and the state there"""
        record = kbm_kill((0.0, np.array([2.0])), self.provider, self.precond, self.rng)
        self.assertIsNotNone(record)
        self.assertGreater(record.kill_time, 0.0)
        self.assertEqual(record.kill_state.shape, (1,))
        self.assertEqual(record.skeleton.last_time, record.kill_time)

    def test_rejection_sampler_acceptance(self):
        """PRS acceptance rate is the survival probability and accepted paths reach T"""
        horizon, count = 0.5, 3000
        accepted = 0
        for _ in range(count):
            skeleton = prs_sample_k(np.array([0.0]), horizon, self.provider, self.precond, self.rng)
            if skeleton is not None:
                accepted += 1
                self.assertEqual(skeleton.last_time, horizon)
        p = survival_oracle(horizon)
        self.assertLess(abs(accepted / count - p), 4.0 * math.sqrt(p * (1 - p) / count))

    @unittest.skipUnless(SLOW, "set QSMC_RUN_SLOW=1 for the horizon sweep")
    def test_survival_over_horizons(self):
        """Survival probability over a range of horizons"""
        count = 20000
        for horizon in (0.1, 0.5, 1.0, 2.0, 5.0):
            alive = sum(prs_sample_k(np.array([0.0]), horizon, self.provider, self.precond, self.rng) is not None
                        for _ in range(count))
            p = survival_oracle(horizon)
            self.assertLess(abs(alive / count - p), 4.0 * math.sqrt(p * (1 - p) / count), f"T={horizon}")

    def test_invalid_horizon(self):
        """Horizons must be positive and advances must move forward"""
        with self.assertRaises(ValueError):
            prs_sample_k(np.array([0.0]), 0.0, self.provider, self.precond, self.rng)
        traj = TrajectoryState.start(1.0, [0.0], self.theta)
        with self.assertRaises(ValueError):
            is_kbm_advance(traj, self.provider, self.precond, 1.0, self.rng)
        with self.assertRaises(ValueError):
            layer_half_widths(self.precond, 0.0)


class TestKernelGuards(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.precond = Preconditioner.identity(1)
        self.theta = layer_half_widths(self.precond, 1.0)

    def test_rate_above_upper_bound(self):
        """An evaluation beyond its layer bounds raises BoundViolation"""
        provider = FixedRateProvider(0.0, 10.0, 20.0)
        traj = TrajectoryState.start(0.0, [0.0], self.theta)
        with self.assertRaises(BoundViolation) as ctx:
            is_kbm_advance(traj, provider, self.precond, 100.0, self.rng)
        self.assertEqual(ctx.exception.diagnostics["phi"], 20.0)

    def test_lower_bound_below_floor(self):
        """Killed kernels refuse layers whose lower bound is under the floor"""
        provider = FixedRateProvider(0.0, 1.0, 0.5, floor=1.0)
        traj = TrajectoryState.start(0.0, [0.0], self.theta)
        with self.assertRaises(BoundViolation):
            kbm_propose(traj, provider, self.precond, self.rng)

    def test_missing_floor(self):
        """Killed kernels need a finite floor"""
        provider = FixedRateProvider(0.0, 1.0, 0.5, floor=-math.inf)
        traj = TrajectoryState.start(0.0, [0.0], self.theta)
        with self.assertRaises(ValueError):
            kbm_propose(traj, provider, self.precond, self.rng)

    def test_rate_at_upper_bound_kills_weight(self):
        """phi = U gives a zero event factor and a dead trajectory"""
        provider = FixedRateProvider(0.0, 10.0, 10.0)
        traj = TrajectoryState.start(0.0, [0.0], self.theta)
        is_kbm_advance(traj, provider, self.precond, 5.0, self.rng)
        self.assertFalse(traj.alive)
        self.assertEqual(traj.log_weight, -math.inf)

    def test_zero_rate_layer(self):
        """With L = U the weight only decays at rate L"""
        provider = FixedRateProvider(0.25, 0.25, 0.25)
        traj = TrajectoryState.start(0.0, [0.0], self.theta)
        is_kbm_advance(traj, provider, self.precond, 2.0, self.rng)
        self.assertAlmostEqual(traj.log_weight, -0.5, places=12)
        self.assertEqual(traj.event_count, 0)

    def test_copy_relayers(self):
        """Copies for cloning drop pending first passages; the original keeps them"""
        traj = TrajectoryState.start(0.0, [0.0], self.theta)
        advance_to(traj, self.precond, 0.2, self.rng)
        clone = traj.copy(relayer=True)
        self.assertIsNone(clone.skeleton.layer)
        self.assertIsNotNone(traj.skeleton.layer)
        np.testing.assert_array_equal(clone.current_state, traj.current_state)
        self.assertEqual(clone.counter.factor_touches, 0)


if __name__ == '__main__':
    unittest.main()
