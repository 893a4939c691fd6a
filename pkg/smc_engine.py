"""
QSMC - Population Engines

Four engines share one particle population model:
- qsmc     importance-weighted killed Brownian motion with ESS-triggered resampling
- scale    the same with the subsampled killing-rate estimator
- r-qsmc   killed trajectories re-armed by cloning a uniformly chosen survivor
- r-scale  the same with the subsampled estimator and a support-box floor

Each engine emits one CheckpointRecord per checkpoint time; the posterior is
estimated by the occupation measure of the records after burn-in.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import ConfigError, NumericFault
from potential import CostCounter, ExactPhi, Preconditioner, SubsampledPhi, TargetModel, \
    precompute_control_variates
from samplers import TrajectoryState, advance_to, is_kbm_advance, kbm_propose, kbm_resolve, \
    layer_half_widths

logger = logging.getLogger('qsmc.smc_engine')

ENGINES = ("qsmc", "scale", "r-qsmc", "r-scale")
ESTIMATORS = ("exact", "subsampled", "exact-wide")
RESAMPLERS = ("multinomial", "systematic")

WEIGHT_TOLERANCE = 1e-12

# spawn_key prefixes of the two stream families
PARTICLE_STREAM = 0
SYSTEM_STREAM = 1


def stream_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream for (seed, key); independent of scheduling order"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass
class RunConfig:
    """Population and schedule settings of one engine run"""

    n_particles: int = 1024
    horizon: float = 50.0
    checkpoint_gap: float = 0.1
    ess_threshold: Optional[float] = None
    burn_in: float = 10.0
    seed: int = 0
    estimator: Optional[str] = None
    batch_size: int = 1
    resampler: str = "systematic"
    engine: str = "qsmc"
    theta_scale: float = 1.0
    threads: int = 1
    kbm_use_lower: bool = False
    support_width: float = 10.0

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine '{self.engine}', expected one of {ENGINES}")
        if self.estimator is None:
            self.estimator = "subsampled" if self.engine in ("scale", "r-scale") else "exact"
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator '{self.estimator}', expected one of {ESTIMATORS}")
        if self.engine in ("scale", "r-scale") and self.estimator != "subsampled":
            raise ConfigError(f"engine {self.engine} needs the subsampled estimator")
        if self.engine == "qsmc" and self.estimator == "subsampled":
            raise ConfigError("engine qsmc uses the exact estimator; use engine scale for subsampling")
        if self.engine == "r-qsmc" and self.estimator != "exact":
            raise ConfigError("engine r-qsmc needs the exact estimator")
        if self.resampler not in RESAMPLERS:
            raise ConfigError(f"unknown resampler '{self.resampler}', expected one of {RESAMPLERS}")
        if self.n_particles < 1:
            raise ConfigError(f"n_particles must be positive, got {self.n_particles}")
        if self.engine in ("r-qsmc", "r-scale") and self.n_particles < 2:
            raise ConfigError(f"engine {self.engine} needs at least two particles to clone from")
        if self.ess_threshold is None:
            self.ess_threshold = self.n_particles / 2.0
        if not 0.0 <= self.ess_threshold <= self.n_particles:
            raise ConfigError(f"ess_threshold must lie in [0, {self.n_particles}], got {self.ess_threshold}")
        if not (self.horizon > 0.0 and self.checkpoint_gap > 0.0):
            raise ConfigError("horizon and checkpoint_gap must be positive")
        ratio = self.horizon / self.checkpoint_gap
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError(f"checkpoint_gap {self.checkpoint_gap} does not divide horizon {self.horizon}")
        if not 0.0 <= self.burn_in < self.horizon:
            raise ConfigError(f"burn_in must lie in [0, horizon), got {self.burn_in}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.theta_scale <= 0.0 or self.support_width <= 0.0:
            raise ConfigError("theta_scale and support_width must be positive")
        if self.threads < 1:
            raise ConfigError(f"threads must be positive, got {self.threads}")

    @property
    def n_checkpoints(self) -> int:
        return int(round(self.horizon / self.checkpoint_gap))

    def checkpoint_times(self) -> np.ndarray:
        m = self.n_checkpoints
        return np.array([i * self.horizon / m for i in range(1, m + 1)])

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class ParticleCloud:
    """Particles with their normalised weights at one time"""

    particles: List[TrajectoryState]
    normalized_weights: np.ndarray
    time: float

    def __post_init__(self):
        weights = np.asarray(self.normalized_weights, dtype=float)
        if weights.shape != (len(self.particles),) or np.any(weights < 0.0) \
                or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE * max(1, len(weights)):
            raise ValueError("cloud weights must be a simplex vector over the particles")
        self.normalized_weights = weights

    @classmethod
    def initial(cls, x_hat, n: int, theta, time: float = 0.0) -> 'ParticleCloud':
        particles = [TrajectoryState.start(time, x_hat, theta) for _ in range(n)]
        for particle in particles:
            particle.log_weight = -math.log(n)
        return cls(particles=particles, normalized_weights=np.full(n, 1.0 / n), time=time)

    @property
    def size(self) -> int:
        return len(self.particles)

    def states(self) -> np.ndarray:
        return np.array([p.current_state for p in self.particles])


@dataclass
class CheckpointRecord:
    """Weighted particle states emitted at one checkpoint"""

    time: float
    states: np.ndarray
    weights: np.ndarray
    ess: float
    resampled: bool
    cost_counters: Dict[str, int] = field(default_factory=dict)

    def mean(self) -> np.ndarray:
        return self.weights @ self.states


@dataclass
class OccupationEstimate:
    """Weighted occupation measure of the particle trajectories over [t*, T]"""

    states: np.ndarray
    weights: np.ndarray
    n_checkpoints: int

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    @property
    def covariance(self) -> np.ndarray:
        centred = self.states - self.mean
        return (centred * self.weights[:, None]).T @ centred

    def marginal_histogram(self, coord: int, bins: int = 50) -> Tuple[np.ndarray, np.ndarray]:
        """Weighted density histogram of one coordinate: (densities, edges)"""
        return np.histogram(self.states[:, coord], bins=bins, weights=self.weights, density=True)

    def _ecdf(self, coord: int) -> Tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.states[:, coord], kind="stable")
        values = self.states[order, coord]
        cum = np.cumsum(self.weights[order])
        cum /= cum[-1]
        # Collapse ties onto their last cumulative weight
        last = np.r_[values[1:] != values[:-1], True]
        return values[last], cum[last]

    def cdf(self, coord: int, points) -> np.ndarray:
        values, cum = self._ecdf(coord)
        idx = np.searchsorted(values, np.asarray(points, dtype=float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def ks_distance(self, reference: Callable[[np.ndarray], np.ndarray], coord: int = 0) -> float:
        """Kolmogorov-Smirnov distance of one marginal to a reference CDF"""
        values, cum = self._ecdf(coord)
        ref = np.asarray(reference(values), dtype=float)
        before = np.r_[0.0, cum[:-1]]
        return float(max(np.max(cum - ref), np.max(ref - before)))

    def ks_distance_to(self, other: 'OccupationEstimate', coord: int = 0) -> float:
        """Two-sample Kolmogorov-Smirnov distance between weighted marginals"""
        grid = np.union1d(self.states[:, coord], other.states[:, coord])
        return float(np.max(np.abs(self.cdf(coord, grid) - other.cdf(coord, grid))))


def effective_sample_size(weights) -> float:
    """Kong-Liu-Wong effective sample size 1 / sum(w^2) of normalised weights"""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size == 0 or np.any(weights < 0.0) \
            or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE * max(1, weights.size):
        raise ValueError("effective sample size needs a simplex vector")
    return float(1.0 / np.sum(weights * weights))


def offspring_indices(weights, scheme: str, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Parent index of each offspring under multinomial or systematic resampling"""
    weights = np.asarray(weights, dtype=float)
    n = weights.shape[0] if size is None else int(size)
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    if scheme == "multinomial":
        uniforms = rng.random(n)
    elif scheme == "systematic":
        uniforms = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme '{scheme}'")
    return np.minimum(np.searchsorted(cumulative, uniforms, side="right"), weights.shape[0] - 1)


def resample(cloud: ParticleCloud, scheme: str, rng: np.random.Generator) -> ParticleCloud:
    """N offspring with weights 1/N; each is an independent copy of its parent"""
    n = cloud.size
    parents = offspring_indices(cloud.normalized_weights, scheme, rng)
    offspring = []
    for parent in parents:
        child = cloud.particles[parent].copy(relayer=True)
        child.log_weight = -math.log(n)
        offspring.append(child)
    return ParticleCloud(particles=offspring, normalized_weights=np.full(n, 1.0 / n), time=cloud.time)


def _normalize(log_weights: np.ndarray, time: float) -> np.ndarray:
    if not np.any(np.isfinite(log_weights)):
        raise NumericFault("every particle weight is zero at a checkpoint", {"time": time})
    weights = np.exp(log_weights - logsumexp(log_weights))
    return weights / weights.sum()


def _map_particles(executor: Optional[ThreadPoolExecutor], fn, count: int) -> None:
    if executor is None:
        for k in range(count):
            fn(k)
    else:
        list(executor.map(fn, range(count)))


def _collect_costs(particles: Sequence[TrajectoryState], carry: CostCounter) -> Dict[str, int]:
    total = CostCounter()
    total.merge(carry)
    carry.reset()
    for particle in particles:
        total.merge(particle.counter)
        particle.counter.reset()
    return total.as_dict()


def _resolve_x_hat(model: TargetModel, x_hat) -> np.ndarray:
    if x_hat is not None:
        return np.asarray(x_hat, dtype=float).reshape(-1)
    from models import find_mode
    return find_mode(model)


def _importance_run(config: RunConfig, provider, precond: Preconditioner, x_hat: np.ndarray) -> List[CheckpointRecord]:
    n = config.n_particles
    theta = layer_half_widths(precond, config.theta_scale)
    cloud = ParticleCloud.initial(x_hat, n, theta)
    ess = float(n)
    carry = CostCounter()
    records: List[CheckpointRecord] = []
    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for g, t_next in enumerate(config.checkpoint_times(), start=1):
            resampled = ess <= config.ess_threshold
            if resampled:
                cloud = resample(cloud, config.resampler, stream_for(config.seed, SYSTEM_STREAM, g))
                logger.debug("Resampled at t=%.6g (ESS %.2f <= %.2f)", cloud.time, ess, config.ess_threshold)

            particles = cloud.particles

            def advance(k: int, until=float(t_next), generation=g):
                try:
                    is_kbm_advance(particles[k], provider, precond, until,
                                   stream_for(config.seed, PARTICLE_STREAM, k, generation))
                except NumericFault as e:
                    e.diagnostics.setdefault("particle", k)
                    raise

            _map_particles(executor, advance, n)

            log_weights = np.array([p.log_weight for p in particles])
            weights = _normalize(log_weights, float(t_next))
            for particle, w in zip(particles, weights):
                particle.log_weight = math.log(w) if w > 0.0 else -math.inf
                particle.skeleton.truncate_history(float(t_next))
            cloud = ParticleCloud(particles=particles, normalized_weights=weights, time=float(t_next))
            ess = effective_sample_size(weights)
            record = CheckpointRecord(time=float(t_next), states=cloud.states(), weights=weights.copy(),
                                      ess=ess, resampled=resampled,
                                      cost_counters=_collect_costs(particles, carry))
            records.append(record)
            logger.debug("t=%.6g ESS=%.2f mean=%s", record.time, ess, np.round(record.mean(), 6).tolist())
    finally:
        if executor is not None:
            executor.shutdown()
    return records


def _rejection_run(config: RunConfig, provider, precond: Preconditioner, x_hat: np.ndarray) -> List[CheckpointRecord]:
    n = config.n_particles
    if n < 2:
        raise ConfigError("rejection engines need at least two particles to clone from")
    use_lower = config.kbm_use_lower
    theta = layer_half_widths(precond, config.theta_scale)
    particles = [TrajectoryState.start(0.0, x_hat, theta) for _ in range(n)]
    streams = [stream_for(config.seed, PARTICLE_STREAM, k, 0) for k in range(n)]
    donors = stream_for(config.seed, SYSTEM_STREAM, 0)
    pending = [kbm_propose(particles[k], provider, precond, streams[k], use_lower) for k in range(n)]
    times = np.array([c.time for c in pending])
    uniform = np.full(n, 1.0 / n)
    carry = CostCounter()
    records: List[CheckpointRecord] = []

    for t_next in config.checkpoint_times():
        t_next = float(t_next)
        while True:
            k = int(np.argmin(times))
            if times[k] >= t_next:
                break
            if not kbm_resolve(particles[k], pending[k], provider, precond, streams[k], use_lower):
                pending[k] = kbm_propose(particles[k], provider, precond, streams[k], use_lower)
                times[k] = pending[k].time
                continue

            kill_time = particles[k].current_time
            donor = int(donors.integers(0, n - 1))
            if donor >= k:
                donor += 1
            assert donor != k
            advance_to(particles[donor], precond, kill_time, streams[donor])
            carry.merge(particles[k].counter)
            clone = particles[donor].copy(relayer=True)
            clone.alive = True
            particles[k] = clone
            pending[k] = kbm_propose(clone, provider, precond, streams[k], use_lower)
            times[k] = pending[k].time

        for j, particle in enumerate(particles):
            advance_to(particle, precond, t_next, streams[j])
            particle.skeleton.truncate_history(t_next)
        states = np.array([p.current_state for p in particles])
        record = CheckpointRecord(time=t_next, states=states, weights=uniform.copy(), ess=float(n),
                                  resampled=False, cost_counters=_collect_costs(particles, carry))
        records.append(record)
        logger.debug("t=%.6g kills=%d mean=%s", t_next, record.cost_counters["kills"],
                     np.round(record.mean(), 6).tolist())
    return records


def _control_variates(config: RunConfig, model: TargetModel, precond: Preconditioner, x_hat, cache):
    if cache is not None:
        return cache
    return precompute_control_variates(model, precond, x_hat, threads=config.threads)


def qsmc_run(config: RunConfig, model: TargetModel, precond: Preconditioner, x_hat=None,
             cache=None) -> List[CheckpointRecord]:
    """Importance-weighted QSMC with the exact killing rate (or exact-wide bounds)"""
    x_hat = _resolve_x_hat(model, x_hat)
    if config.estimator == "exact-wide":
        provider = ExactPhi(model, precond, wide_bounds=_control_variates(config, model, precond, x_hat, cache))
    else:
        provider = ExactPhi(model, precond)
    logger.info("QSMC: N=%d T=%g gap=%g estimator=%s", config.n_particles, config.horizon,
                config.checkpoint_gap, config.estimator)
    return _importance_run(config, provider, precond, x_hat)


def scale_run(config: RunConfig, model: TargetModel, precond: Preconditioner, x_hat=None,
              cache=None) -> List[CheckpointRecord]:
    """Importance-weighted QSMC with the control-variate subsampled killing rate"""
    x_hat = _resolve_x_hat(model, x_hat)
    cache = _control_variates(config, model, precond, x_hat, cache)
    provider = SubsampledPhi(cache, model, precond, config.batch_size)
    logger.info("ScaLE: N=%d T=%g batch=%d", config.n_particles, config.horizon, config.batch_size)
    return _importance_run(config, provider, precond, cache.x_hat)


def r_qsmc_run(config: RunConfig, model: TargetModel, precond: Preconditioner, x_hat=None,
               cache=None) -> List[CheckpointRecord]:
    """Rejection QSMC: exact kills, killed slots re-armed from surviving particles"""
    x_hat = _resolve_x_hat(model, x_hat)
    logger.info("R-QSMC: N=%d T=%g use_lower=%s", config.n_particles, config.horizon, config.kbm_use_lower)
    return _rejection_run(config, ExactPhi(model, precond), precond, x_hat)


def r_scale_run(config: RunConfig, model: TargetModel, precond: Preconditioner, x_hat=None,
                cache=None) -> List[CheckpointRecord]:
    """Rejection QSMC with the subsampled killing rate and a support-box floor"""
    x_hat = _resolve_x_hat(model, x_hat)
    cache = _control_variates(config, model, precond, x_hat, cache)
    provider = SubsampledPhi.with_support_floor(cache, model, precond, config.batch_size, config.support_width)
    logger.info("R-ScaLE: N=%d T=%g batch=%d", config.n_particles, config.horizon, config.batch_size)
    return _rejection_run(config, provider, precond, cache.x_hat)


ENGINE_RUNNERS = {
    "qsmc": qsmc_run,
    "scale": scale_run,
    "r-qsmc": r_qsmc_run,
    "r-scale": r_scale_run,
}


def run_engine(config: RunConfig, model: TargetModel, precond: Preconditioner, x_hat=None,
               cache=None) -> List[CheckpointRecord]:
    """Dispatch on config.engine"""
    return ENGINE_RUNNERS[config.engine](config, model, precond, x_hat=x_hat, cache=cache)


def occupation_estimate(records: Sequence[CheckpointRecord], t_star: float, T: float) -> OccupationEstimate:
    """
    Pool (state, weight / |checkpoints|) over the checkpoints in [t_star, T].
    """
    if not t_star < T:
        raise ValueError(f"t_star={t_star} must be below T={T}")
    slack = 1e-9 * max(1.0, abs(T))
    chosen = [r for r in records if t_star - slack <= r.time <= T + slack]
    if not chosen:
        raise ValueError(f"no checkpoints in [{t_star}, {T}]")
    states = np.vstack([r.states for r in chosen])
    weights = np.concatenate([r.weights for r in chosen]) / len(chosen)
    weights = weights / weights.sum()
    return OccupationEstimate(states=states, weights=weights, n_checkpoints=len(chosen))
