"""
QSMC - Trajectory Samplers

Single-trajectory kernels over layered Brownian motion:
1. Importance-weighted killed Brownian motion (weights decay deterministically
   by the layer's lower bound and are thinned at Poisson events)
2. Killed Brownian motion (returns the exact kill time and location)
3. Path-space rejection sampling of the killed measure up to a horizon

A phi provider exposes evaluate(x, rng, counter), bounds(lo, hi, counter) and
a constant floor below every value it can return.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from bm_paths import LayerSegment, PathSkeleton, advance_constrained_path, ensure_layer
from errors import BoundViolation
from potential import CostCounter, PhiBounds

logger = logging.getLogger('qsmc.samplers')

# Relative slack for round-off in event factors
FACTOR_TOLERANCE = 1e-9


@dataclass
class TrajectoryState:
    """One trajectory: its skeleton, position, log weight and running costs"""

    skeleton: PathSkeleton
    current_time: float
    current_state: np.ndarray
    log_weight: float = 0.0
    alive: bool = True
    event_count: int = 0
    counter: CostCounter = field(default_factory=CostCounter)
    layer_bounds: Optional[PhiBounds] = None
    bounds_segment: Optional[LayerSegment] = field(default=None, repr=False)

    @classmethod
    def start(cls, time: float, state, theta) -> 'TrajectoryState':
        skeleton = PathSkeleton.start(time, state, theta)
        return cls(skeleton=skeleton, current_time=float(time), current_state=skeleton.last_state.copy())

    def copy(self, relayer: bool = True) -> 'TrajectoryState':
        """
        Independent copy for resampling and cloning.

        With relayer the copy forgets the pending first passages, so its
        future is simulated independently of the original.
        """
        skeleton = self.skeleton.copy()
        if relayer:
            skeleton.drop_layer()
        return TrajectoryState(skeleton=skeleton, current_time=self.current_time,
                               current_state=self.current_state.copy(), log_weight=self.log_weight,
                               alive=self.alive, event_count=self.event_count)


@dataclass
class KillRecord:
    """Kill time and location of a killed Brownian motion"""

    kill_time: float
    kill_state: np.ndarray
    skeleton: PathSkeleton


@dataclass(frozen=True)
class KbmCandidate:
    """Next point at which a killed trajectory must be looked at"""

    time: float
    kind: str  # 'event', 'hazard' or 'layer'


def layer_half_widths(precond, theta_scale: float) -> np.ndarray:
    """State-space half-widths theta_j = Lambda_jj^(1/2) c"""
    if not theta_scale > 0.0:
        raise ValueError(f"theta scale must be positive, got {theta_scale}")
    return theta_scale * np.asarray(precond.sqrt_diag, dtype=float)


def _current_layer(traj: TrajectoryState, provider, precond,
                   rng: np.random.Generator) -> Tuple[LayerSegment, PhiBounds]:
    segment = ensure_layer(traj.skeleton, precond, rng)
    if traj.bounds_segment is not segment:
        traj.layer_bounds = provider.bounds(segment.box_lo, segment.box_hi, traj.counter)
        traj.bounds_segment = segment
        traj.counter.layers += 1
    return segment, traj.layer_bounds


def advance_to(traj: TrajectoryState, precond, t: float, rng: np.random.Generator) -> np.ndarray:
    """Simulate the trajectory's path at time t without touching its weight"""
    state, _ = advance_constrained_path(traj.skeleton, precond, None, t, rng)
    traj.current_time = t
    traj.current_state = state
    return state


def _event_factor(bounds: PhiBounds, phi: float, base: float, traj: TrajectoryState) -> float:
    """(U - phi) / (U - base), checked to lie in [0, 1]"""
    top = bounds.upper
    slack = FACTOR_TOLERANCE * max(1.0, abs(top), abs(base))
    if phi < base - slack or phi > top + slack:
        raise BoundViolation("killing rate escaped its layer bounds",
                             {"phi": phi, "lower": base, "upper": top, "time": traj.current_time,
                              "state": traj.current_state.tolist()})
    span = top - base
    if span <= 0.0:
        return 1.0
    return min(max((top - phi) / span, 0.0), 1.0)


def _check_floor(bounds: PhiBounds, floor: float, traj: TrajectoryState) -> None:
    if not math.isfinite(floor):
        raise ValueError("provider has no finite kill-rate floor")
    if bounds.lower < floor - FACTOR_TOLERANCE * max(1.0, abs(floor)):
        raise BoundViolation("layer lower bound below the kill-rate floor",
                             {"lower": bounds.lower, "floor": floor, "time": traj.current_time,
                              "state": traj.current_state.tolist()})


def is_kbm_advance(traj: TrajectoryState, phi_provider, precond, until: float,
                   rng: np.random.Generator) -> TrajectoryState:
    """
    Advance an importance-weighted trajectory to exactly time until.

    Within each layer, events arrive at rate U - L; the log weight decays by
    L per unit time and an event at x multiplies the weight by
    (U - phi(x)) / (U - L). Events cut short by the layer end or by until
    contribute only the decay.
    """
    if not until > traj.current_time:
        raise ValueError(f"until={until} must exceed the current time {traj.current_time}")
    while traj.current_time < until:
        segment, bounds = _current_layer(traj, phi_provider, precond, rng)
        start = traj.current_time
        stop = min(segment.t_hi, until)
        rate = bounds.rate
        candidate = start + rng.exponential(1.0 / rate) if rate > 0.0 else math.inf
        is_event = candidate < stop
        xi = candidate if is_event else stop

        state = advance_to(traj, precond, xi, rng)
        traj.log_weight -= bounds.lower * (xi - start)
        if not is_event:
            continue
        traj.event_count += 1
        traj.counter.events += 1
        phi = phi_provider.evaluate(state, rng, traj.counter)
        factor = _event_factor(bounds, phi, bounds.lower, traj)
        if factor > 0.0:
            traj.log_weight += math.log(factor)
        else:
            traj.log_weight = -math.inf
            traj.alive = False
    return traj


def kbm_propose(traj: TrajectoryState, phi_provider, precond, rng: np.random.Generator,
                use_lower: bool = False) -> KbmCandidate:
    """
    Next candidate for a killed trajectory in its current layer.

    Events arrive at rate U - floor, or at rate U - L plus a sure kill at
    hazard L - floor when use_lower is set. The layer end is a candidate too.
    """
    segment, bounds = _current_layer(traj, phi_provider, precond, rng)
    floor = phi_provider.floor
    _check_floor(bounds, floor, traj)
    start = traj.current_time
    best = KbmCandidate(segment.t_hi, 'layer')
    if use_lower:
        rates = ((bounds.rate, 'event'), (bounds.lower - floor, 'hazard'))
    else:
        rates = ((bounds.upper - floor, 'event'),)
    for rate, kind in rates:
        if rate > 0.0:
            arrival = start + rng.exponential(1.0 / rate)
            if arrival < best.time:
                best = KbmCandidate(arrival, kind)
    return best


def kbm_resolve(traj: TrajectoryState, candidate: KbmCandidate, phi_provider, precond,
                rng: np.random.Generator, use_lower: bool = False) -> bool:
    """Move to the candidate and decide it; True when the trajectory dies there"""
    state = advance_to(traj, precond, candidate.time, rng)
    if candidate.kind == 'layer':
        return False
    traj.event_count += 1
    traj.counter.events += 1
    if candidate.kind == 'hazard':
        killed = True
    else:
        bounds = traj.layer_bounds
        base = bounds.lower if use_lower else phi_provider.floor
        phi = phi_provider.evaluate(state, rng, traj.counter)
        killed = rng.random() >= _event_factor(bounds, phi, base, traj)
    if killed:
        traj.alive = False
        traj.counter.kills += 1
    return killed


def kbm_advance(traj: TrajectoryState, phi_provider, precond, until: float,
                rng: np.random.Generator, use_lower: bool = False) -> Optional[KillRecord]:
    """Run a killed trajectory up to until; the kill record if it dies first"""
    while traj.current_time < until:
        candidate = kbm_propose(traj, phi_provider, precond, rng, use_lower)
        if candidate.time >= until:
            advance_to(traj, precond, until, rng)
            return None
        if kbm_resolve(traj, candidate, phi_provider, precond, rng, use_lower):
            return KillRecord(kill_time=traj.current_time, kill_state=traj.current_state.copy(),
                              skeleton=traj.skeleton)
    return None


def kbm_kill(start: Tuple[float, np.ndarray], phi_provider, precond, rng: np.random.Generator,
             theta_scale: float = 1.0, use_lower: bool = False,
             max_time: float = math.inf) -> Optional[KillRecord]:
    """
    Exact kill time and location of killed Brownian motion from start.

    Returns None only when a finite max_time is reached first; with the
    default the call returns once the trajectory is killed.
    """
    time, state = start
    traj = TrajectoryState.start(time, state, layer_half_widths(precond, theta_scale))
    return kbm_advance(traj, phi_provider, precond, max_time, rng, use_lower)


def prs_sample_k(start, horizon: float, phi_provider, precond, rng: np.random.Generator,
                 theta_scale: float = 1.0) -> Optional[PathSkeleton]:
    """
    Path-space rejection sampler for killed Brownian motion on [0, horizon].

    Each layer first passes a Bernoulli test with probability
    exp{(floor - L) * duration}, then its Poisson-thinned events. Returns the
    accepted skeleton, or None on rejection (the caller restarts).
    """
    if not horizon > 0.0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    traj = TrajectoryState.start(0.0, start, layer_half_widths(precond, theta_scale))
    floor = phi_provider.floor
    while True:
        segment, bounds = _current_layer(traj, phi_provider, precond, rng)
        _check_floor(bounds, floor, traj)
        seg_start = traj.current_time
        seg_end = min(segment.t_hi, horizon)

        if rng.random() >= math.exp((floor - bounds.lower) * (seg_end - seg_start)):
            return None

        rate = bounds.rate
        t = seg_start
        while rate > 0.0:
            t += rng.exponential(1.0 / rate)
            if t >= seg_end:
                break
            state = advance_to(traj, precond, t, rng)
            traj.event_count += 1
            traj.counter.events += 1
            phi = phi_provider.evaluate(state, rng, traj.counter)
            if rng.random() >= _event_factor(bounds, phi, bounds.lower, traj):
                return None

        advance_to(traj, precond, seg_end, rng)
        if seg_end >= horizon:
            return traj.skeleton
