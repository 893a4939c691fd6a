"""
QSMC - Brownian Path Simulation

Exact simulation of Brownian motion constrained to hypercuboid layers.

Provides:
1. First-passage times of standard Brownian motion through symmetric barriers
   (series sampler with retrospective acceptance)
2. Bessel-bridge points between a known point and the barrier extremum
3. Path skeletons that are extended forward in time one layer at a time

All samplers take an explicit numpy Generator and share no mutable state.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy import integrate, special

from errors import SamplerFault

logger = logging.getLogger('qsmc.bm_paths')

# Splice point between the two envelope pieces
T_STAR = 0.64

# Caps for the almost-surely finite loops
MAX_OUTER_ITERATIONS = 10**6
MAX_INNER_ITERATIONS = 10**3

# Relative magnitude at which oracle series stop
ORACLE_TERM_TOLERANCE = 1e-30

# Slack allowed when checking states against layer boxes
CONTAINMENT_TOLERANCE = 1e-9


def _envelope_small(t: float) -> float:
    if t <= 0.0:
        return 0.0
    return math.sqrt(2.0 / math.pi) * t**-1.5 * math.exp(-0.5 / t)


def _envelope_large(t: float) -> float:
    return 0.5 * math.pi * math.exp(-math.pi**2 * t / 8.0)


@dataclass(frozen=True)
class UnitFptProposalConstants:
    """Masses of the two pieces of the first-passage envelope"""

    t_star: float
    m1: float
    m2: float

    def __post_init__(self):
        window = (math.log(3.0) / math.pi**2, 4.0 / math.log(3.0))
        if not window[0] <= self.t_star <= window[1]:
            raise ValueError(f"t_star={self.t_star} outside the splice window {window}")
        if self.m1 <= 0.0 or self.m2 <= 0.0:
            raise ValueError("envelope masses must be positive")

    @property
    def m(self) -> float:
        return self.m1 + self.m2

    @property
    def first_branch_probability(self) -> float:
        return self.m1 / self.m

    @classmethod
    def from_quadrature(cls, t_star: float = T_STAR) -> 'UnitFptProposalConstants':
        """Integrate both envelope pieces numerically"""
        m1, _ = integrate.quad(_envelope_small, 0.0, t_star, epsabs=1e-13, epsrel=1e-12)
        m2, _ = integrate.quad(_envelope_large, t_star, np.inf, epsabs=1e-13, epsrel=1e-12)
        return cls(t_star=t_star, m1=m1, m2=m2)


@lru_cache(maxsize=None)
def fpt_proposal_constants(t_star: float = T_STAR) -> UnitFptProposalConstants:
    """Envelope constants, computed once per splice point"""
    constants = UnitFptProposalConstants.from_quadrature(t_star)
    logger.debug("First-passage envelope masses: M1=%.6f M2=%.6f", constants.m1, constants.m2)
    return constants


@dataclass
class FptStats:
    """Counters for the first-passage sampler"""

    proposals: int = 0
    accepted: int = 0
    refinements: int = 0

    @property
    def mean_refinements(self) -> float:
        return self.refinements / self.proposals if self.proposals else 0.0


@dataclass(frozen=True)
class FirstPassage:
    """Exit time and side of a Brownian motion leaving [start - level, start + level]"""

    tau: float
    endpoint_sign: int
    level: float
    start: float = 0.0

    @property
    def endpoint(self) -> float:
        return self.start + self.endpoint_sign * self.level


def unit_fpt_envelope(t: float, constants: Optional[UnitFptProposalConstants] = None) -> float:
    """Dominating function g for the unit first-passage density"""
    constants = constants or fpt_proposal_constants()
    if t <= constants.t_star:
        return _envelope_small(t)
    return _envelope_large(t)


def _alternating_terms(t: float, count: int, t_star: float) -> List[float]:
    """Signed terms of the density series; caller multiplies the sum by pi"""
    terms = []
    if t <= t_star:
        scale = (2.0 / (math.pi * t))**1.5
        for k in range(count):
            half = k + 0.5
            terms.append((-1)**k * scale * half * math.exp(-2.0 * half * half / t))
    else:
        for k in range(count):
            half = k + 0.5
            terms.append((-1)**k * half * math.exp(-0.5 * half * half * math.pi**2 * t))
    return terms


def unit_fpt_density_bounds(t: float, n: int,
                            constants: Optional[UnitFptProposalConstants] = None) -> Tuple[float, float]:
    """
    Lower and upper bounds on the unit first-passage density at depth n.

    Args:
        t: time, must be positive
        n: series depth (n >= 0)

    Returns:
        (lower, upper) with lower clipped at zero and upper clipped at the envelope
    """
    if not t > 0.0:
        raise ValueError(f"first-passage density needs t > 0, got {t}")
    if n < 0:
        raise ValueError(f"series depth must be non-negative, got {n}")
    constants = constants or fpt_proposal_constants()
    terms = _alternating_terms(t, 2 * n + 2, constants.t_star)
    upper = math.pi * math.fsum(terms[:2 * n + 1])
    lower = math.pi * math.fsum(terms)
    return max(lower, 0.0), min(upper, unit_fpt_envelope(t, constants))


def propose_unit_fpt_time(rng: np.random.Generator,
                          constants: Optional[UnitFptProposalConstants] = None) -> float:
    """Draw a time from the normalised envelope"""
    constants = constants or fpt_proposal_constants()
    t_star = constants.t_star
    if rng.random() < constants.first_branch_probability:
        # Normal tail beyond 1/sqrt(t_star), mapped back to time
        for _ in range(MAX_INNER_ITERATIONS):
            x1 = rng.standard_exponential()
            x2 = rng.standard_exponential()
            if x1 * x1 <= 2.0 * x2 / t_star:
                return t_star / (1.0 + t_star * x1)**2
        raise SamplerFault("normal-tail proposal exceeded its iteration cap",
                           {"t_star": t_star, "cap": MAX_INNER_ITERATIONS})
    return t_star + 8.0 * rng.standard_exponential() / math.pi**2


def sample_unit_fpt(rng: np.random.Generator, stats: Optional[FptStats] = None,
                    constants: Optional[UnitFptProposalConstants] = None) -> Tuple[float, int]:
    """
    Exact draw of the first time standard Brownian motion leaves [-1, 1].

    Returns:
        (tau_bar, sign) where sign is the barrier that was hit
    """
    constants = constants or fpt_proposal_constants()
    for _ in range(MAX_OUTER_ITERATIONS):
        t = propose_unit_fpt_time(rng, constants)
        target = rng.random() * unit_fpt_envelope(t, constants)
        if stats is not None:
            stats.proposals += 1
        accepted = None
        for n in range(MAX_INNER_ITERATIONS):
            lower, upper = unit_fpt_density_bounds(t, n, constants)
            if stats is not None:
                stats.refinements += 1
            if target <= lower:
                accepted = True
                break
            if target >= upper:
                accepted = False
                break
        if accepted is None:
            raise SamplerFault("first-passage density bounds did not separate",
                               {"t": t, "target": target, "cap": MAX_INNER_ITERATIONS})
        if accepted:
            if stats is not None:
                stats.accepted += 1
            sign = 1 if rng.random() < 0.5 else -1
            return t, sign
    raise SamplerFault("first-passage sampler exceeded its proposal cap",
                       {"cap": MAX_OUTER_ITERATIONS})


def sample_fpt(start: float, theta: float, rng: np.random.Generator,
               stats: Optional[FptStats] = None) -> FirstPassage:
    """First passage of Brownian motion from start through start +/- theta"""
    if not theta > 0.0:
        raise ValueError(f"barrier half-width must be positive, got {theta}")
    tau_bar, sign = sample_unit_fpt(rng, stats)
    return FirstPassage(tau=theta * theta * tau_bar, endpoint_sign=sign, level=theta, start=start)


def unit_fpt_cdf(t: float, max_terms: int = 10**4) -> float:
    """Series CDF of the unit first-passage time (oracle, not used by the sampler)"""
    if t <= 0.0:
        return 0.0
    terms = []
    if t <= T_STAR:
        root = math.sqrt(2.0 * t)
        for k in range(max_terms):
            term = 2.0 * (-1)**k * float(special.erfc((2 * k + 1) / root))
            terms.append(term)
            if abs(term) <= ORACLE_TERM_TOLERANCE * abs(math.fsum(terms)):
                break
        return math.fsum(terms)
    for k in range(max_terms):
        term = (-1)**k / (2 * k + 1) * math.exp(-(2 * k + 1)**2 * math.pi**2 * t / 8.0)
        terms.append(term)
        if abs(term) <= ORACLE_TERM_TOLERANCE * abs(math.fsum(terms)):
            break
    return 1.0 - 4.0 / math.pi * math.fsum(terms)


def unit_fpt_density(t: float, max_terms: int = 10**4) -> float:
    """Long-series evaluation of the unit first-passage density (oracle)"""
    if t <= 0.0:
        return 0.0
    terms = []
    for k in range(max_terms):
        half = k + 0.5
        if t <= T_STAR:
            term = (-1)**k * (2.0 / (math.pi * t))**1.5 * half * math.exp(-2.0 * half * half / t)
        else:
            term = (-1)**k * half * math.exp(-0.5 * half * half * math.pi**2 * t)
        terms.append(term)
        if abs(term) <= ORACLE_TERM_TOLERANCE * abs(math.fsum(terms)):
            break
    return math.pi * math.fsum(terms)


def _series_start(span: float, theta: float) -> int:
    return int(math.ceil(math.sqrt(span + 4.0 * theta * theta) / (4.0 * theta)))


def _two_sided_terms(j: int, x: float, y: float, lo: float, hi: float, span: float) -> Tuple[float, float]:
    """Pair of terms in the probability that a Brownian bridge stays in (lo, hi)"""
    width = hi - lo
    jw = j * width
    sigma = (math.exp(-2.0 * (jw + lo - x) * (jw + lo - y) / span)
             + math.exp(-2.0 * (jw - hi + x) * (jw - hi + y) / span))
    tau = (math.exp(-2.0 * jw * (jw + x - y) / span)
           + math.exp(-2.0 * jw * (jw - x + y) / span))
    return sigma, tau


def bessel_acceptance_bounds(n: int, s: float, q: float, tau: float, w_s: float, w_q: float,
                             w_tau: float, theta: float,
                             center: Optional[float] = None) -> Tuple[float, float]:
    """
    Bounds on the probability that a Bessel-bridge proposal respects the layer.

    The path runs from (s, w_s) to its extremum (tau, w_tau) and must stay in
    [center - theta, center + theta]; center defaults to w_s.

    Returns:
        (p_lower, p_upper), both in [0, 1]
    """
    if center is None:
        center = w_s
    if not s < q < tau:
        raise ValueError(f"need s < q < tau, got {s}, {q}, {tau}")
    if not theta > 0.0 or n < 1:
        raise ValueError(f"need theta > 0 and n >= 1, got theta={theta}, n={n}")
    slack = CONTAINMENT_TOLERANCE * max(1.0, theta)
    if abs(abs(w_tau - center) - theta) > slack:
        raise ValueError(f"extremum {w_tau} is not on the barrier of the box centred at {center}")
    if abs(w_s - center) > theta + slack or abs(w_q - center) > theta + slack:
        raise ValueError("bridge points must lie inside the layer")

    m = 1.0 if w_tau > center else -1.0
    lo, hi = center - theta, center + theta
    d0 = abs(w_tau - w_s)
    dq = abs(w_tau - w_q)
    if d0 <= 0.0 or dq <= 0.0:
        return 0.0, 0.0

    # Bridge from s to q inside the box, relative to not crossing the extremum level
    span1 = q - s
    depth1 = _series_start(span1, theta) + n - 1
    sigmas, taus = [], []
    for j in range(1, depth1 + 1):
        sigma_j, tau_j = _two_sided_terms(j, w_s, w_q, lo, hi, span1)
        sigmas.append(-sigma_j)
        taus.append(tau_j)
    denominator = -math.expm1(-2.0 * d0 * dq / span1)
    first_lower = math.fsum([1.0] + sigmas + taus[:-1]) / denominator
    first_upper = math.fsum([1.0] + sigmas + taus) / denominator

    # Bessel bridge from q to the extremum staying within 2 theta of it
    span2 = tau - q
    depth2 = _series_start(span2, theta) + n
    md = m * (w_q - w_tau)
    psis, chis = [], []
    for j in range(1, depth2 + 1):
        reach = 4.0 * theta * j
        psis.append((reach + md) / md * math.exp(-(reach / span2) * (2.0 * theta * j + md)))
        chis.append((reach - md) / (-md) * math.exp(-(reach / span2) * (2.0 * theta * j - md)))
    second_lower = math.fsum([1.0] + psis + chis[:-1])
    second_upper = math.fsum([1.0] + psis + chis)

    def clip(value: float) -> float:
        return min(max(value, 0.0), 1.0)

    return (clip(first_lower) * clip(second_lower), clip(first_upper) * clip(second_upper))


def sample_bessel_bridge_point(s: float, tau: float, w_s: float, w_tau: float, theta: float,
                               q: float, rng: np.random.Generator,
                               center: Optional[float] = None) -> float:
    """
    Exact draw of W_q for Brownian motion from (s, w_s) to its extremum (tau, w_tau),
    conditioned to stay in [center - theta, center + theta].
    """
    if center is None:
        center = w_s
    if not s < q < tau:
        raise ValueError(f"need s < q < tau, got {s}, {q}, {tau}")
    m = 1.0 if w_tau > center else -1.0
    span = tau - s
    d0 = abs(w_tau - w_s)
    spread = math.sqrt((tau - q) * (q - s)) / span
    drift = d0 * (tau - q) / span**1.5
    lo, hi = center - theta, center + theta

    for _ in range(MAX_OUTER_ITERATIONS):
        b1, b2, b3 = rng.normal(0.0, spread, 3)
        radius = math.sqrt(span * ((drift + b1)**2 + b2 * b2 + b3 * b3))
        w_q = w_tau - m * radius
        if w_q < lo or w_q > hi:
            continue
        u = rng.random()
        for n in range(1, MAX_INNER_ITERATIONS + 1):
            p_lower, p_upper = bessel_acceptance_bounds(n, s, q, tau, w_s, w_q, w_tau, theta, center)
            if u <= p_lower:
                return w_q
            if u >= p_upper:
                break
        else:
            raise SamplerFault("Bessel acceptance bounds did not separate",
                               {"s": s, "q": q, "tau": tau, "w_s": w_s, "w_q": w_q,
                                "w_tau": w_tau, "theta": theta, "u": u})
    raise SamplerFault("Bessel-bridge sampler exceeded its proposal cap",
                       {"s": s, "q": q, "tau": tau, "theta": theta})


@dataclass
class LayerSegment:
    """One hypercuboid layer of a path between successive first-passage times"""

    t_lo: float
    t_hi: float
    anchor: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    theta: np.ndarray
    exit_state: Optional[np.ndarray] = None
    exit_dim: Optional[int] = None

    @property
    def is_closed(self) -> bool:
        return self.exit_state is not None

    def contains(self, state: np.ndarray, tolerance: float = CONTAINMENT_TOLERANCE) -> bool:
        slack = tolerance * np.maximum(1.0, self.theta)
        return bool(np.all(state >= self.box_lo - slack) and np.all(state <= self.box_hi + slack))

    def truncated(self, time: float, state: np.ndarray) -> 'LayerSegment':
        """Copy of this segment cut short at time, with no exit dimension"""
        return replace(self, t_hi=time, exit_state=np.array(state, dtype=float), exit_dim=None)


@dataclass
class _ActiveLayer:
    """Pending first passages of every dimension for the open segment"""

    centers: np.ndarray
    thetas: np.ndarray
    exit_times: np.ndarray
    exit_values: np.ndarray

    def copy(self) -> '_ActiveLayer':
        return _ActiveLayer(self.centers.copy(), self.thetas.copy(),
                            self.exit_times.copy(), self.exit_values.copy())


@dataclass
class PathSkeleton:
    """
    Finite exact representation of one Brownian trajectory.

    Segments tile the simulated time range; the last segment stays open while
    its dimension-wise first passages are pending.
    """

    origin_time: float
    origin_state: np.ndarray
    theta: np.ndarray
    segments: List[LayerSegment] = field(default_factory=list)
    eval_points: List[Tuple[float, np.ndarray]] = field(default_factory=list)
    last_time: float = 0.0
    last_state: Optional[np.ndarray] = None
    layer: Optional[_ActiveLayer] = None

    @classmethod
    def start(cls, time: float, state, theta) -> 'PathSkeleton':
        state = np.array(state, dtype=float).reshape(-1)
        theta = np.broadcast_to(np.asarray(theta, dtype=float), state.shape).copy()
        if np.any(theta <= 0.0):
            raise ValueError("layer half-widths must be positive")
        return cls(origin_time=float(time), origin_state=state.copy(), theta=theta,
                   last_time=float(time), last_state=state.copy())

    @property
    def origin(self) -> Tuple[float, np.ndarray]:
        return self.origin_time, self.origin_state

    @property
    def dim(self) -> int:
        return self.origin_state.shape[0]

    @property
    def current_segment(self) -> Optional[LayerSegment]:
        if self.layer is None or not self.segments:
            return None
        return self.segments[-1]

    def copy(self) -> 'PathSkeleton':
        """Independent copy sharing no arrays"""
        return PathSkeleton(
            origin_time=self.origin_time,
            origin_state=self.origin_state.copy(),
            theta=self.theta.copy(),
            segments=[replace(seg, anchor=seg.anchor.copy(),
                              exit_state=None if seg.exit_state is None else seg.exit_state.copy())
                      for seg in self.segments],
            eval_points=[(t, x.copy()) for t, x in self.eval_points],
            last_time=self.last_time,
            last_state=self.last_state.copy(),
            layer=None if self.layer is None else self.layer.copy(),
        )

    def drop_layer(self) -> None:
        """Forget pending first passages; the open segment ends at the latest point"""
        if self.layer is None:
            return
        segment = self.segments.pop()
        if self.last_time > segment.t_lo:
            self.segments.append(segment.truncated(self.last_time, self.last_state))
        self.layer = None

    def truncate_history(self, keep_from: float) -> None:
        """Discard closed segments and eval points that end before keep_from"""
        self.segments = [seg for seg in self.segments
                         if not seg.is_closed or seg.t_hi > keep_from]
        self.eval_points = [(t, x) for t, x in self.eval_points if t >= keep_from]

    def check_invariants(self) -> bool:
        """True when eval points are ordered and every point lies in its segment"""
        times = [t for t, _ in self.eval_points]
        if any(b <= a for a, b in zip(times, times[1:])):
            return False
        for a, b in zip(self.segments, self.segments[1:]):
            if abs(a.t_hi - b.t_lo) > 1e-12 or a.t_lo >= a.t_hi:
                return False
        for t, x in self.eval_points:
            covering = [seg for seg in self.segments if seg.t_lo <= t <= seg.t_hi]
            if covering and not any(seg.contains(x) for seg in covering):
                return False
        for seg in self.segments:
            if not seg.contains(seg.anchor):
                return False
            if seg.exit_state is not None and not seg.contains(seg.exit_state):
                return False
            if not np.allclose(seg.box_hi - seg.box_lo, 2.0 * seg.theta):
                return False
        return True


def _draw_exit(skeleton: PathSkeleton, dim: int, sqrt_diag: np.ndarray,
               rng: np.random.Generator) -> None:
    """Fresh first passage for one dimension from its latest value"""
    layer = skeleton.layer
    value = skeleton.last_state[dim]
    scale = sqrt_diag[dim]
    passage = sample_fpt(value / scale, layer.thetas[dim] / scale, rng)
    layer.centers[dim] = value
    layer.exit_times[dim] = skeleton.last_time + passage.tau
    layer.exit_values[dim] = value + passage.endpoint_sign * layer.thetas[dim]


def _open_segment(skeleton: PathSkeleton) -> LayerSegment:
    layer = skeleton.layer
    exit_dim = int(np.argmin(layer.exit_times))
    segment = LayerSegment(
        t_lo=skeleton.last_time,
        t_hi=float(layer.exit_times[exit_dim]),
        anchor=skeleton.last_state.copy(),
        box_lo=layer.centers - layer.thetas,
        box_hi=layer.centers + layer.thetas,
        theta=layer.thetas.copy(),
        exit_dim=exit_dim,
    )
    skeleton.segments.append(segment)
    return segment


def ensure_layer(skeleton: PathSkeleton, precond, rng: np.random.Generator) -> LayerSegment:
    """Open segment covering the latest point, simulating a fresh layer if needed"""
    if skeleton.layer is not None:
        return skeleton.segments[-1]
    d = skeleton.dim
    skeleton.layer = _ActiveLayer(centers=skeleton.last_state.copy(), thetas=skeleton.theta.copy(),
                                  exit_times=np.empty(d), exit_values=np.empty(d))
    for dim in range(d):
        _draw_exit(skeleton, dim, precond.sqrt_diag, rng)
    return _open_segment(skeleton)


def _bridge_dim(skeleton: PathSkeleton, dim: int, q: float, sqrt_diag: np.ndarray,
                rng: np.random.Generator) -> float:
    layer = skeleton.layer
    scale = sqrt_diag[dim]
    w_q = sample_bessel_bridge_point(
        s=skeleton.last_time,
        tau=float(layer.exit_times[dim]),
        w_s=skeleton.last_state[dim] / scale,
        w_tau=layer.exit_values[dim] / scale,
        theta=layer.thetas[dim] / scale,
        q=q,
        rng=rng,
        center=layer.centers[dim] / scale,
    )
    # Rescaling round-off only
    lo = layer.centers[dim] - layer.thetas[dim]
    hi = layer.centers[dim] + layer.thetas[dim]
    return min(max(w_q * scale, lo), hi)


def _close_segment(skeleton: PathSkeleton, precond, rng: np.random.Generator) -> LayerSegment:
    """Fill the exit state of the open segment and open the next one"""
    layer = skeleton.layer
    segment = skeleton.segments[-1]
    t_exit = segment.t_hi
    exited = layer.exit_times <= t_exit
    state = np.empty(skeleton.dim)
    for dim in range(skeleton.dim):
        if exited[dim]:
            state[dim] = layer.exit_values[dim]
        else:
            state[dim] = _bridge_dim(skeleton, dim, t_exit, precond.sqrt_diag, rng)
    segment.exit_state = state.copy()
    skeleton.last_time = t_exit
    skeleton.last_state = state
    # Per-dimension restart: only exiting dimensions get a new box
    layer.thetas[exited] = skeleton.theta[exited]
    for dim in np.flatnonzero(exited):
        _draw_exit(skeleton, int(dim), precond.sqrt_diag, rng)
    return _open_segment(skeleton)


def advance_constrained_path(skeleton: PathSkeleton, precond, theta_vec, t: float,
                             rng: np.random.Generator) -> Tuple[np.ndarray, PathSkeleton]:
    """
    Extend the skeleton forward to time t and return the state there.

    Args:
        skeleton: path to extend (updated in place)
        precond: object exposing sqrt_diag, the componentwise scale of the path
        theta_vec: state-space layer half-widths for layers opened from now on
            (None keeps the skeleton's current policy)
        t: target time, not earlier than the latest simulated time
        rng: random stream

    Returns:
        (state at t, skeleton)
    """
    if theta_vec is not None:
        theta_vec = np.broadcast_to(np.asarray(theta_vec, dtype=float), skeleton.theta.shape)
        if np.any(theta_vec <= 0.0):
            raise ValueError("layer half-widths must be positive")
        skeleton.theta = theta_vec.copy()
    if t < skeleton.last_time:
        raise ValueError(f"cannot move back from {skeleton.last_time} to {t}")

    segment = ensure_layer(skeleton, precond, rng)
    while t >= segment.t_hi:
        segment = _close_segment(skeleton, precond, rng)
    if t == skeleton.last_time:
        return skeleton.last_state.copy(), skeleton

    state = np.array([_bridge_dim(skeleton, dim, t, precond.sqrt_diag, rng)
                      for dim in range(skeleton.dim)])
    skeleton.eval_points.append((t, state))
    skeleton.last_time = t
    skeleton.last_state = state
    return state.copy(), skeleton
