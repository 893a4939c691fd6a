"""
QSMC - Killing Rate Potential

The killing rate phi of Brownian motion whose quasi-stationary law is the
posterior pi, its bounds over hypercuboid layers, and the control-variate
subsampled estimator whose cost does not grow with the data size.

With X = x + Lambda^(1/2) W and diagonal Lambda the unshifted rate is

    phi_raw(x) = (sum_j L_jj (d_j log pi)^2 + sum_j L_jj d_jj log pi) / 2

and phi = phi_raw - Phi where Phi is the model's lower bound.
"""

import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize

from errors import NumericFault

logger = logging.getLogger('qsmc.potential')

# Factors per block in full-data reductions; fixes the summation order
FACTOR_CHUNK = 4096


@dataclass
class CostCounter:
    """Work done by one random stream since the last checkpoint"""

    factor_touches: int = 0
    events: int = 0
    layers: int = 0
    kills: int = 0

    def merge(self, other: 'CostCounter') -> None:
        self.factor_touches += other.factor_touches
        self.events += other.events
        self.layers += other.layers
        self.kills += other.kills

    def reset(self) -> None:
        self.factor_touches = self.events = self.layers = self.kills = 0

    def as_dict(self) -> Dict[str, int]:
        return {"factor_touches": self.factor_touches, "events": self.events,
                "layers": self.layers, "kills": self.kills}


@dataclass(frozen=True)
class Preconditioner:
    """Diagonal scale matrix of the driving Brownian motion"""

    diag: np.ndarray
    n_scaling: Optional[int] = None
    sqrt_diag: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        diag = np.array(self.diag, dtype=float).reshape(-1)
        if diag.size == 0 or not np.all(np.isfinite(diag)) or np.any(diag <= 0.0):
            raise ValueError(f"preconditioner entries must be finite and positive, got {diag}")
        diag.setflags(write=False)
        root = np.sqrt(diag)
        root.setflags(write=False)
        object.__setattr__(self, 'diag', diag)
        object.__setattr__(self, 'sqrt_diag', root)

    @classmethod
    def identity(cls, dim: int) -> 'Preconditioner':
        return cls(np.ones(dim))

    @classmethod
    def scaled(cls, base_diag, n: int) -> 'Preconditioner':
        """Lambda = Lambda_0 / n"""
        n = max(int(n), 1)
        return cls(np.asarray(base_diag, dtype=float) / n, n_scaling=n)

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    @property
    def key(self) -> bytes:
        return self.diag.tobytes()


class TargetModel(ABC):
    """
    Factorised posterior pi(x) proportional to prod_{i=0..n} f_i(x), f_0 the prior.

    Implementations evaluate per-factor quantities for an array of factor
    indices at once and must be safe to call from several threads.
    """

    def __init__(self, dim: int, n_data: int):
        self.dim = int(dim)
        self.n_data = int(n_data)
        self._phi_floor_cache: Dict[bytes, float] = {}

    @property
    def n_factors(self) -> int:
        return self.n_data + 1

    @abstractmethod
    def factor_log_f(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log f_i(x) for each index, shape (m,)"""

    @abstractmethod
    def factor_grad(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Gradients of log f_i at x, shape (m, d)"""

    @abstractmethod
    def factor_hess_diag(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Hessian diagonals of log f_i at x, shape (m, d)"""

    @abstractmethod
    def hessian_bound(self, lo: Optional[np.ndarray] = None, hi: Optional[np.ndarray] = None) -> float:
        """K such that every per-factor Hessian has operator norm <= K on the box (global if None)"""

    @abstractmethod
    def _phi_lower_bound(self, precond: Preconditioner) -> float:
        """Lower bound of phi_raw"""

    def phi_floor_region(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Box on which the lower bound holds; None means everywhere"""
        return None

    def phi_box_bounds(self, precond: Preconditioner, lo: np.ndarray,
                       hi: np.ndarray) -> Optional[Tuple[float, float]]:
        """Analytic (min, max) of phi_raw over a box, or None to use the Lipschitz envelope"""
        return None

    # False when phi_box_bounds works from sufficient statistics instead of per-factor terms
    box_bounds_touch_factors = True

    def phi_gradient_bound(self, precond: Preconditioner, lo: np.ndarray, hi: np.ndarray) -> float:
        """Bound on the norm of grad phi_raw over a box"""
        raise NotImplementedError(f"{type(self).__name__} provides neither box bounds nor a gradient bound")

    # Single-factor conveniences

    def _check_index(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_factors:
            raise IndexError(f"factor index {i} outside 0..{self.n_data}")
        return np.array([i])

    def log_f(self, i: int, x) -> float:
        return float(self.factor_log_f(self._check_index(i), np.asarray(x, dtype=float))[0])

    def grad_log_f(self, i: int, x) -> np.ndarray:
        return self.factor_grad(self._check_index(i), np.asarray(x, dtype=float))[0]

    def hess_diag_log_f(self, i: int, x) -> np.ndarray:
        return self.factor_hess_diag(self._check_index(i), np.asarray(x, dtype=float))[0]

    def lap_log_f(self, i: int, x) -> float:
        return float(np.sum(self.hess_diag_log_f(i, x)))

    # Full-data sums

    def factor_chunks(self) -> List[np.ndarray]:
        return [np.arange(start, min(start + FACTOR_CHUNK, self.n_factors))
                for start in range(0, self.n_factors, FACTOR_CHUNK)]

    def sum_over_factors(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], x: np.ndarray,
                         executor: Optional[ThreadPoolExecutor] = None) -> np.ndarray:
        """Sum fn(idx, x) over all factors in a fixed block order"""
        chunks = self.factor_chunks()
        mapper = executor.map if executor is not None else map
        partials = list(mapper(lambda idx: np.sum(fn(idx, x), axis=0), chunks))
        total = np.array(partials[0], dtype=float)
        for partial in partials[1:]:
            total = total + partial
        return total

    def log_pi(self, x) -> float:
        return float(self.sum_over_factors(self.factor_log_f, np.asarray(x, dtype=float)))

    def grad_log_pi(self, x) -> np.ndarray:
        return self.sum_over_factors(self.factor_grad, np.asarray(x, dtype=float))

    def hess_diag_log_pi(self, x) -> np.ndarray:
        return self.sum_over_factors(self.factor_hess_diag, np.asarray(x, dtype=float))

    def phi_lower_bound(self, precond: Preconditioner) -> float:
        """Phi for this preconditioner, computed once"""
        key = precond.key
        if key not in self._phi_floor_cache:
            self._phi_floor_cache[key] = float(self._phi_lower_bound(precond))
        return self._phi_floor_cache[key]

    def first_nonfinite_factor(self, x: np.ndarray) -> Optional[int]:
        for idx in self.factor_chunks():
            bad = ~np.all(np.isfinite(self.factor_grad(idx, x)), axis=1)
            bad |= ~np.all(np.isfinite(self.factor_hess_diag(idx, x)), axis=1)
            if np.any(bad):
                return int(idx[np.argmax(bad)])
        return None


@dataclass(frozen=True)
class PhiBounds:
    """Bounds of the killing rate over one layer"""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"invalid bounds: lower={self.lower} > upper={self.upper}")

    @property
    def rate(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class ControlVariateCache:
    """Full-data quantities at the centring point x_hat"""

    x_hat: np.ndarray
    grad_at_hat: np.ndarray
    hess_diag_at_hat: np.ndarray
    div_at_hat: float
    c_const: float
    phi_floor: float
    factor_grads: np.ndarray = field(repr=False)
    factor_hess: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SubsampleDraw:
    """Independent uniform factor index pairs (I, J)"""

    i_idx: np.ndarray
    j_idx: np.ndarray

    @property
    def batch(self) -> int:
        return int(self.i_idx.shape[0])


def _as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


def phi_raw(model: TargetModel, precond: Preconditioner, x) -> float:
    """Unshifted killing expression at x"""
    x = _as_vector(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"phi needs a finite point, got {x}")
    grad = model.grad_log_pi(x)
    hess = model.hess_diag_log_pi(x)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise NumericFault("non-finite gradient in killing rate",
                           {"factor": model.first_nonfinite_factor(x), "x": x.tolist()})
    lam = precond.diag
    return 0.5 * (float(np.sum(lam * grad * grad)) + float(np.sum(lam * hess)))


def phi_exact(model: TargetModel, precond: Preconditioner, x,
              counter: Optional[CostCounter] = None) -> float:
    """Killing rate phi(x) = phi_raw(x) - Phi from a full sweep over the factors"""
    value = phi_raw(model, precond, x) - model.phi_lower_bound(precond)
    if counter is not None:
        counter.factor_touches += model.n_factors
    return value


def precompute_control_variates(model: TargetModel, precond: Preconditioner, x_hat,
                                threads: int = 1) -> ControlVariateCache:
    """
    Evaluate every factor's gradient and Hessian diagonal at x_hat once.

    Blocks of factors may be processed on several threads; the reduction order
    is fixed so the result does not depend on the thread count.
    """
    x_hat = _as_vector(x_hat)
    if not np.all(np.isfinite(x_hat)):
        raise ValueError(f"centring point must be finite, got {x_hat}")
    chunks = model.factor_chunks()

    def evaluate(idx):
        return model.factor_grad(idx, x_hat), model.factor_hess_diag(idx, x_hat)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            blocks = list(executor.map(evaluate, chunks))
    else:
        blocks = [evaluate(idx) for idx in chunks]

    factor_grads = np.concatenate([g for g, _ in blocks])
    factor_hess = np.concatenate([h for _, h in blocks])
    grad = np.array(np.sum(blocks[0][0], axis=0), dtype=float)
    hess = np.array(np.sum(blocks[0][1], axis=0), dtype=float)
    for g, h in blocks[1:]:
        grad = grad + np.sum(g, axis=0)
        hess = hess + np.sum(h, axis=0)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise NumericFault("non-finite gradient at the centring point",
                           {"factor": model.first_nonfinite_factor(x_hat), "x_hat": x_hat.tolist()})

    lam = precond.diag
    floor = model.phi_lower_bound(precond)
    c_const = 0.5 * (float(np.sum(lam * grad * grad)) + float(np.sum(lam * hess))) - floor
    for array in (x_hat, grad, hess, factor_grads, factor_hess):
        array.setflags(write=False)
    logger.debug("Control variates at x_hat=%s: |grad|=%.3e C=%.6g", x_hat, np.linalg.norm(grad), c_const)
    return ControlVariateCache(x_hat=x_hat, grad_at_hat=grad, hess_diag_at_hat=hess,
                               div_at_hat=float(np.sum(hess)), c_const=c_const, phi_floor=floor,
                               factor_grads=factor_grads, factor_hess=factor_hess)


def alpha_tilde(model: TargetModel, draw_index: int, x, x_hat,
                cache: Optional[ControlVariateCache] = None) -> np.ndarray:
    """(n+1) (grad log f_I(x) - grad log f_I(x_hat)), unbiased for the gradient difference"""
    idx = model._check_index(int(draw_index))
    x = _as_vector(x)
    if cache is not None:
        at_hat = cache.factor_grads[idx[0]]
    else:
        at_hat = model.factor_grad(idx, _as_vector(x_hat))[0]
    return model.n_factors * (model.factor_grad(idx, x)[0] - at_hat)


def draw_subsample(n: int, batch: int, rng: np.random.Generator) -> SubsampleDraw:
    """batch independent (I, J) pairs, uniform with replacement on 0..n"""
    if n < 1 or batch < 1:
        raise ValueError(f"need n >= 1 and batch >= 1, got n={n}, batch={batch}")
    return SubsampleDraw(i_idx=rng.integers(0, n + 1, size=batch),
                         j_idx=rng.integers(0, n + 1, size=batch))


def phi_subsampled(cache: ControlVariateCache, model: TargetModel, precond: Preconditioner,
                   draw: SubsampleDraw, x, counter: Optional[CostCounter] = None) -> float:
    """Unbiased estimate of phi(x) touching two factors per pair"""
    x = _as_vector(x)
    i_idx = np.asarray(draw.i_idx)
    j_idx = np.asarray(draw.j_idx)
    n_factors = model.n_factors
    if (np.any(i_idx < 0) or np.any(i_idx >= n_factors)
            or np.any(j_idx < 0) or np.any(j_idx >= n_factors)):
        raise IndexError(f"subsample index outside 0..{model.n_data}")
    c = i_idx.shape[0]

    grads = model.factor_grad(np.concatenate([i_idx, j_idx]), x)
    hess_i = model.factor_hess_diag(i_idx, x)
    alpha_i = n_factors * (grads[:c] - cache.factor_grads[i_idx])
    alpha_j = n_factors * (grads[c:] - cache.factor_grads[j_idx])

    lam = precond.diag
    cross = np.sum(alpha_i * lam * (2.0 * cache.grad_at_hat + alpha_j), axis=1)
    div = n_factors * np.sum(lam * (hess_i - cache.factor_hess[i_idx]), axis=1)
    if counter is not None:
        counter.factor_touches += 2 * c
    return float(np.mean(0.5 * (cross + div))) + cache.c_const


def _box(lo, hi) -> Tuple[np.ndarray, np.ndarray]:
    lo = _as_vector(lo)
    hi = _as_vector(hi)
    if lo.shape != hi.shape or np.any(lo > hi):
        raise ValueError(f"invalid box [{lo}, {hi}]")
    return lo, hi


def _inside(lo: np.ndarray, hi: np.ndarray, region) -> bool:
    if region is None:
        return True
    return bool(np.all(lo >= region[0]) and np.all(hi <= region[1]))


def phi_bounds_exact(model: TargetModel, precond: Preconditioner, box_lo, box_hi,
                     counter: Optional[CostCounter] = None) -> PhiBounds:
    """Bounds of phi over a box from the model's analytic provider or the Lipschitz envelope"""
    lo, hi = _box(box_lo, box_hi)
    floor = model.phi_lower_bound(precond)
    if np.array_equal(lo, hi):
        value = phi_raw(model, precond, lo) - floor
        if counter is not None:
            counter.factor_touches += model.n_factors
        return PhiBounds(value, value)

    analytic = model.phi_box_bounds(precond, lo, hi)
    if analytic is not None:
        lower, upper = analytic
        if counter is not None and model.box_bounds_touch_factors:
            counter.factor_touches += model.n_factors
    else:
        # Looser envelope around the box centre
        center = 0.5 * (lo + hi)
        radius = float(np.linalg.norm(0.5 * (hi - lo)))
        slope = model.phi_gradient_bound(precond, lo, hi)
        middle = phi_raw(model, precond, center)
        if counter is not None:
            counter.factor_touches += model.n_factors
        lower, upper = middle - slope * radius, middle + slope * radius
    lower -= floor
    upper -= floor
    if _inside(lo, hi, model.phi_floor_region()):
        lower = max(lower, 0.0)
        upper = max(upper, lower)
    return PhiBounds(lower, upper)


def phi_bounds_subsampled(cache: ControlVariateCache, model: TargetModel, precond: Preconditioner,
                          box_lo, box_hi) -> PhiBounds:
    """
    Bounds valid for every subsample draw and every point of the box.

    The Hessian bound is taken over the hull of the box and x_hat, which
    contains every segment the mean value theorem needs.
    """
    lo, hi = _box(box_lo, box_hi)
    x_hat = cache.x_hat
    hull_lo = np.minimum(lo, x_hat)
    hull_hi = np.maximum(hi, x_hat)
    k_bound = model.hessian_bound(hull_lo, hull_hi)
    reach = float(np.linalg.norm(np.maximum(np.abs(lo - x_hat), np.abs(hi - x_hat))))
    n_factors = model.n_factors

    alpha_bound = float(np.sqrt(np.max(precond.diag))) * n_factors * k_bound * reach
    grad_norm = float(np.linalg.norm(precond.sqrt_diag * cache.grad_at_hat))
    div_bound = 2.0 * n_factors * k_bound * float(np.sum(precond.diag)) if reach > 0.0 else 0.0
    spread = 0.5 * (alpha_bound * (2.0 * grad_norm + alpha_bound) + div_bound)
    return PhiBounds(cache.c_const - spread, cache.c_const + spread)


class ExactPhi:
    """Full-data killing rate; bounds are exact unless a wide-bound cache is given"""

    def __init__(self, model: TargetModel, precond: Preconditioner,
                 wide_bounds: Optional[ControlVariateCache] = None):
        self.model = model
        self.precond = precond
        self.wide_bounds = wide_bounds
        self.floor = 0.0

    def evaluate(self, x, rng: np.random.Generator, counter: Optional[CostCounter] = None) -> float:
        return phi_exact(self.model, self.precond, x, counter)

    def bounds(self, lo, hi, counter: Optional[CostCounter] = None) -> PhiBounds:
        if self.wide_bounds is not None:
            return phi_bounds_subsampled(self.wide_bounds, self.model, self.precond, lo, hi)
        return phi_bounds_exact(self.model, self.precond, lo, hi, counter)


class SubsampledPhi:
    """Control-variate estimator of the killing rate averaged over batch_size pairs"""

    def __init__(self, cache: ControlVariateCache, model: TargetModel, precond: Preconditioner,
                 batch_size: int = 1, floor: Optional[float] = None):
        if batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {batch_size}")
        self.cache = cache
        self.model = model
        self.precond = precond
        self.batch_size = batch_size
        self.floor = -np.inf if floor is None else float(floor)

    @classmethod
    def with_support_floor(cls, cache: ControlVariateCache, model: TargetModel,
                           precond: Preconditioner, batch_size: int,
                           support_width: float) -> 'SubsampledPhi':
        """Provider whose floor is the lower bound over x_hat +/- support_width * Lambda^(1/2)"""
        half = support_width * precond.sqrt_diag
        support = phi_bounds_subsampled(cache, model, precond, cache.x_hat - half, cache.x_hat + half)
        logger.info("Subsampled kill-rate floor %.6g over support width %g", support.lower, support_width)
        return cls(cache, model, precond, batch_size, floor=support.lower)

    def evaluate(self, x, rng: np.random.Generator, counter: Optional[CostCounter] = None) -> float:
        draw = draw_subsample(self.model.n_data, self.batch_size, rng)
        return phi_subsampled(self.cache, self.model, self.precond, draw, x, counter)

    def bounds(self, lo, hi, counter: Optional[CostCounter] = None) -> PhiBounds:
        return phi_bounds_subsampled(self.cache, self.model, self.precond, lo, hi)


def estimate_phi_floor(model: TargetModel, precond: Preconditioner, box_lo, box_hi, grid: int = 101,
                       seed: int = 0, max_points: int = 20000, refinements: int = 5) -> Tuple[float, np.ndarray]:
    """
    Advisory minimum of phi_raw over a box: (value, minimiser).

    A regular grid (random points when the grid would be too large) is
    refined by bounded L-BFGS-B from its best points. The result is a
    search, not a proof of a lower bound.
    """
    lo, hi = _box(box_lo, box_hi)
    if np.array_equal(lo, hi):
        return phi_raw(model, precond, lo), lo.copy()
    d = lo.shape[0]
    if grid ** d <= max_points:
        axes = [np.linspace(lo[j], hi[j], grid) for j in range(d)]
        points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    else:
        rng = np.random.default_rng(seed)
        points = lo + (hi - lo) * rng.random((max_points, d))
    values = np.array([phi_raw(model, precond, p) for p in points])
    order = np.argsort(values, kind="stable")[:refinements]
    best_value = float(values[order[0]])
    best_point = points[order[0]].copy()
    bounds = list(zip(lo, hi))
    for i in order:
        result = optimize.minimize(lambda z: phi_raw(model, precond, z), points[i], method="L-BFGS-B", bounds=bounds)
        if np.isfinite(result.fun) and result.fun < best_value:
            best_value, best_point = float(result.fun), np.asarray(result.x, dtype=float)
    logger.info("Advisory phi_raw minimum %.10g at %s", best_value, best_point.tolist())
    return best_value, best_point
