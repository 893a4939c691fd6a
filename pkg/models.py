"""
QSMC - Built-in Models

Factorised posteriors with analytic per-factor gradients, Hessian diagonals,
lower bounds of the killing expression, Hessian bounds and box bounds:

    gaussian-target       single-factor Gaussian N(mean, diag(var)), no data
    gaussian-location     y_i ~ N(x, sigma^2 I), Gaussian prior
    t5-location           f_i(x) = (5 + (y_i - x)^2)^-3, Gaussian prior
    logistic-regression   Bernoulli(expit(x_i' beta)), Gaussian prior
    contaminated-mixture  (1-p) N(a x1 + b x2, s^2) + p N(0, f^2) in
                          coordinates (a, b, log s, log f, logit p)

Also synthetic data generation, CSV ingestion and mode finding.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, special

from errors import DataError, NumericFault
from potential import Preconditioner, TargetModel

logger = logging.getLogger('qsmc.models')

FAMILIES = ("gaussian-target", "gaussian-location", "t5-location",
            "logistic-regression", "contaminated-mixture")
LOCATION_FAMILIES = ("gaussian-target", "gaussian-location", "t5-location")
TRANSFORMS = ("identity", "log", "logit")

MIXTURE_TRANSFORM = ("identity", "identity", "log", "log", "logit")
MIXTURE_TRUE_PARAMS = (2.0, 5.0, 1.0, 10.0, 0.05)
MIXTURE_SUPPORT = ((-10.0, -10.0, math.log(0.1), math.log(0.5), special.logit(1e-4)),
                   (10.0, 10.0, math.log(10.0), math.log(100.0), 0.0))

# Menarche-format columns, expanded to one Bernoulli row per subject
MENARCHE_COLUMNS = ("Age", "Total", "Menarche")

SQRT5 = math.sqrt(5.0)
SQRT15 = math.sqrt(15.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# Interval arithmetic on numpy arrays

def _imul(a_lo, a_hi, b_lo, b_hi):
    products = np.stack(np.broadcast_arrays(a_lo * b_lo, a_lo * b_hi, a_hi * b_lo, a_hi * b_hi))
    return products.min(axis=0), products.max(axis=0)


def _isq(lo, hi):
    lo2, hi2 = lo * lo, hi * hi
    low = np.where(lo > 0.0, lo2, np.where(hi < 0.0, hi2, 0.0))
    return low, np.maximum(lo2, hi2)


def _phi_interval(precond: Preconditioner, g_lo, g_hi, h_lo, h_hi) -> Tuple[float, float]:
    """Range of the unshifted killing expression from gradient and Hessian-diagonal ranges"""
    lam = precond.diag
    sq_lo, sq_hi = _isq(g_lo, g_hi)
    lower = 0.5 * float(np.sum(lam * (sq_lo + h_lo)))
    upper = 0.5 * float(np.sum(lam * (sq_hi + h_hi)))
    return lower, upper


def _unimodal_range(fn, lo, hi, critical: Sequence[float]):
    """Range of fn over [lo, hi] from endpoints and interior critical points"""
    values = [fn(lo), fn(hi)]
    for point in critical:
        inside = (lo <= point) & (point <= hi)
        value = fn(np.full_like(lo, point))
        values.append(np.where(inside, value, np.nan))
    stacked = np.stack(values)
    return np.nanmin(stacked, axis=0), np.nanmax(stacked, axis=0)


@dataclass(frozen=True)
class Dataset:
    """Validated table of observations with its provenance"""

    frame: pd.DataFrame
    schema: Tuple[str, ...]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frame) < 1:
            raise DataError("dataset has no rows")
        if self.frame.isna().any().any():
            raise DataError("dataset contains missing values")

    @property
    def rows(self) -> pd.DataFrame:
        return self.frame

    @property
    def n(self) -> int:
        return len(self.frame)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    def covariates(self) -> List[str]:
        return [name for name in self.schema if name not in ("y", "corrupted")]


@dataclass(frozen=True)
class ModelSpec:
    """Model family, parameter dimension, coordinate transforms and prior"""

    family: str
    dim: int
    transform: Tuple[str, ...]
    prior: Dict[str, float] = field(default_factory=dict)
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family '{self.family}', expected one of {FAMILIES}")
        if self.dim < 1 or len(self.transform) != self.dim:
            raise ValueError(f"transform {self.transform} does not match dimension {self.dim}")
        unknown = [t for t in self.transform if t not in TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown transforms {unknown}")
        if self.family == "contaminated-mixture" and tuple(self.transform) != MIXTURE_TRANSFORM:
            raise ValueError(f"contaminated-mixture uses transforms {MIXTURE_TRANSFORM}")
        if self.family != "contaminated-mixture" and any(t != "identity" for t in self.transform):
            raise ValueError(f"{self.family} parameters are unconstrained")

    @classmethod
    def for_family(cls, family: str, dim: Optional[int] = None, prior_scale: float = 10.0,
                   **options) -> 'ModelSpec':
        """Spec with the family's default transforms and prior"""
        if family == "contaminated-mixture":
            dim = 5
            transform = MIXTURE_TRANSFORM
            prior = {"scale": prior_scale, "gamma_shape": 2.0, "gamma_rate": 0.1,
                     "beta_a": 1.0, "beta_b": 1.0}
        else:
            dim = 1 if dim is None else int(dim)
            transform = ("identity",) * dim
            prior = {"scale": prior_scale}
        return cls(family=family, dim=dim, transform=tuple(transform), prior=prior, options=dict(options))

    def natural(self, z) -> np.ndarray:
        """Map unconstrained coordinates back to the natural scale"""
        z = np.asarray(z, dtype=float)
        out = z.copy()
        for j, kind in enumerate(self.transform):
            if kind == "log":
                out[..., j] = np.exp(z[..., j])
            elif kind == "logit":
                out[..., j] = special.expit(z[..., j])
        return out

    def unconstrained(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = theta.copy()
        for j, kind in enumerate(self.transform):
            if kind == "log":
                out[..., j] = np.log(theta[..., j])
            elif kind == "logit":
                out[..., j] = special.logit(theta[..., j])
        return out


class GaussianFactorModel(TargetModel):
    """
    Factors log f_i(x) = -sum_j P_ij (x_j - c_ij)^2 / 2.

    The posterior is Gaussian, so box bounds of phi are exact.
    """

    box_bounds_touch_factors = False

    def __init__(self, centers: np.ndarray, precisions: np.ndarray):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        precisions = np.broadcast_to(np.asarray(precisions, dtype=float), centers.shape).copy()
        if np.any(precisions <= 0.0):
            raise ValueError("factor precisions must be positive")
        super().__init__(dim=centers.shape[1], n_data=centers.shape[0] - 1)
        self.centers = centers
        self.precisions = precisions
        self.post_precision = precisions.sum(axis=0)
        self.post_mean = (precisions * centers).sum(axis=0) / self.post_precision

    def factor_log_f(self, idx, x):
        diff = x - self.centers[idx]
        return -0.5 * np.sum(self.precisions[idx] * diff * diff, axis=1)

    def factor_grad(self, idx, x):
        return -self.precisions[idx] * (x - self.centers[idx])

    def factor_hess_diag(self, idx, x):
        return -self.precisions[idx].copy()

    def hessian_bound(self, lo=None, hi=None) -> float:
        return float(self.precisions.max())

    def _phi_lower_bound(self, precond):
        return -0.5 * float(np.sum(precond.diag * self.post_precision))

    def phi_box_bounds(self, precond, lo, hi):
        near = np.clip(self.post_mean, lo, hi) - self.post_mean
        far = np.maximum(np.abs(lo - self.post_mean), np.abs(hi - self.post_mean))
        weight = precond.diag * self.post_precision**2
        floor = self._phi_lower_bound(precond)
        return (0.5 * float(np.sum(weight * near * near)) + floor,
                0.5 * float(np.sum(weight * far * far)) + floor)

    def phi_gradient_bound(self, precond, lo, hi):
        far = np.maximum(np.abs(lo - self.post_mean), np.abs(hi - self.post_mean))
        return float(np.linalg.norm(precond.diag * self.post_precision**2 * far))


class GaussianTarget(GaussianFactorModel):
    """pi = N(mean, diag(var)) as a single factor"""

    def __init__(self, mean, var):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.broadcast_to(np.asarray(var, dtype=float), mean.shape)
        super().__init__(mean[None, :], 1.0 / var[None, :])


class GaussianLocation(GaussianFactorModel):
    """Known-noise Gaussian location model with prior N(0, prior_scale^2 I)"""

    def __init__(self, y: np.ndarray, noise_scale: float = 1.0, prior_scale: float = 10.0):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        centers = np.vstack([np.zeros((1, y.shape[1])), y])
        precisions = np.empty_like(centers)
        precisions[0] = 1.0 / prior_scale**2
        precisions[1:] = 1.0 / noise_scale**2
        super().__init__(centers, precisions)


class T5Location(TargetModel):
    """Location of Student-t(5) data with the un-normalised kernel (5 + r^2)^-3"""

    # Extremes of the per-datum Hessian 6 (r^2 - 5) / (5 + r^2)^2
    HESS_MIN = -1.2
    HESS_MAX = 0.15

    def __init__(self, y: np.ndarray, prior_scale: float = 10.0):
        y = np.asarray(y, dtype=float).reshape(-1)
        super().__init__(dim=1, n_data=y.shape[0])
        self.y = y
        self.prior_precision = 1.0 / prior_scale**2

    def _residuals(self, idx, x):
        idx = np.asarray(idx)
        r = np.zeros(idx.shape[0])
        data = idx > 0
        r[data] = self.y[idx[data] - 1] - x[0]
        return r, data

    def factor_log_f(self, idx, x):
        r, data = self._residuals(idx, x)
        return np.where(data, -3.0 * np.log(5.0 + r * r), -0.5 * self.prior_precision * x[0] * x[0])

    def factor_grad(self, idx, x):
        r, data = self._residuals(idx, x)
        return np.where(data, 6.0 * r / (5.0 + r * r), -self.prior_precision * x[0])[:, None]

    def factor_hess_diag(self, idx, x):
        r, data = self._residuals(idx, x)
        return np.where(data, 6.0 * (r * r - 5.0) / (5.0 + r * r)**2, -self.prior_precision)[:, None]

    def hessian_bound(self, lo=None, hi=None) -> float:
        return max(-self.HESS_MIN, self.prior_precision)

    def _phi_lower_bound(self, precond):
        return 0.5 * float(precond.diag[0]) * (self.n_data * self.HESS_MIN - self.prior_precision)

    def phi_box_bounds(self, precond, lo, hi):
        r_lo, r_hi = self.y - hi[0], self.y - lo[0]
        g_lo, g_hi = _unimodal_range(lambda r: 6.0 * r / (5.0 + r * r), r_lo, r_hi, (-SQRT5, SQRT5))
        h_lo, h_hi = _unimodal_range(lambda r: 6.0 * (r * r - 5.0) / (5.0 + r * r)**2,
                                     r_lo, r_hi, (0.0, -SQRT15, SQRT15))
        grad_lo = g_lo.sum() - self.prior_precision * hi[0]
        grad_hi = g_hi.sum() - self.prior_precision * lo[0]
        hess_lo = h_lo.sum() - self.prior_precision
        hess_hi = h_hi.sum() - self.prior_precision
        return _phi_interval(precond, np.array([grad_lo]), np.array([grad_hi]),
                             np.array([hess_lo]), np.array([hess_hi]))


class LogisticRegression(TargetModel):
    """Bernoulli likelihood with logit link; design includes the intercept column"""

    def __init__(self, design: np.ndarray, y: np.ndarray, prior_scale: float = 10.0):
        design = np.asarray(design, dtype=float)
        y = np.asarray(y, dtype=float).reshape(-1)
        if design.shape[0] != y.shape[0]:
            raise DataError("design rows and responses differ in length")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise DataError("logistic responses must be 0 or 1")
        super().__init__(dim=design.shape[1], n_data=design.shape[0])
        self.design = design
        self.y = y
        self.prior_precision = 1.0 / prior_scale**2
        self._max_row_norm2 = float(np.max(np.sum(design * design, axis=1)))
        self._column_norm2 = np.sum(design * design, axis=0)

    def _split(self, idx):
        idx = np.asarray(idx)
        data = idx > 0
        rows = np.where(data, idx - 1, 0)
        return rows, data

    def factor_log_f(self, idx, x):
        rows, data = self._split(idx)
        eta = self.design[rows] @ x
        value = self.y[rows] * eta - np.logaddexp(0.0, eta)
        return np.where(data, value, -0.5 * self.prior_precision * float(x @ x))

    def factor_grad(self, idx, x):
        rows, data = self._split(idx)
        eta = self.design[rows] @ x
        grad = (self.y[rows] - special.expit(eta))[:, None] * self.design[rows]
        return np.where(data[:, None], grad, -self.prior_precision * x[None, :])

    def factor_hess_diag(self, idx, x):
        rows, data = self._split(idx)
        prob = special.expit(self.design[rows] @ x)
        hess = -(prob * (1.0 - prob))[:, None] * self.design[rows]**2
        return np.where(data[:, None], hess, -self.prior_precision)

    def hessian_bound(self, lo=None, hi=None) -> float:
        return max(0.25 * self._max_row_norm2, self.prior_precision)

    def _phi_lower_bound(self, precond):
        return -0.5 * float(np.sum(precond.diag * (0.25 * self._column_norm2 + self.prior_precision)))

    def phi_box_bounds(self, precond, lo, hi):
        X = self.design
        eta_lo = np.sum(np.minimum(X * lo, X * hi), axis=1)
        eta_hi = np.sum(np.maximum(X * lo, X * hi), axis=1)
        p_lo, p_hi = special.expit(eta_lo), special.expit(eta_hi)
        resid_lo = (self.y - p_hi)[:, None]
        resid_hi = (self.y - p_lo)[:, None]
        g_lo, g_hi = _imul(resid_lo, resid_hi, X, X)
        v_edges = np.stack([p_lo * (1.0 - p_lo), p_hi * (1.0 - p_hi)])
        v_lo = v_edges.min(axis=0)
        v_hi = np.where((eta_lo <= 0.0) & (eta_hi >= 0.0), 0.25, v_edges.max(axis=0))
        grad_lo = g_lo.sum(axis=0) - self.prior_precision * hi
        grad_hi = g_hi.sum(axis=0) - self.prior_precision * lo
        hess_lo = -(v_hi[:, None] * X * X).sum(axis=0) - self.prior_precision
        hess_hi = -(v_lo[:, None] * X * X).sum(axis=0) - self.prior_precision
        return _phi_interval(precond, grad_lo, grad_hi, hess_lo, hess_hi)


class ContaminatedMixture(TargetModel):
    """
    Regression with a contaminating component:
    F_i = (1-p) N(y_i; a x1_i + b x2_i, s^2) + p N(y_i; 0, f^2).

    Coordinates are (a, b, log s, log f, logit p). The prior is N(0, scale^2)
    on a and b, Gamma(shape, rate) on s and f, and Beta on p, each with its
    Jacobian folded in. Phi holds on the support box.
    """

    def __init__(self, x1, x2, y, prior: Optional[Dict[str, float]] = None,
                 support: Optional[Tuple[Sequence[float], Sequence[float]]] = None):
        self.x1 = np.asarray(x1, dtype=float).reshape(-1)
        self.x2 = np.asarray(x2, dtype=float).reshape(-1)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if not self.x1.shape == self.x2.shape == self.y.shape:
            raise DataError("mixture columns differ in length")
        super().__init__(dim=5, n_data=self.y.shape[0])
        prior = dict(prior or {})
        self.prior_precision = 1.0 / prior.get("scale", 10.0)**2
        self.gamma_shape = prior.get("gamma_shape", 2.0)
        self.gamma_rate = prior.get("gamma_rate", 0.1)
        self.beta_a = prior.get("beta_a", 1.0)
        self.beta_b = prior.get("beta_b", 1.0)
        lo, hi = support if support is not None else MIXTURE_SUPPORT
        self.support_lo = np.asarray(lo, dtype=float)
        self.support_hi = np.asarray(hi, dtype=float)
        if self.support_lo.shape != (5,) or np.any(self.support_lo >= self.support_hi):
            raise ValueError("mixture support box must be five increasing intervals")
        self._abs_x1 = float(np.max(np.abs(self.x1)))
        self._abs_x2 = float(np.max(np.abs(self.x2)))
        self._abs_y = float(np.max(np.abs(self.y)))

    def default_start(self) -> np.ndarray:
        design = np.column_stack([self.x1, self.x2])
        coef, *_ = np.linalg.lstsq(design, self.y, rcond=None)
        resid = self.y - design @ coef
        scale = 1.4826 * float(np.median(np.abs(resid - np.median(resid))))
        spread = float(np.std(self.y))
        return np.array([coef[0], coef[1], math.log(max(scale, 1e-3)),
                         math.log(max(3.0 * spread, 1e-3)), special.logit(0.1)])

    # Component pieces for data factors

    def _pieces(self, rows, z):
        a, b, s, f, q = z
        inv_s2 = math.exp(-2.0 * s)
        inv_f2 = math.exp(-2.0 * f)
        p = special.expit(q)
        x1, x2, y = self.x1[rows], self.x2[rows], self.y[rows]
        r = a * x1 + b * x2 - y
        log_a = -np.logaddexp(0.0, q) - HALF_LOG_2PI - s - 0.5 * r * r * inv_s2
        log_b = -np.logaddexp(0.0, -q) - HALF_LOG_2PI - f - 0.5 * y * y * inv_f2
        m = rows.shape[0]
        grad_a = np.column_stack([-r * x1 * inv_s2, -r * x2 * inv_s2, -1.0 + r * r * inv_s2,
                                  np.zeros(m), np.full(m, -p)])
        grad_b = np.column_stack([np.zeros(m), np.zeros(m), np.zeros(m),
                                  -1.0 + y * y * inv_f2, np.full(m, 1.0 - p)])
        hess_a = np.column_stack([-x1 * x1 * inv_s2, -x2 * x2 * inv_s2, -2.0 * r * r * inv_s2,
                                  np.zeros(m), np.full(m, -p * (1.0 - p))])
        hess_b = np.column_stack([np.zeros(m), np.zeros(m), np.zeros(m),
                                  -2.0 * y * y * inv_f2, np.full(m, -p * (1.0 - p))])
        return log_a, log_b, grad_a, grad_b, hess_a, hess_b

    def _prior(self, z):
        a, b, s, f, q = z
        p = special.expit(q)
        log_p = -np.logaddexp(0.0, -q)
        log_1mp = -np.logaddexp(0.0, q)
        value = (-0.5 * self.prior_precision * (a * a + b * b)
                 + self.gamma_shape * (s + f) - self.gamma_rate * (math.exp(s) + math.exp(f))
                 + self.beta_a * log_p + self.beta_b * log_1mp)
        grad = np.array([-self.prior_precision * a, -self.prior_precision * b,
                         self.gamma_shape - self.gamma_rate * math.exp(s),
                         self.gamma_shape - self.gamma_rate * math.exp(f),
                         self.beta_a * (1.0 - p) - self.beta_b * p])
        hess = np.array([-self.prior_precision, -self.prior_precision,
                         -self.gamma_rate * math.exp(s), -self.gamma_rate * math.exp(f),
                         -(self.beta_a + self.beta_b) * p * (1.0 - p)])
        return value, grad, hess

    def _split(self, idx):
        idx = np.asarray(idx)
        data = idx > 0
        return np.where(data, idx - 1, 0), data

    def factor_log_f(self, idx, x):
        rows, data = self._split(idx)
        log_a, log_b, *_ = self._pieces(rows, x)
        return np.where(data, np.logaddexp(log_a, log_b), self._prior(x)[0])

    def factor_grad(self, idx, x):
        rows, data = self._split(idx)
        log_a, log_b, grad_a, grad_b, _, _ = self._pieces(rows, x)
        w = special.expit(log_a - log_b)[:, None]
        grad = w * grad_a + (1.0 - w) * grad_b
        return np.where(data[:, None], grad, self._prior(x)[1][None, :])

    def factor_hess_diag(self, idx, x):
        rows, data = self._split(idx)
        log_a, log_b, grad_a, grad_b, hess_a, hess_b = self._pieces(rows, x)
        w = special.expit(log_a - log_b)[:, None]
        gap = grad_a - grad_b
        hess = w * hess_a + (1.0 - w) * hess_b + w * (1.0 - w) * gap * gap
        return np.where(data[:, None], hess, self._prior(x)[2][None, :])

    # Bounds

    def _scales(self, lo, hi):
        inv_s2 = (math.exp(-2.0 * hi[2]), math.exp(-2.0 * lo[2]))
        inv_f2 = (math.exp(-2.0 * hi[3]), math.exp(-2.0 * lo[3]))
        p = (float(special.expit(lo[4])), float(special.expit(hi[4])))
        pq_edges = (p[0] * (1.0 - p[0]), p[1] * (1.0 - p[1]))
        pq_hi = 0.25 if p[0] <= 0.5 <= p[1] else max(pq_edges)
        return inv_s2, inv_f2, p, (min(pq_edges), pq_hi)

    def hessian_bound(self, lo=None, hi=None) -> float:
        if lo is None or hi is None:
            lo, hi = self.support_lo, self.support_hi
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        inv_s2, inv_f2, p, pq = self._scales(lo, hi)
        S, F = inv_s2[1], inv_f2[1]
        X1, X2, Y = self._abs_x1, self._abs_x2, self._abs_y
        R = max(abs(lo[0]), abs(hi[0])) * X1 + max(abs(lo[1]), abs(hi[1])) * X2 + Y
        norm_a = math.sqrt((X1 * X1 * S)**2 + (X2 * X2 * S)**2 + 2.0 * (X1 * X2 * S)**2
                           + 2.0 * (2.0 * R * X1 * S)**2 + 2.0 * (2.0 * R * X2 * S)**2
                           + (2.0 * R * R * S)**2 + pq[1]**2)
        norm_b = math.sqrt((2.0 * Y * Y * F)**2 + pq[1]**2)
        gap2 = (R * X1 * S)**2 + (R * X2 * S)**2 + (1.0 + R * R * S)**2 + (1.0 + Y * Y * F)**2 + 1.0
        data_bound = max(norm_a, norm_b) + 0.25 * gap2
        prior_bound = max(self.prior_precision, self.gamma_rate * math.exp(hi[2]),
                          self.gamma_rate * math.exp(hi[3]), (self.beta_a + self.beta_b) * pq[1])
        return max(data_bound, prior_bound)

    def phi_floor_region(self):
        return self.support_lo, self.support_hi

    def _residual_range(self, lo, hi):
        a_lo, a_hi = _imul(lo[0], hi[0], self.x1, self.x1)
        b_lo, b_hi = _imul(lo[1], hi[1], self.x2, self.x2)
        return a_lo + b_lo - self.y, a_hi + b_hi - self.y

    def _phi_lower_bound(self, precond):
        lo, hi = self.support_lo, self.support_hi
        inv_s2, inv_f2, _, pq = self._scales(lo, hi)
        r_lo, r_hi = self._residual_range(lo, hi)
        _, r2_hi = _isq(r_lo, r_hi)
        per_coord = np.array([
            -np.sum(self.x1**2) * inv_s2[1],
            -np.sum(self.x2**2) * inv_s2[1],
            -2.0 * np.sum(r2_hi) * inv_s2[1],
            -2.0 * np.sum(self.y**2) * inv_f2[1],
            -self.n_data * pq[1],
        ])
        prior = np.array([-self.prior_precision, -self.prior_precision,
                          -self.gamma_rate * math.exp(hi[2]), -self.gamma_rate * math.exp(hi[3]),
                          -(self.beta_a + self.beta_b) * pq[1]])
        return 0.5 * float(np.sum(precond.diag * (per_coord + prior)))

    def phi_box_bounds(self, precond, lo, hi):
        inv_s2, inv_f2, p, pq = self._scales(lo, hi)
        S_lo, S_hi = inv_s2
        F_lo, F_hi = inv_f2
        r_lo, r_hi = self._residual_range(lo, hi)
        r2_lo, r2_hi = _isq(r_lo, r_hi)
        x1, x2, y = self.x1, self.x2, self.y
        y2 = y * y
        n = self.n_data
        zeros = np.zeros(n)

        def scaled(lo_, hi_, s_lo, s_hi):
            return _imul(lo_, hi_, s_lo, s_hi)

        ra1 = scaled(*_imul(r_lo, r_hi, x1, x1), S_lo, S_hi)
        ra2 = scaled(*_imul(r_lo, r_hi, x2, x2), S_lo, S_hi)
        # Gradient ranges of the two component log densities, shape (n, 5)
        ga_lo = np.column_stack([-ra1[1], -ra2[1], -1.0 + r2_lo * S_lo, zeros, np.full(n, -p[1])])
        ga_hi = np.column_stack([-ra1[0], -ra2[0], -1.0 + r2_hi * S_hi, zeros, np.full(n, -p[0])])
        gb_lo = np.column_stack([zeros, zeros, zeros, -1.0 + y2 * F_lo, np.full(n, 1.0 - p[1])])
        gb_hi = np.column_stack([zeros, zeros, zeros, -1.0 + y2 * F_hi, np.full(n, 1.0 - p[0])])
        ha_lo = np.column_stack([-x1 * x1 * S_hi, -x2 * x2 * S_hi, -2.0 * r2_hi * S_hi,
                                 zeros, np.full(n, -pq[1])])
        ha_hi = np.column_stack([-x1 * x1 * S_lo, -x2 * x2 * S_lo, -2.0 * r2_lo * S_lo,
                                 zeros, np.full(n, -pq[0])])
        hb_lo = np.column_stack([zeros, zeros, zeros, -2.0 * y2 * F_hi, np.full(n, -pq[1])])
        hb_hi = np.column_stack([zeros, zeros, zeros, -2.0 * y2 * F_lo, np.full(n, -pq[0])])

        # Responsibilities are unknown: take the hull of both components
        g_lo = np.minimum(ga_lo, gb_lo).sum(axis=0)
        g_hi = np.maximum(ga_hi, gb_hi).sum(axis=0)
        _, gap2_hi = _isq(ga_lo - gb_hi, ga_hi - gb_lo)
        h_lo = np.minimum(ha_lo, hb_lo).sum(axis=0)
        h_hi = (np.maximum(ha_hi, hb_hi) + 0.25 * gap2_hi).sum(axis=0)

        ab = self.beta_a + self.beta_b
        g_lo = g_lo + np.array([-self.prior_precision * hi[0], -self.prior_precision * hi[1],
                                self.gamma_shape - self.gamma_rate * math.exp(hi[2]),
                                self.gamma_shape - self.gamma_rate * math.exp(hi[3]),
                                self.beta_a - ab * p[1]])
        g_hi = g_hi + np.array([-self.prior_precision * lo[0], -self.prior_precision * lo[1],
                                self.gamma_shape - self.gamma_rate * math.exp(lo[2]),
                                self.gamma_shape - self.gamma_rate * math.exp(lo[3]),
                                self.beta_a - ab * p[0]])
        h_lo = h_lo + np.array([-self.prior_precision, -self.prior_precision,
                                -self.gamma_rate * math.exp(hi[2]), -self.gamma_rate * math.exp(hi[3]),
                                -ab * pq[1]])
        h_hi = h_hi + np.array([-self.prior_precision, -self.prior_precision,
                                -self.gamma_rate * math.exp(lo[2]), -self.gamma_rate * math.exp(lo[3]),
                                -ab * pq[0]])
        return _phi_interval(precond, g_lo, g_hi, h_lo, h_hi)


def _schema_for(family: str) -> Tuple[str, ...]:
    if family == "t5-location":
        return ("y",)
    if family == "contaminated-mixture":
        return ("x1", "x2", "y")
    if family in ("gaussian-location", "logistic-regression"):
        return ("y",)
    return ()


def build_model(spec: ModelSpec, data: Optional[Dataset]) -> TargetModel:
    """Instantiate the family's TargetModel on a dataset"""
    prior_scale = float(spec.prior.get("scale", 10.0))
    if spec.family == "gaussian-target":
        mean = np.broadcast_to(np.asarray(spec.options.get("target_mean", 0.0), dtype=float), (spec.dim,))
        var = np.broadcast_to(np.asarray(spec.options.get("target_var", 1.0), dtype=float), (spec.dim,))
        model = GaussianTarget(mean, var)
    else:
        if data is None:
            raise DataError(f"{spec.family} needs a dataset")
        missing = [name for name in _schema_for(spec.family) if name not in data.frame.columns]
        if missing:
            raise DataError(f"dataset lacks columns {missing} required by {spec.family}")
        if spec.family == "gaussian-location":
            columns = [name for name in data.frame.columns if name.startswith("y")]
            if len(columns) != spec.dim:
                raise DataError(f"gaussian-location with dim={spec.dim} needs {spec.dim} y columns")
            model = GaussianLocation(data.frame[columns].to_numpy(dtype=float),
                                     noise_scale=float(spec.options.get("noise_scale", 1.0)),
                                     prior_scale=prior_scale)
        elif spec.family == "t5-location":
            model = T5Location(data.column("y"), prior_scale=prior_scale)
        elif spec.family == "logistic-regression":
            covariates = data.covariates()
            if len(covariates) + 1 != spec.dim:
                raise DataError(f"logistic-regression with dim={spec.dim} needs {spec.dim - 1} covariates")
            design = np.column_stack([np.ones(data.n)] + [data.column(name) for name in covariates])
            model = LogisticRegression(design, data.column("y"), prior_scale=prior_scale)
        else:
            support = None
            if "support_lo" in spec.options and "support_hi" in spec.options:
                support = (spec.options["support_lo"], spec.options["support_hi"])
            model = ContaminatedMixture(data.column("x1"), data.column("x2"), data.column("y"),
                                        prior=spec.prior, support=support)

    probe = np.asarray(spec.options.get("probe", default_start(model)), dtype=float)
    if not np.isfinite(model.log_pi(probe)):
        raise DataError(f"non-finite log posterior at probe point {probe.tolist()}")
    logger.info("Built %s model: d=%d, n=%d", spec.family, model.dim, model.n_data)
    return model


def default_start(model: TargetModel) -> np.ndarray:
    """Starting point for mode search"""
    if hasattr(model, "default_start"):
        return model.default_start()
    return np.zeros(model.dim)


def generate_synthetic(spec: ModelSpec, n: int, true_params, seed: int) -> Dataset:
    """
    Reproducible draws from the family's generative model.

    true_params are on the natural scale; regression covariates are standard normal.
    """
    if n < 1:
        raise ValueError(f"synthetic size must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    params = np.atleast_1d(np.asarray(true_params, dtype=float))
    family = spec.family
    if family == "gaussian-target":
        raise ValueError("gaussian-target has no data")
    if family == "gaussian-location":
        noise = float(spec.options.get("noise_scale", 1.0))
        y = np.broadcast_to(params, (spec.dim,)) + noise * rng.standard_normal((n, spec.dim))
        names = ["y"] if spec.dim == 1 else [f"y{j + 1}" for j in range(spec.dim)]
        frame = pd.DataFrame(y, columns=names)
    elif family == "t5-location":
        frame = pd.DataFrame({"y": params[0] + rng.standard_t(5.0, size=n)})
    elif family == "logistic-regression":
        if params.shape[0] != spec.dim:
            raise ValueError(f"logistic-regression needs {spec.dim} coefficients")
        covariates = rng.standard_normal((n, spec.dim - 1))
        eta = params[0] + covariates @ params[1:]
        y = (rng.random(n) < special.expit(eta)).astype(float)
        frame = pd.DataFrame(covariates, columns=[f"x{j + 1}" for j in range(spec.dim - 1)])
        frame.insert(0, "y", y)
    else:
        alpha, beta, sigma, phi, p = params
        x1 = rng.standard_normal(n)
        x2 = rng.standard_normal(n)
        corrupted = rng.random(n) < p
        clean = alpha * x1 + beta * x2 + sigma * rng.standard_normal(n)
        noise = phi * rng.standard_normal(n)
        frame = pd.DataFrame({"x1": x1, "x2": x2, "y": np.where(corrupted, noise, clean),
                              "corrupted": corrupted.astype(float)})
    provenance = {"generator": family, "n": n, "params": params.tolist(), "seed": seed}
    return Dataset(frame=frame, schema=tuple(frame.columns), provenance=provenance)


def _numeric_frame(raw: pd.DataFrame, path: str) -> pd.DataFrame:
    """Convert every cell to float, naming the first bad cell"""
    converted = {}
    for column in raw.columns:
        text = raw[column]
        values = pd.to_numeric(text, errors="coerce")
        missing = text.isna() | (text.astype(str).str.strip() == "")
        if missing.any():
            row = int(np.flatnonzero(missing.to_numpy())[0]) + 1
            raise DataError(f"{path}: missing value at row {row}, column '{column}'")
        bad = values.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise DataError(f"{path}: non-numeric value {text.iloc[row - 1]!r} at row {row}, column '{column}'")
        converted[column] = values.astype(float)
    return pd.DataFrame(converted)


def _expand_menarche(frame: pd.DataFrame, path: str) -> pd.DataFrame:
    totals = frame["Total"].to_numpy()
    events = frame["Menarche"].to_numpy()
    if np.any(totals != np.round(totals)) or np.any(events != np.round(events)) or np.any(events > totals) \
            or np.any(events < 0):
        raise DataError(f"{path}: Menarche counts must be integers with 0 <= Menarche <= Total")
    ages, ys = [], []
    for age, total, count in zip(frame["Age"].to_numpy(), totals.astype(int), events.astype(int)):
        ages.extend([age] * total)
        ys.extend([1.0] * count + [0.0] * (total - count))
    return pd.DataFrame({"y": ys, "age": ages})


def load_csv(path: str, schema: str) -> Dataset:
    """
    Load and validate a dataset for a model family (or 'menarche').

    Logistic covariates are standardised; the constants go into provenance.
    """
    if not os.path.isfile(path):
        raise DataError(f"data file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, skipinitialspace=True, keep_default_na=False,
                          na_values=[""])
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: cannot parse CSV: {e}") from e
    raw.columns = [str(name).strip() for name in raw.columns]
    provenance: Dict[str, Any] = {"path": os.path.abspath(path), "schema": schema}

    family = "logistic-regression" if schema == "menarche" else schema
    required = MENARCHE_COLUMNS if schema == "menarche" else _schema_for(family)
    if family not in FAMILIES:
        raise DataError(f"unknown schema '{schema}'")
    missing = [name for name in required if name not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing} for schema '{schema}'")

    frame = _numeric_frame(raw, path)
    if schema == "menarche":
        provenance["grouped_rows"] = len(frame)
        frame = _expand_menarche(frame, path)

    if family == "logistic-regression":
        normalization = {}
        for column in [name for name in frame.columns if name != "y"]:
            values = frame[column].to_numpy(dtype=float)
            mean = float(np.mean(values))
            sd = float(np.std(values))
            if sd <= 0.0:
                raise DataError(f"{path}: covariate '{column}' is constant")
            frame[column] = (values - mean) / sd
            normalization[column] = [mean, sd]
        provenance["normalization"] = normalization
    if len(frame) < 1:
        raise DataError(f"{path}: no data rows")
    return Dataset(frame=frame, schema=tuple(frame.columns), provenance=provenance)


def find_mode(model: TargetModel, x0=None, subsample_size: int = 1000, seed: int = 0) -> np.ndarray:
    """
    Quasi-Newton search for the posterior mode.

    A scaled run on a data subsample gives the starting point for the
    full-data refinement. Quality only affects speed, not correctness.
    """
    x = default_start(model) if x0 is None else np.asarray(x0, dtype=float)
    n = model.n_data
    if n > subsample_size:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(np.arange(1, n + 1), size=subsample_size, replace=False))
        prior = np.array([0])
        scale = n / subsample_size

        def subsample_objective(z):
            value = model.factor_log_f(prior, z).sum() + scale * model.factor_log_f(rows, z).sum()
            grad = model.factor_grad(prior, z).sum(axis=0) + scale * model.factor_grad(rows, z).sum(axis=0)
            return -value, -grad

        result = optimize.minimize(subsample_objective, x, jac=True, method="L-BFGS-B")
        if np.all(np.isfinite(result.x)):
            x = result.x

    def objective(z):
        return -model.log_pi(z), -model.grad_log_pi(z)

    result = optimize.minimize(objective, x, jac=True, method="L-BFGS-B")
    if not np.all(np.isfinite(result.x)):
        raise NumericFault("mode search diverged", {"start": np.asarray(x).tolist()})
    logger.info("Mode search finished at %s (%s)", np.round(result.x, 6).tolist(), result.message)
    return np.asarray(result.x, dtype=float)


def default_preconditioner(model: TargetModel, family: str, x_hat) -> Preconditioner:
    """
    Lambda = Lambda_0 / n with Lambda_0 the identity for location families and
    the inverse observed-information diagonal for regression families.
    """
    n = max(model.n_data, 1)
    if family in LOCATION_FAMILIES:
        return Preconditioner.scaled(np.ones(model.dim), n)
    information = -model.hess_diag_log_pi(np.asarray(x_hat, dtype=float))
    base = np.where(information > 0.0, n / np.where(information > 0.0, information, 1.0), 1.0)
    return Preconditioner.scaled(base, n)
