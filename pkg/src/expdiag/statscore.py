"""Statistical primitives shared by the detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats
from scipy.linalg import qr

from .datamodel import RangeSummary


class InsufficientData(ValueError):
    pass


class UndefinedLift(ValueError):
    pass


class RankDeficient(np.linalg.LinAlgError):
    def __init__(self, collinear: list):
        self.collinear = collinear
        super().__init__(f"design matrix is rank deficient; collinear columns: {collinear}")


def norm_two_sided_p(z: float | np.ndarray) -> float | np.ndarray:
    """Two-sided tail probability of a standard normal statistic."""
    return special.erfc(np.abs(z) / math.sqrt(2.0))


# --------------------------------------------------------------------------
# Lift inference


@dataclass(frozen=True)
class DeltaEstimate:
    delta_pct: float
    variance: float
    t_stat: float
    p_value: float
    n_t: int
    n_c: int
    mean_t: float
    mean_c: float
    var_t: float
    var_c: float

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)

    @property
    def sum_t(self) -> float:
        return self.mean_t * self.n_t

    @property
    def sum_c(self) -> float:
        return self.mean_c * self.n_c

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("delta_pct", "variance", "t_stat", "p_value", "n_t", "n_c",
                 "mean_t", "mean_c", "var_t", "var_c")}


def delta_variance(mean_t: float, var_t: float, n_t: int,
                   mean_c: float, var_c: float, n_c: int) -> float:
    """Delta-method variance of ``mean_t / mean_c - 1``."""
    return var_t / (mean_c**2 * n_t) + var_c * mean_t**2 / (mean_c**4 * n_c)


def delta_from_moments(mean_t: float, var_t: float, n_t: int,
                       mean_c: float, var_c: float, n_c: int) -> DeltaEstimate:
    if n_t < 2 or n_c < 2:
        raise InsufficientData(f"need at least 2 users per arm (n_t={n_t}, n_c={n_c})")
    if mean_c == 0:
        raise UndefinedLift("control mean is zero: undefined lift")
    d = mean_t / mean_c - 1.0
    v = delta_variance(mean_t, var_t, n_t, mean_c, var_c, n_c)
    if v > 0:
        t = d / math.sqrt(v)
        p = float(norm_two_sided_p(t))
    else:
        t = 0.0 if d == 0 else math.copysign(math.inf, d)
        p = 1.0 if d == 0 else 0.0
    return DeltaEstimate(d, v, t, p, n_t, n_c, mean_t, mean_c, var_t, var_c)


def delta_percent(t: RangeSummary, c: RangeSummary) -> DeltaEstimate:
    """Percent lift of treatment over control with its Delta-method variance.

    Args:
        t: treatment summary.
        c: control summary.

    Raises:
        InsufficientData: fewer than two users in an arm.
        UndefinedLift: control mean is zero.
    """
    if t.n < 2 or c.n < 2:
        raise InsufficientData(f"need at least 2 users per arm (n_t={t.n}, n_c={c.n})")
    return delta_from_moments(t.mean, t.var, t.n, c.mean, c.var, c.n)


# --------------------------------------------------------------------------
# Tests


def chi_squared_gof(observed: Sequence[float], expected_fractions: Sequence[float]
                    ) -> tuple[float, float]:
    """Pearson goodness-of-fit of counts against allocation fractions.

    Returns ``(stat, p_value)`` with ``len(observed) - 1`` degrees of freedom.
    """
    obs = np.asarray(observed, dtype=float)
    frac = np.asarray(expected_fractions, dtype=float)
    if obs.shape != frac.shape or obs.ndim != 1 or len(obs) < 2:
        raise ValueError("observed and expected_fractions must be equal-length vectors (>= 2)")
    if np.any(frac <= 0):
        raise ValueError("expected fractions must be strictly positive")
    if abs(frac.sum() - 1.0) > 1e-9:
        raise ValueError("expected fractions must sum to 1")
    total = obs.sum()
    if total <= 0:
        raise ValueError("total observed count is zero")
    exp = total * frac
    stat = float(np.sum((obs - exp) ** 2 / exp))
    return stat, float(stats.chi2.sf(stat, len(obs) - 1))


@dataclass(frozen=True)
class WelchResult:
    t: float
    p_value: float
    degenerate: bool = False


def welch_t(a: float, var_a: float, b: float, var_b: float) -> WelchResult:
    """Normal-approximation test of ``a == b`` with independent variances."""
    if var_a < 0 or var_b < 0:
        raise ValueError("variances must be non-negative")
    s2 = var_a + var_b
    if s2 == 0:
        if a == b:
            return WelchResult(0.0, 1.0, degenerate=True)
        return WelchResult(math.copysign(math.inf, a - b), 0.0, degenerate=True)
    t = (a - b) / math.sqrt(s2)
    return WelchResult(t, float(norm_two_sided_p(t)))


def benjamini_hochberg(p_values: Sequence[float], q: float) -> set[int]:
    """Indices rejected by the Benjamini-Hochberg step-up rule at level ``q``."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return set()
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    if not below.any():
        return set()
    k = int(np.nonzero(below)[0].max()) + 1
    return set(order[:k].tolist())


# --------------------------------------------------------------------------
# Regression


@dataclass(frozen=True)
class OLSResult:
    coefficients: np.ndarray
    r_squared: float
    residuals: np.ndarray
    std_errors: np.ndarray
    sigma2: float


def ols(x_design: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None) -> OLSResult:
    """Least squares fit of ``y`` on the columns of ``x_design``.

    ``x_design`` must contain the intercept column if one is wanted; R² is
    measured against the intercept-only model.

    Raises:
        RankDeficient: naming the columns that are linear combinations of others.
    """
    X = np.asarray(x_design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if n < k + 1:
        raise InsufficientData(f"need at least {k + 1} rows for {k} columns, got {n}")
    _, r, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(n, k) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < k:
        labels = list(names) if names is not None else list(range(k))
        raise RankDeficient(sorted(labels[j] for j in piv[rank:]))
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    # constant response: nothing to explain
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    sigma2 = ss_res / (n - k)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return OLSResult(beta, float(r2), resid, np.sqrt(np.diag(cov)), sigma2)


# --------------------------------------------------------------------------
# Two-group EM


@dataclass(frozen=True)
class TwoGroupPrior:
    """Mixture prior on normalized effects: null with prob ``1 - pi1``."""

    pi1: float
    v_sq: float
    unidentifiable: bool = False
    iterations: int = 0
    log_likelihoods: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.pi1 <= 1:
            raise ValueError("pi1 must be in [0, 1]")
        if self.v_sq < 0:
            raise ValueError("v_sq must be non-negative")

    def posterior_h1(self, delta: float, n_e: float) -> float:
        """P(H1 | delta) for a single metric under this prior."""
        return two_group_posterior(delta, 1.0 / n_e, self.pi1, self.v_sq)


def _log_normal0(x: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (np.log(2 * np.pi * var) + x * x / var)


def two_group_posterior(delta: float, null_var: float, prior_h1: float, v_sq: float) -> float:
    """P(H1 | delta) with delta ~ N(0, null_var) under H0 and N(0, null_var + v_sq) under H1."""
    if prior_h1 <= 0:
        return 0.0
    if prior_h1 >= 1:
        return 1.0
    l1 = _log_normal0(np.float64(delta), np.float64(null_var + v_sq))
    l0 = _log_normal0(np.float64(delta), np.float64(null_var))
    log_odds = math.log(prior_h1) - math.log1p(-prior_h1) + float(l1 - l0)
    return float(special.expit(log_odds))


def _mixture_loglik(d2: np.ndarray, s2: np.ndarray, pi1: float, v_sq: float) -> float:
    l0 = -0.5 * (np.log(2 * np.pi * s2) + d2 / s2)
    l1 = -0.5 * (np.log(2 * np.pi * (s2 + v_sq)) + d2 / (s2 + v_sq))
    with np.errstate(divide="ignore"):
        return float(np.mean(np.logaddexp(np.log1p(-pi1) + l0, np.log(pi1) + l1)))


def em_two_group(normalized_effects: Sequence[tuple[float, float]], *, tol: float = 1e-8,
                 max_iter: int = 500, min_records: int = 20) -> TwoGroupPrior:
    """Fit ``(pi1, V²)`` of the zero-mean two-group model by EM.

    Records are ``(delta, n_e)``; under H0 ``delta ~ N(0, 1/n_e)`` and under
    H1 ``delta ~ N(0, 1/n_e + V²)``.  The log-likelihood tracked for
    convergence is the per-record mean, so duplicating the data leaves the fit
    unchanged.  The V² step maximises the expected complete-data likelihood
    numerically and is only accepted when it does not decrease it, which keeps
    the observed likelihood monotone.
    """
    arr = np.asarray(normalized_effects, dtype=float).reshape(-1, 2)
    if len(arr) < min_records:
        raise InsufficientData(f"need at least {min_records} records, got {len(arr)}")
    d, ne = arr[:, 0], arr[:, 1]
    if np.any(ne <= 0):
        raise ValueError("effective sample sizes must be positive")
    d2 = d * d
    s2 = 1.0 / ne
    pi1 = 0.5
    v_sq = max(float(np.var(d)) - float(np.mean(s2)), 1e-8)
    upper = max(10.0 * float(d2.max()), 1e-6)

    lls = [_mixture_loglik(d2, s2, pi1, v_sq)]
    it = 0
    for it in range(1, max_iter + 1):
        l0 = -0.5 * (np.log(s2) + d2 / s2)
        l1 = -0.5 * (np.log(s2 + v_sq) + d2 / (s2 + v_sq))
        gamma = special.expit(math.log(pi1) - math.log1p(-pi1) + l1 - l0)
        new_pi1 = float(np.clip(np.mean(gamma), 1e-12, 1 - 1e-12))

        def neg_q(log_v):
            v = math.exp(log_v)
            return float(np.mean(gamma * (np.log(s2 + v) + d2 / (s2 + v))))

        res = optimize.minimize_scalar(neg_q, bounds=(math.log(1e-12), math.log(upper)),
                                       method="bounded", options={"xatol": 1e-10})
        cand = math.exp(res.x)
        new_v = cand if neg_q(res.x) <= neg_q(math.log(v_sq)) else v_sq
        pi1, v_sq = new_pi1, new_v
        lls.append(_mixture_loglik(d2, s2, pi1, v_sq))
        if lls[-1] - lls[-2] < tol:
            break

    unidentifiable = v_sq < 1e-3 * float(np.mean(s2)) or pi1 < 1e-6
    if unidentifiable:
        pi1 = 0.0
    return TwoGroupPrior(float(pi1), float(v_sq), unidentifiable, it, tuple(lls))


# --------------------------------------------------------------------------
# Correlated-null co-significance


_SIM_BLOCK = 1 << 14


def null_cosig_proportion(rho: float, alpha: float = 0.05, n_sim: int = 100_000,
                          seed: int = 0) -> float:
    """P(reject H0^X | reject H0^Y) for null z-statistics with correlation ``rho``.

    Draws are made in fixed-size blocks, each from its own stream keyed by
    ``(seed, block index)``, so the value depends only on the arguments.
    The same draws are reused across ``rho`` values.
    """
    if not -1 <= rho <= 1:
        raise ValueError("|rho| must be <= 1")
    if n_sim < 10_000:
        raise ValueError("n_sim must be at least 10,000")
    crit = stats.norm.isf(alpha / 2)
    both = given = 0
    s = math.sqrt(max(0.0, 1.0 - rho * rho))
    for b, start in enumerate(range(0, n_sim, _SIM_BLOCK)):
        size = min(_SIM_BLOCK, n_sim - start)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, b])))
        zy = rng.standard_normal(size)
        e = rng.standard_normal(size)
        zx = zy if rho == 1 else (-zy if rho == -1 else rho * zy + s * e)
        ry = np.abs(zy) > crit
        given += int(ry.sum())
        both += int((ry & (np.abs(zx) > crit)).sum())
    return both / given if given else float("nan")
