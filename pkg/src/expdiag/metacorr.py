"""Meta-analysis over historical experiments: metric co-movement and early indicators."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import chi2

from .datamodel import DataError, IngestedLog, RangeSummary, SummaryStore
from .statscore import (InsufficientData, TwoGroupPrior, benjamini_hochberg, delta_from_moments,
                        em_two_group, norm_two_sided_p, null_cosig_proportion, ols,
                        two_group_posterior)
from .trigger_engine import Mode, build_summaries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricStat:
    delta_pct: float
    delta_abs: float
    sigma: float
    delta_norm: float
    n_e: float
    p_value: float

    @property
    def z(self) -> float:
        return self.delta_norm * math.sqrt(self.n_e)


@dataclass(frozen=True)
class ExperimentHistoryRecord:
    experiment_id: str
    iteration: str
    range: tuple[int, int]
    n_e: float
    metrics: Mapping[str, MetricStat]
    powered: bool = True

    @property
    def run_length(self) -> int:
        return self.range[1] - self.range[0] + 1

    def significant(self, metric: str, alpha: float = 0.05) -> bool:
        return self.metrics[metric].p_value < alpha


def effective_n(n_t: float, n_c: float) -> float:
    if n_t <= 0 or n_c <= 0:
        raise DataError("both arms need users for an effective sample size")
    return 1.0 / (1.0 / n_t + 1.0 / n_c)


def metric_stat(t: RangeSummary, c: RangeSummary) -> MetricStat:
    """Lift, normalized effect and p-value of one metric from two arm summaries.

    ``sigma`` satisfies ``sigma² / N_e = var_t / N_t + var_c / N_c`` so that
    ``delta_norm * sqrt(N_e)`` is the z-statistic of the mean difference.
    """
    n_e = effective_n(t.n, c.n)
    se2 = t.var / t.n + c.var / c.n
    diff = t.mean - c.mean
    sigma = math.sqrt(n_e * se2)
    if sigma == 0:
        raise InsufficientData("zero variance in both arms")
    d_norm = diff / sigma
    pct = delta_from_moments(t.mean, t.var, t.n, c.mean, c.var, c.n).delta_pct
    p = float(norm_two_sided_p(d_norm * math.sqrt(n_e)))
    return MetricStat(pct, diff, sigma, d_norm, n_e, p)


def _default_group(experiment_id: str) -> tuple[str, str]:
    name, _, it = experiment_id.partition("@")
    return name, it or "0"


def build_history(store: SummaryStore, min_days: int = 7, control: str = "control",
                  treatment: str = "treatment",
                  group: Callable[[str], tuple[str, str]] = _default_group,
                  min_n_e: float = 0.0) -> list[ExperimentHistoryRecord]:
    """One record per experiment from its highest-power iteration and longest cross-day range.

    Store experiment ids of the form ``name@iteration`` are grouped by
    ``name``.  Cross-day ranges start at day 1; power is ranked by the
    effective sample size at the longest range.  Experiments (or
    iterations) shorter than ``min_days`` are excluded and logged.
    """
    ranges: dict[str, dict[tuple[int, int], dict[str, dict[str, RangeSummary]]]] = {}
    for (eid, variant, metric, rng), summ in store.summaries.items():
        if rng[0] != 1 or variant not in (control, treatment):
            continue
        ranges.setdefault(eid, {}).setdefault(rng, {}).setdefault(metric, {})[variant] = summ
    candidates: dict[str, list[tuple[float, int, str, str, tuple[int, int]]]] = {}
    for eid in sorted(ranges):
        name, it = group(eid)
        full = {rng: m for rng, m in ranges[eid].items()
                if any(len(arms) == 2 for arms in m.values())}
        if not full:
            continue
        rng = max(full, key=lambda r: r[1])
        if rng[1] < min_days:
            log.info("excluding %s: %d days < %d", eid, rng[1], min_days)
            continue
        arms = next(a for _, a in sorted(full[rng].items()) if len(a) == 2)
        n_e = effective_n(arms[treatment].n, arms[control].n)
        candidates.setdefault(name, []).append((n_e, rng[1], it, eid, rng))
    out = []
    for name in sorted(candidates):
        # highest power first, then longest run; ties go to the earliest iteration label
        n_e, _, it, eid, rng = min(candidates[name], key=lambda c: (-c[0], -c[1], c[2]))
        stats = {metric: metric_stat(arms[treatment], arms[control])
                 for metric, arms in sorted(ranges[eid][rng].items()) if len(arms) == 2}
        out.append(ExperimentHistoryRecord(name, it, rng, n_e, stats, n_e >= min_n_e))
    return out


def summarize_log(log_: IngestedLog, store: SummaryStore, days: Iterable[int],
                  metrics: Sequence[str] | None = None, experiment_id: str | None = None) -> None:
    """Add triggered cross-day summaries ``[1, d]`` and user counts of a log to ``store``."""
    eid = experiment_id or log_.experiment_id
    for d in days:
        summ = build_summaries(log_, (1, d), Mode.TRIGGERED, metrics)
        seen = set()
        for (variant, _), s in sorted(summ.items()):
            store.put(RangeSummary(eid, s.variant, s.metric_id, s.range, s.n, s.sum, s.sum_sq))
            if variant not in seen:
                store.put_count(eid, variant, (1, d), s.n)
                seen.add(variant)


# --------------------------------------------------------------------------
# Co-movement


@dataclass(frozen=True)
class ComovementResult:
    x: str
    y: str
    rho: float
    alpha: float
    n_conditioning: int
    expected: float
    observed: float
    stat: float
    p_value: float

    @property
    def elevated(self) -> bool:
        return self.observed > self.expected

    @property
    def score(self) -> float:
        return self.stat

    def to_dict(self) -> dict[str, Any]:
        return {"x": self.x, "y": self.y, "rho": self.rho, "alpha": self.alpha,
                "n_conditioning": self.n_conditioning, "expected": self.expected,
                "observed": self.observed, "stat": self.stat, "p_value": self.p_value,
                "score": self.score}


def comovement(history: Sequence[ExperimentHistoryRecord], x: str, y: str, rho: float,
               alpha: float = 0.05, min_records: int = 30, n_sim: int = 100_000,
               seed: int = 0) -> ComovementResult:
    """Is X significant more often than correlation alone explains, among Y-significant records?

    One-sided chi-squared comparison of the observed proportion against the
    null co-significance proportion at user-level correlation ``rho``.

    Raises:
        InsufficientData: fewer than ``min_records`` records with Y significant.
    """
    cond = [r for r in history if x in r.metrics and y in r.metrics and r.significant(y, alpha)]
    n = len(cond)
    if n < min_records:
        raise InsufficientData(f"insufficient history: {n} records with {y} significant "
                               f"(need {min_records})")
    hits = sum(r.significant(x, alpha) for r in cond)
    observed = hits / n
    expected = float(null_cosig_proportion(rho, alpha, n_sim, seed))
    if expected >= 1.0 or expected <= 0.0:
        stat, p = 0.0, 1.0
    else:
        e = n * expected
        stat = (hits - e) ** 2 / e + ((n - hits) - (n - e)) ** 2 / (n - e)
        tail = 0.5 * float(chi2.sf(stat, 1))
        p = tail if observed > expected else 1.0 - tail
    return ComovementResult(x, y, float(rho), alpha, n, expected, observed, float(stat), float(p))


@dataclass(frozen=True)
class DeltaRelation:
    beta0: float
    beta1: float
    r_squared: float
    points_used: tuple[str, ...]
    dropped: tuple[str, ...] = ()
    n_discoveries: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"beta0": self.beta0, "beta1": self.beta1, "r_squared": self.r_squared,
                "points_used": list(self.points_used), "dropped": list(self.dropped),
                "n_discoveries": self.n_discoveries}


def _studentized(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Externally studentized residuals of an OLS fit."""
    n, p = design.shape
    q, _ = np.linalg.qr(design)
    h = np.sum(q * q, axis=1)
    beta = np.linalg.lstsq(design, y, rcond=None)[0]
    e = y - design @ beta
    sse = float(e @ e)
    denom_df = n - p - 1
    if denom_df <= 0:
        return np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_i2 = (sse - e * e / (1 - h)) / denom_df
        t = e / np.sqrt(s_i2 * (1 - h))
    return np.nan_to_num(t, nan=0.0, posinf=np.inf, neginf=-np.inf)


def fit_delta_relation(history: Sequence[ExperimentHistoryRecord], x: str, y: str,
                       q: float = 0.05, min_discoveries: int = 10,
                       outlier_threshold: float = 3.0) -> DeltaRelation:
    """Slope of Y's lift on X's lift across experiments that moved X.

    Benjamini-Hochberg at ``q`` over X's p-values picks the experiments; one
    pass drops points with externally studentized residual above
    ``outlier_threshold`` and refits.

    Raises:
        InsufficientData: fewer than ``min_discoveries`` experiments selected.
    """
    recs = [r for r in history if x in r.metrics and y in r.metrics]
    selected = sorted(benjamini_hochberg([r.metrics[x].p_value for r in recs], q))
    if len(selected) < min_discoveries:
        raise InsufficientData(f"insufficient discoveries: {len(selected)} experiments pass "
                               f"BH at q={q} (need {min_discoveries})")
    ids = np.array([recs[i].experiment_id for i in selected])
    dx = np.array([recs[i].metrics[x].delta_pct for i in selected])
    dy = np.array([recs[i].metrics[y].delta_pct for i in selected])
    design = np.column_stack([np.ones_like(dx), dx])
    keep = np.abs(_studentized(design, dy)) <= outlier_threshold
    if keep.sum() < min_discoveries:
        keep[:] = True
    fit = ols(design[keep], dy[keep], ["beta0", "beta1"])
    return DeltaRelation(float(fit.coefficients[0]), float(fit.coefficients[1]),
                         float(fit.r_squared), tuple(ids[keep].tolist()),
                         tuple(ids[~keep].tolist()), len(selected))


# --------------------------------------------------------------------------
# Early indicator


def fit_prior(history: Sequence[ExperimentHistoryRecord], metric: str, **em_kwargs) -> TwoGroupPrior:
    """Two-group prior of a metric's normalized effects across the history."""
    pairs = [(r.metrics[metric].delta_norm, r.metrics[metric].n_e) for r in history
             if metric in r.metrics]
    return em_two_group(pairs, **em_kwargs)


def estimate_conditionals(history: Sequence[ExperimentHistoryRecord], x: str, y: str,
                          rho: float, alpha: float = 0.05, n_sim: int = 100_000,
                          seed: int = 0) -> np.ndarray:
    """2×2 matrix ``C[i, j] = P(H_j^Y | H_i^X)`` from co-significance in the history.

    Observed co-significance mixes true co-movement with false positives; with
    a true-movement share ``s`` and false-positive rate ``e`` the observed rate
    is ``s + (1 - s) e``, which is inverted and floored at 0.  ``e`` is the
    null co-significance proportion at ``rho`` given X significant, and
    ``alpha`` given X not significant.
    """
    recs = [r for r in history if x in r.metrics and y in r.metrics]
    if not recs:
        raise InsufficientData("empty history")
    xs = np.array([r.significant(x, alpha) for r in recs])
    ys = np.array([r.significant(y, alpha) for r in recs])
    e1 = float(null_cosig_proportion(rho, alpha, n_sim, seed))

    def share(obs: float, e: float) -> float:
        if e >= 1:
            return 0.0
        return float(min(max((obs - e) / (1 - e), 0.0), 1.0))

    p11 = share(float(ys[xs].mean()), e1) if xs.any() else 0.0
    p01 = share(float(ys[~xs].mean()), alpha) if (~xs).any() else 0.0
    return np.array([[1 - p01, p01], [1 - p11, p11]])


@dataclass(frozen=True)
class EarlyIndicatorResult:
    posterior: float
    flag: bool
    threshold: float
    p_h1_x: float
    prior_y: float
    delta_x: float
    n_e_x: float
    delta_y: float
    n_e_y_pred: float | None
    conditionals: tuple[tuple[float, float], tuple[float, float]] = field(default=((1, 0), (1, 0)))

    def to_dict(self) -> dict[str, Any]:
        return {"posterior": self.posterior, "flag": self.flag, "threshold": self.threshold,
                "p_h1_x": self.p_h1_x, "prior_y": self.prior_y, "delta_x": self.delta_x,
                "n_e_x": self.n_e_x, "delta_y": self.delta_y, "n_e_y_pred": self.n_e_y_pred,
                "conditionals": [list(r) for r in self.conditionals]}


def early_indicator(delta_x: float, n_e_x: float, delta_y: float, n_e_y_pred: float | None,
                    prior_x: TwoGroupPrior, prior_y: TwoGroupPrior,
                    conditionals: np.ndarray | Sequence[Sequence[float]],
                    threshold: float = 0.6) -> EarlyIndicatorResult:
    """Posterior that Y moved, given early effects on X and Y.

    X's posterior mixes the conditionals into a prior for Y, which is then
    updated with Y's likelihood ratio at the projected effective sample size.
    ``n_e_y_pred=None`` means Y carries no information and returns the mixed
    prior.

    Raises:
        ValueError: conditional rows not summing to 1 or non-positive sample sizes.
    """
    c = np.asarray(conditionals, dtype=float)
    if c.shape != (2, 2) or np.any(c < 0) or not np.allclose(c.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("conditionals must be a 2x2 row-stochastic matrix")
    if n_e_x <= 0 or (n_e_y_pred is not None and n_e_y_pred <= 0):
        raise ValueError("effective sample sizes must be positive")
    p_x = prior_x.posterior_h1(delta_x, n_e_x)
    mixed = float(c[1, 1] * p_x + c[0, 1] * (1 - p_x))
    if n_e_y_pred is None:
        post = mixed
    else:
        post = two_group_posterior(delta_y, 1.0 / n_e_y_pred, mixed, prior_y.v_sq)
    post = float(min(max(post, 0.0), 1.0))
    return EarlyIndicatorResult(post, post > threshold, threshold, float(p_x), mixed,
                                float(delta_x), float(n_e_x), float(delta_y), n_e_y_pred,
                                tuple(tuple(float(v) for v in row) for row in c))


# --------------------------------------------------------------------------
# Sample size projection


def _sat_curve(q: float, d: np.ndarray) -> np.ndarray:
    if q <= 0:
        return d.astype(float)
    return (1 - (1 - q) ** d) / q


def project_ne(series: Sequence[float], target_day: int = 30, method: str = "saturating") -> float:
    """Project a daily effective-sample-size series (days 1..t) to ``target_day``.

    ``"saturating"`` fits ``A (1 - (1-q)^d) / q`` with ``q`` in ``[0, 1]``,
    which spans a fixed population (``q = 1``, constant) and steady daily
    arrivals (``q -> 0``, linear).  ``"powerlaw"`` fits ``log N = a + b log d``
    with ``b`` clamped to ``[0, 1]``.  Fits are least squares on the log scale.

    Raises:
        DataError: fewer than 3 days or a non-positive value.
    """
    y = np.asarray(series, dtype=float)
    if len(y) < 3:
        raise DataError(f"need at least 3 days to project sample size (got {len(y)})")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise DataError("sample sizes must be positive and finite")
    d = np.arange(1, len(y) + 1, dtype=float)
    ly = np.log(y)
    if method == "powerlaw":
        fit = ols(np.column_stack([np.ones_like(d), np.log(d)]), ly)
        a, b = (float(v) for v in fit.coefficients)
        if not 0 <= b <= 1:
            b = min(max(b, 0.0), 1.0)
            a = float(np.mean(ly - b * np.log(d)))
        return float(math.exp(a + b * math.log(target_day)))
    if method != "saturating":
        raise ValueError(f"unknown projection method {method!r}")

    def sse(q: float) -> tuple[float, float]:
        lg = np.log(_sat_curve(q, d))
        a = float(np.mean(ly - lg))
        r = ly - a - lg
        return float(r @ r), a

    res = minimize_scalar(lambda q: sse(q)[0], bounds=(1e-9, 1.0), method="bounded",
                          options={"xatol": 1e-10})
    candidates = [0.0, 1.0, float(res.x)]
    q = min(candidates, key=lambda c: (sse(c)[0], c))
    a = sse(q)[1]
    return float(math.exp(a) * _sat_curve(q, np.array([float(target_day)]))[0])
