"""Detectors for time-dependent treatment effects.

Two effects are covered: the gap between in-trigger and off-trigger impact that
makes cross-day lifts drift toward a smaller stable value, and novelty (or
primacy) effects that decay with exposure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .datamodel import DataError, IngestedLog
from .statscore import (DeltaEstimate, InsufficientData, UndefinedLift, delta_variance, ols,
                        welch_t)
from .trigger_engine import (DecomposedSums, Mode, classify_coverage, decompose_in_off, lift)

WEEKEND = (5, 6)  # Monday = 0


def wk_model(p: float, r: float, k: int | float) -> float:
    """In-trigger share of a triggered user's metric total after ``k`` days.

    ``p`` is the daily trigger probability and ``r`` the ratio of per-day
    contribution on trigger days to that on other days.
    """
    if not 0 < p <= 1:
        raise ValueError(f"p={p} must lie in (0, 1]")
    if r < 0:
        raise ValueError(f"r={r} must be non-negative")
    if k < 1:
        raise ValueError(f"k={k} must be >= 1")
    pr = p * r
    off = (1 - p) - (1 - p) ** k
    denom = off + pr
    if denom == 0:  # r = 0 and k = 1
        return 1.0
    return pr / denom


def wk_limit(p: float, r: float) -> float:
    """Limit of :func:`wk_model` as ``k`` grows."""
    if not 0 < p <= 1:
        raise ValueError(f"p={p} must lie in (0, 1]")
    if r < 0:
        raise ValueError(f"r={r} must be non-negative")
    pr = p * r
    return pr / (1 - p + pr) if (1 - p + pr) > 0 else 1.0


# --------------------------------------------------------------------------
# Impact series


@dataclass(frozen=True)
class ImpactSeries:
    """Single-day lifts per day, cross-day lifts per horizon and the control ``w`` series.

    Entries are ``None`` when a lift is undefined on that day (for example an
    empty single-day population).
    """

    metric_id: str
    coverage: str
    start: int
    single: tuple[DeltaEstimate | None, ...]
    cross: tuple[DeltaEstimate | None, ...]
    w: tuple[float, ...]
    start_weekday: int | None = None

    @property
    def days(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self.single))

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for i, d in enumerate(self.days):
            s, c = self.single[i], self.cross[i]
            out.append({"day": int(d),
                        "single_day_delta": None if s is None else s.delta_pct,
                        "single_day_se": None if s is None else s.se,
                        "cross_day_delta": None if c is None else c.delta_pct,
                        "cross_day_se": None if c is None else c.se,
                        "w": None if math.isnan(self.w[i]) else self.w[i]})
        return out


def _safe_lift(log: IngestedLog, metric_id: str, rng: tuple[int, int], mode: Mode,
               treatment: str | None) -> DeltaEstimate | None:
    try:
        return lift(log, metric_id, rng, mode, treatment)
    except (InsufficientData, UndefinedLift):
        return None


def impact_series(log: IngestedLog, metric_id: str, start: int | None = None,
                  end: int | None = None, treatment: str | None = None) -> ImpactSeries:
    """Per-day single-day lifts and cumulative cross-day lifts from ``start``."""
    start = log.config.start_day if start is None else int(start)
    end = log.n_days if end is None else int(end)
    log.cols(start, end)
    cov = classify_coverage(log, metric_id)
    mat = log.metrics[metric_id]
    single, cross, w = [], [], []
    c_mask = log.variant == 0
    in_cum = 0.0
    tot_cum = 0.0
    for d in range(start, end + 1):
        single.append(_safe_lift(log, metric_id, (d, d), Mode.SINGLE_DAY, treatment))
        cross.append(_safe_lift(log, metric_id, (start, d), Mode.TRIGGERED, treatment))
        trig = log.triggered_in(start, d) & c_mask
        # in-trigger volume only grows; off-trigger volume of newly triggered users is recomputed
        in_cum += float(mat[log.exposed[:, d - 1] & c_mask, d - 1].sum())
        tot_cum = float(mat[trig, start - 1:d].sum())
        w.append(in_cum / tot_cum if tot_cum > 0 else float("nan"))
    return ImpactSeries(metric_id, cov.kind.value, start, tuple(single), tuple(cross),
                        tuple(w), log.config.start_weekday)


# --------------------------------------------------------------------------
# Trigger-day effect


def estimate_p_r(log: IngestedLog, metric_id: str, range: tuple[int, int] | None = None,
                 truncation_correction: bool = True) -> tuple[float, float]:
    """Daily trigger probability and in/off-trigger contribution ratio, on control.

    The naive estimate of ``p`` (trigger days per triggered user per day)
    conditions on having triggered at least once.  With
    ``truncation_correction`` the zero-truncated binomial mean equation
    ``p / (1 - (1-p)^k) = mean / k`` is solved instead.  ``r`` is NaN when
    there are no off-trigger days or no off-trigger volume.
    """
    x, y = (log.config.start_day, log.n_days) if range is None else (int(range[0]), int(range[1]))
    dec = decompose_in_off(log, metric_id, (x, y))
    c = dec.arms[dec.control]
    if c.n == 0:
        raise DataError("no triggered control users")
    k = y - x + 1
    q = c.trigger_days / (c.n * k)
    if not truncation_correction or q >= 1:
        p_hat = min(q, 1.0)
    elif q * k <= 1 + 1e-12:
        p_hat = 0.0
    else:
        p_hat = brentq(lambda p: p / (1 - (1 - p) ** k) - q, 1e-12, 1.0, xtol=1e-14)
    if c.off_days == 0 or c.sum_o == 0:
        return float(p_hat), float("nan")
    r_hat = (c.sum_i / c.trigger_days) / (c.sum_o / c.off_days)
    return float(p_hat), float(r_hat)


@dataclass(frozen=True)
class TriggerDayFinding:
    metric_id: str
    coverage: str
    flag: bool
    reasons: tuple[str, ...]
    w_series: tuple[float, ...] = ()
    w_k: float = 1.0
    delta_i: float = float("nan")
    var_i_bound: float = float("nan")
    delta_o: float = float("nan")
    var_o_bound: float = float("nan")
    delta_x: float = float("nan")
    t_stat: float = float("nan")
    p_value: float = float("nan")
    p_hat: float = float("nan")
    r_hat: float = float("nan")
    w_inf: float = float("nan")
    projected_stable: float = float("nan")

    def to_dict(self) -> dict[str, Any]:
        def num(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        d = {k: num(getattr(self, k)) for k in (
            "metric_id", "coverage", "flag", "w_k", "delta_i", "var_i_bound", "delta_o",
            "var_o_bound", "delta_x", "t_stat", "p_value", "p_hat", "r_hat", "w_inf",
            "projected_stable")}
        d["reasons"] = list(self.reasons)
        d["w_series"] = [num(w) for w in self.w_series]
        return d


def _bounded_lift(dec: DecomposedSums, attr: str) -> tuple[float, float]:
    """Lift of an in/off component with its variance bounded by that of the total."""
    t, c = dec.arms[dec.treatment], dec.arms[dec.control]
    mt, mc = getattr(t, attr) / t.n, getattr(c, attr) / c.n
    if mc == 0:
        return float("nan"), float("nan")
    _, vt = t.summary("x")
    _, vc = c.summary("x")
    return mt / mc - 1.0, delta_variance(mt, vt, t.n, mc, vc, c.n)


def detect_trigger_day(series: ImpactSeries, decomposed: DecomposedSums,
                       w_threshold: float = 0.8, alpha: float = 0.01,
                       p_r: tuple[float, float] | None = None) -> TriggerDayFinding:
    """Flag a metric whose in-trigger and off-trigger impacts differ.

    Requires a partially covered metric with ``w_k < w_threshold`` and a
    significant difference between the in-trigger and off-trigger lifts,
    tested with variances bounded by the variance of the per-user totals.
    ``p_r`` is the ``(p, r)`` pair used for the stable-impact projection.
    """
    if series.coverage == "FullyCovered":
        return TriggerDayFinding(series.metric_id, series.coverage, False,
                                 ("fully covered: every value falls on a trigger day, w = 1",),
                                 series.w)
    k = decomposed.range[1] - decomposed.range[0] + 1
    if k < 3:
        raise DataError("trigger-day detection needs at least 3 days")
    reasons = []
    w_k = decomposed.w
    d_i, v_i = _bounded_lift(decomposed, "sum_i")
    d_o, v_o = _bounded_lift(decomposed, "sum_o")
    welch = welch_t(d_i, v_i, d_o, v_o)
    small_w = not math.isnan(w_k) and w_k < w_threshold
    differ = not welch.degenerate and welch.p_value < alpha
    reasons.append(f"w_k={w_k:.4f} {'<' if small_w else '>='} threshold {w_threshold}")
    reasons.append(f"in-trigger {d_i:+.4%} vs off-trigger {d_o:+.4%}: "
                   f"p={welch.p_value:.3g} ({'significant' if differ else 'not significant'} "
                   f"at {alpha})")
    p_hat, r_hat = p_r if p_r is not None else (float("nan"), float("nan"))
    if p_hat > 0 and not math.isnan(r_hat):
        w_inf = wk_limit(p_hat, r_hat)
        projected = w_inf * d_i + (1 - w_inf) * d_o
    else:
        w_inf = projected = float("nan")
        reasons.append("stable impact not projected: p or r undefined")
    return TriggerDayFinding(
        series.metric_id, series.coverage, bool(small_w and differ), tuple(reasons), series.w,
        float(w_k), float(d_i), float(v_i), float(d_o), float(v_o), float(decomposed.delta_x),
        float(welch.t), float(welch.p_value), float(p_hat), float(r_hat), float(w_inf),
        float(projected))


def analyze_trigger_day(log: IngestedLog, metric_id: str, w_threshold: float = 0.8,
                        alpha: float = 0.01) -> TriggerDayFinding:
    """Series, decomposition, ``(p, r)`` estimates and detection over the whole log."""
    start, end = log.config.start_day, log.n_days
    series = impact_series(log, metric_id, start, end)
    if series.coverage == "FullyCovered":
        return detect_trigger_day(series, None, w_threshold, alpha)  # type: ignore[arg-type]
    dec = decompose_in_off(log, metric_id, (start, end))
    return detect_trigger_day(series, dec, w_threshold, alpha,
                              estimate_p_r(log, metric_id, (start, end)))


# --------------------------------------------------------------------------
# Novelty


@dataclass(frozen=True)
class NoveltyFinding:
    coefficients: tuple[float, float, float]
    r_squared: float
    monotone: bool
    direction: str
    extremes_p: float
    flag: bool
    strictly_monotone: bool = False
    reversal: float = 0.0
    notes: tuple[str, ...] = ()
    fitted: tuple[float, ...] = field(default=(), repr=False)
    days: tuple[int, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"beta0": self.coefficients[0], "beta1": self.coefficients[1],
                "beta2": self.coefficients[2], "r_squared": self.r_squared,
                "monotone": self.monotone, "strictly_monotone": self.strictly_monotone,
                "reversal": self.reversal, "direction": self.direction,
                "extremes_p": self.extremes_p, "flag": self.flag, "notes": list(self.notes)}


def _monotone(b1: float, b2: float, alpha: float, gamma: float, t_max: float,
              tol: float) -> tuple[bool, bool, float, str]:
    """Strict and tolerant monotonicity of ``b1 t^-alpha + b2 t^-gamma`` on ``[1, t_max]``.

    The derivative is ``-t^(-gamma-1) g(t)`` with ``g(t) = alpha b1 t^(gamma-alpha) + gamma b2``
    monotone in ``t``, so strict monotonicity holds iff ``g`` keeps its sign at
    both ends; a 1,000-point grid confirms it.  The tolerant verdict accepts a
    reversal of at most ``tol`` times the fitted range.
    """
    grid = np.linspace(1.0, t_max, 1000)
    curve = b1 * grid ** -alpha + b2 * grid ** -gamma
    deriv = -(alpha * b1 * grid ** (-alpha - 1) + gamma * b2 * grid ** (-gamma - 1))
    g_lo = alpha * b1 + gamma * b2
    g_hi = alpha * b1 * t_max ** (gamma - alpha) + gamma * b2
    analytic = (g_lo >= 0 and g_hi >= 0) or (g_lo <= 0 and g_hi <= 0)
    strict = analytic and bool(np.all(deriv <= 1e-15) or np.all(deriv >= -1e-15))
    span = float(curve.max() - curve.min())
    if span == 0:
        return strict, True, 0.0, "flat"
    decreasing = curve[0] >= curve[-1]
    if decreasing:
        rebound = float(np.max(curve - np.minimum.accumulate(curve)))
    else:
        rebound = float(np.max(np.maximum.accumulate(curve) - curve))
    reversal = rebound / span
    return strict, reversal <= tol, reversal, "decreasing" if decreasing else "increasing"


def detect_novelty(series: Sequence[DeltaEstimate] | ImpactSeries, alpha_trend: float = 0.35,
                   gamma: float = 2.0, r2_min: float = 0.8, alpha_extremes: float = 0.005,
                   start_weekday: int | None = None,
                   monotone_tol: float = 0.05) -> NoveltyFinding:
    """Regress single-day lifts on ``(1, t^-alpha_trend, t^-gamma)`` and test the shape.

    Flags when R² reaches ``r2_min``, the fitted curve is monotone on
    ``[1, T]`` and the largest and smallest single-day lifts differ at
    ``alpha_extremes``.  A fitted curve counts as monotone when its largest
    reversal is at most ``monotone_tol`` of its range.  A weekend start adds a day-of-week caveat; it never
    changes the flag.

    Raises:
        DataError: fewer than 7 days or an undefined single-day lift.
    """
    if isinstance(series, ImpactSeries):
        start_weekday = series.start_weekday if start_weekday is None else start_weekday
        series = series.single
    est = list(series)
    if len(est) < 7:
        raise DataError(f"insufficient days for novelty detection ({len(est)} < 7)")
    if any(e is None for e in est):
        raise DataError("single-day lift undefined on some day")
    t = np.arange(1, len(est) + 1, dtype=float)
    y = np.array([e.delta_pct for e in est])
    design = np.column_stack([np.ones_like(t), t ** -alpha_trend, t ** -gamma])
    fit = ols(design, y, ["beta0", "beta1", "beta2"])
    b0, b1, b2 = (float(v) for v in fit.coefficients)
    strict, mono, reversal, direction = _monotone(b1, b2, alpha_trend, gamma, float(len(est)),
                                                  monotone_tol)
    hi, lo = int(np.argmax(y)), int(np.argmin(y))
    ext = welch_t(y[hi], est[hi].variance, y[lo], est[lo].variance)
    ext_p = 1.0 if ext.degenerate else float(ext.p_value)
    flag = fit.r_squared >= r2_min and mono and direction != "flat" and ext_p < alpha_extremes
    notes = []
    if start_weekday is not None and start_weekday in WEEKEND:
        notes.append("series starts on a weekend: a day-of-week pattern can look like a "
                     "novelty effect; compare against a weekday start before acting")
    fitted = design @ np.array([b0, b1, b2])
    return NoveltyFinding((b0, b1, b2), float(fit.r_squared), mono, direction, ext_p,
                          bool(flag), strict, reversal, tuple(notes), tuple(float(v) for v in fitted),
                          tuple(int(d) for d in t))


@dataclass(frozen=True)
class CohortMagnitude:
    magnitude: float
    se: float
    ci: tuple[float, float]
    fresh: DeltaEstimate
    seasoned: DeltaEstimate
    window: tuple[int, int]

    def to_dict(self) -> dict[str, Any]:
        return {"magnitude": self.magnitude, "se": self.se, "ci": list(self.ci),
                "fresh_delta": self.fresh.delta_pct, "seasoned_delta": self.seasoned.delta_pct,
                "window": list(self.window)}


def cohort_novelty_magnitude(log: IngestedLog, metric_id: str, split_day: int, window: int = 0,
                             seasoned: str | None = None, fresh: str | None = None,
                             level: float = 0.95) -> CohortMagnitude:
    """Fresh-cohort lift minus seasoned-cohort lift over ``[split_day, split_day + window]``.

    Both lifts are against the shared control.  The standard error ignores
    the (positive) covariance through the shared control, so the interval is
    conservative.
    """
    labels = log.config.labels
    if len(labels) < 3:
        raise DataError("staggered design needs control, seasoned and fresh variants")
    seasoned = seasoned or labels[1]
    fresh = fresh or labels[2]
    y = split_day + window
    log.cols(split_day, y)
    fi = log.config.variant_index(fresh)
    fresh_users = log.variant == fi
    if not log.exposed[fresh_users].any():
        raise DataError(f"fresh cohort {fresh!r} has no exposures")
    if log.exposed[fresh_users, : split_day - 1].any():
        raise DataError(f"fresh cohort {fresh!r} was exposed before day {split_day}")
    f = lift(log, metric_id, (split_day, y), Mode.TRIGGERED, fresh)
    s = lift(log, metric_id, (split_day, y), Mode.TRIGGERED, seasoned)
    mag = f.delta_pct - s.delta_pct
    se = math.sqrt(f.variance + s.variance)
    z = float(norm.ppf(0.5 + level / 2))
    return CohortMagnitude(mag, se, (mag - z * se, mag + z * se), f, s, (split_day, y))
