"""Triggered, single-day and all-user summaries built from an ingested log.

A *trigger day* is any day with at least one exposure event; metric values
on that whole calendar day count as in-trigger.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .datamodel import DataError, IngestedLog, RangeSummary, check_range
from .statscore import DeltaEstimate, delta_percent


class Mode(str, enum.Enum):
    TRIGGERED = "triggered"
    ALL_USER = "all_user"
    SINGLE_DAY = "single_day"


class CoverageKind(str, enum.Enum):
    FULLY_COVERED = "FullyCovered"
    PARTIALLY_COVERED = "PartiallyCovered"


@dataclass(frozen=True)
class CoverageClass:
    metric_id: str
    kind: CoverageKind
    evidence: int

    @property
    def fully_covered(self) -> bool:
        return self.kind is CoverageKind.FULLY_COVERED


@dataclass(frozen=True)
class TriggerProfile:
    first_trigger_day: np.ndarray
    trigger_day_count: np.ndarray
    cumulative_counts: np.ndarray  # (n_variants, n_days): n^[start, k] per variant

    def trigger_day_set(self, log: IngestedLog, user_index: int) -> set[int]:
        return set((np.nonzero(log.exposed[user_index])[0] + 1).tolist())


def trigger_profile(log: IngestedLog) -> TriggerProfile:
    start = log.config.start_day
    first = log.first_trigger_day()
    nv = len(log.config.variants)
    cum = np.zeros((nv, log.n_days), dtype=np.int64)
    valid = first >= start
    for v in range(nv):
        days = first[valid & (log.variant == v)]
        cum[v] = np.cumsum(np.bincount(days - 1, minlength=log.n_days)[: log.n_days])
    return TriggerProfile(first, log.trigger_days, cum)


def population(log: IngestedLog, x: int, y: int, mode: Mode) -> np.ndarray:
    """Boolean user mask of the analysis population for a range and mode."""
    mode = Mode(mode)
    cols = log.cols(x, y)
    if mode is Mode.SINGLE_DAY:
        if x != y:
            raise DataError("single-day mode needs a one-day range")
        return log.exposed[:, x - 1].copy()
    if mode is Mode.TRIGGERED:
        return log.exposed[:, cols].any(axis=1)
    if log.targeted is not None:
        return log.targeted[:, cols].any(axis=1)
    return np.ones(log.n_users, dtype=bool)


def user_totals(log: IngestedLog, metric_id: str, x: int, y: int) -> np.ndarray:
    try:
        mat = log.metrics[metric_id]
    except KeyError:
        raise DataError(f"metric {metric_id!r} not present in log") from None
    return mat[:, log.cols(x, y)].sum(axis=1)


def _summaries_for(log: IngestedLog, mask: np.ndarray, totals: np.ndarray, metric_id: str,
                   rng: tuple[int, int]) -> dict[str, RangeSummary]:
    nv = len(log.config.variants)
    v = log.variant[mask]
    t = totals[mask]
    n = np.bincount(v, minlength=nv)
    s = np.bincount(v, weights=t, minlength=nv)
    ss = np.bincount(v, weights=t * t, minlength=nv)
    return {label: RangeSummary(log.experiment_id, label, metric_id, rng, int(n[i]),
                                float(s[i]), float(ss[i]))
            for i, label in enumerate(log.config.labels)}


def build_summaries(log: IngestedLog, range: tuple[int, int], mode: Mode | str = Mode.TRIGGERED,
                    metrics: list[str] | None = None) -> dict[tuple[str, str], RangeSummary]:
    """Per ``(variant, metric)`` summaries of user totals over ``range``.

    Triggered: users with an exposure in the range, totals over the whole
    range.  SingleDay: users exposed on that day, totals over that day.
    AllUser: targeted users (or everyone in the log), totals over the range.
    An empty population yields summaries with ``n == 0``.
    """
    x, y = int(range[0]), int(range[1])
    check_range(log, x, y)
    mask = population(log, x, y, Mode(mode))
    out = {}
    for metric_id in metrics if metrics is not None else sorted(log.metrics):
        totals = user_totals(log, metric_id, x, y)
        for label, summ in _summaries_for(log, mask, totals, metric_id, (x, y)).items():
            out[(label, metric_id)] = summ
    return out


def lift(log: IngestedLog, metric_id: str, range: tuple[int, int],
         mode: Mode | str = Mode.TRIGGERED, treatment: str | None = None) -> DeltaEstimate:
    """Delta-method lift of ``treatment`` (default: second variant) over control."""
    s = build_summaries(log, range, mode, [metric_id])
    t = treatment or log.config.treatment
    return delta_percent(s[(t, metric_id)], s[(log.config.control, metric_id)])


def classify_coverage(log: IngestedLog, metric_id: str) -> CoverageClass:
    """Fully covered iff no user has a nonzero value on a day without an exposure."""
    mat = log.metrics.get(metric_id)
    if mat is None:
        raise DataError(f"metric {metric_id!r} not present in log")
    evidence = int(np.count_nonzero((mat != 0) & ~log.exposed))
    kind = CoverageKind.FULLY_COVERED if evidence == 0 else CoverageKind.PARTIALLY_COVERED
    return CoverageClass(metric_id, kind, evidence)


# --------------------------------------------------------------------------
# In-trigger / off-trigger decomposition


@dataclass(frozen=True)
class ArmSums:
    n: int
    sum_i: float
    sum_o: float
    sum_x: float
    trigger_days: int
    off_days: int
    i: np.ndarray
    o: np.ndarray
    x: np.ndarray

    def summary(self, which: str) -> tuple[float, float]:
        """Mean and unbiased variance of per-user totals for ``'i'``, ``'o'`` or ``'x'``."""
        vals = getattr(self, which)
        if len(vals) < 2:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.var(ddof=1))


@dataclass(frozen=True)
class DecomposedSums:
    metric_id: str
    range: tuple[int, int]
    arms: dict[str, ArmSums]
    control: str
    treatment: str
    w: float

    @property
    def w_defined(self) -> bool:
        return not math.isnan(self.w)

    def _lift(self, attr: str) -> float:
        t, c = self.arms[self.treatment], self.arms[self.control]
        mc = getattr(c, attr) / c.n
        if mc == 0:
            return float("nan")
        return (getattr(t, attr) / t.n) / mc - 1.0

    @property
    def delta_i(self) -> float:
        return self._lift("sum_i")

    @property
    def delta_o(self) -> float:
        return self._lift("sum_o")

    @property
    def delta_x(self) -> float:
        return self._lift("sum_x")


def decompose_in_off(log: IngestedLog, metric_id: str, range: tuple[int, int]) -> DecomposedSums:
    """Split each triggered user's total into in-trigger and off-trigger parts.

    ``w`` is the control arm's in-trigger share ``sum_i / sum_x``; it is NaN
    when the control has no metric volume.
    """
    x, y = int(range[0]), int(range[1])
    cols = log.cols(x, y)
    mat = log.metrics.get(metric_id)
    if mat is None:
        raise DataError(f"metric {metric_id!r} not present in log")
    exp = log.exposed[:, cols]
    vals = mat[:, cols]
    pop = exp.any(axis=1)
    if not pop.any():
        raise DataError("triggered population is empty")
    i_tot = np.where(exp, vals, 0.0).sum(axis=1)
    o_tot = np.where(exp, 0.0, vals).sum(axis=1)
    x_tot = vals.sum(axis=1)
    t_days = exp.sum(axis=1)
    arms = {}
    for v, label in enumerate(log.config.labels):
        m = pop & (log.variant == v)
        arms[label] = ArmSums(
            n=int(m.sum()), sum_i=float(i_tot[m].sum()), sum_o=float(o_tot[m].sum()),
            sum_x=float(x_tot[m].sum()), trigger_days=int(t_days[m].sum()),
            off_days=int(m.sum() * (y - x + 1) - t_days[m].sum()),
            i=i_tot[m], o=o_tot[m], x=x_tot[m])
    c = arms[log.config.control]
    w = c.sum_i / c.sum_x if c.sum_x != 0 else float("nan")
    return DecomposedSums(metric_id, (x, y), arms, log.config.control, log.config.treatment, w)


# --------------------------------------------------------------------------
# Triggered vs non-triggered analysis


def variance_inflation_fully(k: float, r: float, delta_pct: float, mean_t: float, mean_c: float,
                             var_t: float, var_c: float) -> float:
    """var(lift, all users) / var(lift, triggered) for a fully covered metric.

    ``k`` is population size over triggered size, ``r`` the treatment/control
    size ratio; means and variances are those of the triggered arms.
    """
    if k < 1:
        raise DataError(f"population/trigger ratio k={k} < 1: triggered population "
                        "larger than the total")
    g = r * (1 + delta_pct) ** 2
    denom = var_t + g * var_c
    if denom <= 0:
        raise ValueError("triggered variances must not both be zero")
    return 1.0 + (mean_t**2 + g * mean_c**2) / denom * (1.0 - 1.0 / k)


def t_ratio_partial(n_c: float, ss_c: float, n_prime_c: float, ss_prime_c: float) -> float:
    """Approximate upper bound on t(all users) / t(triggered) for partially covered metrics.

    ``ss`` are raw sums of squares of the per-user metric totals in control.
    """
    if n_c <= 0 or ss_c <= 0:
        raise ValueError("triggered n and sum of squares must be positive")
    if n_prime_c < n_c:
        raise DataError("triggered population larger than the total population")
    if ss_prime_c < ss_c:
        raise DataError("triggered sum of squares exceeds the population sum of squares")
    return 1.0 / math.sqrt(n_prime_c * ss_prime_c / (n_c * ss_c))


def unique_counts(log: IngestedLog, x: int, y: int) -> np.ndarray:
    """n^[x,y] per variant: users with at least one exposure in the range."""
    if x > y:
        return np.zeros(len(log.config.variants), dtype=np.int64)
    return log.counts_by_variant(log.triggered_in(x, y))


def new_returned_block(log: IngestedLog, s: int, y: int) -> tuple[np.ndarray, np.ndarray]:
    """New and returned users over block ``[s, y]`` from three cumulative counts.

    New users first trigger inside the block; returned users trigger inside it
    after having triggered before ``s``.  Requires ``s`` after the start day.
    """
    start = log.config.start_day
    if s <= start:
        raise DataError(f"block must start after the experiment's first day ({start})")
    before = unique_counts(log, start, s - 1)
    through = unique_counts(log, start, y)
    block = unique_counts(log, s, y)
    n_new = through - before
    n_ret = before + block - through
    if np.any(n_new < 0) or np.any(n_ret < 0):
        raise RuntimeError("inconsistent cumulative counts: negative new/returned users")
    return n_new, n_ret


def new_returned_counts(log: IngestedLog, k: int) -> dict[str, tuple[int, int]]:
    """Per variant ``(n_new, n_returned)`` on day ``k``."""
    if k < log.config.start_day + 1:
        raise DataError("new/returned split needs k >= 2")
    n_new, n_ret = new_returned_block(log, k, k)
    return {label: (int(n_new[i]), int(n_ret[i])) for i, label in enumerate(log.config.labels)}
