"""Sample size ratio test and automated root-cause checks for mismatched experiments."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .datamodel import DataError, IngestedLog, TrackingPredicate
from .statscore import chi_squared_gof
from .trigger_engine import new_returned_block

DEFAULT_ALPHA = 0.001

DYNAMIC_TARGETING = "DynamicTargeting"
FEEDBACK_COOLOFF = "FeedbackLoop:BiasedImplementation/CoolOff"
FEEDBACK_RESIDUAL = "FeedbackLoop:Residual/EngagementChange"
FEEDBACK = "FeedbackLoop"
DEPENDENT = "DependentExperiments"
ENGAGEMENT = "EngagementChange"
UNEXPLAINED = "Unexplained"
HYPOTHESES = (DYNAMIC_TARGETING, FEEDBACK_COOLOFF, FEEDBACK_RESIDUAL, FEEDBACK, DEPENDENT,
              ENGAGEMENT, UNEXPLAINED)

REMEDIATION = {
    FEEDBACK: "rehash the experiment and count users from its first day; "
              "the variant populations are then expected to match",
    DYNAMIC_TARGETING: "freeze the targeted population before the experiment starts so "
                       "that treatment cannot move users in or out of it",
    DEPENDENT: "analyse the de-duplicated population of both experiments, or rehash the "
               "downstream experiment independently of the upstream one",
}


class Verdict(str, enum.Enum):
    BALANCED = "Balanced"
    MISMATCH = "Mismatch"
    SKIPPED = "Skipped"


@dataclass(frozen=True)
class SSRResult:
    """Outcome of one sample size ratio test.

    Skipped checks carry empty counts, NaN statistics and a ``note``.
    """

    name: str
    labels: tuple[str, ...]
    observed: tuple[int, ...]
    expected: tuple[float, ...]
    stat: float
    p_value: float
    alpha: float
    verdict: Verdict
    note: str = ""

    @property
    def mismatch(self) -> bool:
        return self.verdict is Verdict.MISMATCH

    @property
    def balanced(self) -> bool:
        return self.verdict is Verdict.BALANCED

    @property
    def skipped(self) -> bool:
        return self.verdict is Verdict.SKIPPED

    def describe(self) -> str:
        if self.skipped:
            return f"{self.name}: Skipped ({self.note})"
        counts = ", ".join(f"{lab}={n}" for lab, n in zip(self.labels, self.observed))
        return f"{self.name}: {self.verdict.value} (p={self.p_value:.3g}; {counts})"

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "labels": list(self.labels), "observed": list(self.observed),
                "expected": [round(e, 6) for e in self.expected], "stat": _num(self.stat),
                "p_value": _num(self.p_value), "alpha": self.alpha,
                "verdict": self.verdict.value, "note": self.note}


def _num(x: float) -> float | None:
    return None if math.isnan(x) else float(x)


def skipped(name: str, labels: Sequence[str], alpha: float, note: str) -> SSRResult:
    nan = float("nan")
    return SSRResult(name, tuple(labels), (), (), nan, nan, alpha, Verdict.SKIPPED, note)


def ssr_from_counts(name: str, labels: Sequence[str], counts: Sequence[int],
                    fractions: Sequence[float], alpha: float = DEFAULT_ALPHA) -> SSRResult:
    """Chi-squared test of per-variant user counts against allocation fractions."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        return skipped(name, labels, alpha, "no users")
    frac = np.asarray(fractions, dtype=float)
    frac = frac / frac.sum()
    stat, p = chi_squared_gof(counts, frac)
    verdict = Verdict.MISMATCH if p < alpha else Verdict.BALANCED
    return SSRResult(name, tuple(labels), tuple(int(c) for c in counts),
                     tuple(float(e) for e in total * frac), float(stat), float(p), alpha, verdict)


def _range(log: IngestedLog, range: tuple[int, int] | None) -> tuple[int, int]:
    if range is None:
        return log.first_day, log.n_days
    x, y = int(range[0]), int(range[1])
    log.cols(x, y)
    return x, y


def _ssr_mask(name: str, log: IngestedLog, mask: np.ndarray, alpha: float) -> SSRResult:
    return ssr_from_counts(name, log.config.labels, log.counts_by_variant(mask),
                           log.config.fractions, alpha)


def ssr_test(log: IngestedLog, range: tuple[int, int] | None = None,
             alpha: float = DEFAULT_ALPHA) -> SSRResult:
    """Test triggered user counts in ``range`` (default: counted days) against allocation.

    Raises:
        DataError: if no user triggered in the range.
    """
    x, y = _range(log, range)
    mask = log.triggered_in(x, y)
    if not mask.any():
        raise DataError(f"no triggered users in [{x}, {y}]")
    return _ssr_mask("trigger", log, mask, alpha)


def check_targeted(log: IngestedLog, range: tuple[int, int] | None = None,
                   alpha: float = DEFAULT_ALPHA) -> SSRResult:
    """SSR on users in the target population on any day of the range."""
    if log.targeted is None:
        return skipped("targeted", log.config.labels, alpha, "no targeting data")
    x, y = _range(log, range)
    return _ssr_mask("targeted", log, log.targeted[:, x - 1:y].any(axis=1), alpha)


def check_new_returned(log: IngestedLog, k: int,
                       alpha: float = DEFAULT_ALPHA) -> tuple[SSRResult, SSRResult]:
    """SSR for first-time and returning triggered users on day ``k``."""
    return _new_returned_checks(log, k, k, alpha)


def check_new_returned_range(log: IngestedLog, range: tuple[int, int] | None = None,
                             alpha: float = DEFAULT_ALPHA) -> tuple[SSRResult, SSRResult]:
    """New/returned SSR over a block of days.

    The block starts at ``max(x, start_day + 1)`` so that every user is counted
    once: new users first trigger inside the block, returned users triggered
    before it and again inside it.
    """
    x, y = _range(log, range)
    s = max(x, log.config.start_day + 1)
    if s > y:
        labels = log.config.labels
        note = "range has no day after the first experiment day"
        return skipped("new", labels, alpha, note), skipped("returned", labels, alpha, note)
    return _new_returned_checks(log, s, y, alpha)


def _new_returned_checks(log: IngestedLog, s: int, y: int,
                         alpha: float) -> tuple[SSRResult, SSRResult]:
    n_new, n_ret = new_returned_block(log, s, y)
    labels, frac = log.config.labels, log.config.fractions
    new = ssr_from_counts("new", labels, n_new, frac, alpha)
    if n_ret.sum() == 0:
        ret = skipped("returned", labels, alpha, "no returned users")
    else:
        ret = ssr_from_counts("returned", labels, n_ret, frac, alpha)
    return new, ret


def new_returned_series(log: IngestedLog, alpha: float = DEFAULT_ALPHA) -> list[dict[str, Any]]:
    """Per-day new/returned counts, treatment/control ratios and SSR p-values."""
    rows = []
    labels = log.config.labels
    for k in np.arange(log.config.start_day + 1, log.n_days + 1):
        new, ret = check_new_returned(log, int(k), alpha)
        row: dict[str, Any] = {"day": int(k)}
        for res in (new, ret):
            obs = res.observed or (0,) * len(labels)
            for lab, n in zip(labels, obs):
                row[f"{res.name}_{lab}"] = int(n)
            c = obs[0] / log.config.fractions[0]
            t = obs[1] / log.config.fractions[1]
            row[f"{res.name}_ratio"] = round(t / c, 6) if c > 0 else None
            row[f"{res.name}_p"] = _num(res.p_value)
            row[f"{res.name}_mismatch"] = res.mismatch
        rows.append(row)
    return rows


def first_significant_day(series: list[dict[str, Any]], which: str) -> int | None:
    for row in series:
        if row[f"{which}_mismatch"]:
            return row["day"]
    return None


def check_independent_tracking(log: IngestedLog, predicate: TrackingPredicate | None = None,
                               range: tuple[int, int] | None = None,
                               alpha: float = DEFAULT_ALPHA) -> SSRResult:
    """SSR on users with a positive tracking event matching ``predicate`` in the range.

    A predicate without a source tag matches every source of the metric.  The
    default predicate is the one declared in the experiment config.
    """
    predicate = predicate or log.config.tracking
    labels = log.config.labels
    if predicate is None:
        return skipped("independent_tracking", labels, alpha, "no tracking predicate configured")
    x, y = _range(log, range)
    mats = [m for (metric, src), m in sorted(log.tracking_rows.items(), key=lambda kv: str(kv[0]))
            if metric == predicate.metric_id
            and (predicate.source_tag is None or src == predicate.source_tag)]
    if not mats:
        return skipped("independent_tracking", labels, alpha, "predicate matches no events")
    hit = np.zeros(log.n_users, dtype=bool)
    for m in mats:
        hit |= m[:, x - 1:y].any(axis=1)
    if not hit.any():
        return skipped("independent_tracking", labels, alpha, "predicate matches nobody in range")
    return _ssr_mask("independent_tracking", log, hit, alpha)


def check_service_split(log: IngestedLog, range: tuple[int, int] | None = None,
                        alpha: float = DEFAULT_ALPHA) -> dict[str, SSRResult]:
    """SSR per service tag over users with an exposure through that service in the range."""
    x, y = _range(log, range)
    tags = [t for t in log.services if t is not None]
    if not tags:
        return {}
    rows = log.exposure_rows
    rows = rows[(rows[:, 1] >= x) & (rows[:, 1] <= y)]
    out = {}
    for code, tag in enumerate(log.services):
        if tag is None:
            continue
        mask = np.zeros(log.n_users, dtype=bool)
        mask[rows[rows[:, 2] == code, 0]] = True
        out[tag] = _ssr_mask(f"service:{tag}", log, mask, alpha)
    return out


@dataclass(frozen=True)
class OverlapResult:
    primary_id: str
    sibling_id: str
    size_a: tuple[int, ...]
    size_b1: tuple[int, ...]
    size_b2: tuple[int, ...]
    size_a1: tuple[int, ...]
    size_a2: tuple[int, ...]
    ambiguous: int
    union: SSRResult
    a2: SSRResult
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"primary_id": self.primary_id, "sibling_id": self.sibling_id,
                "A": list(self.size_a), "B1": list(self.size_b1), "B2": list(self.size_b2),
                "A1": list(self.size_a1), "A2": list(self.size_a2),
                "ambiguous": self.ambiguous, "union": self.union.to_dict(),
                "A2_ssr": self.a2.to_dict(), "notes": list(self.notes)}


def check_shared_hash_overlap(log1: IngestedLog, log2: IngestedLog,
                              range: tuple[int, int] | None = None,
                              alpha: float = DEFAULT_ALPHA) -> OverlapResult:
    """Overlap analysis of two experiments that share one hash namespace.

    ``log1`` is the experiment under investigation.  Users triggering both are
    split by which experiment they triggered first; same-day ties go to A1 and
    are counted in ``ambiguous``.

    Raises:
        DataError: if the hash namespaces or variant definitions differ.
    """
    c1, c2 = log1.config, log2.config
    if c1.hash_id != c2.hash_id:
        raise DataError(f"experiments use different hash_id ({c1.hash_id!r} vs {c2.hash_id!r}); "
                        "their populations are not comparable")
    if c1.labels != c2.labels:
        raise DataError("experiments sharing a hash must use the same variant labels")
    x, y = _range(log1, range)
    labels = c1.labels
    nv = len(labels)

    def first_in(log: IngestedLog) -> dict[str, tuple[int, int]]:
        if log.n_users == 0:
            return {}
        yy = min(y, log.n_days)
        if x > yy:
            return {}
        exp = log.exposed[:, x - 1:yy]
        hit = exp.any(axis=1)
        first = exp.argmax(axis=1) + x
        idx = np.nonzero(hit)[0]
        return {str(log.users[i]): (int(first[i]), int(log.variant[i])) for i in idx}

    f1, f2 = first_in(log1), first_in(log2)
    both = f1.keys() & f2.keys()
    a = np.zeros(nv, dtype=np.int64)
    a1 = np.zeros(nv, dtype=np.int64)
    a2 = np.zeros(nv, dtype=np.int64)
    b1 = np.zeros(nv, dtype=np.int64)
    b2 = np.zeros(nv, dtype=np.int64)
    ambiguous = 0
    for u, (d1, v) in f1.items():
        if u in both:
            d2, v2 = f2[u]
            if v2 != v:
                raise DataError(f"user {u!r} has different variants in experiments sharing a hash")
            a[v] += 1
            if d2 < d1:
                a2[v] += 1
            else:
                a1[v] += 1
                ambiguous += d1 == d2
        else:
            b1[v] += 1
    for u, (_, v) in f2.items():
        if u not in both:
            b2[v] += 1
    frac = c1.fractions
    union = ssr_from_counts("overlap_union", labels, a + b1 + b2, frac, alpha)
    a2_res = ssr_from_counts("overlap_A2", labels, a2, frac, alpha)
    notes = []
    if ambiguous:
        notes.append(f"{ambiguous} users first triggered both experiments on the same day; "
                     "assigned to A1 because within-day order is unknown")
    return OverlapResult(c1.experiment_id, c2.experiment_id, tuple(map(int, a)),
                         tuple(map(int, b1)), tuple(map(int, b2)), tuple(map(int, a1)),
                         tuple(map(int, a2)), ambiguous, union, a2_res, tuple(notes))


# --------------------------------------------------------------------------
# Orchestration


@dataclass(frozen=True)
class Hypothesis:
    label: str
    p_value: float
    stat: float
    evidence: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "p_value": _num(self.p_value), "stat": _num(self.stat),
                "evidence": list(self.evidence)}


@dataclass(frozen=True)
class DiagnosisReport:
    experiment_id: str
    range: tuple[int, int]
    alpha: float
    primary: SSRResult
    checks: dict[str, SSRResult]
    overlaps: tuple[OverlapResult, ...]
    hypotheses: tuple[Hypothesis, ...]
    remediation: tuple[str, ...]
    series: tuple[dict[str, Any], ...]
    first_significant: dict[str, int | None]
    notes: tuple[str, ...] = ()

    @property
    def verdict(self) -> Verdict:
        return self.primary.verdict

    @property
    def top(self) -> str | None:
        return self.hypotheses[0].label if self.hypotheses else None

    def to_dict(self) -> dict[str, Any]:
        return {"experiment_id": self.experiment_id, "range": list(self.range),
                "alpha": self.alpha, "verdict": self.verdict.value,
                "primary": self.primary.to_dict(),
                "checks": {k: v.to_dict() for k, v in sorted(self.checks.items())},
                "overlaps": [o.to_dict() for o in self.overlaps],
                "hypotheses": [h.to_dict() for h in self.hypotheses],
                "remediation": list(self.remediation), "series": list(self.series),
                "first_significant_day": dict(self.first_significant),
                "notes": list(self.notes)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def diagnose(log: IngestedLog, siblings: Sequence[IngestedLog] = (),
             range: tuple[int, int] | None = None, alpha: float = DEFAULT_ALPHA,
             tracking: TrackingPredicate | None = None) -> DiagnosisReport:
    """Run every applicable check and rank root-cause hypotheses.

    A balanced primary test yields an empty report.  When the targeted check
    fires, DynamicTargeting is ranked first because a moving target population
    also distorts every downstream count; the rest are ordered by ascending
    p-value, ties broken by the larger statistic.
    """
    x, y = _range(log, range)
    primary = ssr_test(log, (x, y), alpha)
    if not primary.mismatch:
        return DiagnosisReport(log.experiment_id, (x, y), alpha, primary, {}, (), (), (), (),
                               {"new": None, "returned": None})

    checks: dict[str, SSRResult] = {}
    checks["targeted"] = check_targeted(log, (x, y), alpha)
    checks["new"], checks["returned"] = check_new_returned_range(log, (x, y), alpha)
    checks["independent_tracking"] = check_independent_tracking(log, tracking, (x, y), alpha)
    services = check_service_split(log, (x, y), alpha)
    for tag, res in services.items():
        checks[f"service:{tag}"] = res
    overlaps = []
    notes = []
    for sib in siblings:
        if sib.config.hash_id != log.config.hash_id:
            notes.append(f"sibling {sib.experiment_id} skipped: different hash_id")
            continue
        ov = check_shared_hash_overlap(log, sib, (x, y), alpha)
        overlaps.append(ov)
        checks[f"overlap:{sib.experiment_id}:union"] = ov.union
        checks[f"overlap:{sib.experiment_id}:A2"] = ov.a2
        notes.extend(ov.notes)
    if not services:
        notes.append("service split skipped: exposures carry no service tags")

    hyps: list[Hypothesis] = []
    remediation: list[str] = []
    tg, new, ret, trk = (checks["targeted"], checks["new"], checks["returned"],
                         checks["independent_tracking"])
    if tg.mismatch:
        hyps.append(Hypothesis(DYNAMIC_TARGETING, tg.p_value, tg.stat, (tg.describe(),)))
        remediation.append(REMEDIATION[DYNAMIC_TARGETING])

    bad_services = [r for r in services.values() if r.mismatch]
    good_services = [r for r in services.values() if r.balanced]
    if new.balanced and ret.mismatch:
        evidence = [new.describe(), ret.describe()]
        if trk.skipped:
            label = FEEDBACK
        elif trk.balanced:
            label = FEEDBACK_COOLOFF
        else:
            label = FEEDBACK_RESIDUAL
        evidence.append(trk.describe())
        if bad_services and good_services:
            evidence.extend(r.describe() for r in bad_services)
        hyps.append(Hypothesis(label, ret.p_value, ret.stat, tuple(evidence)))
        remediation.append(REMEDIATION[FEEDBACK])
    elif bad_services and good_services:
        best = min(bad_services, key=lambda r: (r.p_value, -r.stat))
        hyps.append(Hypothesis(FEEDBACK_COOLOFF, best.p_value, best.stat,
                               tuple(r.describe() for r in bad_services + good_services)))

    for ov in overlaps:
        fired = []
        if ov.a2.mismatch:
            fired.append(ov.a2)
        if ov.union.balanced:
            fired.append(primary)
        if fired:
            best = min(fired, key=lambda r: (r.p_value, -r.stat))
            evidence = (primary.describe(), ov.union.describe(), ov.a2.describe())
            hyps.append(Hypothesis(DEPENDENT, best.p_value, best.stat,
                                   evidence + (f"sibling {ov.sibling_id}",)))
            if REMEDIATION[DEPENDENT] not in remediation:
                remediation.append(REMEDIATION[DEPENDENT])

    if not hyps and trk.mismatch:
        hyps.append(Hypothesis(ENGAGEMENT, trk.p_value, trk.stat,
                               (trk.describe(), new.describe(), ret.describe())))
    if not hyps:
        hyps.append(Hypothesis(UNEXPLAINED, primary.p_value, primary.stat,
                               tuple(r.describe() for _, r in sorted(checks.items()))))

    def key(h: Hypothesis):
        return (h.label != DYNAMIC_TARGETING, h.p_value, -h.stat, h.label)

    series = new_returned_series(log, alpha)
    first = {w: first_significant_day(series, w) for w in ("new", "returned")}
    return DiagnosisReport(log.experiment_id, (x, y), alpha, primary, checks, tuple(overlaps),
                           tuple(sorted(hyps, key=key)), tuple(remediation), tuple(series),
                           first, tuple(notes))
