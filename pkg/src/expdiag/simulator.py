"""Deterministic generator of experiment logs with planted failure modes.

Users are processed in fixed-size blocks; each block draws from its own
random stream keyed by ``(seed, block index)``, so output depends only on the
spec.  Assignment uses the same hash as ingestion
(:func:`expdiag.datamodel.assign_variants`).
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .datamodel import (EventTable, ExperimentConfig, IngestedLog, TrackingPredicate,
                        assign_variants, ingest)

BLOCK = 8192

KINDS = ("Clean", "CoolOffBug", "Residual", "BiasedImplementation", "DynamicTargeting",
         "DependentExperiments", "TriggerDay", "Novelty", "Corpus")

LABELS = {
    "Clean": "None",
    "CoolOffBug": "FeedbackLoop:BiasedImplementation/CoolOff",
    "BiasedImplementation": "FeedbackLoop:BiasedImplementation/CoolOff",
    "Residual": "FeedbackLoop:Residual/EngagementChange",
    "DynamicTargeting": "DynamicTargeting",
    "DependentExperiments": "DependentExperiments",
    "TriggerDay": "TriggerDayEffect",
    "Novelty": "NoveltyEffect",
    "Corpus": "None",
}


@dataclass(frozen=True)
class MetricModel:
    """Per user-day metric: mean ``in_mean`` on trigger days, ``off_mean`` otherwise.

    ``family="count"`` draws gamma-Poisson (negative binomial) counts,
    ``"continuous"`` draws gamma values; ``shape`` is the gamma shape, so
    smaller values mean heavier over-dispersion.
    """

    metric_id: str
    in_mean: float
    off_mean: float = 0.0
    family: str = "count"
    shape: float = 2.0

    @property
    def fully_covered(self) -> bool:
        return self.off_mean == 0


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    seed: int
    n_users: int = 10_000
    k_days: int = 14
    allocation: tuple[float, ...] = (0.5, 0.5)
    variant_labels: tuple[str, ...] = ("control", "treatment")
    p: float = 0.2
    dispersion: float = 0.0
    metrics: tuple[MetricModel, ...] = ()
    emit_tracking: bool = True
    tracking_metric: str = "page_view"
    tracking_source: str = "trigger_page"
    count_from_day: int = 1
    experiment_id: str | None = None
    hash_id: str | None = None
    # treatment effects
    in_effect: float = 0.0
    off_effect: float = 0.0
    novelty_initial: float = 0.0
    novelty_steady: float = 0.0
    novelty_decay: float = 0.6
    staggered_split_day: int | None = None
    start_weekday: int | None = None
    weekday_effects: tuple[float, ...] = (0.0,) * 7  # additive, Monday first
    # bias mechanisms
    cooloff_impressions: int = 2
    click_rate: float = 0.05
    return_lift: float = 0.0
    direct_url_p: float = 0.0
    target_fraction: float = 0.8
    targeting_feedback: float = 0.0
    parent_ctr: float = 0.2
    ctr_lift: float = 0.0
    child_direct_p: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.seed is None:
            raise ValueError("seed is mandatory")
        probs = {"p": self.p, "click_rate": self.click_rate, "direct_url_p": self.direct_url_p,
                 "target_fraction": self.target_fraction, "parent_ctr": self.parent_ctr,
                 "child_direct_p": self.child_direct_p, "novelty_decay": self.novelty_decay,
                 "targeting_feedback": self.targeting_feedback}
        for name, val in probs.items():
            if not 0 <= val <= 1:
                raise ValueError(f"{name}={val} must lie in [0, 1]")
        if not 0 <= self.dispersion < 1:
            raise ValueError("dispersion must lie in [0, 1)")
        if self.n_users < 1 or self.k_days < 1:
            raise ValueError("n_users and k_days must be positive")
        if len(self.allocation) != len(self.variant_labels):
            raise ValueError("allocation and variant_labels differ in length")
        if abs(sum(self.allocation) - 1) > 1e-9 or min(self.allocation) <= 0:
            raise ValueError("allocation must be positive and sum to 1")
        if not 1 <= self.count_from_day <= self.k_days:
            raise ValueError("count_from_day must lie in 1..k_days")
        effects = (self.in_effect, self.off_effect, self.novelty_initial, self.novelty_steady,
                   self.return_lift, self.ctr_lift) + tuple(self.weekday_effects)
        if not all(math.isfinite(e) and e > -1 for e in effects):
            raise ValueError("effects must be finite and > -100%")
        if len(self.weekday_effects) != 7:
            raise ValueError("weekday_effects needs one entry per weekday")
        if any(self.weekday_effects) and self.start_weekday is None:
            raise ValueError("weekday_effects need start_weekday")
        if self.staggered_split_day is not None:
            if len(self.variant_labels) != 3:
                raise ValueError("staggered design needs variants (control, seasoned, fresh)")
            if not 2 <= self.staggered_split_day <= self.k_days:
                raise ValueError("staggered_split_day must lie in 2..k_days")

    @property
    def exp_id(self) -> str:
        return self.experiment_id or f"{self.kind.lower()}-{self.seed}"

    @property
    def hash_namespace(self) -> str:
        return self.hash_id or f"hash-{self.exp_id}"

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["metrics"] = [dataclasses.asdict(m) for m in self.metrics]
        d["allocation"] = list(self.allocation)
        d["variant_labels"] = list(self.variant_labels)
        d["weekday_effects"] = list(self.weekday_effects)
        return d


_SESSIONS = MetricModel("sessions", in_mean=4.0, off_mean=2.0)
_PROFILE_VIEWS = MetricModel("profile_views", in_mean=1.5)

KIND_DEFAULTS: dict[str, dict[str, Any]] = {
    "Clean": dict(n_users=10_000, p=0.2, metrics=(_SESSIONS, _PROFILE_VIEWS)),
    "CoolOffBug": dict(n_users=50_000, p=0.1, count_from_day=8, cooloff_impressions=2,
                       click_rate=0.12, tracking_source="feed"),
    "Residual": dict(n_users=50_000, p=0.1, count_from_day=8, return_lift=0.3,
                     tracking_source="pymk"),
    "BiasedImplementation": dict(n_users=50_000, p=0.1, count_from_day=8, direct_url_p=0.05,
                                 tracking_source="homepage"),
    "DynamicTargeting": dict(n_users=50_000, p=0.1, count_from_day=8, target_fraction=0.8,
                             targeting_feedback=0.15, tracking_source="jobs"),
    "DependentExperiments": dict(n_users=50_000, p=0.1, parent_ctr=0.2, ctr_lift=0.3,
                                 child_direct_p=0.01, tracking_source="checkout"),
    "TriggerDay": dict(n_users=50_000, p=0.2, in_effect=0.10, off_effect=0.0,
                       metrics=(_SESSIONS, _PROFILE_VIEWS), emit_tracking=False),
    "Novelty": dict(n_users=50_000, p=0.3, novelty_initial=0.10, novelty_steady=0.04,
                    novelty_decay=0.6, metrics=(MetricModel("clicks", in_mean=2.0),),
                    emit_tracking=False),
    "Corpus": dict(),
}


def make_spec(kind: str, seed: int, **overrides: Any) -> ScenarioSpec:
    """Scenario spec with the kind's default parameters, then ``overrides``."""
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    params = dict(KIND_DEFAULTS[kind])
    params.update(overrides)
    if isinstance(params.get("metrics"), (list, tuple)):
        params["metrics"] = tuple(m if isinstance(m, MetricModel) else MetricModel(**m)
                                  for m in params["metrics"])
    for key in ("allocation", "variant_labels", "weekday_effects"):
        if key in params:
            params[key] = tuple(params[key])
    return ScenarioSpec(kind=kind, seed=seed, **params)


def spec_from_dict(data: Mapping[str, Any]) -> ScenarioSpec:
    data = dict(data)
    kind = data.pop("kind")
    seed = data.pop("seed")
    return make_spec(kind, int(seed), **data)


@dataclass
class GroundTruth:
    label: str
    kind: str
    planted: dict[str, Any]
    n_new: np.ndarray       # (n_variants, k_days): users whose first exposure is day k
    n_returned: np.ndarray  # (n_variants, k_days): users exposed on day k after an earlier day
    coverage: dict[str, str]
    metric_totals: dict[str, float]
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "kind": self.kind, "planted": self.planted,
                "n_new": self.n_new.tolist(), "n_returned": self.n_returned.tolist(),
                "coverage": self.coverage, "metric_totals": self.metric_totals,
                "extra": self.extra}


@dataclass
class Simulation:
    events: EventTable
    config: ExperimentConfig
    truth: GroundTruth
    siblings: list[tuple[EventTable, ExperimentConfig]] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (event log, ground truth)
        return iter((self.events, self.truth))

    def log(self) -> IngestedLog:
        return ingest(self.events, self.config)

    def sibling_logs(self) -> list[IngestedLog]:
        return [ingest(ev, cfg) for ev, cfg in self.siblings]


# --------------------------------------------------------------------------
# helpers


@functools.lru_cache(maxsize=8)
def _user_id_tuple(n: int) -> tuple[str, ...]:
    width = max(6, len(str(n - 1)))
    return tuple(f"u{i:0{width}d}" for i in range(n))


def _user_ids(n: int) -> list[str]:
    return list(_user_id_tuple(n))


def _block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, block, stream])))


def _trigger_probs(spec: ScenarioSpec, rng: np.random.Generator, m: int) -> np.ndarray:
    if spec.dispersion == 0 or spec.p in (0.0, 1.0):
        return np.full(m, spec.p)
    conc = 1.0 / spec.dispersion - 1.0
    return rng.beta(spec.p * conc, (1 - spec.p) * conc, size=m)


def _draw_values(model: MetricModel, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    g = rng.gamma(model.shape, 1.0 / model.shape, size=mean.shape)
    if model.family == "count":
        return rng.poisson(mean * g).astype(np.float64)
    if model.family == "continuous":
        return mean * g
    raise ValueError(f"unknown metric family {model.family!r}")


def _first_day(mat: np.ndarray) -> np.ndarray:
    """1-based first True column per row, 0 when none."""
    anyv = mat.any(axis=1)
    return np.where(anyv, mat.argmax(axis=1) + 1, 0)


def _new_returned(exposed: np.ndarray, variant: np.ndarray, nv: int) -> tuple[np.ndarray, np.ndarray]:
    k = exposed.shape[1]
    first = _first_day(exposed)
    n_new = np.zeros((nv, k), dtype=np.int64)
    n_ret = np.zeros((nv, k), dtype=np.int64)
    for v in range(nv):
        sel = variant == v
        f = first[sel]
        n_new[v] = np.bincount(f[f > 0] - 1, minlength=k)[:k]
        n_ret[v] = exposed[sel].sum(axis=0) - n_new[v]
    return n_new, n_ret


def _weekday_effect(spec: ScenarioSpec) -> np.ndarray:
    if spec.start_weekday is None:
        return np.zeros(spec.k_days)
    return np.asarray(spec.weekday_effects)[(spec.start_weekday + np.arange(spec.k_days)) % 7]


# --------------------------------------------------------------------------
# per-block behaviour


def _block_behaviour(spec: ScenarioSpec, rng: np.random.Generator, var: np.ndarray) -> dict:
    """Visits, exposures and bias bookkeeping for one block of users."""
    m, k = len(var), spec.k_days
    treat = var == 1
    p_i = _trigger_probs(spec, rng, m)
    u = rng.random((m, k))
    out: dict[str, Any] = {}

    if spec.kind in ("Clean", "TriggerDay", "Novelty"):
        visits = u < p_i[:, None]
        exposed = visits.copy()
        if spec.staggered_split_day is not None:
            # the fresh cohort is exposed only from the split day on
            exposed[var == 2, : spec.staggered_split_day - 1] = False
        out.update(visits=visits, exposed=exposed)

    elif spec.kind == "CoolOffBug":
        visits = u < p_i[:, None]
        exposed = np.zeros((m, k), dtype=bool)
        impressions = np.zeros(m, dtype=np.int64)
        clicked = np.zeros(m, dtype=bool)
        click_u = rng.random((m, k))
        for d in range(k):
            cooled = treat & ((impressions > spec.cooloff_impressions) | clicked)
            fire = visits[:, d] & ~cooled
            exposed[:, d] = fire
            shown = fire & treat
            impressions += shown
            clicked |= shown & (click_u[:, d] < spec.click_rate)
        c0 = spec.count_from_day - 1
        would = visits[:, c0:].any(axis=1)
        counted = exposed[:, c0:].any(axis=1)
        out.update(visits=visits, exposed=exposed,
                   suppressed=int((treat & would & ~counted).sum()))

    elif spec.kind == "Residual":
        visits = np.zeros((m, k), dtype=bool)
        seen = np.zeros(m, dtype=bool)
        lifted = np.minimum(p_i * (1 + spec.return_lift), 1.0)
        for d in range(k):
            prob = np.where(seen & treat, lifted, p_i)
            visits[:, d] = u[:, d] < prob
            seen |= visits[:, d]
        out.update(visits=visits, exposed=visits.copy())

    elif spec.kind == "BiasedImplementation":
        router = u < p_i[:, None]
        direct_u = rng.random((m, k))
        direct = np.zeros((m, k), dtype=bool)
        seen = np.zeros(m, dtype=bool)
        for d in range(k):
            # returning users sometimes skip the router and land on the page directly
            direct[:, d] = seen & ~router[:, d] & (direct_u[:, d] < spec.direct_url_p)
            seen |= router[:, d]
        exposed_direct = direct & treat[:, None]
        service = np.where(router, 1, np.where(exposed_direct, 2, 0)).astype(np.int8)
        out.update(visits=router | direct, exposed=router | exposed_direct, service=service)

    elif spec.kind == "DynamicTargeting":
        visits = u < p_i[:, None]
        in_target = rng.random(m) < spec.target_fraction
        evict_u = rng.random((m, k))
        targeted = np.zeros((m, k), dtype=bool)
        exposed = np.zeros((m, k), dtype=bool)
        for d in range(k):
            targeted[:, d] = in_target
            exposed[:, d] = in_target & visits[:, d]
            # treatment engagement moves the targeting score out of range
            evict = exposed[:, d] & treat & (evict_u[:, d] < spec.targeting_feedback)
            in_target = in_target & ~evict
        out.update(visits=visits, exposed=exposed, targeted=targeted)

    elif spec.kind == "DependentExperiments":
        parent = u < p_i[:, None]
        ctr = np.where(treat, min(spec.parent_ctr * (1 + spec.ctr_lift), 1.0), spec.parent_ctr)
        click = parent & (rng.random((m, k)) < ctr[:, None])
        lag = rng.choice(3, size=(m, k), p=[0.5, 0.3, 0.2])
        child = rng.random((m, k)) < spec.child_direct_p
        rows, cols = np.nonzero(click)
        landed = cols + lag[rows, cols]
        ok = landed < k
        child[rows[ok], landed[ok]] = True
        out.update(visits=child, exposed=child, parent=parent)
    else:  # pragma: no cover - guarded by ScenarioSpec
        raise ValueError(spec.kind)
    return out


def _block_metrics(spec: ScenarioSpec, rng: np.random.Generator, var: np.ndarray,
                   exposed: np.ndarray) -> dict[str, np.ndarray]:
    if not spec.metrics:
        return {}
    k = spec.k_days
    in_treatment = var != 0
    ever = exposed.any(axis=1)
    eff_in = np.zeros(exposed.shape)
    if spec.kind == "Novelty":
        # effect keyed to the user's cumulative trigger count
        count = np.cumsum(exposed, axis=1)
        decay = spec.novelty_decay ** np.maximum(count - 1, 0)
        eff_in = spec.novelty_steady + (spec.novelty_initial - spec.novelty_steady) * decay
    else:
        eff_in[:] = spec.in_effect
    eff_in = eff_in + _weekday_effect(spec)[None, :]
    eff_in = np.where(in_treatment[:, None] & exposed, eff_in, 0.0)
    eff_off = np.where(in_treatment[:, None] & ever[:, None] & ~exposed, spec.off_effect, 0.0)
    out = {}
    for model in spec.metrics:
        mean = np.where(exposed, model.in_mean * (1 + eff_in), model.off_mean * (1 + eff_off))
        out[model.metric_id] = _draw_values(model, mean, rng)
    return out


# --------------------------------------------------------------------------
# event emission


def _events_from_matrices(users: list[str], experiment_id: str, labels: list[str],
                          variant: np.ndarray, exposed: np.ndarray, service: np.ndarray | None,
                          service_labels: list[str | None], metrics: dict[str, np.ndarray],
                          tracking: np.ndarray | None, tracking_metric: str,
                          tracking_source: str | None) -> EventTable:
    eu, ed = np.nonzero(exposed)
    if service is not None:
        es = service[eu, ed].astype(np.int64)
    else:
        es = np.zeros(len(eu), dtype=np.int64)
        service_labels = [None]
    names = sorted(metrics)
    parts_u, parts_d, parts_m, parts_v, parts_s = [], [], [], [], []
    for j, name in enumerate(names):
        mu, md = np.nonzero(metrics[name])
        parts_u.append(mu); parts_d.append(md); parts_m.append(np.full(len(mu), j))
        parts_v.append(metrics[name][mu, md]); parts_s.append(np.zeros(len(mu), dtype=np.int64))
    sources: list[str | None] = [None]
    if tracking is not None:
        if tracking_metric not in names:
            names.append(tracking_metric)
        j = names.index(tracking_metric)
        tu, td = np.nonzero(tracking)
        sources.append(tracking_source)
        parts_u.append(tu); parts_d.append(td); parts_m.append(np.full(len(tu), j))
        parts_v.append(np.ones(len(tu))); parts_s.append(np.ones(len(tu), dtype=np.int64))
    if parts_u:
        mu = np.concatenate(parts_u); md = np.concatenate(parts_d)
        mm = np.concatenate(parts_m).astype(np.int64)
        mv = np.concatenate(parts_v); ms = np.concatenate(parts_s)
        order = np.lexsort((ms, mm, md, mu))
        mu, md, mm, mv, ms = mu[order], md[order], mm[order], mv[order], ms[order]
    else:
        mu = md = mm = ms = np.zeros(0, dtype=np.int64)
        mv = np.zeros(0)
    return EventTable(
        users=users, experiments=[experiment_id], variants=list(labels),
        services=list(service_labels), metrics=names, sources=sources,
        e_user=eu.astype(np.int64), e_experiment=np.zeros(len(eu), dtype=np.int64),
        e_variant=variant[eu].astype(np.int64), e_day=(ed + 1).astype(np.int64), e_service=es,
        m_user=mu.astype(np.int64), m_day=(md + 1).astype(np.int64), m_metric=mm,
        m_value=mv.astype(np.float64), m_source=ms.astype(np.int64),
    )


def _compact(table: EventTable) -> EventTable:
    """Drop users that appear in no event so the vocabulary matches the log."""
    used = np.zeros(len(table.users), dtype=bool)
    used[table.e_user] = True
    used[table.m_user] = True
    if used.all():
        return table
    remap = np.cumsum(used) - 1
    users = [u for u, keep in zip(table.users, used) if keep]
    return dataclasses.replace(table, users=users, e_user=remap[table.e_user],
                               m_user=remap[table.m_user])


# --------------------------------------------------------------------------
# public entry points


def generate(spec: ScenarioSpec) -> Simulation:
    """Generate one experiment log and its ground truth.

    ``DependentExperiments`` returns the child experiment as the primary log
    and the parent (same hash namespace) as a sibling.
    """
    if spec.kind == "Corpus":
        raise ValueError("use generate_corpus for Corpus scenarios")
    n, k = spec.n_users, spec.k_days
    labels = list(spec.variant_labels)
    users = _user_ids(n)
    tracking = (TrackingPredicate(spec.tracking_metric, spec.tracking_source)
                if spec.emit_tracking else None)
    config = ExperimentConfig(
        experiment_id=spec.exp_id, hash_id=spec.hash_namespace,
        variants=tuple(zip(labels, spec.allocation)), start_day=1,
        count_from_day=spec.count_from_day, end_day=k, tracking=tracking,
        start_weekday=spec.start_weekday)
    variant = assign_variants(config, users)

    keys = ("visits", "exposed", "service", "targeted", "parent")
    mats: dict[str, list[np.ndarray]] = {key: [] for key in keys}
    metric_parts: dict[str, list[np.ndarray]] = {mm.metric_id: [] for mm in spec.metrics}
    suppressed = 0
    for b, start in enumerate(range(0, n, BLOCK)):
        var = variant[start:start + BLOCK]
        rng = _block_rng(spec.seed, b)
        beh = _block_behaviour(spec, rng, var)
        for key in keys:
            if key in beh:
                mats[key].append(beh[key])
        suppressed += beh.get("suppressed", 0)
        for name, vals in _block_metrics(spec, _block_rng(spec.seed, b, 1), var,
                                         beh["exposed"]).items():
            metric_parts[name].append(vals)
    cat = {key: np.concatenate(v) for key, v in mats.items() if v}
    metrics = {name: np.concatenate(v) for name, v in metric_parts.items()}
    exposed = cat["exposed"]

    targeted = cat.get("targeted")
    if targeted is not None:
        ids = np.asarray(users)
        config = dataclasses.replace(config, target_membership={
            d + 1: frozenset(ids[targeted[:, d]].tolist()) for d in range(k)})

    service_labels: list[str | None] = [None, "router", "direct_url"]
    events = _compact(_events_from_matrices(
        users, config.experiment_id, labels, variant, exposed, cat.get("service"),
        service_labels, metrics, cat["visits"] if spec.emit_tracking else None,
        spec.tracking_metric, spec.tracking_source))

    nv = len(labels)
    n_new, n_ret = _new_returned(exposed, variant, nv)
    assert np.array_equal(n_new + n_ret,
                          np.stack([exposed[variant == v].sum(axis=0) for v in range(nv)]))
    totals = {name: float(vals.sum()) for name, vals in metrics.items()}
    coverage = {mm.metric_id: "FullyCovered" if mm.fully_covered else "PartiallyCovered"
                for mm in spec.metrics}
    if spec.emit_tracking:
        totals[spec.tracking_metric] = float(cat["visits"].sum())
        coverage.setdefault(spec.tracking_metric,
                            "FullyCovered" if np.array_equal(cat["visits"], exposed)
                            else "PartiallyCovered")
    planted: dict[str, Any] = {"p": spec.p, "in_effect": spec.in_effect,
                               "off_effect": spec.off_effect}
    partial = [mm for mm in spec.metrics if not mm.fully_covered]
    if partial:
        planted["r"] = {mm.metric_id: mm.in_mean / mm.off_mean for mm in partial}
    if spec.kind == "Novelty":
        planted.update(novelty_initial=spec.novelty_initial, novelty_steady=spec.novelty_steady,
                       novelty_decay=spec.novelty_decay)
    extra: dict[str, Any] = {}
    c0 = spec.count_from_day - 1
    if spec.kind == "CoolOffBug":
        would = cat["visits"][:, c0:].any(axis=1)
        counted = exposed[:, c0:].any(axis=1)
        t = variant == 1
        deficit = int((t & would).sum() - (t & counted).sum())
        assert deficit == suppressed
        extra["suppressed_users"] = suppressed
        extra["treatment_would_trigger"] = int((t & would).sum())

    truth = GroundTruth(label=LABELS[spec.kind], kind=spec.kind, planted=planted,
                        n_new=n_new, n_returned=n_ret, coverage=coverage,
                        metric_totals=totals, extra=extra)

    siblings = []
    if spec.kind == "DependentExperiments":
        parent_cfg = ExperimentConfig(
            experiment_id=f"parent-{spec.seed}", hash_id=config.hash_id,
            variants=config.variants, start_day=1, count_from_day=spec.count_from_day,
            end_day=k)
        siblings.append((_compact(_events_from_matrices(
            users, parent_cfg.experiment_id, labels, variant, cat["parent"], None, [None],
            {}, None, spec.tracking_metric, None)), parent_cfg))
        truth.extra["parent_experiment_id"] = parent_cfg.experiment_id
    return Simulation(events, config, truth, siblings)


def curve_series(curve, days: int, se: float, seed: int, start: int = 1):
    """Single-day lift estimates ``curve(t) + N(0, se²)`` for ``t = start..start+days-1``.

    Means and variances are back-filled so that each estimate is internally
    consistent with a Delta-method estimate of that standard error.
    """
    from .statscore import DeltaEstimate, norm_two_sided_p

    rng = _block_rng(seed, 0, 7)
    t = np.arange(start, start + days, dtype=float)
    vals = np.asarray([curve(x) for x in t]) + rng.normal(0.0, se, size=days)
    out = []
    for v in vals:
        z = float(v / se)
        out.append(DeltaEstimate(float(v), se * se, z, float(norm_two_sided_p(z)), 0, 0,
                                 1.0 + float(v), 1.0, float("nan"), float("nan")))
    return out


# --------------------------------------------------------------------------
# Summary-level corpus of historical experiments


@dataclass(frozen=True)
class CorpusSpec:
    """Corpus of experiments measured on an early indicator X and a target metric Y.

    X moves in a ``pi1_x`` share of experiments with relative lift drawn from
    ``N(0, sd_lift_x²)``; Y then moves with probability ``y_given_x`` by
    ``beta1`` times X's lift plus ``N(0, slope_noise²)``.  Otherwise Y moves
    alone with probability ``pi1_y_alone``.  Users enter each experiment
    with daily probability ``trigger_p`` out of a fixed population.
    """

    seed: int
    n_experiments: int = 200
    metrics: tuple[str, str] = ("x", "y")
    snapshot_days: tuple[int, ...] = (7, 21)
    pi1_x: float = 0.3
    sd_lift_x: float = 0.03
    beta1: float = 0.5
    y_given_x: float = 1.0
    slope_noise: float = 0.002
    pi1_y_alone: float = 0.05
    sd_lift_y_alone: float = 0.02
    rho: float = 0.3
    cv: tuple[float, float] = (1.0, 1.0)
    population: tuple[int, int] = (20_000, 200_000)
    trigger_p: tuple[float, float] = (0.1, 0.3)
    second_iteration: float = 0.2
    ramp_fraction: float = 0.1
    outliers: int = 0

    def __post_init__(self):
        if self.n_experiments < 0:
            raise ValueError("n_experiments must be non-negative")
        if not self.snapshot_days or list(self.snapshot_days) != sorted(set(self.snapshot_days)):
            raise ValueError("snapshot_days must be strictly increasing")
        if not -1 <= self.rho <= 1:
            raise ValueError("rho must lie in [-1, 1]")
        for name in ("pi1_x", "y_given_x", "pi1_y_alone", "second_iteration", "ramp_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class Corpus:
    spec: CorpusSpec
    store: Any  # SummaryStore
    truth: dict[str, dict[str, Any]]

    @property
    def correlations(self) -> dict[str, float]:
        x, y = self.spec.metrics
        return {f"{x}|{y}": self.spec.rho}


def _arm_snapshots(rng: np.random.Generator, pop_arm: int, q: float, days: int,
                   snaps: tuple[int, ...], means: np.ndarray, sd: np.ndarray, rho: float):
    """Cumulative user counts per day and (N, sum, sum_sq) per metric at each snapshot."""
    counts = np.zeros(days, dtype=np.int64)
    n = 0
    for d in range(days):
        n += int(rng.binomial(pop_arm - n, q))
        counts[d] = n
    cov = np.array([[sd[0] ** 2, rho * sd[0] * sd[1]], [rho * sd[0] * sd[1], sd[1] ** 2]])
    out = {}
    n_prev, total = 0, np.zeros(2)
    for s in snaps:
        n_s = int(counts[s - 1])
        add = n_s - n_prev
        if add > 0:
            total = total + add * rng.multivariate_normal(means, cov / add)
        n_prev = n_s
        if n_s < 2:
            out[s] = None
            continue
        mean = total / n_s
        var = sd ** 2 * rng.chisquare(n_s - 1, size=2) / (n_s - 1)
        out[s] = [(n_s, float(n_s * mean[j]), float((n_s - 1) * var[j] + n_s * mean[j] ** 2))
                  for j in range(2)]
    return counts, out


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Summary-level corpus: per experiment and iteration, arm summaries at snapshot days.

    Iteration ``"1"`` uses the full population; with probability
    ``second_iteration`` an earlier ramp ``"0"`` with ``ramp_fraction`` of it
    is also recorded.  User counts are stored for every day ``[1, d]``.
    """
    from .datamodel import RangeSummary, SummaryStore

    store = SummaryStore()
    truth: dict[str, dict[str, Any]] = {}
    days = spec.snapshot_days[-1]
    sd = np.asarray(spec.cv, dtype=float)  # unit means, so sd equals the coefficient of variation
    xname, yname = spec.metrics
    outliers_left = spec.outliers
    width = max(4, len(str(spec.n_experiments)))
    for e in range(spec.n_experiments):
        rng = _block_rng(spec.seed, e, 11)
        name = f"exp{e:0{width}d}"
        x_h1 = bool(rng.random() < spec.pi1_x)
        lift_x = float(rng.normal(0, spec.sd_lift_x)) if x_h1 else 0.0
        y_u, y_noise, y_alone = rng.random(), rng.normal(0, spec.slope_noise), rng.normal()
        outlier = False
        if x_h1 and y_u < spec.y_given_x:
            y_h1, lift_y = True, spec.beta1 * lift_x + float(y_noise)
            if outliers_left > 0 and abs(lift_x) > 2 * spec.sd_lift_x:
                lift_y, outlier = -np.sign(lift_x) * 10 * spec.sd_lift_x, True
                outliers_left -= 1
        elif not x_h1 and y_u < spec.pi1_y_alone:
            y_h1, lift_y = True, float(y_alone * spec.sd_lift_y_alone)
        else:
            y_h1, lift_y = False, 0.0
        pop = int(np.exp(rng.uniform(np.log(spec.population[0]), np.log(spec.population[1]))))
        q = float(rng.uniform(*spec.trigger_p))
        iterations = [("1", 1.0)]
        if rng.random() < spec.second_iteration:
            iterations.insert(0, ("0", spec.ramp_fraction))
        for it, frac in iterations:
            eid = f"{name}@{it}"
            pop_arm = max(int(pop * frac / 2), 2)
            for label, lifts in (("control", (0.0, 0.0)), ("treatment", (lift_x, lift_y))):
                means = 1.0 + np.asarray(lifts)
                counts, snaps = _arm_snapshots(rng, pop_arm, q, days, spec.snapshot_days,
                                               means, sd, spec.rho)
                for d in range(1, days + 1):
                    store.put_count(eid, label, (1, d), int(counts[d - 1]))
                for s, vals in snaps.items():
                    if vals is None:
                        continue
                    for metric, (n, sm, ss) in zip(spec.metrics, vals):
                        store.put(RangeSummary(eid, label, metric, (1, s), n, sm, ss))
        truth[name] = {f"{xname}_h1": x_h1, f"{yname}_h1": y_h1, f"{xname}_lift": lift_x,
                       f"{yname}_lift": float(lift_y), "population": pop, "trigger_p": q,
                       "iterations": [it for it, _ in iterations], "outlier": outlier}
    return Corpus(spec, store, truth)


def two_group_records(n: int, pi1: float, v: float, n_e_range: tuple[float, float] = (1e3, 1e5),
                      seed: int = 0) -> tuple[list[tuple[float, float]], np.ndarray]:
    """Normalized effects ``(delta, N_e)`` from the two-group model and the true H1 labels.

    Under H0 ``delta ~ N(0, 1/N_e)``; under H1 a true effect ``N(0, v²)`` is added.
    """
    if not 0 <= pi1 <= 1 or v < 0:
        raise ValueError("need pi1 in [0, 1] and v >= 0")
    rng = _block_rng(seed, 0, 13)
    n_e = np.exp(rng.uniform(np.log(n_e_range[0]), np.log(n_e_range[1]), size=n))
    h1 = rng.random(n) < pi1
    delta = rng.normal(0.0, 1.0, size=n) / np.sqrt(n_e) + np.where(h1, rng.normal(0.0, v, size=n), 0.0)
    return [(float(d), float(m)) for d, m in zip(delta, n_e)], h1
