"""Domain types, event-log ingestion and the on-disk summary store.

Days are integer indices relative to the experiment start (day 1 is the
first day).  Every user-level quantity downstream is computed from the dense
``(user, day)`` matrices held by :class:`IngestedLog`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


class DataError(ValueError):
    """Raised for malformed or inconsistent experiment data."""


class SchemaError(DataError):
    """Raised when a persisted file carries an unsupported schema version."""


# --------------------------------------------------------------------------
# Events and configuration


@dataclass(frozen=True, slots=True)
class ExposureEvent:
    user_id: str
    experiment_id: str
    variant: str
    day: int
    service_tag: str | None = None


@dataclass(frozen=True, slots=True)
class MetricEvent:
    user_id: str
    day: int
    metric_id: str
    value: float
    source_tag: str | None = None


@dataclass(frozen=True)
class TrackingPredicate:
    """Selects metric events that reproduce a trigger condition independently.

    A user matches when they have at least one event of ``metric_id`` (and
    ``source_tag``, when given) with a positive value inside the range.
    """

    metric_id: str
    source_tag: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    hash_id: str
    variants: tuple[tuple[str, float], ...]
    start_day: int = 1
    count_from_day: int = 1
    end_day: int | None = None
    target_membership: Mapping[int, frozenset[str]] | None = None
    tracking: TrackingPredicate | None = None
    start_weekday: int | None = None

    def __post_init__(self):
        if len(self.variants) < 2:
            raise DataError("an experiment needs at least two variants")
        labels = [v for v, _ in self.variants]
        if len(set(labels)) != len(labels):
            raise DataError(f"duplicate variant labels: {labels}")
        fractions = np.array([f for _, f in self.variants], dtype=float)
        if np.any(fractions <= 0):
            raise DataError("allocation fractions must be strictly positive")
        if abs(fractions.sum() - 1.0) > 1e-9:
            raise DataError(f"allocation fractions sum to {fractions.sum()}, not 1")
        if self.start_day < 1:
            raise DataError("start_day must be >= 1")
        if self.count_from_day < self.start_day:
            raise DataError("count_from_day must be >= start_day")
        if self.end_day is not None and self.end_day < self.count_from_day:
            raise DataError("end_day must be >= count_from_day")
        if self.start_weekday is not None and not 0 <= self.start_weekday <= 6:
            raise DataError("start_weekday must be in 0..6 (Monday=0)")

    @property
    def labels(self) -> list[str]:
        return [v for v, _ in self.variants]

    @property
    def fractions(self) -> np.ndarray:
        return np.array([f for _, f in self.variants], dtype=float)

    @property
    def control(self) -> str:
        """The first listed variant is the control."""
        return self.variants[0][0]

    @property
    def treatment(self) -> str:
        return self.variants[1][0]

    def variant_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"variant {label!r} is not declared for {self.experiment_id}") from None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "experiment_id": self.experiment_id,
            "hash_id": self.hash_id,
            "variants": [[v, f] for v, f in self.variants],
            "start_day": self.start_day,
            "count_from_day": self.count_from_day,
            "end_day": self.end_day,
            "start_weekday": self.start_weekday,
        }
        if self.tracking is not None:
            out["tracking"] = {"metric_id": self.tracking.metric_id,
                               "source_tag": self.tracking.source_tag}
        if self.target_membership is not None:
            out["target_membership"] = {
                str(d): sorted(users) for d, users in sorted(self.target_membership.items())
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        try:
            variants = data["variants"]
            if isinstance(variants, Mapping):
                variants = list(variants.items())
            tracking = data.get("tracking")
            membership = data.get("target_membership")
            return cls(
                experiment_id=str(data["experiment_id"]),
                hash_id=str(data.get("hash_id", data["experiment_id"])),
                variants=tuple((str(v), float(f)) for v, f in variants),
                start_day=int(data.get("start_day", 1)),
                count_from_day=int(data.get("count_from_day", data.get("start_day", 1))),
                end_day=None if data.get("end_day") is None else int(data["end_day"]),
                target_membership=None if membership is None else {
                    int(d): frozenset(map(str, users)) for d, users in membership.items()
                },
                tracking=None if tracking is None else TrackingPredicate(
                    str(tracking["metric_id"]), tracking.get("source_tag")),
                start_weekday=None if data.get("start_weekday") is None else int(data["start_weekday"]),
            )
        except KeyError as exc:
            raise DataError(f"config is missing field {exc.args[0]!r}") from None


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read an :class:`ExperimentConfig` from a JSON or YAML file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Hash-based assignment


def bucket_fractions(hash_id: str, user_ids: Sequence[str]) -> np.ndarray:
    """Map users to uniform fractions in [0, 1) by hashing ``hash_id:user_id``.

    64-bit FNV-1a over the UTF-8 bytes followed by the splitmix64 finalizer.
    Experiments sharing a ``hash_id`` therefore share the same user split.
    """
    if len(user_ids) == 0:
        return np.zeros(0)
    raw = np.array([f"{hash_id}:{u}".encode() for u in user_ids], dtype=bytes)
    lengths = np.char.str_len(raw)
    mat = raw.view(np.uint8).reshape(len(raw), -1)
    shortest = int(lengths.min())
    h = np.full(len(raw), _FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(mat.shape[1]):
            step = (h ^ mat[:, j]) * _FNV_PRIME
            h = step if j < shortest else np.where(lengths > j, step, h)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def assign_variants(config: ExperimentConfig, user_ids: Sequence[str]) -> np.ndarray:
    """Variant index per user under ``config``'s hash namespace and allocation."""
    u = bucket_fractions(config.hash_id, user_ids)
    edges = np.cumsum(config.fractions)[:-1]
    return np.searchsorted(edges, u, side="right").astype(np.int64)


# --------------------------------------------------------------------------
# Columnar event table


def _vocab(values: Iterable[str | None]) -> tuple[list[str | None], np.ndarray]:
    index: dict[str | None, int] = {}
    codes = [index.setdefault(v, len(index)) for v in values]
    return list(index), np.asarray(codes, dtype=np.int64)


@dataclass
class EventTable:
    """Columnar storage for an event stream.

    Categorical columns hold integer codes into the matching vocabulary list.
    ``None`` is a legal entry of the ``services`` and ``sources`` vocabularies.
    """

    users: list[str]
    experiments: list[str]
    variants: list[str]
    services: list[str | None]
    metrics: list[str]
    sources: list[str | None]
    e_user: np.ndarray
    e_experiment: np.ndarray
    e_variant: np.ndarray
    e_day: np.ndarray
    e_service: np.ndarray
    m_user: np.ndarray
    m_day: np.ndarray
    m_metric: np.ndarray
    m_value: np.ndarray
    m_source: np.ndarray

    @property
    def n_exposures(self) -> int:
        return len(self.e_user)

    @property
    def n_metric_events(self) -> int:
        return len(self.m_user)

    def __len__(self) -> int:
        return self.n_exposures + self.n_metric_events

    @classmethod
    def empty(cls) -> "EventTable":
        z = np.zeros(0, dtype=np.int64)
        return cls([], [], [], [], [], [], z, z, z, z, z, z, z, z, np.zeros(0), z)

    @classmethod
    def from_events(cls, events: Iterable[ExposureEvent | MetricEvent]) -> "EventTable":
        exposures: list[ExposureEvent] = []
        metric_events: list[MetricEvent] = []
        for ev in events:
            if isinstance(ev, ExposureEvent):
                exposures.append(ev)
            elif isinstance(ev, MetricEvent):
                metric_events.append(ev)
            else:
                raise DataError(f"unsupported event type {type(ev).__name__}")
        users, codes = _vocab([e.user_id for e in exposures] + [m.user_id for m in metric_events])
        experiments, e_exp = _vocab(e.experiment_id for e in exposures)
        variants, e_var = _vocab(e.variant for e in exposures)
        services, e_srv = _vocab(e.service_tag for e in exposures)
        metrics, m_met = _vocab(m.metric_id for m in metric_events)
        sources, m_src = _vocab(m.source_tag for m in metric_events)
        ne = len(exposures)
        return cls(
            users=users, experiments=experiments, variants=variants, services=services,
            metrics=metrics, sources=sources,
            e_user=codes[:ne], e_experiment=e_exp, e_variant=e_var,
            e_day=np.array([e.day for e in exposures], dtype=np.int64), e_service=e_srv,
            m_user=codes[ne:], m_day=np.array([m.day for m in metric_events], dtype=np.int64),
            m_metric=m_met, m_value=np.array([m.value for m in metric_events], dtype=np.float64),
            m_source=m_src,
        )

    def iter_events(self) -> Iterator[ExposureEvent | MetricEvent]:
        for u, x, v, d, s in zip(self.e_user.tolist(), self.e_experiment.tolist(),
                                 self.e_variant.tolist(), self.e_day.tolist(),
                                 self.e_service.tolist()):
            yield ExposureEvent(self.users[u], self.experiments[x], self.variants[v], d,
                                self.services[s])
        for u, d, m, val, s in zip(self.m_user.tolist(), self.m_day.tolist(),
                                   self.m_metric.tolist(), self.m_value.tolist(),
                                   self.m_source.tolist()):
            yield MetricEvent(self.users[u], d, self.metrics[m], val, self.sources[s])

    def write_jsonl(self, path: str | os.PathLike) -> None:
        """Write one JSON object per line, exposures first, in table order."""
        with open(path, "w") as fh:
            for u, x, v, d, s in zip(self.e_user.tolist(), self.e_experiment.tolist(),
                                     self.e_variant.tolist(), self.e_day.tolist(),
                                     self.e_service.tolist()):
                rec = {"type": "exposure", "user_id": self.users[u],
                       "experiment_id": self.experiments[x], "variant": self.variants[v],
                       "day": d}
                if self.services[s] is not None:
                    rec["service_tag"] = self.services[s]
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            for u, d, m, val, s in zip(self.m_user.tolist(), self.m_day.tolist(),
                                       self.m_metric.tolist(), self.m_value.tolist(),
                                       self.m_source.tolist()):
                rec = {"type": "metric", "user_id": self.users[u], "day": d,
                       "metric_id": self.metrics[m], "value": val}
                if self.sources[s] is not None:
                    rec["source_tag"] = self.sources[s]
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def parse_event(record: Mapping[str, Any]) -> ExposureEvent | MetricEvent:
    kind = record.get("type")
    if kind == "exposure":
        return ExposureEvent(str(record["user_id"]), str(record["experiment_id"]),
                             str(record["variant"]), int(record["day"]),
                             record.get("service_tag"))
    if kind == "metric":
        value = float(record["value"])
        if not np.isfinite(value):
            raise DataError("metric value must be finite")
        return MetricEvent(str(record["user_id"]), int(record["day"]), str(record["metric_id"]),
                           value, record.get("source_tag"))
    raise DataError(f"unknown event type {kind!r}")


def read_events(path: str | os.PathLike) -> EventTable:
    """Parse a newline-delimited JSON event log into an :class:`EventTable`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"events not found: {path}")
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                events.append(parse_event(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed event: {exc}") from None
    return EventTable.from_events(events)


# --------------------------------------------------------------------------
# Ingestion


@dataclass(frozen=True, eq=False)
class IngestedLog:
    """Indexed, immutable view of one experiment's events.

    Matrices are ``(n_users, n_days)`` with column ``d - 1`` holding day ``d``.
    Users are sorted by id.
    """

    config: ExperimentConfig
    users: np.ndarray
    variant: np.ndarray
    n_days: int
    exposed: np.ndarray
    services: list[str | None]
    exposure_rows: np.ndarray  # unique (user, day, service) triples
    metrics: dict[str, np.ndarray]
    tracking_rows: dict[tuple[str, str | None], np.ndarray]  # (metric, source) -> bool matrix
    targeted: np.ndarray | None
    n_exposure_events: int
    n_metric_events: int

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def first_day(self) -> int:
        """First counted day (``count_from_day``)."""
        return self.config.count_from_day

    @property
    def experiment_id(self) -> str:
        return self.config.experiment_id

    @property
    def trigger_days(self) -> np.ndarray:
        return self.exposed.sum(axis=1)

    def user_index(self, user_id: str) -> int:
        i = int(np.searchsorted(self.users, user_id))
        if i >= len(self.users) or self.users[i] != user_id:
            raise KeyError(user_id)
        return i

    def cols(self, x: int, y: int) -> slice:
        check_range(self, x, y)
        return slice(x - 1, y)

    def triggered_in(self, x: int, y: int) -> np.ndarray:
        return self.exposed[:, self.cols(x, y)].any(axis=1)

    def first_trigger_day(self) -> np.ndarray:
        """First exposure day per user (0 for never-exposed users)."""
        any_exp = self.exposed.any(axis=1)
        return np.where(any_exp, self.exposed.argmax(axis=1) + 1, 0)

    def counts_by_variant(self, mask: np.ndarray) -> np.ndarray:
        return np.bincount(self.variant[mask], minlength=len(self.config.variants))

    def equals(self, other: "IngestedLog") -> bool:
        if self.config != other.config or self.n_days != other.n_days:
            return False
        if not (np.array_equal(self.users, other.users)
                and np.array_equal(self.variant, other.variant)
                and np.array_equal(self.exposed, other.exposed)
                and np.array_equal(self.exposure_rows, other.exposure_rows)
                and self.services == other.services
                and self.metrics.keys() == other.metrics.keys()
                and self.tracking_rows.keys() == other.tracking_rows.keys()):
            return False
        if (self.targeted is None) != (other.targeted is None):
            return False
        if self.targeted is not None and not np.array_equal(self.targeted, other.targeted):
            return False
        return (all(np.array_equal(self.metrics[k], other.metrics[k]) for k in self.metrics)
                and all(np.array_equal(self.tracking_rows[k], other.tracking_rows[k])
                        for k in self.tracking_rows))


def check_range(log: IngestedLog, x: int, y: int) -> None:
    if x > y:
        raise DataError(f"invalid range [{x}, {y}]")
    if x < 1 or y > log.n_days:
        raise DataError(f"range [{x}, {y}] outside experiment days 1..{log.n_days}")


def ingest(events: EventTable | Iterable[ExposureEvent | MetricEvent],
           config: ExperimentConfig) -> IngestedLog:
    """Index an event stream for one experiment.

    Duplicate exposures for a ``(user, day)`` are idempotent; metric values for
    the same ``(user, day, metric)`` are summed.  Users never seen in an
    exposure get their variant from the config's hash assignment.

    Raises:
        DataError: on unknown experiments or variants, conflicting variants for
            one user, or days outside the experiment.
    """
    table = events if isinstance(events, EventTable) else EventTable.from_events(events)

    bad_exp = [x for x in table.experiments if x != config.experiment_id]
    if bad_exp:
        raise DataError(f"unknown experiment_id {bad_exp[0]!r} (expected {config.experiment_id!r})")
    var_map = np.array([config.variant_index(v) for v in table.variants], dtype=np.int64)
    for name, days in (("exposure", table.e_day), ("metric", table.m_day)):
        if len(days) and days.min() < 1:
            raise DataError(f"{name} event with day {int(days.min())} < 1")
    max_day = max([int(table.e_day.max()) if table.n_exposures else 0,
                   int(table.m_day.max()) if table.n_metric_events else 0])
    if config.end_day is not None and max_day > config.end_day:
        raise DataError(f"event on day {max_day} after end_day {config.end_day}")
    n_days = config.end_day if config.end_day is not None else max(max_day, config.count_from_day)

    # canonical user order: sorted ids, targeted users included
    extra = set()
    if config.target_membership is not None:
        for d, members in config.target_membership.items():
            if not 1 <= d <= n_days:
                raise DataError(f"target membership day {d} outside 1..{n_days}")
            extra.update(members)
    vocab = np.asarray(table.users, dtype=object)
    all_users = np.array(sorted(set(table.users) | extra), dtype=str)
    remap = np.searchsorted(all_users, vocab.astype(str)) if len(vocab) else np.zeros(0, np.int64)
    n_users = len(all_users)

    e_user = remap[table.e_user] if table.n_exposures else table.e_user
    e_var = var_map[table.e_variant] if table.n_exposures else table.e_variant
    variant = assign_variants(config, all_users.tolist()) if n_users else np.zeros(0, np.int64)
    if table.n_exposures:
        order = np.lexsort((e_var, e_user))
        su, sv = e_user[order], e_var[order]
        first = np.r_[True, su[1:] != su[:-1]]
        # every user must carry exactly one variant across events
        seg_start = np.maximum.accumulate(np.where(first, np.arange(len(su)), 0))
        conflict = sv != sv[seg_start]
        if conflict.any():
            who = all_users[su[conflict][0]]
            raise DataError(f"user {who!r} exposed to conflicting variants")
        variant[su[first]] = sv[first]

    exposed = np.zeros((n_users, n_days), dtype=bool)
    if table.n_exposures:
        exposed[e_user, table.e_day - 1] = True
        services = list(table.services)
        # unique (user, day, service) triples via a packed scalar key
        n_srv = max(len(table.services), 1)
        key = (e_user * (n_days + 1) + table.e_day) * n_srv + table.e_service
        key = np.unique(key)
        rows = np.stack([key // n_srv // (n_days + 1), key // n_srv % (n_days + 1),
                         key % n_srv], axis=1)
        # re-code services in sorted-label order so ingestion is order-insensitive
        order_labels = sorted(range(len(services)), key=lambda i: (services[i] is not None,
                                                                   services[i] or ""))
        recode = np.empty(len(services), dtype=np.int64)
        recode[order_labels] = np.arange(len(services))
        services = [services[i] for i in order_labels]
        rows[:, 2] = recode[rows[:, 2]]
        rows = rows[np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0]))]
    else:
        services = []
        rows = np.zeros((0, 3), dtype=np.int64)

    metrics: dict[str, np.ndarray] = {}
    tracking: dict[tuple[str, str | None], np.ndarray] = {}
    if table.n_metric_events:
        if not np.all(np.isfinite(table.m_value)):
            raise DataError("metric value must be finite")
        m_user = remap[table.m_user]
        # canonical accumulation order makes float sums permutation-invariant
        order = np.lexsort((table.m_value, table.m_source, table.m_day, m_user, table.m_metric))
        mu, md, mm = m_user[order], table.m_day[order] - 1, table.m_metric[order]
        mv, ms = table.m_value[order], table.m_source[order]
        for code in np.argsort(np.array(table.metrics, dtype=str)):
            sel = mm == code
            mat = np.zeros((n_users, n_days))
            np.add.at(mat, (mu[sel], md[sel]), mv[sel])
            metrics[table.metrics[code]] = mat
            for src in np.unique(ms[sel]):
                s2 = sel & (ms == src) & (mv > 0)
                hit = np.zeros((n_users, n_days), dtype=bool)
                hit[mu[s2], md[s2]] = True
                tracking[(table.metrics[code], table.sources[src])] = hit

    targeted = None
    if config.target_membership is not None:
        targeted = np.zeros((n_users, n_days), dtype=bool)
        for d, members in config.target_membership.items():
            if members:
                idx = np.searchsorted(all_users, np.array(sorted(members), dtype=str))
                targeted[idx, d - 1] = True

    return IngestedLog(
        config=config, users=all_users, variant=variant, n_days=n_days, exposed=exposed,
        services=services, exposure_rows=rows, metrics=metrics, tracking_rows=tracking,
        targeted=targeted, n_exposure_events=table.n_exposures,
        n_metric_events=table.n_metric_events,
    )


# --------------------------------------------------------------------------
# Summaries and the store


@dataclass(frozen=True)
class RangeSummary:
    """Per-user totals aggregated over a population: count, sum, sum of squares."""

    experiment_id: str
    variant: str
    metric_id: str
    range: tuple[int, int]
    n: int
    sum: float
    sum_sq: float

    def __post_init__(self):
        x, y = self.range
        if x > y:
            raise DataError(f"invalid range [{x}, {y}]")
        if self.n < 0:
            raise DataError("n must be non-negative")
        if self.n > 0 and self.sum_sq < self.sum**2 / self.n * (1 - 1e-12) - 1e-9:
            raise DataError("sum_sq < sum^2/n violates Cauchy-Schwarz")

    @property
    def mean(self) -> float:
        return self.sum / self.n if self.n else float("nan")

    @property
    def var(self) -> float:
        """Unbiased sample variance of the per-user totals."""
        if self.n < 2:
            return float("nan")
        return max(self.sum_sq - self.sum**2 / self.n, 0.0) / (self.n - 1)

    @classmethod
    def from_values(cls, experiment_id: str, variant: str, metric_id: str,
                    range: tuple[int, int], values: np.ndarray) -> "RangeSummary":
        values = np.asarray(values, dtype=float)
        return cls(experiment_id, variant, metric_id, (int(range[0]), int(range[1])),
                   int(values.size), float(values.sum()), float(np.dot(values, values)))


SummaryKey = tuple[str, str, str, tuple[int, int]]
CountKey = tuple[str, str, tuple[int, int]]


@dataclass
class SummaryStore:
    """Write-once map of range summaries plus metric-free user counts."""

    summaries: dict[SummaryKey, RangeSummary] = field(default_factory=dict)
    user_counts: dict[CountKey, int] = field(default_factory=dict)

    def put(self, summary: RangeSummary) -> None:
        key = (summary.experiment_id, summary.variant, summary.metric_id, summary.range)
        if key in self.summaries:
            raise DataError(f"summary {key} already written")
        self.summaries[key] = summary

    def put_count(self, experiment_id: str, variant: str, range: tuple[int, int], n: int) -> None:
        key = (experiment_id, variant, (int(range[0]), int(range[1])))
        if key in self.user_counts:
            raise DataError(f"user count {key} already written")
        self.user_counts[key] = int(n)

    def get(self, experiment_id: str, variant: str, metric_id: str,
            range: tuple[int, int]) -> RangeSummary:
        return self.summaries[(experiment_id, variant, metric_id, tuple(range))]

    def __len__(self) -> int:
        return len(self.summaries)

    def experiments(self) -> list[str]:
        return sorted({k[0] for k in self.summaries} | {k[0] for k in self.user_counts})


def persist(store: SummaryStore, path: str | os.PathLike) -> None:
    """Write ``store`` as a single compressed ``.npz`` with an embedded schema version."""
    keys = sorted(store.summaries)
    s = [store.summaries[k] for k in keys]
    ckeys = sorted(store.user_counts)
    header = json.dumps({"schema_version": SCHEMA_VERSION, "kind": "expdiag.SummaryStore"})
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            header=np.array(header),
            s_experiment=np.array([x.experiment_id for x in s], dtype=str),
            s_variant=np.array([x.variant for x in s], dtype=str),
            s_metric=np.array([x.metric_id for x in s], dtype=str),
            s_range=np.array([x.range for x in s], dtype=np.int64).reshape(-1, 2),
            s_n=np.array([x.n for x in s], dtype=np.int64),
            s_sum=np.array([x.sum for x in s], dtype=np.float64),
            s_sum_sq=np.array([x.sum_sq for x in s], dtype=np.float64),
            c_experiment=np.array([k[0] for k in ckeys], dtype=str),
            c_variant=np.array([k[1] for k in ckeys], dtype=str),
            c_range=np.array([k[2] for k in ckeys], dtype=np.int64).reshape(-1, 2),
            c_n=np.array([store.user_counts[k] for k in ckeys], dtype=np.int64),
        )


def load(path: str | os.PathLike) -> SummaryStore:
    """Read a store written by :func:`persist`."""
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(str(z["header"]))
        except KeyError:
            raise SchemaError(f"{path}: not a summary store") from None
        if header.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{path}: schema version {header.get('schema_version')} "
                              f"!= {SCHEMA_VERSION}")
        store = SummaryStore()
        for e, v, m, r, n, sm, sq in zip(z["s_experiment"].tolist(), z["s_variant"].tolist(),
                                         z["s_metric"].tolist(), z["s_range"].tolist(),
                                         z["s_n"].tolist(), z["s_sum"].tolist(),
                                         z["s_sum_sq"].tolist()):
            store.summaries[(e, v, m, (r[0], r[1]))] = RangeSummary(e, v, m, (r[0], r[1]), n, sm, sq)
        for e, v, r, n in zip(z["c_experiment"].tolist(), z["c_variant"].tolist(),
                              z["c_range"].tolist(), z["c_n"].tolist()):
            store.user_counts[(e, v, (r[0], r[1]))] = n
    return store
