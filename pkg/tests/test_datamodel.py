import json

import numpy as np
import pytest

from expdiag.datamodel import (DataError, EventTable, ExperimentConfig, ExposureEvent,
                               MetricEvent, RangeSummary, SchemaError, SummaryStore,
                               TrackingPredicate, assign_variants, bucket_fractions, ingest,
                               load, load_config, persist, read_events, save_config)


def cfg(**kw):
    base = dict(experiment_id="e1", hash_id="h1", variants=(("control", 0.5), ("treatment", 0.5)))
    base.update(kw)
    return ExperimentConfig(**base)


def small_events(variants):
    ev = []
    for i, v in enumerate(variants):
        ev.append(ExposureEvent(f"u{i}", "e1", v, 1 + i % 3))
        ev.append(MetricEvent(f"u{i}", 1 + i % 3, "clicks", float(i)))
    return ev


def consistent_labels(config, users):
    labels = config.labels
    return [labels[v] for v in assign_variants(config, users)]


class TestConfig:
    def test_rejects_bad_fractions(self):
        with pytest.raises(DataError):
            cfg(variants=(("a", 0.6), ("b", 0.6)))
        with pytest.raises(DataError):
            cfg(variants=(("a", 1.0),))
        with pytest.raises(DataError):
            cfg(variants=(("a", 0.5), ("a", 0.5)))

    def test_count_from_day_before_start(self):
        with pytest.raises(DataError):
            cfg(start_day=3, count_from_day=2)

    def test_roundtrip_json_and_yaml(self, tmp_path):
        c = cfg(count_from_day=2, end_day=9, tracking=TrackingPredicate("pv", "feed"),
                target_membership={1: frozenset({"a", "b"}), 2: frozenset({"a"})},
                start_weekday=5)
        save_config(c, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == c
        import yaml
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(c.to_dict()))
        assert load_config(tmp_path / "c.yaml") == c

    def test_missing_config(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="config not found"):
            load_config(tmp_path / "nope.json")


class TestAssignment:
    def test_fractions_in_unit_interval_and_deterministic(self):
        users = [f"u{i}" for i in range(5000)]
        u = bucket_fractions("h", users)
        assert np.all((u >= 0) & (u < 1))
        assert np.array_equal(u, bucket_fractions("h", users))

    def test_roughly_uniform(self):
        u = bucket_fractions("h", [f"user-{i}" for i in range(40_000)])
        counts = np.histogram(u, bins=10, range=(0, 1))[0]
        # chi-squared with 9 df; 40 is far beyond the 0.9999 quantile (~33.7)
        assert ((counts - 4000) ** 2 / 4000).sum() < 40

    def test_namespaces_are_independent(self):
        users = [f"u{i}" for i in range(20_000)]
        a = bucket_fractions("h1", users) < 0.5
        b = bucket_fractions("h2", users) < 0.5
        assert abs((a & b).mean() - 0.25) < 0.02

    def test_shared_hash_shares_split(self):
        users = [f"u{i}" for i in range(1000)]
        c1, c2 = cfg(), cfg(experiment_id="e2")
        assert np.array_equal(assign_variants(c1, users), assign_variants(c2, users))


class TestIngest:
    def test_basic_matrices(self):
        c = cfg()
        users = [f"u{i}" for i in range(6)]
        ev = small_events(consistent_labels(c, users))
        log = ingest(ev, c)
        assert log.n_users == 6 and log.n_days == 3
        assert log.exposed.sum() == 6
        assert log.metrics["clicks"].sum() == sum(range(6))
        assert log.users.tolist() == sorted(users)

    def test_duplicates_idempotent_and_values_summed(self):
        c = cfg()
        lab = consistent_labels(c, ["a"])[0]
        ev = [ExposureEvent("a", "e1", lab, 2), ExposureEvent("a", "e1", lab, 2),
              MetricEvent("a", 2, "m", 1.5), MetricEvent("a", 2, "m", 2.0)]
        log = ingest(ev, c)
        assert log.exposed.sum() == 1
        assert log.metrics["m"][0, 1] == 3.5

    def test_order_insensitive(self):
        c = cfg()
        users = [f"u{i}" for i in range(30)]
        ev = small_events(consistent_labels(c, users))
        rng = np.random.default_rng(0)
        shuffled = [ev[i] for i in rng.permutation(len(ev))]
        assert ingest(ev, c).equals(ingest(shuffled, c))

    def test_conflicting_variant(self):
        c = cfg()
        ev = [ExposureEvent("a", "e1", "control", 1), ExposureEvent("a", "e1", "treatment", 2)]
        with pytest.raises(DataError, match="conflicting"):
            ingest(ev, c)

    def test_unknown_experiment_and_variant(self):
        with pytest.raises(DataError, match="unknown experiment"):
            ingest([ExposureEvent("a", "zz", "control", 1)], cfg())
        with pytest.raises(DataError, match="not declared"):
            ingest([ExposureEvent("a", "e1", "other", 1)], cfg())

    def test_day_bounds(self):
        with pytest.raises(DataError):
            ingest([MetricEvent("a", 0, "m", 1.0)], cfg())
        with pytest.raises(DataError, match="after end_day"):
            ingest([MetricEvent("a", 5, "m", 1.0)], cfg(end_day=4))

    def test_unexposed_users_get_hash_variant(self):
        c = cfg()
        log = ingest([MetricEvent("zz", 1, "m", 1.0)], c)
        assert log.variant[0] == assign_variants(c, ["zz"])[0]

    def test_targeted_users_included(self):
        c = cfg(end_day=2, target_membership={1: frozenset({"t1", "t2"}), 2: frozenset({"t2"})})
        log = ingest([], c)
        assert log.n_users == 2
        assert log.targeted.tolist() == [[True, False], [True, True]]


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        c = cfg()
        users = [f"u{i}" for i in range(8)]
        ev = small_events(consistent_labels(c, users))
        table = EventTable.from_events(ev)
        table.write_jsonl(tmp_path / "ev.jsonl")
        again = read_events(tmp_path / "ev.jsonl")
        assert ingest(again, c).equals(ingest(table, c))

    def test_malformed_line_reports_location(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"type": "metric", "user_id": "a", "day": 1,
                                 "metric_id": "m", "value": 1}) + "\n{not json\n")
        with pytest.raises(DataError, match="bad.jsonl:2"):
            read_events(p)

    def test_nonfinite_value_rejected(self, tmp_path):
        p = tmp_path / "nan.jsonl"
        p.write_text('{"type": "metric", "user_id": "a", "day": 1, "metric_id": "m", "value": NaN}\n')
        with pytest.raises(DataError):
            read_events(p)


class TestSummaries:
    def test_variance_matches_numpy(self):
        vals = np.array([1.0, 4.0, 2.5, 0.0, 7.0])
        s = RangeSummary.from_values("e", "c", "m", (1, 3), vals)
        assert s.mean == pytest.approx(vals.mean())
        assert s.var == pytest.approx(vals.var(ddof=1))

    def test_cauchy_schwarz(self):
        with pytest.raises(DataError):
            RangeSummary("e", "c", "m", (1, 2), 4, 10.0, 1.0)

    def test_store_write_once(self):
        st = SummaryStore()
        s = RangeSummary("e", "c", "m", (1, 2), 2, 1.0, 1.0)
        st.put(s)
        with pytest.raises(DataError):
            st.put(s)

    def test_persist_load_roundtrip(self, tmp_path):
        st = SummaryStore()
        st.put(RangeSummary("e", "c", "m", (1, 7), 3, 2.5, 4.25))
        st.put_count("e", "c", (1, 7), 3)
        persist(st, tmp_path / "s.npz")
        back = load(tmp_path / "s.npz")
        assert back.summaries == st.summaries and back.user_counts == st.user_counts

    def test_schema_mismatch(self, tmp_path):
        np.savez(tmp_path / "x.npz", header=np.array(json.dumps({"schema_version": 99})))
        with pytest.raises(SchemaError):
            load(tmp_path / "x.npz")


def _reference_fraction(hash_id, user_id):
    # byte-at-a-time FNV-1a and splitmix64 finalizer with Python integers
    mask = 2**64 - 1
    x = 0xCBF29CE484222325
    for b in f"{hash_id}:{user_id}".encode():
        x = ((x ^ b) * 0x100000001B3) & mask
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & mask
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & mask
    x ^= x >> 31
    return (x >> 11) * 2.0**-53


def test_bucket_fractions_match_reference():
    users = ["a", "u000001", "ü-é", "longer-user-id-123", ""]
    got = bucket_fractions("h", users)
    assert got.tolist() == [_reference_fraction("h", u) for u in users]
