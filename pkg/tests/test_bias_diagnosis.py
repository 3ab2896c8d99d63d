import json
import math

import numpy as np
import pytest

from conftest import simulated
from expdiag.bias_diagnosis import (DEPENDENT, DYNAMIC_TARGETING, FEEDBACK_COOLOFF,
                                    FEEDBACK_RESIDUAL, UNEXPLAINED, Verdict,
                                    check_independent_tracking, check_new_returned,
                                    check_service_split, check_shared_hash_overlap,
                                    check_targeted, diagnose, first_significant_day,
                                    new_returned_series, ssr_from_counts, ssr_test)
from expdiag.datamodel import (DataError, ExperimentConfig, ExposureEvent, MetricEvent,
                               TrackingPredicate, ingest)

LABELS = ("control", "treatment")


def cfg(eid="e1", hash_id="h1", **kw):
    return ExperimentConfig(eid, hash_id, (("control", 0.5), ("treatment", 0.5)), **kw)


class TestSSR:
    def test_counts_spot_value(self):
        r = ssr_from_counts("t", LABELS, [5100, 4900], [0.5, 0.5], alpha=0.05)
        assert r.stat == pytest.approx(4.0)
        assert r.p_value == pytest.approx(math.erfc(math.sqrt(2)))
        assert r.mismatch and r.expected == (5000.0, 5000.0)
        assert ssr_from_counts("t", LABELS, [5100, 4900], [0.5, 0.5]).balanced

    def test_unequal_allocation(self):
        r = ssr_from_counts("t", LABELS, [900, 100], [0.9, 0.1])
        assert r.stat == 0.0 and r.p_value == 1.0

    def test_no_users_is_skipped(self):
        r = ssr_from_counts("t", LABELS, [0, 0], [0.5, 0.5])
        assert r.skipped and r.note == "no users"
        d = r.to_dict()
        assert d["stat"] is None and d["verdict"] == "Skipped"
        json.dumps(d)

    def test_clean_log_balanced(self):
        _, log = simulated("Clean", 0)
        r = ssr_test(log)
        assert r.balanced and sum(r.observed) > 0

    def test_no_triggered_users(self):
        log = ingest([MetricEvent("a", 1, "m", 1.0), MetricEvent("b", 2, "m", 1.0)], cfg())
        with pytest.raises(DataError, match="no triggered users"):
            ssr_test(log)

    def test_range_validation(self):
        _, log = simulated("Clean", 0)
        with pytest.raises(DataError):
            ssr_test(log, (3, 2))
        with pytest.raises(DataError):
            ssr_test(log, (1, log.n_days + 1))


class TestChecks:
    def test_targeted_skipped_without_membership(self):
        _, log = simulated("Clean", 0)
        assert check_targeted(log).skipped

    def test_targeted_fires_on_dynamic_targeting(self):
        _, log = simulated("DynamicTargeting", 0, n_users=20_000)
        assert check_targeted(log).mismatch

    def test_tracking_needs_predicate(self):
        _, log = simulated("Clean", 0)
        r = check_independent_tracking(log)
        assert r.skipped or r.balanced
        assert check_independent_tracking(log, TrackingPredicate("nope")).skipped

    def test_tracking_source_filter(self):
        events = [ExposureEvent("a", "e1", "control", 1), ExposureEvent("b", "e1", "treatment", 1),
                  MetricEvent("a", 1, "pv", 1.0, "feed"), MetricEvent("b", 1, "pv", 1.0, "other")]
        log = ingest(events, cfg())
        assert check_independent_tracking(log, TrackingPredicate("pv", "feed")).observed == (1, 0)
        assert check_independent_tracking(log, TrackingPredicate("pv")).observed == (1, 1)

    def test_service_split_counts_any_exposure(self):
        events = [ExposureEvent("a", "e1", "control", 1, "web"),
                  ExposureEvent("a", "e1", "control", 2, "app"),
                  ExposureEvent("b", "e1", "treatment", 1, "app")]
        res = check_service_split(ingest(events, cfg()))
        assert res["web"].observed == (1, 0)
        assert res["app"].observed == (1, 1)
        untagged = ingest([ExposureEvent("a", "e1", "control", 1)], cfg())
        assert check_service_split(untagged) == {}

    def test_new_returned_on_residual(self):
        _, log = simulated("Residual", 0)
        new, ret = check_new_returned(log, log.first_day + 1)
        assert ret.mismatch and not new.mismatch
        series = new_returned_series(log)
        assert first_significant_day(series, "returned") is not None
        assert [row["day"] for row in series] == list(range(2, log.n_days + 1))


class TestOverlap:
    def _pair(self):
        c1, c2 = cfg("e1", "shared"), cfg("e2", "shared")
        l1 = ingest([ExposureEvent("a", "e1", "control", 2), ExposureEvent("b", "e1", "treatment", 1),
                     ExposureEvent("c", "e1", "control", 1)], c1)
        l2 = ingest([ExposureEvent("a", "e2", "control", 1), ExposureEvent("b", "e2", "treatment", 1),
                     ExposureEvent("d", "e2", "treatment", 2)], c2)
        return l1, l2

    def test_partition(self):
        l1, l2 = self._pair()
        ov = check_shared_hash_overlap(l1, l2)
        assert ov.size_a == (1, 1)
        assert ov.size_a2 == (1, 0)      # a saw e2 first
        assert ov.size_a1 == (0, 1)      # b tied, assigned to A1
        assert ov.ambiguous == 1 and ov.notes
        assert ov.size_b1 == (1, 0) and ov.size_b2 == (0, 1)
        assert sum(ov.union.observed) == 4

    def test_different_hash_rejected(self):
        l1, _ = self._pair()
        other = ingest([ExposureEvent("a", "e3", "control", 1)], cfg("e3", "elsewhere"))
        with pytest.raises(DataError, match="different hash_id"):
            check_shared_hash_overlap(l1, other)

    def test_variant_conflict(self):
        l1, _ = self._pair()
        l2 = ingest([ExposureEvent("a", "e2", "treatment", 1)], cfg("e2", "shared"))
        with pytest.raises(DataError):
            check_shared_hash_overlap(l1, l2)


class TestDiagnose:
    def test_clean_gives_empty_report(self):
        _, log = simulated("Clean", 1)
        rep = diagnose(log)
        assert rep.verdict is Verdict.BALANCED
        assert rep.top is None and rep.hypotheses == ()

    @pytest.mark.parametrize("kind,expected", [("CoolOffBug", FEEDBACK_COOLOFF),
                                               ("Residual", FEEDBACK_RESIDUAL),
                                               ("BiasedImplementation", FEEDBACK_COOLOFF)])
    def test_planted_feedback_loops(self, kind, expected):
        sim, log = simulated(kind, 3)
        rep = diagnose(log)
        assert rep.verdict is Verdict.MISMATCH
        assert rep.top == expected == sim.truth.label
        assert rep.remediation

    def test_dynamic_targeting_ranked_first(self):
        sim, log = simulated("DynamicTargeting", 2, n_users=20_000)
        rep = diagnose(log)
        assert rep.top == DYNAMIC_TARGETING == sim.truth.label

    def test_dependent_experiments(self):
        sim, log = simulated("DependentExperiments", 4)
        rep = diagnose(log, sim.sibling_logs())
        assert rep.top == DEPENDENT == sim.truth.label
        assert len(rep.overlaps) == 1
        # without the sibling there is nothing to explain the mismatch
        assert diagnose(log).top != DEPENDENT

    def test_sibling_with_other_hash_noted(self):
        sim, log = simulated("CoolOffBug", 3)
        other = ingest([ExposureEvent("z", "x", "control", 1)], cfg("x", "elsewhere"))
        rep = diagnose(log, [other])
        assert any("different hash_id" in n for n in rep.notes)
        assert rep.overlaps == ()

    def test_report_json_is_stable(self):
        _, log = simulated("Residual", 5)
        a, b = diagnose(log).to_json(), diagnose(log).to_json()
        assert a == b
        data = json.loads(a)
        assert data["verdict"] == "Mismatch" and data["hypotheses"]

    def test_unexplained_when_nothing_fits(self):
        # one-day experiment where treatment users go missing: no check applies
        rng = np.random.default_rng(0)
        events = [ExposureEvent(f"u{i}", "e1", "control" if i % 2 else "treatment", 1)
                  for i in range(4000) if i % 2 or rng.random() < 0.85]
        rep = diagnose(ingest(events, cfg()))
        assert rep.verdict is Verdict.MISMATCH
        assert rep.top == UNEXPLAINED
        assert rep.checks["new"].skipped
