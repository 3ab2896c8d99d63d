import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import simulated
from expdiag.datamodel import DataError, ExperimentConfig, ExposureEvent, MetricEvent, ingest
from expdiag.trigger_engine import (CoverageKind, Mode, build_summaries, classify_coverage,
                                    decompose_in_off, lift, new_returned_block,
                                    new_returned_counts, population, t_ratio_partial,
                                    trigger_profile, unique_counts, variance_inflation_fully)

CFG = ExperimentConfig("e1", "h1", (("control", 0.5), ("treatment", 0.5)))


def log_from_matrix(exposed, variants, values=None, config=CFG):
    """Ingest a boolean (users, days) exposure matrix."""
    events = []
    labels = config.labels
    for u in range(exposed.shape[0]):
        for d in np.nonzero(exposed[u])[0]:
            events.append(ExposureEvent(f"u{u:04d}", config.experiment_id,
                                        labels[variants[u]], int(d) + 1))
    if values is not None:
        for u, d in zip(*np.nonzero(values)):
            events.append(MetricEvent(f"u{u:04d}", int(d) + 1, "m", float(values[u, d])))
    return ingest(events, config)


def brute_new_returned(log, s, y):
    """Set-based new/returned counts for block [s, y]."""
    new, ret = {}, {}
    for label in log.config.labels:
        new[label] = ret[label] = 0
    for u in range(log.n_users):
        days = set(np.nonzero(log.exposed[u])[0] + 1)
        if not days & set(range(s, y + 1)):
            continue
        label = log.config.labels[log.variant[u]]
        if days & set(range(log.config.start_day, s)):
            ret[label] += 1
        else:
            new[label] += 1
    return new, ret


class TestNewReturned:
    def test_hand_counts(self):
        # 100 users seen before day 3, 30 of them again on day 3, plus 20 first seen on day 3
        exp = np.zeros((120, 3), dtype=bool)
        exp[:100, 0] = True
        exp[:30, 2] = True
        exp[100:, 2] = True
        log = log_from_matrix(exp, np.zeros(120, dtype=int))
        assert unique_counts(log, 1, 2)[0] == 100
        assert unique_counts(log, 1, 3)[0] == 120
        assert unique_counts(log, 3, 3)[0] == 50
        assert new_returned_counts(log, 3)["control"] == (20, 30)
        assert new_returned_counts(log, 2)["control"] == (0, 0)

    def test_block_needs_later_start(self):
        log = log_from_matrix(np.ones((4, 3), dtype=bool), [0, 1, 0, 1])
        with pytest.raises(DataError):
            new_returned_counts(log, 1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.floats(0.05, 0.9))
    def test_identity_matches_brute_force(self, seed, n_days, p):
        rng = np.random.default_rng(seed)
        exp = rng.random((40, n_days)) < p
        log = log_from_matrix(exp, rng.integers(0, 2, 40))
        for s in range(2, log.n_days + 1):
            for y in range(s, log.n_days + 1):
                n_new, n_ret = new_returned_block(log, s, y)
                np.testing.assert_array_equal(n_new + n_ret, unique_counts(log, s, y))
                new, ret = brute_new_returned(log, s, y)
                assert list(n_new) == [new[v] for v in log.config.labels]
                assert list(n_ret) == [ret[v] for v in log.config.labels]

    def test_identity_on_simulated_log(self):
        _, log = simulated("Residual", 0, n_users=3000)
        for k in range(2, log.n_days + 1):
            n_new, n_ret = new_returned_block(log, k, k)
            np.testing.assert_array_equal(n_new + n_ret, unique_counts(log, k, k))


class TestPopulations:
    def setup_method(self):
        exp = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0], [1, 1, 1]], dtype=bool)
        vals = np.array([[1, 2, 0], [0, 3, 4], [5, 0, 0], [1, 1, 1]], dtype=float)
        self.log = log_from_matrix(exp, [0, 1, 0, 1], vals)

    def test_modes(self):
        log = self.log
        assert population(log, 1, 3, Mode.TRIGGERED).tolist() == [True, True, False, True]
        assert population(log, 2, 2, Mode.SINGLE_DAY).tolist() == [False, True, False, True]
        assert population(log, 1, 3, Mode.ALL_USER).all()
        with pytest.raises(DataError):
            population(log, 1, 2, Mode.SINGLE_DAY)

    def test_summaries(self):
        s = build_summaries(self.log, (1, 3))
        assert s[("control", "m")].n == 1 and s[("control", "m")].sum == 3
        assert s[("treatment", "m")].n == 2 and s[("treatment", "m")].sum == 10
        s = build_summaries(self.log, (2, 2), Mode.SINGLE_DAY)
        assert s[("control", "m")].n == 0
        assert s[("treatment", "m")].sum == 4

    def test_coverage(self):
        c = classify_coverage(self.log, "m")
        assert c.kind is CoverageKind.PARTIALLY_COVERED and c.evidence == 3
        exp = np.eye(3, dtype=bool)
        full = log_from_matrix(exp, [0, 1, 0], exp * 2.0)
        assert classify_coverage(full, "m").fully_covered

    def test_unknown_metric(self):
        with pytest.raises(DataError):
            classify_coverage(self.log, "nope")

    def test_profile(self):
        prof = trigger_profile(self.log)
        assert prof.first_trigger_day.tolist() == [1, 2, 0, 1]
        assert prof.cumulative_counts.tolist() == [[1, 1, 1], [1, 2, 2]]


class TestDecomposition:
    def test_sums_and_identity(self):
        sim, log = simulated("TriggerDay", 1, n_users=5000, k_days=7)
        dec = decompose_in_off(log, "sessions", (1, 7))
        for arm in dec.arms.values():
            assert arm.sum_i + arm.sum_o == pytest.approx(arm.sum_x)
        w = dec.w
        # cross-day lift is the w-weighted mix of in- and off-trigger lifts
        assert dec.delta_x == pytest.approx(w * dec.delta_i + (1 - w) * dec.delta_o, abs=1e-12)
        assert dec.delta_x == pytest.approx(lift(log, "sessions", (1, 7)).delta_pct, abs=1e-12)


class TestTriggeredVsAll:
    def test_inflation_spot_value(self):
        assert variance_inflation_fully(2, 1, 0.0, 1, 1, 1, 1) == pytest.approx(1.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1, 50), st.floats(0.2, 5), st.floats(-0.5, 0.5),
           st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10))
    def test_inflation_at_least_one(self, k, r, d, mt, mc, vt, vc):
        assert variance_inflation_fully(k, r, d, mt, mc, vt, vc) >= 1.0

    def test_inflation_rejects_small_k(self):
        with pytest.raises(DataError):
            variance_inflation_fully(0.5, 1, 0, 1, 1, 1, 1)

    def test_t_ratio_spot_value(self):
        assert t_ratio_partial(100, 50.0, 400, 50.0) == pytest.approx(0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1, 1e5), st.floats(1e-3, 1e5), st.floats(1, 100), st.floats(1, 100))
    def test_t_ratio_at_most_one(self, n, ss, fn, fs):
        assert t_ratio_partial(n, ss, n * fn, ss * fs) <= 1.0 + 1e-12

    def test_t_ratio_rejects_inconsistent_inputs(self):
        with pytest.raises(DataError):
            t_ratio_partial(100, 10, 50, 10)
        with pytest.raises(DataError):
            t_ratio_partial(100, 10, 200, 5)
