import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expdiag.datamodel import DataError, RangeSummary, SummaryStore
from expdiag.metacorr import (ExperimentHistoryRecord, MetricStat, build_history, comovement,
                              early_indicator, effective_n, estimate_conditionals,
                              fit_delta_relation, fit_prior, metric_stat, project_ne)
from expdiag.simulator import CorpusSpec, generate_corpus
from expdiag.statscore import InsufficientData, TwoGroupPrior, norm_two_sided_p


@functools.lru_cache(maxsize=None)
def corpus(seed=0, **kw):
    c = generate_corpus(CorpusSpec(seed=seed, **kw))
    return c, build_history(c.store, min_days=21)


def summ(eid, variant, metric, rng, n, mean, var):
    return RangeSummary(eid, variant, metric, rng, n, mean * n, var * (n - 1) + n * mean * mean)


def record(eid, dx, dy, p_x, p_y, n_e=1e4):
    def ms(d, p):
        return MetricStat(d, d, 1.0, d, n_e, p)
    return ExperimentHistoryRecord(eid, "1", (1, 21), n_e, {"x": ms(dx, p_x), "y": ms(dy, p_y)})


class TestStats:
    def test_effective_n(self):
        assert effective_n(100, 100) == 50
        assert effective_n(300, 150) == pytest.approx(100)
        with pytest.raises(DataError):
            effective_n(0, 10)

    def test_metric_stat_z(self):
        t = summ("e", "treatment", "m", (1, 7), 1000, 1.1, 2.0)
        c = summ("e", "control", "m", (1, 7), 2000, 1.0, 1.5)
        s = metric_stat(t, c)
        z = 0.1 / math.sqrt(2.0 / 1000 + 1.5 / 2000)
        assert s.z == pytest.approx(z)
        assert s.p_value == pytest.approx(float(norm_two_sided_p(z)))
        assert s.n_e == pytest.approx(effective_n(1000, 2000))
        assert s.delta_pct == pytest.approx(0.1)


class TestHistory:
    def _store(self):
        st_ = SummaryStore()
        for eid, n, days in (("a@0", 100, 21), ("a@1", 1000, 21), ("b@1", 500, 5),
                             ("c@1", 400, 14), ("c@2", 400, 21)):
            for d in (days,):
                for v, mean in (("control", 1.0), ("treatment", 1.05)):
                    st_.put(summ(eid, v, "m", (1, d), n, mean, 1.0))
        return st_

    def test_picks_powered_iteration_and_excludes_short(self):
        hist = {r.experiment_id: r for r in build_history(self._store(), min_days=7)}
        assert set(hist) == {"a", "c"}
        assert hist["a"].iteration == "1"
        # equal power: the longer run wins
        assert hist["c"].iteration == "2" and hist["c"].run_length == 21

    def test_min_n_e_marks_underpowered(self):
        hist = build_history(self._store(), min_days=7, min_n_e=300)
        assert {r.experiment_id: r.powered for r in hist} == {"a": True, "c": False}


class TestComovement:
    def test_requires_history(self):
        hist = [record(f"e{i}", 0.1, 0.1, 0.01, 0.01) for i in range(5)]
        with pytest.raises(InsufficientData, match="insufficient history"):
            comovement(hist, "x", "y", 0.3)

    def test_elevated_on_linked_corpus(self):
        c, hist = corpus(0, n_experiments=600)
        res = comovement(hist, "x", "y", c.correlations["x|y"])
        assert res.elevated and res.p_value < 0.01

    def test_calibrated_on_independent_records(self):
        rejections = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            hist = [record(f"e{i}", 0, 0, px, py) for i, (px, py) in
                    enumerate(zip(rng.random(2000), rng.random(2000)))]
            rejections += comovement(hist, "x", "y", 0.0).p_value < 0.05
        assert rejections <= 6


class TestDeltaRelation:
    def test_recovers_slope(self):
        _, hist = corpus(0)
        rel = fit_delta_relation(hist, "x", "y")
        assert rel.beta1 == pytest.approx(0.5, abs=0.1)
        assert rel.n_discoveries >= 10

    def test_refuses_null_corpus(self):
        _, hist = corpus(1, pi1_x=0.0, pi1_y_alone=0.0)
        with pytest.raises(InsufficientData, match="insufficient discoveries"):
            fit_delta_relation(hist, "x", "y")

    def test_drops_outlier(self):
        rng = np.random.default_rng(2)
        dx = rng.uniform(0.02, 0.1, 30)
        hist = [record(f"e{i:02d}", d, 0.5 * d + rng.normal(0, 0.001), 1e-6, 0.5)
                for i, d in enumerate(dx)]
        hist.append(record("bad", 0.05, 0.5, 1e-6, 0.5))
        rel = fit_delta_relation(hist, "x", "y")
        assert rel.dropped == ("bad",)
        assert rel.beta1 == pytest.approx(0.5, abs=0.05)


def prior(pi1, v_sq):
    return TwoGroupPrior(pi1, v_sq)


class TestEarlyIndicator:
    @settings(max_examples=60, deadline=None)
    @given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(0.05, 0.95),
           st.floats(1e3, 1e5))
    def test_uninformative_conditionals_reduce_to_single_metric(self, dx, dy, pi_y, n_e):
        py = prior(pi_y, 0.002)
        c = [[1 - pi_y, pi_y], [1 - pi_y, pi_y]]
        res = early_indicator(dx, 1e4, dy, n_e, prior(0.3, 0.001), py, c)
        assert res.posterior == pytest.approx(py.posterior_h1(dy, n_e), rel=1e-12, abs=1e-15)

    def test_no_y_information_gives_mixed_prior(self):
        px = prior(0.3, 0.001)
        res = early_indicator(0.04, 1e4, 0.0, None, px, prior(0.2, 0.001), [[0.9, 0.1], [0.2, 0.8]])
        p_x = px.posterior_h1(0.04, 1e4)
        assert res.posterior == pytest.approx(0.8 * p_x + 0.1 * (1 - p_x))

    def test_rejects_bad_conditionals(self):
        with pytest.raises(ValueError):
            early_indicator(0, 1e4, 0, 1e4, prior(0.3, 0.001), prior(0.3, 0.001), [[0.5, 0.6], [0, 1]])
        with pytest.raises(ValueError):
            early_indicator(0, -1, 0, 1e4, prior(0.3, 0.001), prior(0.3, 0.001), [[1, 0], [0, 1]])

    def test_conditionals_row_stochastic(self):
        c, hist = corpus(0)
        mat = estimate_conditionals(hist, "x", "y", c.correlations["x|y"], n_sim=20_000)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0)
        assert mat[1, 1] > mat[0, 1]
        assert fit_prior(hist, "x").pi1 > 0


class TestProjection:
    def test_linear_growth(self):
        assert project_ne([100, 200, 300, 400, 500], 10) == pytest.approx(1000, rel=1e-3)

    def test_fixed_population(self):
        assert project_ne([500.0] * 6, 21) == pytest.approx(500, rel=1e-6)

    def test_saturating_curve_recovered(self):
        q = 0.15
        d = np.arange(1, 8)
        series = 1000 * (1 - (1 - q) ** d) / q
        assert project_ne(series, 21) == pytest.approx(1000 * (1 - (1 - q) ** 21) / q, rel=1e-3)

    def test_powerlaw(self):
        d = np.arange(1, 8)
        assert project_ne(50 * d ** 0.5, 16, method="powerlaw") == pytest.approx(200, rel=1e-6)

    def test_validation(self):
        with pytest.raises(DataError):
            project_ne([1, 2])
        with pytest.raises(DataError):
            project_ne([1, 0, 2])
