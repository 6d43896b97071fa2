import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradshield import analysis, attacks
from gradshield.analysis import (
    ProbabilityEstimate,
    bn_coupling,
    closed_form_p1,
    exact_bin_capture,
    fedavg_degradation,
    mc_bin_capture,
    mc_min_property,
)
from gradshield.datagen import gen_images, measure_batch
from gradshield.nn import zoo


class TestClosedForm:
    def test_values(self):
        assert closed_form_p1(2) == 0.5
        assert closed_form_p1(8) == pytest.approx(0.3926959, abs=1e-7)
        assert closed_form_p1(128) == pytest.approx(0.36932, abs=5e-6)

    @settings(max_examples=100, deadline=None)
    @given(m=st.integers(2, 10**6))
    def test_decreasing_above_inverse_e(self, m):
        assert closed_form_p1(m + 1) < closed_form_p1(m)
        assert closed_form_p1(m) > 1 / math.e

    def test_limit(self):
        assert closed_form_p1(10**7) == pytest.approx(1 / math.e, abs=1e-7)

    def test_binomial_reference_agrees(self):
        for m in (2, 8, 128):
            assert exact_bin_capture(m, m) == pytest.approx(closed_form_p1(m), rel=1e-14)

    def test_domain(self):
        with pytest.raises(ValueError):
            closed_form_p1(1)


class TestMonteCarlo:
    @pytest.mark.parametrize("m", [4, 8, 32, 128])
    def test_bin_capture_within_3se(self, m):
        est = mc_bin_capture(m, trials=100_000, seed=7)
        assert est.within(3.0)
        assert est.reference == pytest.approx(closed_form_p1(m))

    def test_single_sample(self):
        est = mc_bin_capture(10, 1, trials=50_000, seed=1)
        assert est.reference == 0.1 and est.within(3.0)

    def test_deterministic(self):
        assert mc_bin_capture(8, trials=20_000, seed=3) == mc_bin_capture(8, trials=20_000, seed=3)

    def test_min_property(self):
        assert mc_min_property(512, trials=10_000, seed=0).estimate >= 0.999
        assert mc_min_property(64, "constant", trials=100).estimate == 0.0
        assert mc_min_property(1, trials=100).estimate == 1.0
        with pytest.raises(ValueError):
            mc_min_property(4, "gaussian")

    def test_estimate_bookkeeping(self):
        est = ProbabilityEstimate.from_count(25, 100, reference=0.3)
        assert est.estimate == 0.25 and est.stderr == pytest.approx(math.sqrt(0.25 * 0.75 / 100))
        assert est.within(3.0) and not est.within(0.5)
        with pytest.raises(ValueError):
            ProbabilityEstimate.from_count(1, 2).within()


class TestCoupling:
    @pytest.fixture
    def batch(self):
        data = gen_images(6, 3, 8, 8, 1.0, seed=2)
        return zoo.toy_cnn(seed=2), data.inputs, data.labels

    def test_bn_couples_controls_do_not(self, batch):
        res = bn_coupling(*batch, 0, 3, 1e-2)
        assert res["bn_change"] > 1e-6
        assert res["control_change"] < 1e-10

    def test_zero_delta(self, batch):
        res = bn_coupling(*batch, 0, 3, 0.0)
        assert res["bn_change"] == 0.0 and res["control_change"] == 0.0

    def test_errors(self, batch):
        with pytest.raises(ValueError):
            bn_coupling(*batch, 1, 1, 1e-2)
        model, x, y = batch
        with pytest.raises(ValueError):
            bn_coupling(zoo.toy_cnn(norm="layer"), x, y, 0, 1, 1e-2)


class TestImprintExperiment:
    def test_separated_batch(self):
        model, client, plan = analysis.imprint_experiment(seed=3)
        bins = analysis.bin_index(measure_batch(client.dataset.inputs), plan)
        assert len(set(bins.tolist())) == 8 and bins.min() > 0

    def test_degradation_curve(self):
        plan = attacks.ImprintPlan(bins=64, mu=0.5, sigma=0.25)
        curve = fedavg_degradation(plan, [1, 5], seed=0)
        assert [s for s, _ in curve] == [1, 5]
        assert curve[0][1] < 1e-3
        assert curve[1][1] > curve[0][1]
        assert fedavg_degradation(plan, [1, 5], seed=0) == curve

    @pytest.mark.parametrize("steps", [[], [2, 3], [1, 3, 2]])
    def test_bad_steps(self, steps):
        with pytest.raises(ValueError):
            fedavg_degradation(attacks.ImprintPlan(), steps)

    def test_too_few_bins_occupied(self):
        data = gen_images(4, 3, 8, 8, 0.0, seed=0)
        with pytest.raises(ValueError):
            analysis.select_separated(data.inputs, attacks.ImprintPlan(bins=64, mu=0.5, sigma=0.25), 8)
