import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import fft

from gradshield import attacks, detect
from gradshield.attacks import (
    AttackPlan,
    CuriousPlan,
    DecepticonsPlan,
    FishingPlan,
    ImprintPlan,
    Protocol,
    apply_decepticons,
    apply_fishing,
    apply_identity_convs,
    curious_reconstruct,
    dct2_basis,
    imprint_biases,
    normal_cdf,
    probit,
    reconstruct_imprint,
    run_attack_round,
)
from gradshield.datagen import gen_images, measure_batch
from gradshield.errors import ReconstructionError
from gradshield.flsim import ClientState
from gradshield.nn import attention_forward, forward, loss_and_grads, zoo


def bisect_probit(p, lo=-10.0, hi=10.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestProbit:
    def test_median(self):
        assert probit(0.5) == 0.0

    def test_975(self):
        assert probit(0.975) == pytest.approx(bisect_probit(0.975), abs=1e-10)
        assert probit(0.975) == pytest.approx(1.959964, abs=1e-5)

    @settings(max_examples=200, deadline=None)
    @given(p=st.floats(1e-6, 1 - 1e-6))
    def test_symmetry_and_residual(self, p):
        assert probit(p) == pytest.approx(-probit(1 - p), abs=1e-9)
        assert abs(normal_cdf(probit(p)) - p) < 1e-8

    def test_residual_grid(self):
        for p in np.linspace(1e-4, 1 - 1e-4, 2001):
            assert abs(normal_cdf(probit(p)) - p) < 1e-8

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            probit(p)


class TestImprintConstruction:
    @pytest.mark.parametrize("m,f", [(8, 0), (8, 1), (192, 1), (192, 7)])
    def test_dct_matches_scipy(self, m, f):
        ref = fft.dct(np.eye(m), norm="ortho", axis=0)[f]
        np.testing.assert_allclose(dct2_basis(m, f), ref, atol=1e-13)

    def test_middle_bias_zero(self):
        # the grid i/(k+1) puts 0.5 in the middle for odd k
        assert imprint_biases(63)[31] == 0.0

    @settings(max_examples=40, deadline=None)
    @given(k=st.integers(2, 300))
    def test_biases_strictly_decreasing(self, k):
        assert np.all(np.diff(imprint_biases(k)) < 0)

    def test_uniform_rows(self):
        model = zoo.toy_mlp(12, hidden=6, classes=3, seed=0)
        out = ImprintPlan(bins=6).apply(model)
        np.testing.assert_array_equal(out.params["linear.0.weight"], np.full((6, 12), 1 / 12))
        nxt = out.params["linear.1.weight"]
        assert np.all(nxt == nxt[:, :1])

    def test_insert_variant(self):
        model = zoo.toy_cnn(seed=0)
        out = ImprintPlan(bins=16, mu=0.5, sigma=0.25).apply(model)
        assert [l.kind for l in out.layers[:5]] == ["Flatten", "Linear", "ReLU", "Linear", "Unflatten"]
        assert out.params["linear.0.weight"].shape == (16, 192)
        with pytest.raises(ValueError):
            ImprintPlan(bins=16, insert=False).apply(model)

    def test_thresholds_fire_in_order(self):
        plan = ImprintPlan(bins=9, mu=0.5, sigma=0.25)
        th = attacks.imprint_thresholds(plan)
        model = ImprintPlan(bins=9, mu=0.5, sigma=0.25).apply(zoo.toy_mlp(4, hidden=9, seed=1))
        x = np.full((1, 4), th[4] + 1e-9)
        pre = x @ model.params["linear.0.weight"].T + model.params["linear.0.bias"]
        assert list(pre[0] > 0) == [True] * 5 + [False] * 4

    def test_bad_plans(self):
        with pytest.raises(ValueError):
            ImprintPlan(bins=1)
        with pytest.raises(ValueError):
            ImprintPlan(sigma=0.0)
        with pytest.raises(ValueError):
            ImprintPlan(family="haar")


class TestImprintReconstruction:
    def test_isolated_bin(self):
        x = np.array([0.2, -1.0, 3.5])
        gw, gb = np.zeros((4, 3)), np.zeros(4)
        gw[1], gb[1] = 0.5 * x, 0.5
        result = reconstruct_imprint(gw, gb)
        cands = dict(zip(result.sources, result.candidates))
        np.testing.assert_array_equal(cands[(1, 2)], x)

    def test_last_bin_pairs_with_empty(self):
        x = np.array([1.0, 2.0])
        gw, gb = np.zeros((3, 2)), np.zeros(3)
        gw[2], gb[2] = -0.25 * x, -0.25
        result = reconstruct_imprint(gw, gb)
        # the pair below sees the same sample against a dead bin
        assert result.sources == [(1, 2), (2, 3)]
        for cand in result.candidates:
            np.testing.assert_array_equal(cand, x)

    def test_below_floor(self):
        result = reconstruct_imprint(np.ones((5, 3)), np.full(5, 1e-12))
        assert result.candidates == [] and len(result.skipped) == 5
        assert result.min_error == math.inf

    def test_shape_check(self):
        with pytest.raises(ValueError):
            reconstruct_imprint(np.zeros((3, 2)), np.zeros(4))

    def test_end_to_end_fedsgd(self):
        from gradshield.analysis import imprint_experiment

        model, client, plan = imprint_experiment(seed=1)
        result, update = run_attack_round(plan, model, client, Protocol("fedsgd"), seed=0)
        assert result.min_error < 1e-3
        assert update.sample_count == 8


class TestCurious:
    def test_division(self):
        np.testing.assert_array_equal(curious_reconstruct([0.5, 1.0, 1.5], 0.5), [1.0, 2.0, 3.0])

    def test_zero_bias_gradient(self):
        with pytest.raises(ReconstructionError):
            curious_reconstruct([1.0], 0.0)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), g=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
    def test_inverts_isolated_gradient(self, seed, g):
        x = np.random.default_rng(seed).normal(size=16)
        rec = curious_reconstruct(g * x, g)
        assert np.linalg.norm(rec - x) <= 1e-6 * max(np.linalg.norm(x), 1.0)

    def test_isolated_neuron_batch_of_four(self):
        data = gen_images(4, 1, 4, 4, 1.0, seed=8)
        model = zoo.toy_mlp(16, hidden=4, classes=10, seed=2, flatten_from=(1, 4, 4))
        top = attacks.isolating_thresholds(measure_batch(data.inputs))[-1]
        manipulated = attacks.apply_curious_fc(model, [top])
        g = loss_and_grads(manipulated, data.inputs, data.labels).grads
        rec = curious_reconstruct(g["linear.0.weight"][0], g["linear.0.bias"][0])
        brightest = data.inputs[np.argmax(measure_batch(data.inputs))].ravel()
        assert np.max(np.abs(rec - brightest)) < 1e-6

    def test_fc_only_plan(self):
        data = gen_images(4, 1, 4, 4, 1.0, seed=9)
        model = zoo.toy_mlp(16, hidden=4, classes=10, seed=2, flatten_from=(1, 4, 4))
        plan = CuriousPlan(thresholds=[attacks.isolating_thresholds(measure_batch(data.inputs))[-1]])
        result, _ = run_attack_round(plan, model, ClientState(0, data), Protocol("fedsgd"), seed=0)
        assert result.min_error < 1e-6
        assert result.skipped == [1, 2, 3]


class TestIdentityConvs:
    @pytest.mark.parametrize("scale", [1.0, 2.0])
    def test_exact(self, scale):
        model = apply_identity_convs(zoo.toy_cnn(channels=3, norm=None, seed=0), scale)
        x = np.round(gen_images(3, 3, 8, 8, 1.0, seed=0).inputs * 255)
        out = forward(model, x, "eval")[1].outputs[0]
        np.testing.assert_array_equal(out, scale * x)

    def test_even_kernel(self):
        from gradshield.nn import Model

        model = Model.build([("Conv2d", {"in_channels": 1, "out_channels": 1, "kernel_size": 2}), ("Flatten", {}),
                             ("Linear", {"in_features": 25, "out_features": 2})], (1, 4, 4), seed=0)
        with pytest.raises(ValueError, match="even"):
            apply_identity_convs(model)

    def test_needs_conv_first(self):
        with pytest.raises(ValueError):
            apply_identity_convs(zoo.toy_mlp(4))


class TestFishing:
    def test_pattern(self):
        model = zoo.toy_mlp(4, hidden=5, classes=3, seed=3)
        out = apply_fishing(model, 1, alpha=2.0)
        w, b = out.params["linear.1.weight"], out.params["linear.1.bias"]
        assert not w[0].any() and not w[2].any()
        np.testing.assert_array_equal(w[1], model.params["linear.1.weight"][1])
        assert b[0] == 2.0 and b[2] == 2.0 and b[1] == model.params["linear.1.bias"][1]
        for k in ("linear.0.weight", "linear.0.bias"):
            assert np.array_equal(out.params[k], model.params[k])

    def test_theta_scales_target_row(self):
        model = zoo.toy_mlp(4, hidden=5, classes=3, seed=3)
        out = apply_fishing(model, 0, theta=3.0)
        np.testing.assert_array_equal(out.params["linear.1.weight"][0], 3.0 * model.params["linear.1.weight"][0])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            apply_fishing(zoo.toy_mlp(4, classes=3), 3)

    def test_absent_target_last_layer_finite(self):
        data = gen_images(64, 3, 8, 8, 1.0, seed=4)
        target = 9
        batch = np.flatnonzero(data.labels != target)[:8]
        from gradshield.nn import per_sample_gradients

        fished = apply_fishing(zoo.toy_cnn(seed=4), target)
        psg = per_sample_gradients(fished, data.inputs[batch], data.labels[batch])
        per_layer, _ = detect.d_snr(psg)
        assert math.isfinite(per_layer["linear.0.weight"])

    def test_round_records_dominance(self):
        data = gen_images(64, 3, 8, 8, 1.0, seed=11)
        target = int(data.labels[0])
        batch = [0] + [i for i in range(64) if data.labels[i] != target][:7]
        client = ClientState(0, data.subset(batch))
        result, _ = run_attack_round(FishingPlan(target_class=target), zoo.toy_cnn(seed=11), client,
                                     Protocol("fedsgd"), seed=0)
        ev = result.evidence
        assert ev["d_snr"] == math.inf
        assert ev["dominant_label"] == target and ev["target_count"] == 1
        assert result.candidates == []


class TestDecepticons:
    def test_parameters(self):
        model = zoo.toy_transformer(seed=0)
        out = apply_decepticons(model, 2.0, 3, attacks.default_positional(8))
        for spec in out.layers_of("Attention"):
            p = out.layer_params(spec)
            assert np.linalg.norm(p["W_Q"]) == 0.0
            np.testing.assert_array_equal(p["W_K"], np.eye(8))
            np.testing.assert_array_equal(p["b_Q"], 2.0 * np.array([0, 1] * 4))
            assert np.trace(p["W_V"]) == 3 and np.count_nonzero(p["W_V"]) == 3
            assert detect.attention_signature(p).flagged

    def test_query_rows_identical(self):
        out = DecepticonsPlan(gamma=1.5, d_prime=2).apply(zoo.toy_transformer(seed=1))
        x = np.random.default_rng(0).normal(size=(4, 8))
        y = attention_forward(x, out.layer_params(out.layers_of("Attention")[0]))
        np.testing.assert_allclose(y, np.broadcast_to(y[:1], y.shape), atol=1e-15)

    def test_errors(self):
        model = zoo.toy_transformer()
        with pytest.raises(ValueError):
            apply_decepticons(model, 1.0, 2, np.zeros(5))
        with pytest.raises(ValueError):
            apply_decepticons(zoo.toy_mlp(4), 1.0, 1, np.zeros(4))
        with pytest.raises(ValueError):
            DecepticonsPlan(gamma=0.0)


@pytest.mark.parametrize("plan", [ImprintPlan(bins=16, mu=0.5, sigma=0.25), CuriousPlan(scale=2.0),
                                  FishingPlan(target_class=3, alpha=10.0), DecepticonsPlan(gamma=2.0, d_prime=4)])
def test_plan_round_trip(plan):
    assert AttackPlan.from_dict(plan.to_dict()) == plan


def test_unknown_plan_kind():
    with pytest.raises(ValueError):
        AttackPlan.from_dict({"kind": "Robbing"})
